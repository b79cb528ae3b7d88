//! Minimal reverse-mode autodiff over row-major f64 matrices.
//!
//! A [`Graph`] records the forward computation of one example; [`Graph::backward`]
//! accumulates parameter gradients into a [`Gradients`] buffer. Parameters live
//! in a [`ParamStore`] that the graph borrows immutably.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors (all 2-D; vectors are stored as 1×n rows).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::zeros((rows, cols)))
    }

    pub fn ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::ones((rows, cols)))
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    pub fn xavier<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        self.add(name, Mat::from_shape_fn((rows, cols), |_| rng.random_range(-a..a)))
    }

    pub fn normal_ish<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, scale: f64, rng: &mut R) -> ParamId {
        // sum of uniforms: cheap, bounded, close enough to Gaussian for init
        let v = Mat::from_shape_fn((rows, cols), |_| {
            let s: f64 = (0..4).map(|_| rng.random_range(-1.0..1.0)).sum();
            s * scale * (3.0f64 / 4.0).sqrt()
        });
        self.add(name, v)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients { grads: self.values.iter().map(|v| Mat::zeros(v.raw_dim())).collect() }
    }

    pub fn fill(&mut self, value: f64) {
        for v in &mut self.values {
            v.fill(value);
        }
    }
}

/// Per-parameter gradient buffers, shaped like the store they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub grads: Vec<Mat>,
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|x| x * c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|x| x.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|&x| x == 0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Embed { table: ParamId, ids: Vec<usize> },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Mat, rstd: Vec<f64> },
    Gelu(NodeId),
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<Mat> },
    SelectRows { x: NodeId, rows: Vec<usize> },
    PickLogSoftmax { logits: NodeId, targets: Vec<usize>, probs: Mat },
    Sum(NodeId),
    Scale(NodeId, f64),
}

struct Node {
    value: Mat,
    op: Op,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tape for one forward pass.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::with_capacity(256) }
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, n: NodeId) -> &Mat {
        &self.nodes[n.0].value
    }

    pub fn scalar(&self, n: NodeId) -> f64 {
        self.nodes[n.0].value[[0, 0]]
    }

    pub fn input(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let v = self.params.get(id).clone();
        self.push(v, Op::Param(id))
    }

    /// Gathers rows `ids` of a parameter table.
    pub fn embed(&mut self, table: ParamId, ids: &[usize]) -> NodeId {
        let t = self.params.get(table);
        let mut out = Mat::zeros((ids.len(), t.ncols()));
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(i));
        }
        self.push(out, Op::Embed { table, ids: ids.to_vec() })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a 1×n row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// x·W + b with parameter ids.
    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let w = self.param(w);
        let b = self.param(b);
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: ParamId, beta: ParamId) -> NodeId {
        let gamma = self.param(gamma);
        let beta = self.param(beta);
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = Mat::zeros(xv.raw_dim());
        let mut rstd = Vec::with_capacity(xv.nrows());
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * rs;
            }
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(v, Op::Gelu(x))
    }

    /// Multi-head scaled dot-product attention; heads split the columns.
    /// With `causal`, query row i attends to key rows 0..=i.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, causal: bool) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((qv.nrows(), d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut sc = qv.slice(cols).dot(&kv.slice(cols).t());
            for (i, mut row) in sc.rows_mut().into_iter().enumerate() {
                let lim = if causal { i + 1 } else { row.len() };
                let mut max = f64::NEG_INFINITY;
                for j in 0..lim {
                    row[j] *= scale;
                    max = max.max(row[j]);
                }
                let mut z = 0.0;
                for j in 0..row.len() {
                    if j < lim {
                        row[j] = (row[j] - max).exp();
                        z += row[j];
                    } else {
                        row[j] = 0.0;
                    }
                }
                row.mapv_inplace(|x| x / z);
            }
            out.slice_mut(cols).assign(&sc.dot(&vv.slice(cols)));
            probs.push(sc);
        }
        self.push(out, Op::Attention { q, k, v, heads, probs })
    }

    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        let xv = self.value(x);
        let out = xv.select(Axis(0), rows);
        self.push(out, Op::SelectRows { x, rows: rows.to_vec() })
    }

    /// Row-wise log-softmax of `logits`, picking column `targets[i]` in row i; n×1.
    pub fn pick_log_softmax(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        let mut probs = Mat::zeros(lv.raw_dim());
        let mut out = Mat::zeros((targets.len(), 1));
        for (r, row) in lv.rows().into_iter().enumerate() {
            let lse = log_sum_exp(row.iter().copied());
            for (c, x) in row.iter().enumerate() {
                probs[[r, c]] = (x - lse).exp();
            }
            out[[r, 0]] = row[targets[r]] - lse;
        }
        self.push(out, Op::PickLogSoftmax { logits, targets: targets.to_vec(), probs })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Mat::from_elem((1, 1), self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x) * c;
        self.push(v, Op::Scale(x, c))
    }

    /// Back-propagates `seed` (shaped like `out`) and adds parameter gradients into `grads`.
    pub fn backward(&self, out: NodeId, seed: Mat, grads: &mut Gradients) {
        let mut g: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        g[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let Some(dy) = g[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(p) => grads.grads[p.0] += &dy,
                Op::Embed { table, ids } => {
                    let t = &mut grads.grads[table.0];
                    for (r, &i) in ids.iter().enumerate() {
                        let mut row = t.row_mut(i);
                        row += &dy.row(r);
                    }
                }
                Op::MatMul(a, b) => {
                    let da = dy.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&dy);
                    accumulate(&mut g, *a, da);
                    accumulate(&mut g, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut g, *b, dy.clone());
                    accumulate(&mut g, *a, dy);
                }
                Op::AddRow(a, row) => {
                    let dr = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut g, *row, dr);
                    accumulate(&mut g, *a, dy);
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let gv = self.value(*gamma);
                    let dgamma = (&dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbeta = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &dy * gv;
                    let n = dxhat.ncols() as f64;
                    let mut dx = Mat::zeros(dxhat.raw_dim());
                    for r in 0..dxhat.nrows() {
                        let dr = dxhat.row(r);
                        let xr = xhat.row(r);
                        let m1 = dr.sum() / n;
                        let m2 = dr.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in 0..dxhat.ncols() {
                            dx[[r, c]] = rstd[r] * (dr[c] - m1 - xr[c] * m2);
                        }
                    }
                    accumulate(&mut g, *gamma, dgamma);
                    accumulate(&mut g, *beta, dbeta);
                    accumulate(&mut g, *x, dx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut dx = dy;
                    ndarray::Zip::from(&mut dx).and(xv).for_each(|d, &x| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        *d *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    });
                    accumulate(&mut g, *x, dx);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Mat::zeros(qv.raw_dim());
                    let mut dk = Mat::zeros(kv.raw_dim());
                    let mut dv = Mat::zeros(vv.raw_dim());
                    for (h, p) in probs.iter().enumerate() {
                        let cols = s![.., h * dh..(h + 1) * dh];
                        let doh = dy.slice(cols);
                        dv.slice_mut(cols).assign(&p.t().dot(&doh));
                        let dp = doh.dot(&vv.slice(cols).t());
                        let mut ds = &dp * p;
                        for (r, mut row) in ds.rows_mut().into_iter().enumerate() {
                            let dot: f64 = dp.row(r).iter().zip(p.row(r).iter()).map(|(a, b)| a * b).sum();
                            for (c, x) in row.iter_mut().enumerate() {
                                *x -= p[[r, c]] * dot;
                            }
                        }
                        ds.mapv_inplace(|x| x * scale);
                        dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                        dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                    }
                    accumulate(&mut g, *q, dq);
                    accumulate(&mut g, *k, dk);
                    accumulate(&mut g, *v, dv);
                }
                Op::SelectRows { x, rows } => {
                    let mut dx = Mat::zeros(self.value(*x).raw_dim());
                    for (r, &i) in rows.iter().enumerate() {
                        let mut row = dx.row_mut(i);
                        row += &dy.row(r);
                    }
                    accumulate(&mut g, *x, dx);
                }
                Op::PickLogSoftmax { logits, targets, probs } => {
                    let mut dl = Mat::zeros(probs.raw_dim());
                    for (r, &t) in targets.iter().enumerate() {
                        let gr = dy[[r, 0]];
                        if gr == 0.0 {
                            continue;
                        }
                        for c in 0..probs.ncols() {
                            dl[[r, c]] = -gr * probs[[r, c]];
                        }
                        dl[[r, t]] += gr;
                    }
                    accumulate(&mut g, *logits, dl);
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).raw_dim();
                    accumulate(&mut g, *x, Mat::from_elem(shape, dy[[0, 0]]));
                }
                Op::Scale(x, c) => accumulate(&mut g, *x, dy * *c),
            }
        }
    }
}

fn accumulate(g: &mut [Option<Mat>], n: NodeId, d: Mat) {
    match &mut g[n.0] {
        Some(acc) => *acc += &d,
        slot @ None => *slot = Some(d),
    }
}

pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Log-softmax of one row.
pub fn log_softmax(row: ArrayView2<'_, f64>) -> Vec<f64> {
    debug_assert_eq!(row.nrows(), 1);
    let lse = log_sum_exp(row.iter().copied());
    row.iter().map(|x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` against the analytic gradient for every scalar.
    fn check(store: &mut ParamStore, f: &dyn Fn(&ParamStore) -> (f64, Gradients)) {
        let (_, grads) = f(store);
        for p in 0..store.len() {
            let shape = store.values()[p].raw_dim();
            for idx in ndarray::indices(shape) {
                let orig = store.values()[p][idx];
                let h = 1e-6;
                store.values_mut()[p][idx] = orig + h;
                let up = f(store).0;
                store.values_mut()[p][idx] = orig - h;
                let down = f(store).0;
                store.values_mut()[p][idx] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.grads[p][idx];
                let err = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-7);
                assert!(err < 1e-5, "param {} {:?}: fd {fd} analytic {an}", store.name(ParamId(p)), idx);
            }
        }
    }

    #[test]
    fn ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let emb = store.normal_ish("emb", 6, 8, 1.0, &mut rng);
        let wq = store.xavier("wq", 8, 8, &mut rng);
        let wk = store.xavier("wk", 8, 8, &mut rng);
        let bq = store.normal_ish("bq", 1, 8, 0.3, &mut rng);
        let g = store.normal_ish("g", 1, 8, 1.0, &mut rng);
        let b = store.normal_ish("b", 1, 8, 0.3, &mut rng);
        let wo = store.xavier("wo", 8, 6, &mut rng);
        let f = move |s: &ParamStore| {
            let mut gr = Graph::new(s);
            let x = gr.embed(emb, &[1, 3, 3, 5]);
            let mem = gr.embed(emb, &[0, 2, 4]);
            let q = gr.linear(x, wq, bq);
            let wkn = gr.param(wk);
            let k = gr.matmul(mem, wkn);
            let a = gr.attention(q, k, mem, 2, false);
            let sa = gr.attention(q, q, x, 4, true);
            let h = gr.add(a, sa);
            let h = gr.layer_norm(h, g, b);
            let h = gr.gelu(h);
            let h = gr.select_rows(h, &[0, 2, 3]);
            let w = gr.param(wo);
            let logits = gr.matmul(h, w);
            let lp = gr.pick_log_softmax(logits, &[1, 0, 5]);
            let tot = gr.sum(lp);
            let loss = gr.scale(tot, -0.5);
            let mut grads = s.zero_grads();
            gr.backward(loss, Mat::ones((1, 1)), &mut grads);
            (gr.scalar(loss), grads)
        };
        check(&mut store, &f);
    }

    #[test]
    fn causal_attention_ignores_future_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let emb = store.normal_ish("emb", 5, 4, 1.0, &mut rng);
        let run = |ids: &[usize]| {
            let mut gr = Graph::new(&store);
            let x = gr.embed(emb, ids);
            let a = gr.attention(x, x, x, 2, true);
            gr.value(a).row(1).to_owned()
        };
        assert_eq!(run(&[0, 1, 2]), run(&[0, 1, 4]));
    }

    #[test]
    fn log_sum_exp_is_stable() {
        let v = log_sum_exp([1000.0, 1000.0].into_iter());
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
