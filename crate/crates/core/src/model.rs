//! Transformer encoder-decoder response model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, BOS};
use crate::error::{Error, Result};
use crate::nn::{Gradients, Graph, Mat, NodeId, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_positions: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            max_positions: 256,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("model.vocab_size must be at least 2".into()));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config("model.d_model must be a positive multiple of model.heads".into()));
        }
        if self.max_positions < 2 || self.d_ff == 0 {
            return Err(Error::Config("model.max_positions must be ≥ 2 and model.d_ff ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerNormP {
    g: ParamId,
    b: ParamId,
}

impl LayerNormP {
    fn new(p: &mut ParamStore, name: &str, d: usize) -> Self {
        Self { g: p.ones(format!("{name}.g"), 1, d), b: p.zeros(format!("{name}.b"), 1, d) }
    }

    fn apply(&self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        g.layer_norm(x, self.g, self.b)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearP {
    w: ParamId,
    b: ParamId,
}

impl LinearP {
    fn new(p: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { w: p.xavier(format!("{name}.w"), i, o, rng), b: p.zeros(format!("{name}.b"), 1, o) }
    }

    fn apply(&self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        g.linear(x, self.w, self.b)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttentionP {
    q: LinearP,
    k: LinearP,
    v: LinearP,
    o: LinearP,
}

impl AttentionP {
    fn new(p: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: LinearP::new(p, &format!("{name}.q"), d, d, rng),
            k: LinearP::new(p, &format!("{name}.k"), d, d, rng),
            v: LinearP::new(p, &format!("{name}.v"), d, d, rng),
            o: LinearP::new(p, &format!("{name}.o"), d, d, rng),
        }
    }

    fn apply(&self, g: &mut Graph<'_>, x: NodeId, mem: NodeId, heads: usize, causal: bool) -> NodeId {
        let q = self.q.apply(g, x);
        let k = self.k.apply(g, mem);
        let v = self.v.apply(g, mem);
        let a = g.attention(q, k, v, heads, causal);
        self.o.apply(g, a)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FeedForwardP {
    up: LinearP,
    down: LinearP,
}

impl FeedForwardP {
    fn new(p: &mut ParamStore, name: &str, d: usize, ff: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            up: LinearP::new(p, &format!("{name}.up"), d, ff, rng),
            down: LinearP::new(p, &format!("{name}.down"), ff, d, rng),
        }
    }

    fn apply(&self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        let h = self.up.apply(g, x);
        let h = g.gelu(h);
        self.down.apply(g, h)
    }
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayerP {
    ln1: LayerNormP,
    attn: AttentionP,
    ln2: LayerNormP,
    ff: FeedForwardP,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayerP {
    ln1: LayerNormP,
    self_attn: AttentionP,
    ln2: LayerNormP,
    cross: AttentionP,
    ln3: LayerNormP,
    ff: FeedForwardP,
}

/// Pre-norm transformer encoder with learned positions. Shared by the response
/// model and the coherence classifier.
#[derive(Debug, Clone)]
pub(crate) struct EncoderP {
    tok: ParamId,
    pos: ParamId,
    layers: Vec<EncoderLayerP>,
    ln: LayerNormP,
    heads: usize,
    max_positions: usize,
}

impl EncoderP {
    pub(crate) fn new(
        p: &mut ParamStore,
        prefix: &str,
        tok: ParamId,
        cfg: &ModelConfig,
        layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = cfg.d_model;
        let pos = p.normal_ish(format!("{prefix}.pos"), cfg.max_positions, d, 0.1, rng);
        let layers = (0..layers)
            .map(|l| {
                let n = format!("{prefix}.{l}");
                EncoderLayerP {
                    ln1: LayerNormP::new(p, &format!("{n}.ln1"), d),
                    attn: AttentionP::new(p, &format!("{n}.attn"), d, rng),
                    ln2: LayerNormP::new(p, &format!("{n}.ln2"), d),
                    ff: FeedForwardP::new(p, &format!("{n}.ff"), d, cfg.d_ff, rng),
                }
            })
            .collect();
        let ln = LayerNormP::new(p, &format!("{prefix}.ln"), d);
        Self { tok, pos, layers, ln, heads: cfg.heads, max_positions: cfg.max_positions }
    }

    pub(crate) fn forward(&self, g: &mut Graph<'_>, ids: &[TokenId]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::invalid("encoder input is empty"));
        }
        if ids.len() > self.max_positions {
            return Err(Error::TooLong { len: ids.len(), max: self.max_positions });
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let t = g.embed(self.tok, &idx);
        let p = g.embed(self.pos, &positions);
        let mut x = g.add(t, p);
        for l in &self.layers {
            let h = l.ln1.apply(g, x);
            let a = l.attn.apply(g, h, h, self.heads, false);
            x = g.add(x, a);
            let h = l.ln2.apply(g, x);
            let f = l.ff.apply(g, h);
            x = g.add(x, f);
        }
        Ok(self.ln.apply(g, x))
    }
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: EncoderP,
    dec_pos: ParamId,
    decoder: Vec<DecoderLayerP>,
    dec_ln: LayerNormP,
    out: LinearP,
    tok: ParamId,
}

/// Encoder-decoder policy P_θ(r | U).
#[derive(Debug, Clone)]
pub struct Seq2SeqModel {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl PartialEq for Seq2SeqModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl Seq2SeqModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut p = ParamStore::new();
        let d = config.d_model;
        let tok = p.normal_ish("tok", config.vocab_size, d, 0.3, &mut rng);
        let encoder = EncoderP::new(&mut p, "enc", tok, &config, config.encoder_layers, &mut rng);
        let dec_pos = p.normal_ish("dec.pos", config.max_positions, d, 0.1, &mut rng);
        let decoder = (0..config.decoder_layers)
            .map(|l| {
                let n = format!("dec.{l}");
                DecoderLayerP {
                    ln1: LayerNormP::new(&mut p, &format!("{n}.ln1"), d),
                    self_attn: AttentionP::new(&mut p, &format!("{n}.self"), d, &mut rng),
                    ln2: LayerNormP::new(&mut p, &format!("{n}.ln2"), d),
                    cross: AttentionP::new(&mut p, &format!("{n}.cross"), d, &mut rng),
                    ln3: LayerNormP::new(&mut p, &format!("{n}.ln3"), d),
                    ff: FeedForwardP::new(&mut p, &format!("{n}.ff"), d, config.d_ff, &mut rng),
                }
            })
            .collect();
        let dec_ln = LayerNormP::new(&mut p, "dec.ln", d);
        let out = LinearP::new(&mut p, "out", d, config.vocab_size, &mut rng);
        let layout = Layout { encoder, dec_pos, decoder, dec_ln, out, tok };
        Ok(Self { config, params: p, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces all parameter values; shapes and names must match.
    pub fn load_params(&mut self, values: Vec<Mat>) -> Result<()> {
        if values.len() != self.params.len()
            || values.iter().zip(self.params.values()).any(|(a, b)| a.dim() != b.dim())
        {
            return Err(Error::Checkpoint("parameter shapes do not match the model config".into()));
        }
        for (dst, src) in self.params.values_mut().iter_mut().zip(values) {
            *dst = src;
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(t) => Err(Error::invalid(format!("token id {t} outside a vocabulary of {}", self.config.vocab_size))),
            None => Ok(()),
        }
    }

    pub fn encode_node(&self, g: &mut Graph<'_>, src: &[TokenId]) -> Result<NodeId> {
        self.check_ids(src)?;
        self.layout.encoder.forward(g, src)
    }

    /// Decoder logits for inputs `BOS ⊕ prefix`; one row per position.
    pub fn decode_node(&self, g: &mut Graph<'_>, mem: NodeId, prefix: &[TokenId]) -> Result<NodeId> {
        let m = prefix.len() + 1;
        if m > self.config.max_positions {
            return Err(Error::TooLong { len: m, max: self.config.max_positions });
        }
        self.check_ids(prefix)?;
        let idx: Vec<usize> = std::iter::once(BOS).chain(prefix.iter().copied()).map(|t| t as usize).collect();
        let positions: Vec<usize> = (0..m).collect();
        let l = &self.layout;
        let t = g.embed(l.tok, &idx);
        let p = g.embed(l.dec_pos, &positions);
        let mut y = g.add(t, p);
        for layer in &l.decoder {
            let h = layer.ln1.apply(g, y);
            let a = layer.self_attn.apply(g, h, h, self.config.heads, true);
            y = g.add(y, a);
            let h = layer.ln2.apply(g, y);
            let c = layer.cross.apply(g, h, mem, self.config.heads, false);
            y = g.add(y, c);
            let h = layer.ln3.apply(g, y);
            let f = layer.ff.apply(g, h);
            y = g.add(y, f);
        }
        let y = l.dec_ln.apply(g, y);
        Ok(l.out.apply(g, y))
    }

    /// Per-token log-probabilities of `targets` given `src`, as an n×1 node.
    pub fn token_log_probs_node(&self, g: &mut Graph<'_>, src: &[TokenId], targets: &[TokenId]) -> Result<NodeId> {
        if targets.is_empty() {
            return Err(Error::invalid("response must contain at least one token"));
        }
        self.check_ids(targets)?;
        let mem = self.encode_node(g, src)?;
        let logits = self.decode_node(g, mem, &targets[..targets.len() - 1])?;
        let t: Vec<usize> = targets.iter().map(|&x| x as usize).collect();
        Ok(g.pick_log_softmax(logits, &t))
    }

    /// log P(targets | src), summed over steps.
    pub fn sequence_log_prob(&self, src: &[TokenId], targets: &[TokenId]) -> Result<f64> {
        Ok(self.token_log_probs(src, targets)?.iter().sum())
    }

    pub fn token_log_probs(&self, src: &[TokenId], targets: &[TokenId]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let n = self.token_log_probs_node(&mut g, src, targets)?;
        Ok(g.value(n).column(0).to_vec())
    }

    /// −log P(targets | src).
    pub fn nll_loss(&self, src: &[TokenId], targets: &[TokenId]) -> Result<f64> {
        Ok(-self.sequence_log_prob(src, targets)?)
    }

    /// NLL and its gradient, with the gradient scaled by `weight` before accumulation.
    pub fn nll_with_grad(&self, src: &[TokenId], targets: &[TokenId], weight: f64, grads: &mut Gradients) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let lp = self.token_log_probs_node(&mut g, src, targets)?;
        let total = g.sum(lp);
        let nll = -g.scalar(total);
        g.backward(total, Mat::from_elem((1, 1), -weight), grads);
        Ok(nll)
    }

    /// Backpropagates `coef[t]` times the per-token log-prob; returns the log-probs.
    pub fn token_log_probs_with_grad(
        &self,
        src: &[TokenId],
        targets: &[TokenId],
        coef: &[f64],
        grads: &mut Gradients,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let lp = self.token_log_probs_node(&mut g, src, targets)?;
        let seed = Mat::from_shape_vec((coef.len(), 1), coef.to_vec()).map_err(|e| Error::invalid(e.to_string()))?;
        g.backward(lp, seed, grads);
        Ok(g.value(lp).column(0).to_vec())
    }
}

/// Encoded context ready for step-wise decoding.
pub struct Encoded {
    src: Vec<TokenId>,
}

/// Probabilities over the vocabulary at one decode step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    pub probs: Vec<f64>,
}

impl StepDistribution {
    pub fn from_log_probs(lp: &[f64]) -> Self {
        Self { probs: lp.iter().map(|x| x.exp()).collect() }
    }

    pub fn sum(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn argmax(&self) -> TokenId {
        argmax(&self.probs) as TokenId
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Anything that yields next-token distributions given an encoded context.
/// Decoding, self-talk and RL are written against this interface, so a
/// different backbone (for example an external pretrained model) can be
/// plugged in by implementing it.
pub trait ResponseModel {
    type Memory;

    fn vocab_size(&self) -> usize;

    /// Largest flattened context the model accepts.
    fn max_context_tokens(&self) -> usize;

    /// Longest response (excluding the implicit BOS) the decoder can score.
    fn max_response_tokens(&self) -> usize;

    fn encode(&self, src: &[TokenId]) -> Result<Self::Memory>;

    /// Log-probabilities of the token following `prefix`.
    fn next_log_probs(&self, memory: &Self::Memory, prefix: &[TokenId]) -> Result<Vec<f64>>;

    fn decode_step(&self, memory: &Self::Memory, prefix: &[TokenId]) -> Result<StepDistribution> {
        Ok(StepDistribution::from_log_probs(&self.next_log_probs(memory, prefix)?))
    }

    /// Σ_t log p(y_t | src, y_<t) via step-wise decoding.
    fn score(&self, src: &[TokenId], targets: &[TokenId]) -> Result<f64> {
        let mem = self.encode(src)?;
        let mut total = 0.0;
        for t in 0..targets.len() {
            total += self.next_log_probs(&mem, &targets[..t])?[targets[t] as usize];
        }
        Ok(total)
    }
}

impl ResponseModel for Seq2SeqModel {
    type Memory = (Encoded, Mat);

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_context_tokens(&self) -> usize {
        self.config.max_positions
    }

    fn max_response_tokens(&self) -> usize {
        self.config.max_positions - 1
    }

    fn encode(&self, src: &[TokenId]) -> Result<Self::Memory> {
        let mut g = Graph::new(&self.params);
        let n = self.encode_node(&mut g, src)?;
        Ok((Encoded { src: src.to_vec() }, g.value(n).clone()))
    }

    fn next_log_probs(&self, memory: &Self::Memory, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let mem = g.input(memory.1.clone());
        let logits = self.decode_node(&mut g, mem, prefix)?;
        let v = g.value(logits);
        let last = v.slice(ndarray::s![v.nrows() - 1..v.nrows(), ..]);
        Ok(crate::nn::log_softmax(last))
    }

    fn score(&self, src: &[TokenId], targets: &[TokenId]) -> Result<f64> {
        self.sequence_log_prob(src, targets)
    }
}

impl Encoded {
    pub fn src(&self) -> &[TokenId] {
        &self.src
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EOS;

    fn tiny(v: usize) -> Seq2SeqModel {
        Seq2SeqModel::new(ModelConfig {
            vocab_size: v,
            d_model: 16,
            heads: 2,
            d_ff: 32,
            encoder_layers: 2,
            decoder_layers: 2,
            max_positions: 32,
            init_seed: 7,
        })
        .unwrap()
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let m = tiny(12);
        let (_, h) = m.encode(&[9]).unwrap();
        assert_eq!(h.nrows(), 1);
        let (_, a) = m.encode(&[8, 3, 9, 10]).unwrap();
        let (_, b) = m.encode(&[8, 3, 9, 10]).unwrap();
        assert_eq!(a, b);
        let (_, c) = m.encode(&[9, 3, 8, 10]).unwrap();
        assert_ne!(a, c);
        assert!(matches!(m.encode(&[8; 33]), Err(Error::TooLong { len: 33, max: 32 })));
    }

    #[test]
    fn step_distributions_normalized_and_causal() {
        let m = tiny(12);
        let mem = m.encode(&[8, 9, 3, 10]).unwrap();
        let d1 = m.decode_step(&mem, &[11]).unwrap();
        assert!((d1.sum() - 1.0).abs() < 1e-9);
        assert!(d1.probs.iter().all(|&p| p >= 0.0));
        // rows of the full-sequence pass equal the step-wise distributions
        let lp = m.token_log_probs(&[8, 9, 3, 10], &[11, 9, EOS]).unwrap();
        let s0 = m.next_log_probs(&mem, &[]).unwrap();
        let s1 = m.next_log_probs(&mem, &[11]).unwrap();
        assert!((lp[0] - s0[11]).abs() < 1e-12);
        assert!((lp[1] - s1[9]).abs() < 1e-12);
    }

    #[test]
    fn zero_params_give_uniform() {
        let mut m = tiny(2);
        m.params_mut().fill(0.0);
        let mem = m.encode(&[1, 0]).unwrap();
        let d = m.decode_step(&mem, &[1]).unwrap();
        assert_eq!(d.probs, vec![0.5, 0.5]);
    }

    #[test]
    fn trait_score_matches_chain_rule() {
        let m = tiny(12);
        let src = [8, 3, 9];
        let r = [10, 11, EOS];
        let a = m.sequence_log_prob(&src, &r).unwrap();
        let mem = m.encode(&src).unwrap();
        let mut b = 0.0;
        for t in 0..r.len() {
            b += m.decode_step(&mem, &r[..t]).unwrap().probs[r[t] as usize].ln();
        }
        assert!((a - b).abs() < 1e-10);
        assert!(a <= 0.0);
    }
}
