//! Coherence judges f_c(U, r): stubs, the keyword oracle and a trainable
//! CLS-pooled transformer classifier.

use std::collections::HashMap;
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{flatten, Speaker, TokenId, Tokenizer, Utterance, Vocabulary, BOT, CLS, HUMAN, SEP};
use crate::error::{Error, Result};
use crate::model::{EncoderP, ModelConfig};
use crate::nn::{Graph, Mat, ParamId, ParamStore};
use crate::optim::{AdamW, OptimConfig};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    #[serde(alias = "coherent")]
    NonContradiction,
    Contradiction,
}

impl Label {
    pub fn is_coherent(self) -> bool {
        self == Label::NonContradiction
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoherenceScore {
    pub p_coherent: f64,
    pub label: Label,
}

impl CoherenceScore {
    pub fn new(p_coherent: f64, threshold: f64) -> Self {
        let label = if p_coherent >= threshold { Label::NonContradiction } else { Label::Contradiction };
        Self { p_coherent, label }
    }
}

/// Binary judge of whether `response` is coherent with `context`.
pub trait CoherenceClassifier {
    fn p_coherent(&self, context: &[Utterance], response: &Utterance) -> Result<f64>;

    fn threshold(&self) -> f64 {
        DEFAULT_THRESHOLD
    }
}

impl<C: CoherenceClassifier + ?Sized> CoherenceClassifier for &C {
    fn p_coherent(&self, context: &[Utterance], response: &Utterance) -> Result<f64> {
        (**self).p_coherent(context, response)
    }
    fn threshold(&self) -> f64 {
        (**self).threshold()
    }
}

impl<C: CoherenceClassifier + ?Sized> CoherenceClassifier for Box<C> {
    fn p_coherent(&self, context: &[Utterance], response: &Utterance) -> Result<f64> {
        (**self).p_coherent(context, response)
    }
    fn threshold(&self) -> f64 {
        (**self).threshold()
    }
}

pub fn score<C: CoherenceClassifier + ?Sized>(clf: &C, context: &[Utterance], response: &Utterance) -> Result<CoherenceScore> {
    Ok(CoherenceScore::new(clf.p_coherent(context, response)?, clf.threshold()))
}

/// Scores `response` against a context consisting of the single `utterance`.
pub fn score_against_single_utterance<C: CoherenceClassifier + ?Sized>(
    clf: &C,
    utterance: &Utterance,
    response: &Utterance,
) -> Result<CoherenceScore> {
    score(clf, std::slice::from_ref(utterance), response)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysCoherent;

impl CoherenceClassifier for AlwaysCoherent {
    fn p_coherent(&self, _: &[Utterance], _: &Utterance) -> Result<f64> {
        Ok(1.0)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysContradiction;

impl CoherenceClassifier for AlwaysContradiction {
    fn p_coherent(&self, _: &[Utterance], _: &Utterance) -> Result<f64> {
        Ok(0.0)
    }
}

/// Polarity of a fact assertion token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Pos,
    Neg,
}

/// Parses `+name` / `-name` (also U+2212 minus) into a fact assertion.
pub fn parse_assertion(surface: &str) -> Option<(&str, Polarity)> {
    let mut chars = surface.chars();
    let pol = match chars.next()? {
        '+' => Polarity::Pos,
        '-' | '\u{2212}' => Polarity::Neg,
        _ => return None,
    };
    let name = chars.as_str();
    if name.is_empty() || name.starts_with(['+', '-', '\u{2212}']) {
        return None;
    }
    Some((name, pol))
}

/// Exact judge for keyword-chain dialogues: a response contradicts iff it
/// asserts a fact with the opposite polarity to that fact's latest prior
/// assertion. Earlier assertions inside the response itself count as prior.
#[derive(Debug, Clone, Copy, Default)]
pub struct KeywordOracle;

impl KeywordOracle {
    pub fn is_coherent(context: &[Utterance], response: &Utterance) -> bool {
        let mut latest: HashMap<&str, Polarity> = HashMap::new();
        for u in context {
            for t in &u.tokens {
                if let Some((f, p)) = parse_assertion(&t.surface) {
                    latest.insert(f, p);
                }
            }
        }
        for t in &response.tokens {
            if let Some((f, p)) = parse_assertion(&t.surface) {
                if latest.get(f).is_some_and(|&q| q != p) {
                    return false;
                }
                latest.insert(f, p);
            }
        }
        true
    }
}

impl CoherenceClassifier for KeywordOracle {
    fn p_coherent(&self, context: &[Utterance], response: &Utterance) -> Result<f64> {
        Ok(if Self::is_coherent(context, response) { 1.0 } else { 0.0 })
    }
}

fn speaker_tag(s: Speaker) -> Option<TokenId> {
    match s {
        Speaker::Human => Some(HUMAN),
        Speaker::Bot => Some(BOT),
        Speaker::Unknown => None,
    }
}

fn with_tags(utterances: &[Utterance]) -> Vec<TokenId> {
    let mut out = Vec::new();
    for (k, u) in utterances.iter().enumerate() {
        if k > 0 {
            out.push(SEP);
        }
        out.extend(speaker_tag(u.speaker));
        out.extend(u.tokens.iter().map(|t| t.id));
    }
    out
}

/// `CLS ⊕ context ⊕ SEP ⊕ response ⊕ SEP`, dropping the oldest context tokens
/// (then, if still needed, the response tail) to fit `max_len`. Speaker tags
/// precede an utterance when `speaker_tags` is set and its speaker is known.
pub fn format_input(context: &[Utterance], response: &Utterance, max_len: usize, speaker_tags: bool) -> Vec<TokenId> {
    let (ctx, resp) = if speaker_tags {
        (with_tags(context), with_tags(std::slice::from_ref(response)))
    } else {
        (flatten(context), response.ids())
    };
    let fixed = 3 + resp.len();
    let mut out = Vec::with_capacity(max_len.min(fixed + ctx.len()));
    out.push(CLS);
    if fixed <= max_len {
        let keep = (max_len - fixed).min(ctx.len());
        out.extend_from_slice(&ctx[ctx.len() - keep..]);
        out.push(SEP);
        out.extend_from_slice(&resp);
    } else {
        out.push(SEP);
        out.extend_from_slice(&resp[..max_len.saturating_sub(3)]);
    }
    out.push(SEP);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub max_positions: usize,
    pub speaker_tags: bool,
    pub threshold: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            d_ff: 128,
            layers: 2,
            max_positions: 256,
            speaker_tags: true,
            threshold: DEFAULT_THRESHOLD,
            epochs: 5,
            batch_size: 32,
            optim: OptimConfig { lr: 1e-3, halve_every: 0, ..OptimConfig::default() },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct ClassifierLayout {
    encoder: EncoderP,
    hidden_w: ParamId,
    hidden_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// Transformer encoder whose CLS state feeds a two-class MLP head
/// (class 0 = contradiction, class 1 = coherent).
#[derive(Debug, Clone)]
pub struct EncoderClassifier {
    config: ClassifierConfig,
    vocab_size: usize,
    params: ParamStore,
    layout: ClassifierLayout,
}

impl EncoderClassifier {
    pub fn new(config: ClassifierConfig, vocab_size: usize) -> Result<Self> {
        let mc = ModelConfig {
            vocab_size,
            d_model: config.d_model,
            heads: config.heads,
            d_ff: config.d_ff,
            encoder_layers: config.layers,
            decoder_layers: 0,
            max_positions: config.max_positions,
            init_seed: config.seed,
        };
        mc.validate()?;
        if config.max_positions < 4 {
            return Err(Error::Config("classifier.max_positions must be ≥ 4".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let d = config.d_model;
        let tok = p.normal_ish("tok", vocab_size, d, 0.3, &mut rng);
        let encoder = EncoderP::new(&mut p, "enc", tok, &mc, config.layers, &mut rng);
        let hidden_w = p.xavier("head.hidden.w", d, d, &mut rng);
        let hidden_b = p.zeros("head.hidden.b", 1, d);
        let out_w = p.xavier("head.out.w", d, 2, &mut rng);
        let out_b = p.zeros("head.out.b", 1, 2);
        let layout = ClassifierLayout { encoder, hidden_w, hidden_b, out_w, out_b };
        Ok(Self { config, vocab_size, params: p, layout })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn load_params(&mut self, values: Vec<Mat>) -> Result<()> {
        if values.len() != self.params.len()
            || values.iter().zip(self.params.values()).any(|(a, b)| a.dim() != b.dim())
        {
            return Err(Error::Checkpoint("classifier parameter shapes do not match its config".into()));
        }
        for (dst, src) in self.params.values_mut().iter_mut().zip(values) {
            *dst = src;
        }
        Ok(())
    }

    pub fn format(&self, context: &[Utterance], response: &Utterance) -> Vec<TokenId> {
        format_input(context, response, self.config.max_positions, self.config.speaker_tags)
    }

    /// Log-probabilities of (contradiction, coherent) for a formatted input.
    fn forward<'a>(&'a self, g: &mut Graph<'a>, ids: &[TokenId], label: usize) -> Result<crate::nn::NodeId> {
        let l = &self.layout;
        let h = l.encoder.forward(g, ids)?;
        let cls = g.select_rows(h, &[0]);
        let z = g.linear(cls, l.hidden_w, l.hidden_b);
        let z = g.gelu(z);
        let logits = g.linear(z, l.out_w, l.out_b);
        Ok(g.pick_log_softmax(logits, &[label]))
    }

    pub fn p_coherent_ids(&self, ids: &[TokenId]) -> Result<f64> {
        if ids.iter().any(|&t| t as usize >= self.vocab_size) {
            return Err(Error::invalid("token id outside the classifier vocabulary"));
        }
        let mut g = Graph::new(&self.params);
        let lp = self.forward(&mut g, ids, 1)?;
        Ok(g.scalar(lp).exp())
    }

    fn loss_with_grad(&self, ids: &[TokenId], label: Label, weight: f64, grads: &mut crate::nn::Gradients) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let lp = self.forward(&mut g, ids, usize::from(label.is_coherent()))?;
        let nll = -g.scalar(lp);
        g.backward(lp, Mat::from_elem((1, 1), -weight), grads);
        Ok(nll)
    }
}

impl CoherenceClassifier for EncoderClassifier {
    fn p_coherent(&self, context: &[Utterance], response: &Utterance) -> Result<f64> {
        self.p_coherent_ids(&self.format(context, response))
    }

    fn threshold(&self) -> f64 {
        self.config.threshold
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceExample {
    pub context: Vec<Utterance>,
    pub response: Utterance,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassifierReport {
    pub dev_accuracy_per_epoch: Vec<f64>,
    pub train_loss_per_epoch: Vec<f64>,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
}

pub fn accuracy<C: CoherenceClassifier + ?Sized>(clf: &C, data: &[CoherenceExample]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for ex in data {
        if score(clf, &ex.context, &ex.response)?.label == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains an [`EncoderClassifier`] and returns the epoch with the best dev accuracy.
pub fn train_classifier(
    train: &[CoherenceExample],
    dev: &[CoherenceExample],
    vocab_size: usize,
    config: &ClassifierConfig,
) -> Result<(EncoderClassifier, ClassifierReport)> {
    let pos = train.iter().filter(|e| e.label.is_coherent()).count();
    if pos == 0 || pos == train.len() {
        return Err(Error::invalid("classifier training data must contain both labels"));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("classifier.batch_size must be ≥ 1".into()));
    }
    let mut clf = EncoderClassifier::new(config.clone(), vocab_size)?;
    let mut opt = AdamW::new(config.optim.clone(), &clf.params);
    let inputs: Vec<Vec<TokenId>> = train.iter().map(|e| clf.format(&e.context, &e.response)).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = ClassifierReport {
        dev_accuracy_per_epoch: Vec::new(),
        train_loss_per_epoch: Vec::new(),
        best_epoch: 0,
        best_dev_accuracy: f64::NEG_INFINITY,
    };
    let mut best = clf.params.clone();
    for epoch in 0..config.epochs.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::rng::derive(config.seed, &[epoch as u64]));
        order.shuffle(&mut rng);
        let lr = config.optim.lr_at_epoch(epoch);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = clf.params.zero_grads();
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                total += clf.loss_with_grad(&inputs[i], train[i].label, w, &mut grads)?;
            }
            if !grads.is_finite() {
                clf.params = best.clone();
                return Err(Error::Diverged { step: opt.t });
            }
            opt.step(&mut clf.params, &grads, lr);
        }
        let acc = accuracy(&clf, if dev.is_empty() { train } else { dev })?;
        report.train_loss_per_epoch.push(total / train.len() as f64);
        report.dev_accuracy_per_epoch.push(acc);
        if acc > report.best_dev_accuracy {
            report.best_dev_accuracy = acc;
            report.best_epoch = epoch as usize;
            best = clf.params.clone();
        }
    }
    clf.params = best;
    Ok((clf, report))
}

/// One DECODE-style record: `{"context": [...], "response": "...", "label": ...}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawCoherenceExample {
    pub context: Vec<String>,
    pub response: String,
    pub label: Label,
}

pub fn parse_coherence_jsonl<R: BufRead>(reader: R) -> Result<Vec<RawCoherenceExample>> {
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: RawCoherenceExample = serde_json::from_str(&line).map_err(|e| Error::parse(k + 1, e))?;
        if ex.context.is_empty() || ex.context.iter().chain([&ex.response]).any(|t| t.split_whitespace().next().is_none()) {
            return Err(Error::parse(k + 1, "context and response must be non-empty"));
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn encode_coherence_examples(
    raw: &[RawCoherenceExample],
    vocab: &Vocabulary,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<CoherenceExample>> {
    use crate::corpus::Provenance::Golden;
    raw.iter()
        .map(|r| {
            let context = r
                .context
                .iter()
                .map(|t| Utterance::from_text(t, vocab, tokenizer, Speaker::Unknown, Golden))
                .collect::<Result<Vec<_>>>()?;
            let response = Utterance::from_text(&r.response, vocab, tokenizer, Speaker::Unknown, Golden)?;
            Ok(CoherenceExample { context, response, label: r.label })
        })
        .collect()
}
