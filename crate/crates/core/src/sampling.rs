//! Hierarchical scheduled sampling: replace one golden context utterance with a
//! model prediction (whole utterance or after a forced golden prefix) or with
//! a random training utterance, then train against the golden response.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DialogueContext, Provenance, TokenId, TrainingPair, Utterance, Vocabulary, EOS, SEP};
use crate::decoding::{greedy_ids, DecodeConfig};
use crate::error::{Error, Result};
use crate::model::Seq2SeqModel;
use crate::nn::Gradients;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Golden contexts only.
    #[default]
    Off,
    Utterance,
    Semi,
    Hierarchical,
    Noise,
}

/// Which end of the context the geometric index counts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// i = 1 is the earliest utterance.
    #[default]
    First,
    /// i = 1 is the most recent utterance.
    Last,
}

/// Replacement kind chosen for one example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplacementKind {
    Utterance,
    Semi,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub mode: SamplingMode,
    pub geo_p: f64,
    pub i_max: usize,
    /// Probability that an example receives a replacement.
    pub apply_prob: f64,
    /// If set, apply_prob ramps linearly to this value over `ramp_epochs`.
    pub apply_prob_final: Option<f64>,
    pub ramp_epochs: u32,
    /// Probability of utterance-level (vs semi) inside hierarchical mode.
    pub hier_mix: f64,
    pub orientation: Orientation,
    /// Extra tokens allowed beyond |u_i| when generating a replacement.
    pub extra_tokens: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            mode: SamplingMode::Off,
            geo_p: 0.2,
            i_max: 10,
            apply_prob: 0.5,
            apply_prob_final: None,
            ramp_epochs: 0,
            hier_mix: 0.5,
            orientation: Orientation::First,
            extra_tokens: 10,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.geo_p > 0.0 && self.geo_p <= 1.0) {
            return Err(Error::Config("sampling.geo_p must lie in (0, 1]".into()));
        }
        if self.i_max == 0 {
            return Err(Error::Config("sampling.i_max must be ≥ 1".into()));
        }
        for (name, p) in [("apply_prob", Some(self.apply_prob)), ("apply_prob_final", self.apply_prob_final), ("hier_mix", Some(self.hier_mix))] {
            if let Some(p) = p {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config(format!("sampling.{name} must lie in [0, 1]")));
                }
            }
        }
        Ok(())
    }

    pub fn apply_prob_at(&self, epoch: u32) -> f64 {
        match self.apply_prob_final {
            Some(end) if self.ramp_epochs > 0 => {
                let f = (epoch as f64 / self.ramp_epochs as f64).min(1.0);
                self.apply_prob + (end - self.apply_prob) * f
            }
            Some(end) => end,
            None => self.apply_prob,
        }
    }
}

/// Draws k from the geometric law clipped at `clip`: P(k) = (1−p)^{k−1} p for
/// k < clip, with the remaining tail mass on `clip`.
pub fn clipped_geometric<R: Rng>(p: f64, clip: usize, rng: &mut R) -> usize {
    let mut k = 1;
    while k < clip && rng.random::<f64>() >= p {
        k += 1;
    }
    k
}

/// Exact pmf of [`clipped_geometric`] over 1..=clip.
pub fn clipped_geometric_pmf(p: f64, clip: usize) -> Vec<f64> {
    let mut pmf: Vec<f64> = (1..clip).map(|k| (1.0 - p).powi(k as i32 - 1) * p).collect();
    pmf.push((1.0 - p).powi(clip as i32 - 1));
    pmf
}

/// 1-based index of the context utterance to replace for a dialogue whose
/// response is turn `l` (so the context has l−1 utterances).
pub fn sample_utterance_index<R: Rng>(l: usize, cfg: &SamplingConfig, rng: &mut R) -> Result<usize> {
    if l < 2 {
        return Err(Error::invalid("need at least one context utterance (l ≥ 2)"));
    }
    let n = l - 1;
    let clip = n.min(cfg.i_max);
    let k = clipped_geometric(cfg.geo_p, clip, rng);
    Ok(match cfg.orientation {
        Orientation::First => k,
        Orientation::Last => n + 1 - k,
    })
}

pub fn choose_kind<R: Rng>(mode: SamplingMode, hier_mix: f64, rng: &mut R) -> Option<ReplacementKind> {
    match mode {
        SamplingMode::Off => None,
        SamplingMode::Utterance => Some(ReplacementKind::Utterance),
        SamplingMode::Semi => Some(ReplacementKind::Semi),
        SamplingMode::Noise => Some(ReplacementKind::Noise),
        SamplingMode::Hierarchical => Some(if rng.random::<f64>() < hier_mix {
            ReplacementKind::Utterance
        } else {
            ReplacementKind::Semi
        }),
    }
}

/// j for semi-utterance replacement: uniform on {1, ..., max(1, ⌈|u|/2⌉)}.
pub fn semi_prefix_len<R: Rng>(utterance_len: usize, rng: &mut R) -> usize {
    let hi = utterance_len.div_ceil(2).max(1);
    rng.random_range(1..=hi)
}

/// Source of replacement predictions; the trained model in practice.
pub trait Replacer {
    /// Greedy continuation of `forced` given the flattened previous context.
    fn continue_greedy(&self, src: &[TokenId], forced: &[TokenId], max_len: usize) -> Result<Vec<TokenId>>;
}

impl Replacer for Seq2SeqModel {
    fn continue_greedy(&self, src: &[TokenId], forced: &[TokenId], max_len: usize) -> Result<Vec<TokenId>> {
        greedy_ids(self, src, forced, &DecodeConfig::greedy(max_len))
    }
}

/// Encoder input for a possibly empty previous context.
pub fn context_source(previous: &[Utterance], max_input_tokens: usize) -> Vec<TokenId> {
    if previous.is_empty() {
        return vec![SEP];
    }
    DialogueContext::new(previous.to_vec()).truncate(max_input_tokens).flatten()
}

/// Predicted replacement r̂_i for context utterance `i` (1-based). Semi mode
/// force-decodes the first `j` tokens of u_i.
#[allow(clippy::too_many_arguments)]
pub fn generate_replacement<M: Replacer + ?Sized>(
    model: &M,
    golden: &[Utterance],
    i: usize,
    kind: ReplacementKind,
    j: usize,
    extra_tokens: usize,
    max_input_tokens: usize,
    vocab: &Vocabulary,
) -> Result<Utterance> {
    if i == 0 || i > golden.len() {
        return Err(Error::invalid(format!("replacement index {i} outside 1..={}", golden.len())));
    }
    let target = &golden[i - 1];
    let forced: Vec<TokenId> = match kind {
        ReplacementKind::Utterance => {
            if i == 1 {
                return Err(Error::invalid("utterance-level replacement needs a previous context (i ≥ 2)"));
            }
            Vec::new()
        }
        ReplacementKind::Semi => target.tokens[..j.min(target.len())].iter().map(|t| t.id).collect(),
        ReplacementKind::Noise => return Err(Error::invalid("noise replacements come from noise_replacement")),
    };
    let src = context_source(&golden[..i - 1], max_input_tokens);
    let mut ids = model.continue_greedy(&src, &forced, target.len() + extra_tokens)?;
    ids.retain(|&t| t != EOS);
    if ids.is_empty() {
        // the decoder produced nothing usable; keep the forced cue or the first golden token
        ids.push(target.tokens[0].id);
    }
    Ok(Utterance::from_ids(&ids, vocab, target.speaker, Provenance::Predicted)?)
}

pub fn noise_replacement<R: Rng>(pool: &[Utterance], rng: &mut R) -> Result<Utterance> {
    if pool.is_empty() {
        return Err(Error::invalid("noise pool is empty"));
    }
    Ok(pool[rng.random_range(0..pool.len())].clone().with_provenance(Provenance::Noise))
}

/// Golden context with at most one replaced utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedContext {
    pub context: DialogueContext,
    pub replaced_index: Option<usize>,
}

impl MixedContext {
    pub fn golden(context: DialogueContext) -> Self {
        Self { context, replaced_index: None }
    }

    pub fn non_golden_count(&self) -> usize {
        self.context.utterances.iter().filter(|u| u.provenance != Provenance::Golden).count()
    }
}

pub fn build_mixed_context(golden: &DialogueContext, i: usize, replacement: Utterance) -> Result<MixedContext> {
    if i == 0 || i > golden.len() {
        return Err(Error::invalid(format!("replacement index {i} outside 1..={}", golden.len())));
    }
    let mut utterances = golden.utterances.clone();
    utterances[i - 1] = replacement;
    Ok(MixedContext { context: DialogueContext::new(utterances), replaced_index: Some(i) })
}

/// Per-call inputs shared by every example in a batch.
pub struct StepEnv<'a> {
    pub vocab: &'a Vocabulary,
    pub noise_pool: &'a [Utterance],
    pub max_input_tokens: usize,
    pub apply_prob: f64,
}

/// Draws the replacement decision for one example and builds its mixed context.
pub fn mix_example<M: Replacer + ?Sized, R: Rng>(
    model: &M,
    pair: &TrainingPair,
    cfg: &SamplingConfig,
    env: &StepEnv<'_>,
    rng: &mut R,
) -> Result<MixedContext> {
    let golden = &pair.context;
    if cfg.mode == SamplingMode::Off || golden.is_empty() || rng.random::<f64>() >= env.apply_prob {
        return Ok(MixedContext::golden(golden.clone()));
    }
    let Some(kind) = choose_kind(cfg.mode, cfg.hier_mix, rng) else {
        return Ok(MixedContext::golden(golden.clone()));
    };
    let l = golden.len() + 1;
    let mut i = sample_utterance_index(l, cfg, rng)?;
    if kind == ReplacementKind::Utterance {
        if golden.len() < 2 {
            // only u_1 exists and it has no previous context
            return Ok(MixedContext::golden(golden.clone()));
        }
        while i == 1 {
            i = sample_utterance_index(l, cfg, rng)?;
        }
    }
    let replacement = match kind {
        ReplacementKind::Noise => noise_replacement(env.noise_pool, rng)?,
        ReplacementKind::Semi => {
            let j = semi_prefix_len(golden.utterances[i - 1].len(), rng);
            generate_replacement(model, &golden.utterances, i, kind, j, cfg.extra_tokens, env.max_input_tokens, env.vocab)?
        }
        ReplacementKind::Utterance => {
            generate_replacement(model, &golden.utterances, i, kind, 0, cfg.extra_tokens, env.max_input_tokens, env.vocab)?
        }
    };
    build_mixed_context(golden, i, replacement)
}

/// Decoder targets for a golden response: its tokens followed by EOS.
pub fn response_targets(response: &Utterance) -> Vec<TokenId> {
    let mut t = response.ids();
    t.push(EOS);
    t
}

/// Mean NLL of the golden responses given the (mixed) contexts, and its gradient.
pub fn batch_loss_and_grads(
    model: &Seq2SeqModel,
    contexts: &[DialogueContext],
    responses: &[&Utterance],
    max_input_tokens: usize,
) -> Result<(f64, Gradients)> {
    let mut grads = model.params().zero_grads();
    let w = 1.0 / contexts.len() as f64;
    let mut total = 0.0;
    for (ctx, resp) in contexts.iter().zip(responses) {
        let src = context_source(&ctx.utterances, max_input_tokens);
        total += model.nll_with_grad(&src, &response_targets(resp), w, &mut grads)?;
    }
    Ok((total * w, grads))
}
