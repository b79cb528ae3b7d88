//! Coherence-reward fine-tuning: reward f_c(U, r̂) − β·KL(U) optimized with a
//! clipped policy-gradient objective against a frozen reference policy.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coherence::CoherenceClassifier;
use crate::corpus::{DialogueContext, Provenance, Speaker, TokenId, Utterance, Vocabulary, EOS};
use crate::decoding::{sample_ids, DecodeConfig, Strategy};
use crate::error::{Error, Result};
use crate::model::Seq2SeqModel;
use crate::optim::{AdamW, OptimConfig};
use crate::rng;
use crate::sampling::context_source;

pub const PROB_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// min(ratio·A, clip(ratio)·A).
    #[default]
    ClippedSurrogate,
    /// Plain policy gradient on rewards clipped to ±reward_clip.
    ClippedReward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// One ratio per response.
    #[default]
    Sequence,
    /// One ratio per token, the sequence advantage spread uniformly.
    Token,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// reward − batch mean, then divided by the batch standard deviation.
    #[default]
    MeanStd,
    Mean,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RLConfig {
    pub beta: f64,
    pub kl_decode_truncation: usize,
    pub clip_ratio: f64,
    pub rollouts_per_update: usize,
    pub ppo_epochs: usize,
    pub iterations: usize,
    pub baseline: Baseline,
    pub objective: Objective,
    pub granularity: Granularity,
    pub reward_clip: f64,
    pub temperature: f64,
    pub max_length: usize,
    pub max_input_tokens: usize,
    /// Rollout contexts are the first this many golden utterances of longer
    /// training dialogues; 0 uses every training context.
    pub context_utterances: usize,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for RLConfig {
    fn default() -> Self {
        Self {
            beta: 0.2,
            kl_decode_truncation: 20,
            clip_ratio: 0.2,
            rollouts_per_update: 32,
            ppo_epochs: 2,
            iterations: 50,
            baseline: Baseline::MeanStd,
            objective: Objective::ClippedSurrogate,
            granularity: Granularity::Sequence,
            reward_clip: 1.0,
            temperature: 1.0,
            max_length: 20,
            max_input_tokens: 512,
            context_utterances: 8,
            optim: OptimConfig { lr: 5e-5, weight_decay: 0.0, halve_every: 0, ..OptimConfig::default() },
            seed: 0,
        }
    }
}

impl RLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(Error::Config("rl.beta must be ≥ 0".into()));
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return Err(Error::Config("rl.clip_ratio must lie in (0, 1)".into()));
        }
        if self.kl_decode_truncation == 0 || self.rollouts_per_update == 0 || self.max_length == 0 {
            return Err(Error::Config("rl.kl_decode_truncation, rl.rollouts_per_update and rl.max_length must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub context: DialogueContext,
    /// Sampled response tokens (EOS included when sampled).
    pub response: Vec<TokenId>,
    pub policy_log_probs: Vec<f64>,
    pub reference_log_probs: Vec<f64>,
    pub coherence: f64,
    pub kl: f64,
    pub reward: f64,
    pub advantage: f64,
}

impl Rollout {
    pub fn old_log_prob(&self) -> f64 {
        self.policy_log_probs.iter().sum()
    }
}

/// Σ over the first min(T', truncation) tokens of log(p_policy / p_reference),
/// with both probabilities floored at [`PROB_FLOOR`].
pub fn kl_from_log_probs(policy: &[f64], reference: &[f64], truncation: usize) -> f64 {
    policy
        .iter()
        .zip(reference)
        .take(truncation)
        .map(|(&p, &q)| p.max(PROB_FLOOR.ln()) - q.max(PROB_FLOOR.ln()))
        .sum()
}

pub fn kl_term(
    policy: &Seq2SeqModel,
    reference: &Seq2SeqModel,
    src: &[TokenId],
    response: &[TokenId],
    truncation: usize,
) -> Result<f64> {
    let p = policy.token_log_probs(src, response)?;
    let q = reference.token_log_probs(src, response)?;
    Ok(kl_from_log_probs(&p, &q, truncation))
}

pub fn reward_from(coherence: f64, kl: f64, beta: f64) -> f64 {
    coherence - beta * kl
}

fn response_utterance(response: &[TokenId], vocab: &Vocabulary) -> Result<Option<Utterance>> {
    let ids: Vec<TokenId> = response.iter().copied().filter(|&t| t != EOS).collect();
    if ids.is_empty() {
        return Ok(None);
    }
    Utterance::from_ids(&ids, vocab, Speaker::Bot, Provenance::Predicted).map(Some)
}

#[allow(clippy::too_many_arguments)]
pub fn compute_reward<C: CoherenceClassifier + ?Sized>(
    policy: &Seq2SeqModel,
    reference: &Seq2SeqModel,
    classifier: &C,
    context: &DialogueContext,
    response: &[TokenId],
    config: &RLConfig,
    vocab: &Vocabulary,
) -> Result<f64> {
    let src = context_source(&context.utterances, config.max_input_tokens);
    let kl = kl_term(policy, reference, &src, response, config.kl_decode_truncation)?;
    let fc = match response_utterance(response, vocab)? {
        Some(r) => classifier.p_coherent(&context.utterances, &r)?,
        None => 0.0,
    };
    Ok(reward_from(fc, kl, config.beta))
}

/// Advantages from rewards: baseline subtraction and (optionally) scaling to
/// unit variance; a zero spread yields all-zero advantages.
pub fn advantages(rewards: &[f64], baseline: Baseline) -> Vec<f64> {
    let n = rewards.len() as f64;
    if rewards.is_empty() {
        return Vec::new();
    }
    let mean = rewards.iter().sum::<f64>() / n;
    match baseline {
        Baseline::None => rewards.to_vec(),
        Baseline::Mean => rewards.iter().map(|r| r - mean).collect(),
        Baseline::MeanStd => {
            let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
            let sd = var.sqrt();
            if sd < 1e-8 {
                vec![0.0; rewards.len()]
            } else {
                rewards.iter().map(|r| (r - mean) / sd).collect()
            }
        }
    }
}

/// Samples one response per context and scores it.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts<C: CoherenceClassifier + ?Sized, R: Rng>(
    policy: &Seq2SeqModel,
    reference: &Seq2SeqModel,
    classifier: &C,
    contexts: &[DialogueContext],
    config: &RLConfig,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<Vec<Rollout>> {
    if contexts.is_empty() {
        return Err(Error::invalid("no contexts for rollouts"));
    }
    let dec = DecodeConfig {
        strategy: Strategy::Sample,
        max_length: config.max_length,
        temperature: config.temperature,
        ..DecodeConfig::default()
    };
    let mut out = Vec::with_capacity(contexts.len());
    for ctx in contexts {
        let src = context_source(&ctx.utterances, config.max_input_tokens);
        let mut response = sample_ids(policy, &src, &[], &dec, rng)?;
        if response.len() < dec.max_length {
            response.push(EOS);
        }
        let p = policy.token_log_probs(&src, &response)?;
        let q = reference.token_log_probs(&src, &response)?;
        let kl = kl_from_log_probs(&p, &q, config.kl_decode_truncation);
        let coherence = match response_utterance(&response, vocab)? {
            Some(r) => classifier.p_coherent(&ctx.utterances, &r)?,
            None => 0.0,
        };
        out.push(Rollout {
            context: ctx.clone(),
            response,
            policy_log_probs: p,
            reference_log_probs: q,
            coherence,
            kl,
            reward: reward_from(coherence, kl, config.beta),
            advantage: 0.0,
        });
    }
    let rewards: Vec<f64> = out.iter().map(|r| r.reward).collect();
    let signal: Vec<f64> = match config.objective {
        Objective::ClippedSurrogate => rewards,
        Objective::ClippedReward => rewards.iter().map(|r| r.clamp(-config.reward_clip, config.reward_clip)).collect(),
    };
    for (r, a) in out.iter_mut().zip(advantages(&signal, config.baseline)) {
        r.advantage = a;
    }
    Ok(out)
}

/// d/d(ratio) of min(ratio·A, clip(ratio, 1−ε, 1+ε)·A).
pub fn surrogate_grad(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let clipped_active = (advantage > 0.0 && ratio > 1.0 + eps) || (advantage < 0.0 && ratio < 1.0 - eps);
    if clipped_active {
        0.0
    } else {
        advantage
    }
}

pub fn surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// Policy with its optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyState {
    pub model: Seq2SeqModel,
    pub optimizer: AdamW,
}

impl PolicyState {
    pub fn new(model: Seq2SeqModel, optim: OptimConfig) -> Self {
        let optimizer = AdamW::new(optim, model.params());
        Self { model, optimizer }
    }
}

/// `ppo_epochs` gradient-ascent passes on the objective over all rollouts.
/// Returns the mean objective of the last pass.
pub fn ppo_update(state: &mut PolicyState, rollouts: &[Rollout], config: &RLConfig) -> Result<f64> {
    if rollouts.is_empty() {
        return Err(Error::invalid("no rollouts"));
    }
    let backup = state.clone();
    let n = rollouts.len() as f64;
    let eps = config.clip_ratio;
    let mut objective = 0.0;
    for _ in 0..config.ppo_epochs.max(1) {
        let mut grads = state.model.params().zero_grads();
        objective = 0.0;
        for r in rollouts {
            let src = context_source(&r.context.utterances, config.max_input_tokens);
            let a = r.advantage;
            let new_lp = state.model.token_log_probs(&src, &r.response)?;
            // coefficient on each token log-prob for gradient *descent* on −objective
            let coef: Vec<f64> = match (config.objective, config.granularity) {
                (Objective::ClippedReward, _) => {
                    objective += a * new_lp.iter().sum::<f64>() / n;
                    vec![-a / n; new_lp.len()]
                }
                (Objective::ClippedSurrogate, Granularity::Sequence) => {
                    let ratio = (new_lp.iter().sum::<f64>() - r.old_log_prob()).exp();
                    objective += surrogate(ratio, a, eps) / n;
                    // d ratio / d log-prob_t = ratio
                    vec![-surrogate_grad(ratio, a, eps) * ratio / n; new_lp.len()]
                }
                (Objective::ClippedSurrogate, Granularity::Token) => {
                    let t = new_lp.len() as f64;
                    new_lp
                        .iter()
                        .zip(&r.policy_log_probs)
                        .map(|(&new, &old)| {
                            let ratio = (new - old).exp();
                            objective += surrogate(ratio, a, eps) / (n * t);
                            -surrogate_grad(ratio, a, eps) * ratio / (n * t)
                        })
                        .collect()
                }
            };
            if coef.iter().all(|&c| c == 0.0) {
                continue;
            }
            state.model.token_log_probs_with_grad(&src, &r.response, &coef, &mut grads)?;
        }
        if !objective.is_finite() || !grads.is_finite() {
            *state = backup;
            return Err(Error::Diverged { step: state.optimizer.t });
        }
        if grads.is_zero() {
            continue;
        }
        let lr = state.optimizer.config.lr;
        state.optimizer.step(state.model.params_mut(), &grads, lr);
    }
    Ok(objective)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub mean_coherence: f64,
    pub objective: f64,
}

/// Collect/update loop. The reference is a frozen copy of the initial policy.
pub fn rl_finetune<C: CoherenceClassifier + ?Sized>(
    policy: Seq2SeqModel,
    classifier: &C,
    contexts: &[DialogueContext],
    config: &RLConfig,
    vocab: &Vocabulary,
    mut on_iteration: impl FnMut(&IterationMetrics),
) -> Result<(Seq2SeqModel, Vec<IterationMetrics>)> {
    config.validate()?;
    if contexts.is_empty() {
        return Err(Error::invalid("no contexts for RL fine-tuning"));
    }
    let reference = policy.clone();
    let mut state = PolicyState::new(policy, config.optim.clone());
    let mut log = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let mut rng = rng::stream(config.seed, &[0x726c, it as u64]);
        let batch: Vec<DialogueContext> =
            contexts.choose_multiple(&mut rng, config.rollouts_per_update.min(contexts.len())).cloned().collect();
        let rollouts = collect_rollouts(&state.model, &reference, classifier, &batch, config, vocab, &mut rng)?;
        let objective = ppo_update(&mut state, &rollouts, config)?;
        let n = rollouts.len() as f64;
        let m = IterationMetrics {
            iteration: it,
            mean_reward: rollouts.iter().map(|r| r.reward).sum::<f64>() / n,
            mean_kl: rollouts.iter().map(|r| r.kl).sum::<f64>() / n,
            mean_coherence: rollouts.iter().map(|r| r.coherence).sum::<f64>() / n,
            objective,
        };
        on_iteration(&m);
        log.push(m);
    }
    Ok((state.model, log))
}

/// Mean classifier score of `samples` sampled responses per context.
#[allow(clippy::too_many_arguments)]
pub fn mean_sampled_coherence<C: CoherenceClassifier + ?Sized>(
    policy: &Seq2SeqModel,
    classifier: &C,
    contexts: &[DialogueContext],
    samples: usize,
    temperature: f64,
    max_length: usize,
    max_input_tokens: usize,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<f64> {
    let dec = DecodeConfig { strategy: Strategy::Sample, max_length, temperature, ..DecodeConfig::default() };
    let mut rng = rng::stream(seed, &[0x6576_616c]);
    let mut total = 0.0;
    for ctx in contexts {
        let src = context_source(&ctx.utterances, max_input_tokens);
        for _ in 0..samples {
            let r = sample_ids(policy, &src, &[], &dec, &mut rng)?;
            if let Some(u) = response_utterance(&r, vocab)? {
                total += classifier.p_coherent(&ctx.utterances, &u)?;
            }
        }
    }
    Ok(total / (contexts.len() * samples).max(1) as f64)
}
