//! MLE training loop with optional scheduled sampling.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{TrainingPair, Utterance, Vocabulary};
use crate::error::{Error, Result};
use crate::model::Seq2SeqModel;
use crate::optim::{AdamW, OptimConfig};
use crate::rng;
use crate::sampling::{batch_loss_and_grads, mix_example, MixedContext, SamplingConfig, StepEnv};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub max_input_tokens: usize,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 32, max_input_tokens: 512, seed: 0, optim: OptimConfig::default() }
    }
}

/// Everything needed to resume training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Seq2SeqModel,
    pub optimizer: AdamW,
    /// Completed epochs; also selects the learning rate and the epoch's rng stream.
    pub epoch: u32,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: Seq2SeqModel, optim: OptimConfig, seed: u64) -> Self {
        let optimizer = AdamW::new(optim, model.params());
        Self { model, optimizer, epoch: 0, step: 0, seed }
    }

    pub fn lr(&self) -> f64 {
        self.optimizer.config.lr_at_epoch(self.epoch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: u32,
    pub lr: f64,
    pub mean_loss: f64,
    pub steps: u64,
    pub examples: usize,
    pub replaced: usize,
}

/// Result of one optimizer step over a batch.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: f64,
    pub mixed: Vec<MixedContext>,
}

/// One update: build mixed contexts with the current parameters (no gradient),
/// then take a gradient step on the golden-response loss.
pub fn hierarchical_training_step<R: rand::Rng>(
    state: &mut TrainState,
    batch: &[&TrainingPair],
    cfg: &SamplingConfig,
    env: &StepEnv<'_>,
    rng: &mut R,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mixed = batch
        .iter()
        .map(|p| mix_example(&state.model, p, cfg, env, rng))
        .collect::<Result<Vec<_>>>()?;
    let contexts: Vec<_> = mixed.iter().map(|m| m.context.clone()).collect();
    let responses: Vec<&Utterance> = batch.iter().map(|p| &p.response).collect();
    let (loss, grads) = batch_loss_and_grads(&state.model, &contexts, &responses, env.max_input_tokens)?;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::Diverged { step: state.step });
    }
    let lr = state.lr();
    state.optimizer.step(state.model.params_mut(), &grads, lr);
    state.step += 1;
    Ok(StepOutcome { loss, mixed })
}

/// One pass over `pairs` in a seeded shuffled order. On divergence the model
/// and optimizer are restored to their state at the start of the epoch.
pub fn train_epoch_sampled(
    state: &mut TrainState,
    pairs: &[TrainingPair],
    batch_size: usize,
    max_input_tokens: usize,
    cfg: &SamplingConfig,
    vocab: &Vocabulary,
    noise_pool: &[Utterance],
) -> Result<EpochReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    if batch_size == 0 {
        return Err(Error::Config("train.batch_size must be ≥ 1".into()));
    }
    cfg.validate()?;
    let snapshot = state.clone();
    let mut rng = rng::stream(state.seed, &[0x7472_6169_6e, state.epoch as u64]);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let env = StepEnv { vocab, noise_pool, max_input_tokens, apply_prob: cfg.apply_prob_at(state.epoch) };
    let lr = state.lr();
    let mut total = 0.0;
    let mut replaced = 0;
    let start_step = state.step;
    for chunk in order.chunks(batch_size) {
        let batch: Vec<&TrainingPair> = chunk.iter().map(|&i| &pairs[i]).collect();
        match hierarchical_training_step(state, &batch, cfg, &env, &mut rng) {
            Ok(out) => {
                total += out.loss * batch.len() as f64;
                replaced += out.mixed.iter().filter(|m| m.replaced_index.is_some()).count();
            }
            Err(e) => {
                let step = state.step;
                *state = snapshot;
                return Err(match e {
                    Error::Diverged { .. } => Error::Diverged { step },
                    other => other,
                });
            }
        }
    }
    let report = EpochReport {
        epoch: state.epoch,
        lr,
        mean_loss: total / pairs.len() as f64,
        steps: state.step - start_step,
        examples: pairs.len(),
        replaced,
    };
    state.epoch += 1;
    Ok(report)
}

/// Golden-context epoch (no replacements).
pub fn train_epoch(
    state: &mut TrainState,
    pairs: &[TrainingPair],
    batch_size: usize,
    max_input_tokens: usize,
    vocab: &Vocabulary,
) -> Result<EpochReport> {
    train_epoch_sampled(state, pairs, batch_size, max_input_tokens, &SamplingConfig::default(), vocab, &[])
}

/// All utterances of the training pairs' dialogues, for the noise baseline.
pub fn utterance_pool(pairs: &[TrainingPair]) -> Vec<Utterance> {
    let mut pool: Vec<Utterance> = Vec::new();
    for p in pairs {
        if p.context.len() == 1 {
            pool.push(p.context.utterances[0].clone());
        }
        pool.push(p.response.clone());
    }
    pool
}

pub fn mean_nll(model: &Seq2SeqModel, pairs: &[TrainingPair], max_input_tokens: usize) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        let src = crate::sampling::context_source(&p.context.utterances, max_input_tokens);
        total += model.nll_loss(&src, &crate::sampling::response_targets(&p.response))?;
    }
    Ok(total / pairs.len().max(1) as f64)
}
