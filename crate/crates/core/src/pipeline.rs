//! Config-driven glue shared by the CLI, the service and the acceptance runs.

use rand::seq::SliceRandom;

use crate::coherence::{encode_coherence_examples, CoherenceClassifier, parse_coherence_jsonl, CoherenceExample, RawCoherenceExample};
use crate::config::ExperimentConfig;
use crate::corpus::{
    encode_dialogues, load_dialogues, make_all_pairs, ContextPolicy, Dialogue, DialogueContext, RawDialogue, TrainingPair, Utterance, Vocabulary,
    WhitespaceTokenizer,
};
use crate::decoding::{DecodeConfig, Strategy};
use crate::error::{Error, Result};
use crate::eval::{self_talk_batch, Generator, SelfTalkTranscript};
use crate::model::{ModelConfig, Seq2SeqModel};
use crate::rng;
use crate::synthetic::{coherence_examples, generate_coherence_dialogues, generate_split};
use crate::train::{train_epoch_sampled, utterance_pool, EpochReport, TrainState};

#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub train_raw: Vec<RawDialogue>,
    pub test_raw: Vec<RawDialogue>,
    pub train: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

impl Corpus {
    pub fn from_raw(train_raw: Vec<RawDialogue>, test_raw: Vec<RawDialogue>, vocab: Vocabulary) -> Result<Self> {
        let tok = WhitespaceTokenizer;
        let train = encode_dialogues(&train_raw, &vocab, &tok)?;
        let test = encode_dialogues(&test_raw, &vocab, &tok)?;
        Ok(Self { vocab, train_raw, test_raw, train, test })
    }

    pub fn pairs(&self, cfg: &ExperimentConfig) -> Vec<TrainingPair> {
        make_all_pairs(&self.train, cfg.corpus.context_policy)
    }

    /// First utterances of the first `n` test dialogues.
    pub fn prompts(&self, n: usize) -> Result<Vec<Utterance>> {
        if self.test.len() < n {
            return Err(Error::invalid(format!("{n} prompts requested but the test split has {}", self.test.len())));
        }
        Ok(self.test[..n].iter().map(|d| d.utterances[0].clone()).collect())
    }
}

/// Loads the configured corpus files, or generates the synthetic corpus when
/// no training file is given. The vocabulary is closed over the training split.
pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let tok = WhitespaceTokenizer;
    match &cfg.corpus.train {
        Some(path) => {
            let train = load_dialogues(path, cfg.corpus.format)?;
            let test = match &cfg.corpus.test {
                Some(p) => load_dialogues(p, cfg.corpus.format)?,
                None => Vec::new(),
            };
            let vocab = Vocabulary::build(&train, &tok);
            Corpus::from_raw(train, test, vocab)
        }
        None => {
            let (train, test) = generate_split(&cfg.corpus.synthetic)?;
            Corpus::from_raw(train, test, Vocabulary::new(cfg.corpus.synthetic.words()))
        }
    }
}

pub fn model_config(cfg: &ExperimentConfig, vocab: &Vocabulary) -> ModelConfig {
    ModelConfig { vocab_size: vocab.len(), ..cfg.model.clone() }
}

/// MLE training under the configured sampling mode.
pub fn train_policy(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    mut on_epoch: impl FnMut(&TrainState, &EpochReport),
) -> Result<TrainState> {
    let model = Seq2SeqModel::new(model_config(cfg, &corpus.vocab))?;
    let mut state = TrainState::new(model, cfg.train.optim.clone(), cfg.train.seed);
    continue_training(&mut state, cfg, corpus, &mut on_epoch)?;
    Ok(state)
}

/// Runs the remaining epochs of `state` up to `cfg.train.epochs`.
pub fn continue_training(
    state: &mut TrainState,
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    on_epoch: &mut dyn FnMut(&TrainState, &EpochReport),
) -> Result<()> {
    let pairs = corpus.pairs(cfg);
    if pairs.is_empty() {
        return Err(Error::invalid("the training split yields no context-response pairs"));
    }
    let pool = utterance_pool(&pairs);
    while state.epoch < cfg.train.epochs {
        let report = train_epoch_sampled(
            state,
            &pairs,
            cfg.train.batch_size,
            cfg.train.max_input_tokens,
            &cfg.sampling,
            &corpus.vocab,
            &pool,
        )?;
        on_epoch(state, &report);
    }
    Ok(())
}

/// Coherence data from `corpus.coherence`, or pairs derived from the
/// synthetic training split; returns (train, dev).
pub fn coherence_data(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<(Vec<CoherenceExample>, Vec<CoherenceExample>)> {
    let mut raw: Vec<RawCoherenceExample> = match &cfg.corpus.coherence {
        Some(path) => {
            let f = std::fs::File::open(path).map_err(|e| Error::File { path: path.clone(), source: e })?;
            parse_coherence_jsonl(std::io::BufReader::new(f))?
        }
        None if cfg.corpus.train.is_none() && cfg.corpus.synthetic.coherence_dialogues > 0 => {
            let dialogues = generate_coherence_dialogues(&cfg.corpus.synthetic)?;
            coherence_examples(&dialogues, &mut rng::stream(cfg.seed, &[0x636c66]))
        }
        None => coherence_examples(&corpus.train_raw, &mut rng::stream(cfg.seed, &[0x636c66])),
    };
    raw.shuffle(&mut rng::stream(cfg.seed, &[0x636c66, 1]));
    let examples = encode_coherence_examples(&raw, &corpus.vocab, &WhitespaceTokenizer)?;
    let n_dev = ((examples.len() as f64) * cfg.corpus.dev_fraction).round() as usize;
    let mut train = examples;
    let dev = train.split_off(train.len() - n_dev.min(train.len()));
    Ok((train, dev))
}

/// Rollout contexts drawn from `dialogues` per `rl.context_utterances`.
pub fn rl_contexts(cfg: &ExperimentConfig, dialogues: &[Dialogue]) -> Result<Vec<DialogueContext>> {
    let n = cfg.rl.context_utterances;
    let out: Vec<DialogueContext> = if n == 0 {
        make_all_pairs(dialogues, ContextPolicy::Full).into_iter().map(|p| p.context).collect()
    } else {
        dialogues.iter().filter(|d| d.utterances.len() > n).map(|d| DialogueContext::new(d.utterances[..n].to_vec())).collect()
    };
    if out.is_empty() {
        return Err(Error::invalid(format!("no dialogue has more than {n} utterances")));
    }
    Ok(out)
}

/// Self-talk on the first `eval.prompts` test prompts with `eval.turns`
/// generated turns each, labelled by `judge`.
pub fn run_self_talk<C: CoherenceClassifier + ?Sized, J: CoherenceClassifier + ?Sized>(
    cfg: &ExperimentConfig,
    model: &Seq2SeqModel,
    corpus: &Corpus,
    decode: &DecodeConfig,
    reranker: Option<&C>,
    judge: Option<&J>,
    model_id: &str,
) -> Result<Vec<SelfTalkTranscript>> {
    let prompts = corpus.prompts(cfg.eval.prompts)?;
    let generator = Generator { decode, reranker, max_input_tokens: cfg.train.max_input_tokens, vocab: &corpus.vocab };
    self_talk_batch(model, &prompts, cfg.eval.turns + 1, &generator, judge, model_id, cfg.seed)
}

/// Decoder settings for one point of the re-ranking sweep; beam 1 is plain greedy.
pub fn rerank_decode(cfg: &ExperimentConfig, beam: usize) -> DecodeConfig {
    if beam <= 1 {
        DecodeConfig { strategy: Strategy::Greedy, beam_size: 1, rerank: false, ..cfg.decode.clone() }
    } else {
        DecodeConfig { strategy: Strategy::Beam, beam_size: beam, rerank: true, ..cfg.decode.clone() }
    }
}
