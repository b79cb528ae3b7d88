//! Experiment configuration (TOML) with dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coherence::ClassifierConfig;
use crate::corpus::{ContextPolicy, CorpusFormat};
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rl::RLConfig;
use crate::sampling::SamplingConfig;
use crate::synthetic::SyntheticConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Training dialogues; the synthetic generator is used when absent.
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub format: CorpusFormat,
    pub context_policy: ContextPolicy,
    /// DECODE-style coherence data for the classifier.
    pub coherence: Option<PathBuf>,
    /// Share of coherence examples held out as the dev set.
    pub dev_fraction: f64,
    pub synthetic: SyntheticConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train: None,
            test: None,
            format: CorpusFormat::JsonlDialogue,
            context_policy: ContextPolicy::Full,
            coherence: None,
            dev_fraction: 0.1,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Judge {
    /// Exact keyword oracle.
    #[default]
    Oracle,
    /// Trained classifier loaded from `eval.classifier`.
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Generated turns per self-talk transcript; c_1..c_turns are reported.
    pub turns: usize,
    /// Number of self-talk prompts (D).
    pub prompts: usize,
    pub judge: Judge,
    /// Scorer for beam re-ranking.
    pub reranker: Judge,
    pub classifier: Option<PathBuf>,
    pub probe_turn: usize,
    pub golden_prefixes: Vec<usize>,
    pub rerank_beams: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            turns: 10,
            prompts: 200,
            judge: Judge::Oracle,
            reranker: Judge::Classifier,
            classifier: None,
            probe_turn: 10,
            golden_prefixes: vec![1, 2, 3, 4, 5],
            rerank_beams: vec![1, 5, 10, 20],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub port: u16,
    /// TOML file mapping model ids to checkpoint paths.
    pub registry: Option<PathBuf>,
    pub store_dir: PathBuf,
    pub turn_limit: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { port: 8080, registry: None, store_dir: PathBuf::from("store"), turn_limit: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub workers: usize,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
    pub classifier: ClassifierConfig,
    pub rl: RLConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
    pub serve: ServeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            workers: 1,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sampling: SamplingConfig::default(),
            classifier: ClassifierConfig::default(),
            rl: RLConfig::default(),
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale preset: one narrow layer per side and a fast optimizer.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.model.d_model = 32;
        c.model.d_ff = 64;
        c.model.encoder_layers = 1;
        c.model.decoder_layers = 1;
        c.model.max_positions = 160;
        c.train.epochs = 25;
        c.train.optim.lr = 0.003;
        c.train.optim.weight_decay = 0.0;
        c.train.optim.halve_every = 0;
        c.train.optim.grad_clip = 0.0;
        c.rl.optim.lr = 0.002;
        c.rl.rollouts_per_update = 128;
        c.rl.ppo_epochs = 4;
        c
    }

    /// Sets the master seed and every component seed to `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.corpus.synthetic.seed = seed;
        self.model.init_seed = seed;
        self.train.seed = seed;
        self.classifier.seed = seed;
        self.rl.seed = seed;
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::File { path: path.to_path_buf(), source: e })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.sampling.validate()?;
        self.rl.validate()?;
        self.decode.validate()?;
        self.corpus.synthetic.validate()?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be ≥ 1".into()));
        }
        if self.eval.turns == 0 || self.eval.prompts == 0 {
            return Err(Error::Config("eval.turns and eval.prompts must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.corpus.dev_fraction) {
            return Err(Error::Config("corpus.dev_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Applies `section.key=value`; the value is read as a TOML literal, or
    /// as a bare string if it does not parse as one.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
        let key = key.trim();
        let value = parse_literal(raw.trim());
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (k, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key}: {part} is not inside a table")))?;
            if k + 1 == parts.len() {
                table.insert(part.to_string(), value);
                break;
            }
            node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        }
        let next: Self = root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        next.validate()?;
        *self = next;
        Ok(())
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::SamplingMode;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn overrides() {
        let mut c = ExperimentConfig::default();
        c.apply_override("sampling.mode=hierarchical").unwrap();
        c.apply_override("train.optim.lr=0.003").unwrap();
        c.apply_override("eval.rerank_beams=[1, 2]").unwrap();
        c.apply_override("output_dir=/tmp/x").unwrap();
        assert_eq!(c.sampling.mode, SamplingMode::Hierarchical);
        assert_eq!(c.train.optim.lr, 0.003);
        assert_eq!(c.eval.rerank_beams, vec![1, 2]);
        assert_eq!(c.output_dir, PathBuf::from("/tmp/x"));
        assert!(c.apply_override("sampling.bogus=1").is_err());
        assert!(c.apply_override("sampling.geo_p=2.0").is_err());
        assert!(c.apply_override("novalue").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("[model]\nwidth = 3\n").is_err());
    }
}
