//! Models that can answer inside a session.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use hiersample::checkpoint;
use hiersample::coherence::EncoderClassifier;
use hiersample::corpus::{flat_len, Provenance, Speaker, Utterance, Vocabulary, WhitespaceTokenizer};
use hiersample::decoding::{DecodeConfig, Strategy};
use hiersample::eval::Generator;
use hiersample::model::Seq2SeqModel;
use serde::Deserialize;

use crate::error::{ServiceError, ServiceResult};
use crate::store::{Reply, Role, Turn};

pub trait Responder: Send + Sync {
    /// Reply to the full lane history; must be a pure function of its inputs.
    fn reply(&self, history: &[Turn], seed: u64, rerank: bool) -> ServiceResult<Reply>;

    fn supports_rerank(&self) -> bool {
        false
    }
}

pub type Registry = HashMap<String, Arc<dyn Responder>>;

/// A trained policy with an optional re-ranking classifier.
pub struct ModelResponder {
    pub model: Seq2SeqModel,
    pub vocab: Vocabulary,
    pub decode: DecodeConfig,
    pub reranker: Option<EncoderClassifier>,
    /// Beam width used when a session asks for re-ranking.
    pub rerank_beam: usize,
    pub max_input_tokens: usize,
}

impl ModelResponder {
    fn utterances(&self, history: &[Turn]) -> ServiceResult<Vec<Utterance>> {
        history
            .iter()
            .map(|t| {
                let (speaker, prov) = match t.speaker {
                    Role::Human => (Speaker::Human, Provenance::Golden),
                    Role::Bot => (Speaker::Bot, Provenance::Predicted),
                };
                Utterance::from_text(&t.text, &self.vocab, &WhitespaceTokenizer, speaker, prov)
                    .map_err(|_| ServiceError::Invalid("utterances must contain at least one token".into()))
            })
            .collect()
    }
}

impl Responder for ModelResponder {
    fn reply(&self, history: &[Turn], seed: u64, rerank: bool) -> ServiceResult<Reply> {
        let context = self.utterances(history)?;
        let budget = self.max_input_tokens.min(self.model.config().max_positions);
        let truncated = flat_len(&context) > budget;
        let mut decode = DecodeConfig { seed, ..self.decode.clone() };
        if rerank {
            if self.reranker.is_none() {
                return Err(ServiceError::Invalid("this model has no re-ranking classifier".into()));
            }
            decode.strategy = Strategy::Beam;
            decode.beam_size = self.rerank_beam.max(1);
            decode.rerank = true;
        } else {
            decode.rerank = false;
        }
        let generator =
            Generator { decode: &decode, reranker: self.reranker.as_ref(), max_input_tokens: budget, vocab: &self.vocab };
        let turn = history.iter().filter(|t| t.speaker == Role::Human).count();
        let r = generator.respond(&self.model, &context, seed, turn)?;
        Ok(Reply { text: r.text(), truncated })
    }

    fn supports_rerank(&self) -> bool {
        self.reranker.is_some()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryFile {
    models: HashMap<String, RegistryEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryEntry {
    checkpoint: PathBuf,
    classifier: Option<PathBuf>,
}

/// Loads `[models.<id>] checkpoint = "...", classifier = "..."` entries.
/// Relative paths resolve against the registry file's directory.
pub fn load_registry(path: &Path, decode: &DecodeConfig, rerank_beam: usize, max_input_tokens: usize) -> ServiceResult<Registry> {
    let text = std::fs::read_to_string(path)?;
    let file: RegistryFile = toml::from_str(&text).map_err(|e| ServiceError::Invalid(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reg = Registry::new();
    for (id, entry) in file.models {
        let (model, vocab) = checkpoint::decode_model(&checkpoint::read(&base.join(&entry.checkpoint))?)?;
        let reranker = match entry.classifier {
            Some(p) => {
                let (clf, v) = checkpoint::decode_classifier(&checkpoint::read(&base.join(p))?)?;
                if v.hash() != vocab.hash() {
                    return Err(ServiceError::Invalid(format!("model {id}: classifier vocabulary differs from the policy's")));
                }
                Some(clf)
            }
            None => None,
        };
        let r = ModelResponder { model, vocab, decode: decode.clone(), reranker, rerank_beam, max_input_tokens };
        reg.insert(id, Arc::new(r) as Arc<dyn Responder>);
    }
    Ok(reg)
}
