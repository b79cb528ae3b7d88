//! Versioned binary checkpoints.
//!
//! Layout: `HSCK` magic, u32 version, u64 header length, JSON header, then
//! every tensor as little-endian f64 in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coherence::{ClassifierConfig, EncoderClassifier};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Seq2SeqModel};
use crate::nn::Mat;
use crate::optim::{AdamW, OptimConfig};
use crate::train::TrainState;

pub const MAGIC: &[u8; 4] = b"HSCK";
pub const VERSION: u32 = 1;
const MAX_HEADER: u64 = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Seq2seq,
    Classifier,
    TrainState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: Kind,
    pub config: serde_json::Value,
    pub vocab: Vec<String>,
    pub vocab_hash: String,
    pub tensors: Vec<TensorInfo>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// A parsed but not yet interpreted checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub header: Header,
    pub tensors: Vec<Mat>,
}

impl Archive {
    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let n: usize = self.tensors.iter().map(|t| t.len()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for x in t.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let rest = &bytes[16..];
        if hlen > MAX_HEADER || hlen > rest.len() as u64 {
            return Err(bad("truncated header"));
        }
        let (hbytes, mut data) = rest.split_at(hlen as usize);
        let header: Header = serde_json::from_slice(hbytes).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.vocab.is_empty() {
            return Err(bad("empty vocabulary"));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len().min(4096));
        for info in &header.tensors {
            let [r, c] = info.shape;
            let n = r.checked_mul(c).ok_or_else(|| bad("tensor shape overflows"))?;
            let nbytes = n.checked_mul(8).ok_or_else(|| bad("tensor shape overflows"))?;
            if nbytes > data.len() {
                return Err(Error::Checkpoint(format!("tensor {} is truncated", info.name)));
            }
            let (chunk, tail) = data.split_at(nbytes);
            data = tail;
            let vals: Vec<f64> = chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            tensors.push(Mat::from_shape_vec((r, c), vals).map_err(|e| Error::Checkpoint(e.to_string()))?);
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        Ok(Self { header, tensors })
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let v = Vocabulary::from_list(self.header.vocab.clone())?;
        if v.hash() != self.header.vocab_hash {
            return Err(Error::Checkpoint("vocabulary hash mismatch".into()));
        }
        Ok(v)
    }

    fn expect(&self, kind: Kind) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind:?} checkpoint, found {:?}", self.header.kind)));
        }
        Ok(())
    }

    fn config<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.header.config.clone()).map_err(|e| Error::Checkpoint(format!("config: {e}")))
    }

    fn check_names(&self, names: &[String], range: std::ops::Range<usize>) -> Result<()> {
        let got = &self.header.tensors[range];
        if got.len() != names.len() || got.iter().zip(names).any(|(t, n)| &t.name != n) {
            return Err(Error::Checkpoint("tensor names do not match the model layout".into()));
        }
        Ok(())
    }
}

fn tensor_infos<'a>(names: impl Iterator<Item = String>, values: impl Iterator<Item = &'a Mat>) -> Vec<TensorInfo> {
    names.zip(values).map(|(name, v)| TensorInfo { name, shape: [v.nrows(), v.ncols()] }).collect()
}

fn header(kind: Kind, config: serde_json::Value, vocab: &Vocabulary, tensors: Vec<TensorInfo>, extra: serde_json::Value) -> Header {
    Header { kind, config, vocab: vocab.words().to_vec(), vocab_hash: vocab.hash(), tensors, extra }
}

fn check_vocab_size(expected: usize, vocab: &Vocabulary) -> Result<()> {
    if expected != vocab.len() {
        return Err(Error::Checkpoint("vocabulary size does not match the config".into()));
    }
    Ok(())
}

pub fn encode_model(model: &Seq2SeqModel, vocab: &Vocabulary) -> Vec<u8> {
    let p = model.params();
    let infos = tensor_infos(p.names().iter().cloned(), p.values().iter());
    let cfg = serde_json::to_value(model.config()).expect("config serializes");
    Archive { header: header(Kind::Seq2seq, cfg, vocab, infos, serde_json::Value::Null), tensors: p.values().to_vec() }.encode()
}

pub fn decode_model(bytes: &[u8]) -> Result<(Seq2SeqModel, Vocabulary)> {
    let a = Archive::decode(bytes)?;
    a.expect(Kind::Seq2seq)?;
    let vocab = a.vocabulary()?;
    let cfg: ModelConfig = a.config()?;
    check_vocab_size(cfg.vocab_size, &vocab)?;
    let mut model = Seq2SeqModel::new(cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
    a.check_names(model.params().names(), 0..a.header.tensors.len())?;
    model.load_params(a.tensors)?;
    Ok((model, vocab))
}

#[derive(Serialize, Deserialize)]
struct ClassifierExtra {
    vocab_size: usize,
}

pub fn encode_classifier(clf: &EncoderClassifier, vocab: &Vocabulary) -> Vec<u8> {
    let p = clf.params();
    let infos = tensor_infos(p.names().iter().cloned(), p.values().iter());
    let cfg = serde_json::to_value(clf.config()).expect("config serializes");
    let extra = serde_json::to_value(ClassifierExtra { vocab_size: clf.vocab_size() }).expect("serializes");
    Archive { header: header(Kind::Classifier, cfg, vocab, infos, extra), tensors: p.values().to_vec() }.encode()
}

pub fn decode_classifier(bytes: &[u8]) -> Result<(EncoderClassifier, Vocabulary)> {
    let a = Archive::decode(bytes)?;
    a.expect(Kind::Classifier)?;
    let vocab = a.vocabulary()?;
    let cfg: ClassifierConfig = a.config()?;
    let extra: ClassifierExtra =
        serde_json::from_value(a.header.extra.clone()).map_err(|e| Error::Checkpoint(format!("extra: {e}")))?;
    check_vocab_size(extra.vocab_size, &vocab)?;
    let mut clf = EncoderClassifier::new(cfg, extra.vocab_size).map_err(|e| Error::Checkpoint(e.to_string()))?;
    a.check_names(clf.params().names(), 0..a.header.tensors.len())?;
    clf.load_params(a.tensors)?;
    Ok((clf, vocab))
}

#[derive(Serialize, Deserialize)]
struct StateExtra {
    optim: OptimConfig,
    epoch: u32,
    step: u64,
    seed: u64,
    adam_t: u64,
}

pub fn encode_train_state(state: &TrainState, vocab: &Vocabulary) -> Vec<u8> {
    let p = state.model.params();
    let names = p
        .names()
        .iter()
        .cloned()
        .chain(p.names().iter().map(|n| format!("adam.m.{n}")))
        .chain(p.names().iter().map(|n| format!("adam.v.{n}")));
    let values: Vec<Mat> =
        p.values().iter().chain(&state.optimizer.m).chain(&state.optimizer.v).cloned().collect();
    let infos = tensor_infos(names, values.iter());
    let cfg = serde_json::to_value(state.model.config()).expect("config serializes");
    let extra = serde_json::to_value(StateExtra {
        optim: state.optimizer.config.clone(),
        epoch: state.epoch,
        step: state.step,
        seed: state.seed,
        adam_t: state.optimizer.t,
    })
    .expect("serializes");
    Archive { header: header(Kind::TrainState, cfg, vocab, infos, extra), tensors: values }.encode()
}

pub fn decode_train_state(bytes: &[u8]) -> Result<(TrainState, Vocabulary)> {
    let a = Archive::decode(bytes)?;
    a.expect(Kind::TrainState)?;
    let vocab = a.vocabulary()?;
    let cfg: ModelConfig = a.config()?;
    check_vocab_size(cfg.vocab_size, &vocab)?;
    let extra: StateExtra =
        serde_json::from_value(a.header.extra.clone()).map_err(|e| Error::Checkpoint(format!("extra: {e}")))?;
    let mut model = Seq2SeqModel::new(cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n = model.params().len();
    if a.tensors.len() != 3 * n {
        return Err(Error::Checkpoint("train state needs parameters plus both moment buffers".into()));
    }
    a.check_names(model.params().names(), 0..n)?;
    let mut tensors = a.tensors;
    let v = tensors.split_off(2 * n);
    let m = tensors.split_off(n);
    if m.iter().chain(&v).zip(tensors.iter().chain(&tensors)).any(|(a, b)| a.dim() != b.dim()) {
        return Err(Error::Checkpoint("moment buffer shapes do not match the parameters".into()));
    }
    model.load_params(tensors)?;
    let optimizer = AdamW { config: extra.optim, m, v, t: extra.adam_t };
    Ok((TrainState { model, optimizer, epoch: extra.epoch, step: extra.step, seed: extra.seed }, vocab))
}

/// Reads only the kind of a checkpoint file.
pub fn peek_kind(bytes: &[u8]) -> Result<Kind> {
    Ok(Archive::decode(bytes)?.header.kind)
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::File { path: path.to_path_buf(), source: e })
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::File { path: path.to_path_buf(), source: e })
}
