//! Dialogue data: tokens, vocabulary, utterances, contexts and training pairs.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const CLS: TokenId = 4;
pub const UNK: TokenId = 5;
pub const HUMAN: TokenId = 6;
pub const BOT: TokenId = 7;

const SPECIALS: [&str; 8] = ["<pad>", "<bos>", "<eos>", "<sep>", "<cls>", "<unk>", "<human>", "<bot>"];

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    pub id: TokenId,
    pub surface: String,
}

/// Closed surface/id bijection. Special tokens occupy the first ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    itos: Vec<String>,
    stoi: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from the given words (deduplicated, sorted) after the specials.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| !SPECIALS.contains(&w.as_str()))
            .collect();
        let itos: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(set).collect();
        Self::from_list(itos).expect("specials are distinct")
    }

    /// Rebuilds a vocabulary from its exact id order, as stored in checkpoints.
    pub fn from_list(itos: Vec<String>) -> Result<Self> {
        if itos.len() < SPECIALS.len() || itos[..SPECIALS.len()].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::invalid("vocabulary does not start with the special tokens"));
        }
        let mut stoi = HashMap::with_capacity(itos.len());
        for (i, s) in itos.iter().enumerate() {
            if stoi.insert(s.clone(), i as TokenId).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary entry {s:?}")));
            }
        }
        Ok(Self { itos, stoi })
    }

    pub fn build(dialogues: &[RawDialogue], tokenizer: &dyn Tokenizer) -> Self {
        Self::new(dialogues.iter().flat_map(|d| d.turns.iter()).flat_map(|t| tokenizer.split(&t.text)))
    }

    pub fn len(&self) -> usize {
        self.itos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.itos.is_empty()
    }

    pub fn id(&self, surface: &str) -> TokenId {
        self.stoi.get(surface).copied().unwrap_or(UNK)
    }

    pub fn get(&self, surface: &str) -> Option<TokenId> {
        self.stoi.get(surface).copied()
    }

    pub fn surface(&self, id: TokenId) -> &str {
        self.itos.get(id as usize).map(String::as_str).unwrap_or(SPECIALS[UNK as usize])
    }

    pub fn token(&self, id: TokenId) -> Token {
        Token { id, surface: self.surface(id).to_string() }
    }

    pub fn words(&self) -> &[String] {
        &self.itos
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < SPECIALS.len()
    }

    /// Hex sha256 over the id-ordered surfaces; embedded in checkpoints.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.itos {
            h.update(s.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn tokens(&self, ids: &[TokenId]) -> Vec<Token> {
        ids.iter().map(|&id| self.token(id)).collect()
    }
}

/// Splits text into surface tokens.
pub trait Tokenizer {
    fn split(&self, text: &str) -> Vec<String>;
}

/// Whitespace split with lowercasing.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn split(&self, text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_lowercase).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Human,
    Bot,
    #[default]
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    #[default]
    Golden,
    Predicted,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Utterance {
    pub tokens: Vec<Token>,
    pub speaker: Speaker,
    pub provenance: Provenance,
}

impl Utterance {
    pub fn new(tokens: Vec<Token>, speaker: Speaker, provenance: Provenance) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("utterance must contain at least one token"));
        }
        if tokens.iter().any(|t| t.id == PAD) {
            return Err(Error::invalid("utterance contains a PAD token"));
        }
        Ok(Self { tokens, speaker, provenance })
    }

    /// Encodes text with the tokenizer; out-of-vocabulary words map to UNK.
    pub fn from_text(
        text: &str,
        vocab: &Vocabulary,
        tokenizer: &dyn Tokenizer,
        speaker: Speaker,
        provenance: Provenance,
    ) -> Result<Self> {
        let tokens = tokenizer
            .split(text)
            .into_iter()
            .map(|s| Token { id: vocab.id(&s), surface: s })
            .collect();
        Self::new(tokens, speaker, provenance)
    }

    pub fn from_ids(ids: &[TokenId], vocab: &Vocabulary, speaker: Speaker, provenance: Provenance) -> Result<Self> {
        Self::new(vocab.tokens(ids), speaker, provenance)
    }

    pub fn ids(&self) -> Vec<TokenId> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens.iter().map(|t| t.surface.as_str()).collect::<Vec<_>>().join(" ")
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }
}

/// Ordered dialogue history fed to the encoder.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DialogueContext {
    pub utterances: Vec<Utterance>,
}

impl DialogueContext {
    pub fn new(utterances: Vec<Utterance>) -> Self {
        Self { utterances }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Token count after concatenation with one SEP between utterances.
    pub fn flat_len(&self) -> usize {
        flat_len(&self.utterances)
    }

    pub fn flatten(&self) -> Vec<TokenId> {
        flatten(&self.utterances)
    }

    pub fn truncate(&self, max_input_tokens: usize) -> DialogueContext {
        truncate_context(self, max_input_tokens)
    }
}

impl From<Vec<Utterance>> for DialogueContext {
    fn from(utterances: Vec<Utterance>) -> Self {
        Self { utterances }
    }
}

pub fn flat_len(utterances: &[Utterance]) -> usize {
    let tokens: usize = utterances.iter().map(Utterance::len).sum();
    tokens + utterances.len().saturating_sub(1)
}

pub fn flatten(utterances: &[Utterance]) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(flat_len(utterances));
    for (k, u) in utterances.iter().enumerate() {
        if k > 0 {
            out.push(SEP);
        }
        out.extend(u.tokens.iter().map(|t| t.id));
    }
    out
}

/// Drops whole utterances from the oldest side, then the oldest tokens of the
/// most recent utterance, until the flattened length fits the budget.
pub fn truncate_context(context: &DialogueContext, max_input_tokens: usize) -> DialogueContext {
    let budget = max_input_tokens.max(1);
    let utts = &context.utterances;
    if flat_len(utts) <= budget {
        return context.clone();
    }
    let mut start = 0;
    while start + 1 < utts.len() && flat_len(&utts[start..]) > budget {
        start += 1;
    }
    let mut kept: Vec<Utterance> = utts[start..].to_vec();
    if flat_len(&kept) > budget {
        // only the most recent utterance remains
        let last = &mut kept[0];
        let drop = last.tokens.len() - budget;
        last.tokens.drain(..drop);
    }
    DialogueContext::new(kept)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingPair {
    pub context: DialogueContext,
    pub response: Utterance,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub topic: Option<String>,
    pub utterances: Vec<Utterance>,
}

impl Dialogue {
    pub fn to_raw(&self) -> RawDialogue {
        RawDialogue {
            id: self.id.clone(),
            topic: self.topic.clone(),
            turns: self
                .utterances
                .iter()
                .map(|u| RawTurn { speaker: u.speaker, text: u.text() })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextPolicy {
    #[default]
    Full,
    LastOne,
}

pub fn make_training_pairs(dialogue: &Dialogue, policy: ContextPolicy) -> Vec<TrainingPair> {
    let u = &dialogue.utterances;
    (1..u.len())
        .map(|k| {
            let context = match policy {
                ContextPolicy::Full => u[..k].to_vec(),
                ContextPolicy::LastOne => vec![u[k - 1].clone()],
            };
            TrainingPair { context: DialogueContext::new(context), response: u[k].clone() }
        })
        .collect()
}

pub fn make_all_pairs(dialogues: &[Dialogue], policy: ContextPolicy) -> Vec<TrainingPair> {
    dialogues.iter().flat_map(|d| make_training_pairs(d, policy)).collect()
}

/// Text-level turn as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTurn {
    #[serde(default)]
    pub speaker: Speaker,
    pub text: String,
}

/// Text-level dialogue record: `{"id", "topic", "turns": [{"speaker", "text"}]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDialogue {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    pub turns: Vec<RawTurn>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    #[default]
    JsonlDialogue,
    /// One turn per line; a blank line ends a dialogue.
    PlainTurns,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl-dialogue" | "jsonl" => Ok(Self::JsonlDialogue),
            "plain-turns" | "plain" => Ok(Self::PlainTurns),
            other => Err(Error::invalid(format!("unknown corpus format {other:?}"))),
        }
    }
}

fn check_dialogue(d: &RawDialogue, line: usize) -> Result<()> {
    if d.turns.len() < 2 {
        return Err(Error::parse(line, format!("dialogue {:?} has fewer than 2 turns", d.id)));
    }
    if let Some(k) = d.turns.iter().position(|t| t.text.split_whitespace().next().is_none()) {
        return Err(Error::parse(line, format!("dialogue {:?} turn {} is empty", d.id, k + 1)));
    }
    Ok(())
}

pub fn parse_dialogues<R: BufRead>(reader: R, format: CorpusFormat) -> Result<Vec<RawDialogue>> {
    match format {
        CorpusFormat::JsonlDialogue => parse_jsonl(reader),
        CorpusFormat::PlainTurns => parse_plain(reader),
    }
}

fn parse_jsonl<R: BufRead>(reader: R) -> Result<Vec<RawDialogue>> {
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: RawDialogue = serde_json::from_str(&line).map_err(|e| Error::parse(k + 1, e))?;
        check_dialogue(&d, k + 1)?;
        out.push(d);
    }
    Ok(out)
}

fn parse_plain<R: BufRead>(reader: R) -> Result<Vec<RawDialogue>> {
    let mut out = Vec::new();
    let mut turns = Vec::new();
    let mut first_line = 1;
    let flush = |turns: &mut Vec<RawTurn>, first_line: usize, out: &mut Vec<RawDialogue>| -> Result<()> {
        if turns.is_empty() {
            return Ok(());
        }
        let d = RawDialogue { id: format!("d{}", out.len()), topic: None, turns: std::mem::take(turns) };
        check_dialogue(&d, first_line)?;
        out.push(d);
        Ok(())
    };
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            flush(&mut turns, first_line, &mut out)?;
            continue;
        }
        if turns.is_empty() {
            first_line = k + 1;
        }
        turns.push(RawTurn { speaker: Speaker::Unknown, text: line.trim().to_string() });
    }
    flush(&mut turns, first_line, &mut out)?;
    Ok(out)
}

pub fn load_dialogues(path: &Path, format: CorpusFormat) -> Result<Vec<RawDialogue>> {
    let f = std::fs::File::open(path).map_err(|source| Error::File { path: path.to_path_buf(), source })?;
    parse_dialogues(BufReader::new(f), format)
}

pub fn write_dialogues<W: Write>(mut w: W, dialogues: &[RawDialogue]) -> Result<()> {
    for d in dialogues {
        serde_json::to_writer(&mut w, d).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dialogues(path: &Path, dialogues: &[RawDialogue]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|source| Error::File { path: path.to_path_buf(), source })?;
    write_dialogues(std::io::BufWriter::new(f), dialogues)
}

pub fn encode_dialogue(raw: &RawDialogue, vocab: &Vocabulary, tokenizer: &dyn Tokenizer) -> Result<Dialogue> {
    let utterances = raw
        .turns
        .iter()
        .map(|t| Utterance::from_text(&t.text, vocab, tokenizer, t.speaker, Provenance::Golden))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dialogue { id: raw.id.clone(), topic: raw.topic.clone(), utterances })
}

pub fn encode_dialogues(raw: &[RawDialogue], vocab: &Vocabulary, tokenizer: &dyn Tokenizer) -> Result<Vec<Dialogue>> {
    raw.iter().map(|d| encode_dialogue(d, vocab, tokenizer)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["a", "b", "c", "+f1", "-f1"])
    }

    fn utt(v: &Vocabulary, text: &str) -> Utterance {
        Utterance::from_text(text, v, &WhitespaceTokenizer, Speaker::Unknown, Provenance::Golden).unwrap()
    }

    fn sized(n: usize) -> Utterance {
        let v = vocab();
        Utterance::new(vec![v.token(v.id("a")); n], Speaker::Unknown, Provenance::Golden).unwrap()
    }

    #[test]
    fn specials_are_distinct_and_first() {
        let v = vocab();
        let ids = [PAD, BOS, EOS, SEP, CLS, UNK];
        let set: BTreeSet<_> = ids.iter().collect();
        assert_eq!(set.len(), ids.len());
        assert_eq!(v.surface(SEP), "<sep>");
        assert!(v.len() >= 5);
        assert_eq!(v.id("zzz"), UNK);
    }

    #[test]
    fn vocabulary_roundtrips_through_its_list() {
        let v = vocab();
        let w = Vocabulary::from_list(v.words().to_vec()).unwrap();
        assert_eq!(v, w);
        assert_eq!(v.hash(), w.hash());
        assert_ne!(v.hash(), Vocabulary::new(["a"]).hash());
    }

    #[test]
    fn tokenize_detokenize_identity() {
        let v = vocab();
        let u = utt(&v, "a +f1 b");
        assert_eq!(u.text(), "a +f1 b");
    }

    #[test]
    fn rejects_empty_and_pad() {
        assert!(Utterance::new(vec![], Speaker::Unknown, Provenance::Golden).is_err());
        let v = vocab();
        assert!(Utterance::new(vec![v.token(PAD)], Speaker::Unknown, Provenance::Golden).is_err());
    }

    #[test]
    fn flatten_inserts_separators() {
        let v = vocab();
        let ctx = DialogueContext::new(vec![utt(&v, "a b"), utt(&v, "c")]);
        assert_eq!(ctx.flatten(), vec![v.id("a"), v.id("b"), SEP, v.id("c")]);
        assert_eq!(ctx.flat_len(), 4);
    }

    #[test]
    fn pairs_full_and_last_one() {
        let v = vocab();
        let d = Dialogue {
            id: "x".into(),
            topic: None,
            utterances: vec![utt(&v, "a"), utt(&v, "b"), utt(&v, "c"), utt(&v, "a b")],
        };
        let full = make_training_pairs(&d, ContextPolicy::Full);
        assert_eq!(full.iter().map(|p| p.context.len()).collect::<Vec<_>>(), vec![1, 2, 3]);
        let last = make_training_pairs(&d, ContextPolicy::LastOne);
        assert_eq!(last.len(), 3);
        assert!(last.iter().all(|p| p.context.len() == 1));
        assert_eq!(last[2].context.utterances[0], d.utterances[2]);
        assert_eq!(last[2].response, d.utterances[3]);

        let short = Dialogue { id: "y".into(), topic: None, utterances: vec![utt(&v, "a")] };
        assert!(make_training_pairs(&short, ContextPolicy::Full).is_empty());
        let two = Dialogue { id: "z".into(), topic: None, utterances: vec![utt(&v, "a"), utt(&v, "b")] };
        assert_eq!(make_training_pairs(&two, ContextPolicy::Full).len(), 1);
    }

    #[test]
    fn truncation_examples() {
        let ctx = DialogueContext::new(vec![sized(3), sized(4), sized(1)]);
        assert_eq!(ctx.truncate(512), ctx);

        // separators count toward the budget, so 300+1+300+1+100 overflows and
        // 300+1+100 fits
        let ctx = DialogueContext::new(vec![sized(300), sized(300), sized(100)]);
        let t = ctx.truncate(512);
        assert_eq!(t.utterances.iter().map(Utterance::len).collect::<Vec<_>>(), vec![300, 100]);

        let v = vocab();
        let mut toks: Vec<Token> = (0..600).map(|i| v.token(if i < 88 { v.id("b") } else { v.id("a") })).collect();
        toks[0] = v.token(v.id("c"));
        let ctx = DialogueContext::new(vec![Utterance::new(toks, Speaker::Unknown, Provenance::Golden).unwrap()]);
        let t = ctx.truncate(512);
        assert_eq!(t.utterances[0].len(), 512);
        assert!(t.utterances[0].tokens.iter().all(|t| t.surface == "a"));
    }

    #[test]
    fn parse_jsonl_reports_line_numbers() {
        let data = "{\"id\":\"a\",\"turns\":[{\"speaker\":\"human\",\"text\":\"hi\"},{\"text\":\"yo\"}]}\n\
                    {\"id\":\"b\",\"turns\":[{\"text\":\"x\"},{\"text\":\"  \"}]}\n";
        let err = parse_dialogues(data.as_bytes(), CorpusFormat::JsonlDialogue).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_dialogues("{bad\n".as_bytes(), CorpusFormat::JsonlDialogue).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        assert!(parse_dialogues("".as_bytes(), CorpusFormat::JsonlDialogue).unwrap().is_empty());
    }

    #[test]
    fn parse_plain_turns() {
        let data = "hello there\nhi\n\nx\ny\nz\n";
        let ds = parse_dialogues(data.as_bytes(), CorpusFormat::PlainTurns).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds[1].turns.len(), 3);
        let err = parse_dialogues("a\nb\n\nlonely\n".as_bytes(), CorpusFormat::PlainTurns).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }));
    }
}
