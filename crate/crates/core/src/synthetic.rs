//! Keyword-chain dialogues with exact ground truth.
//!
//! Each dialogue fixes a hidden polarity for every fact `fK`. Turns assert
//! facts as `+fK` / `-fK` tokens, always with the dialogue's polarity, so
//! golden dialogues never contradict themselves under [`KeywordOracle`]. After
//! the prompt, each turn asserts one fact: a fresh one with probability
//! `new_p`, otherwise a recency-weighted revisit of a mentioned fact.
//!
//! [`KeywordOracle`]: crate::coherence::KeywordOracle

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coherence::{parse_assertion, Label, RawCoherenceExample};
use crate::corpus::{RawDialogue, RawTurn, Speaker};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub train_dialogues: usize,
    pub test_dialogues: usize,
    pub facts: usize,
    pub fillers: usize,
    pub prompt_facts: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    /// Probability of a filler word leading a turn.
    pub filler_p: f64,
    /// Probability of asserting an unmentioned fact.
    pub new_p: f64,
    /// Revisit weight decay per step back in mention order.
    pub recency: f64,
    /// Probability a fact is positive.
    pub prior: f64,
    /// Revisits skip the facts of the previous turn when another fact is available.
    pub no_repeat: bool,
    /// Dialogues drawn from a third stream for classifier data; 0 reuses the train split.
    pub coherence_dialogues: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train_dialogues: 300,
            test_dialogues: 1000,
            facts: 10,
            fillers: 6,
            prompt_facts: 2,
            min_turns: 6,
            max_turns: 12,
            filler_p: 0.5,
            new_p: 0.6,
            recency: 0.5,
            prior: 0.5,
            no_repeat: false,
            coherence_dialogues: 1000,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic.{m}")));
        if self.facts == 0 || self.prompt_facts == 0 || self.prompt_facts > self.facts {
            return bad("prompt_facts must be in 1..=facts");
        }
        if self.min_turns < 2 || self.max_turns < self.min_turns {
            return bad("turn range must satisfy 2 ≤ min_turns ≤ max_turns");
        }
        for (name, p) in [("filler_p", self.filler_p), ("new_p", self.new_p), ("prior", self.prior)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must be a probability"));
            }
        }
        if !(self.recency > 0.0 && self.recency.is_finite()) {
            return bad("recency must be positive");
        }
        if self.filler_p > 0.0 && self.fillers == 0 {
            return bad("fillers must be ≥ 1 when filler_p > 0");
        }
        Ok(())
    }

    /// Every surface the generator can emit.
    pub fn words(&self) -> Vec<String> {
        let mut w: Vec<String> = (0..self.fillers).map(|k| format!("w{k}")).collect();
        for k in 0..self.facts {
            w.push(format!("+f{k}"));
            w.push(format!("-f{k}"));
        }
        w
    }
}

fn fact_token(fact: usize, positive: bool) -> String {
    format!("{}f{fact}", if positive { '+' } else { '-' })
}

pub fn generate_dialogue<R: Rng>(cfg: &SyntheticConfig, id: String, rng: &mut R) -> RawDialogue {
    let polarity: Vec<bool> = (0..cfg.facts).map(|_| rng.random_bool(cfg.prior)).collect();
    let n = rng.random_range(cfg.min_turns..=cfg.max_turns);
    let mut asserted: Vec<usize> = Vec::new();
    let mut turns: Vec<Vec<String>> = Vec::with_capacity(n);

    let mut first = Vec::new();
    if rng.random_bool(cfg.filler_p) {
        first.push(format!("w{}", rng.random_range(0..cfg.fillers)));
    }
    let all: Vec<usize> = (0..cfg.facts).collect();
    let mut last_facts: Vec<usize> = Vec::new();
    for &f in all.choose_multiple(rng, cfg.prompt_facts) {
        first.push(fact_token(f, polarity[f]));
        asserted.push(f);
        last_facts.push(f);
    }
    turns.push(first);

    for _ in 1..n {
        let mut u = Vec::new();
        if rng.random_bool(cfg.filler_p) {
            u.push(format!("w{}", rng.random_range(0..cfg.fillers)));
        }
        let unused: Vec<usize> = all.iter().copied().filter(|f| !asserted.contains(f)).collect();
        let fact = if !unused.is_empty() && rng.random_bool(cfg.new_p) {
            *unused.choose(rng).expect("non-empty")
        } else {
            let mut recent: Vec<usize> = Vec::new();
            for &f in asserted.iter().rev() {
                if !recent.contains(&f) {
                    recent.push(f);
                }
            }
            if cfg.no_repeat {
                let last = &last_facts;
                let rest: Vec<usize> = recent.iter().copied().filter(|f| !last.contains(f)).collect();
                if !rest.is_empty() {
                    recent = rest;
                }
            }
            let weights: Vec<(usize, f64)> =
                recent.iter().enumerate().map(|(k, &f)| (f, cfg.recency.powi(k as i32))).collect();
            weights.choose_weighted(rng, |w| w.1).expect("positive weights").0
        };
        u.push(fact_token(fact, polarity[fact]));
        asserted.push(fact);
        last_facts = vec![fact];
        turns.push(u);
    }

    let turns = turns
        .into_iter()
        .enumerate()
        .map(|(k, t)| RawTurn { speaker: if k % 2 == 0 { Speaker::Human } else { Speaker::Bot }, text: t.join(" ") })
        .collect();
    RawDialogue { id, topic: Some("keyword-chain".into()), turns }
}

/// Train and test splits drawn from independent streams of `cfg.seed`.
pub fn generate_split(cfg: &SyntheticConfig) -> Result<(Vec<RawDialogue>, Vec<RawDialogue>)> {
    cfg.validate()?;
    let mut r = rng::stream(cfg.seed, &[0x73796e, 0]);
    let train = (0..cfg.train_dialogues).map(|k| generate_dialogue(cfg, format!("train-{k}"), &mut r)).collect();
    let mut r = rng::stream(cfg.seed, &[0x73796e, 1]);
    let test = (0..cfg.test_dialogues).map(|k| generate_dialogue(cfg, format!("test-{k}"), &mut r)).collect();
    Ok((train, test))
}

/// Dialogues for classifier training, disjoint in stream from both splits.
pub fn generate_coherence_dialogues(cfg: &SyntheticConfig) -> Result<Vec<RawDialogue>> {
    cfg.validate()?;
    let mut r = rng::stream(cfg.seed, &[0x73796e, 2]);
    Ok((0..cfg.coherence_dialogues).map(|k| generate_dialogue(cfg, format!("clf-{k}"), &mut r)).collect())
}

/// Flips the polarity of every assertion in `text`.
pub fn negate(text: &str) -> String {
    text.split_whitespace()
        .map(|w| match parse_assertion(w) {
            Some((name, crate::coherence::Polarity::Pos)) => format!("-{name}"),
            Some((name, crate::coherence::Polarity::Neg)) => format!("+{name}"),
            None => w.to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Classifier data: for every turn whose facts were asserted before, the
/// golden turn (coherent) and its negation (contradiction); for fresh turns,
/// the golden turn only. Shuffled with `rng`.
pub fn coherence_examples<R: Rng>(dialogues: &[RawDialogue], rng: &mut R) -> Vec<RawCoherenceExample> {
    let mut out = Vec::new();
    for d in dialogues {
        for k in 1..d.turns.len() {
            let context: Vec<String> = d.turns[..k].iter().map(|t| t.text.clone()).collect();
            let response = d.turns[k].text.clone();
            let seen = response.split_whitespace().filter_map(parse_assertion).any(|(name, _)| {
                context.iter().any(|c| c.split_whitespace().filter_map(parse_assertion).any(|(n, _)| n == name))
            });
            out.push(RawCoherenceExample { context: context.clone(), response: response.clone(), label: Label::NonContradiction });
            if seen {
                out.push(RawCoherenceExample { context, response: negate(&response), label: Label::Contradiction });
            }
        }
    }
    out.shuffle(rng);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coherence::KeywordOracle;
    use crate::corpus::{encode_dialogues, Vocabulary, WhitespaceTokenizer};

    #[test]
    fn golden_dialogues_are_coherent() {
        let cfg = SyntheticConfig { train_dialogues: 50, test_dialogues: 10, ..Default::default() };
        let (train, test) = generate_split(&cfg).unwrap();
        assert_eq!((train.len(), test.len()), (50, 10));
        let vocab = Vocabulary::new(cfg.words());
        let tok = WhitespaceTokenizer;
        for d in encode_dialogues(&train, &vocab, &tok).unwrap() {
            assert!(d.utterances.len() >= cfg.min_turns && d.utterances.len() <= cfg.max_turns);
            for k in 1..d.utterances.len() {
                assert!(KeywordOracle::is_coherent(&d.utterances[..k], &d.utterances[k]));
            }
        }
    }

    #[test]
    fn split_is_deterministic() {
        let cfg = SyntheticConfig { train_dialogues: 5, test_dialogues: 5, ..Default::default() };
        assert_eq!(generate_split(&cfg).unwrap(), generate_split(&cfg).unwrap());
    }

    #[test]
    fn negation() {
        assert_eq!(negate("w1 +f2 -f3"), "w1 -f2 +f3");
    }
}
