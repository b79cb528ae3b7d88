//! Greedy, sampled and beam decoding, plus coherence re-ranking of beam candidates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coherence::CoherenceClassifier;
use crate::corpus::{Provenance, Speaker, TokenId, Utterance, Vocabulary, EOS};
use crate::error::{Error, Result};
use crate::model::ResponseModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Greedy,
    Beam,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_size: usize,
    /// Maximum number of response tokens, EOS excluded.
    pub max_length: usize,
    /// EOS is disallowed before this many tokens have been produced.
    pub min_length: usize,
    /// Length-normalization exponent α in score / length^α.
    pub length_penalty: f64,
    pub temperature: f64,
    /// Never emit special tokens other than EOS.
    pub suppress_special: bool,
    /// Re-rank beam candidates with the coherence classifier.
    pub rerank: bool,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            beam_size: 1,
            max_length: 12,
            min_length: 1,
            length_penalty: 1.0,
            temperature: 1.0,
            suppress_special: true,
            rerank: false,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_length: usize) -> Self {
        Self { max_length, ..Default::default() }
    }

    pub fn beam(beam_size: usize, max_length: usize) -> Self {
        Self { strategy: Strategy::Beam, beam_size, max_length, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("decode.beam_size must be ≥ 1".into()));
        }
        if self.max_length == 0 {
            return Err(Error::Config("decode.max_length must be ≥ 1".into()));
        }
        if self.temperature < 0.0 || !self.temperature.is_finite() {
            return Err(Error::Config("decode.temperature must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

/// A finished beam hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Response tokens without the terminating EOS.
    pub tokens: Vec<TokenId>,
    pub ended_with_eos: bool,
    /// Σ log p over all scored steps (EOS included when present).
    pub log_prob: f64,
    /// log_prob / steps^α.
    pub score: f64,
    pub coherence: Option<f64>,
}

impl Candidate {
    fn new(tokens: Vec<TokenId>, ended_with_eos: bool, log_prob: f64, alpha: f64) -> Self {
        let steps = tokens.len() + usize::from(ended_with_eos);
        let score = log_prob / (steps.max(1) as f64).powf(alpha);
        Self { tokens, ended_with_eos, log_prob, score, coherence: None }
    }

    /// Scored target sequence (tokens plus EOS if it ended with one).
    pub fn targets(&self) -> Vec<TokenId> {
        let mut t = self.tokens.clone();
        if self.ended_with_eos {
            t.push(EOS);
        }
        t
    }
}

fn allowed(tok: usize, step: usize, cfg: &DecodeConfig) -> bool {
    let tok = tok as TokenId;
    if tok == EOS {
        return step >= cfg.min_length;
    }
    !(cfg.suppress_special && Vocabulary::is_special(tok))
}

/// Greedy continuation after force-decoding `forced`; returns tokens without EOS.
pub fn greedy_ids<M: ResponseModel>(
    model: &M,
    src: &[TokenId],
    forced: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<Vec<TokenId>> {
    Ok(greedy_candidate(model, src, forced, cfg)?.tokens)
}

pub fn greedy_candidate<M: ResponseModel>(
    model: &M,
    src: &[TokenId],
    forced: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<Candidate> {
    let max_len = cfg.max_length.min(model.max_response_tokens() - 1).max(forced.len());
    let mem = model.encode(src)?;
    let mut out: Vec<TokenId> = Vec::new();
    let mut lp_total = 0.0;
    while out.len() < max_len {
        let lp = model.next_log_probs(&mem, &out)?;
        let tok = if let Some(&f) = forced.get(out.len()) {
            f
        } else {
            let mut best: Option<usize> = None;
            for (t, &x) in lp.iter().enumerate() {
                if allowed(t, out.len(), cfg) && best.is_none_or(|b| x > lp[b]) {
                    best = Some(t);
                }
            }
            best.ok_or_else(|| Error::invalid("no token is allowed at this step"))? as TokenId
        };
        lp_total += lp[tok as usize];
        if tok == EOS {
            return Ok(Candidate::new(out, true, lp_total, cfg.length_penalty));
        }
        out.push(tok);
    }
    Ok(Candidate::new(out, false, lp_total, cfg.length_penalty))
}

/// Ancestral sampling at `cfg.temperature` after force-decoding `forced`.
/// Temperature 0 reduces to greedy decoding.
pub fn sample_ids<M: ResponseModel, R: Rng>(
    model: &M,
    src: &[TokenId],
    forced: &[TokenId],
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    if cfg.temperature == 0.0 {
        return greedy_ids(model, src, forced, cfg);
    }
    let max_len = cfg.max_length.min(model.max_response_tokens() - 1).max(forced.len());
    let mem = model.encode(src)?;
    let mut out: Vec<TokenId> = Vec::new();
    while out.len() < max_len {
        let tok = if let Some(&f) = forced.get(out.len()) {
            f
        } else {
            let lp = model.next_log_probs(&mem, &out)?;
            let weights: Vec<f64> = lp
                .iter()
                .enumerate()
                .map(|(t, &x)| if allowed(t, out.len(), cfg) { (x / cfg.temperature).exp() } else { 0.0 })
                .collect();
            draw(&weights, rng)? as TokenId
        };
        if tok == EOS {
            break;
        }
        out.push(tok);
    }
    Ok(out)
}

/// Index drawn proportionally to non-negative weights.
pub fn draw<R: Rng>(weights: &[f64], rng: &mut R) -> Result<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::invalid("sampling weights must have a positive finite sum"));
    }
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        last = i;
        if u < w {
            return Ok(i);
        }
        u -= w;
    }
    Ok(last)
}

/// Beam search returning up to `beam_size` finished candidates ordered by
/// length-normalized score.
pub fn beam_search<M: ResponseModel>(model: &M, src: &[TokenId], cfg: &DecodeConfig) -> Result<Vec<Candidate>> {
    cfg.validate()?;
    let k = cfg.beam_size;
    let max_len = cfg.max_length.min(model.max_response_tokens() - 1);
    let mem = model.encode(src)?;
    let mut live: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Candidate> = Vec::new();
    for step in 0..max_len {
        // (total, step log-prob, hypothesis, token)
        let mut exp: Vec<(f64, f64, usize, usize)> = Vec::new();
        for (h, (toks, lp0)) in live.iter().enumerate() {
            let lp = model.next_log_probs(&mem, toks)?;
            for (t, &x) in lp.iter().enumerate() {
                if allowed(t, step, cfg) && x > f64::NEG_INFINITY {
                    exp.push((lp0 + x, x, h, t));
                }
            }
        }
        exp.sort_by(|a, b| {
            b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3))
        });
        let mut next = Vec::with_capacity(k);
        for (rank, &(total, _, h, t)) in exp.iter().enumerate() {
            if next.len() == k {
                break;
            }
            if t as TokenId == EOS {
                if rank < k {
                    finished.push(Candidate::new(live[h].0.clone(), true, total, cfg.length_penalty));
                }
            } else {
                let mut toks = live[h].0.clone();
                toks.push(t as TokenId);
                next.push((toks, total));
            }
        }
        live = next;
        if live.is_empty() || finished.len() >= k {
            break;
        }
    }
    if finished.len() < k {
        for (toks, lp) in live {
            if toks.len() == max_len {
                finished.push(Candidate::new(toks, false, lp, cfg.length_penalty));
            }
        }
    }
    // stable sort keeps discovery order among exact ties
    finished.sort_by(|a, b| b.score.total_cmp(&a.score).then(b.log_prob.total_cmp(&a.log_prob)));
    finished.truncate(k);
    Ok(finished)
}

/// Candidate with the highest coherence probability; ties go to the higher
/// model score, then to the earlier candidate.
pub fn rerank<C: CoherenceClassifier + ?Sized>(
    candidates: &[Candidate],
    context: &[Utterance],
    classifier: &C,
    vocab: &Vocabulary,
) -> Result<Candidate> {
    if candidates.is_empty() {
        return Err(Error::invalid("cannot re-rank an empty candidate list"));
    }
    let mut best: Option<Candidate> = None;
    for c in candidates {
        let mut c = c.clone();
        let p = if c.tokens.is_empty() {
            0.0
        } else {
            let r = Utterance::from_ids(&c.tokens, vocab, Speaker::Bot, Provenance::Predicted)?;
            classifier.p_coherent(context, &r)?
        };
        c.coherence = Some(p);
        let better = match &best {
            None => true,
            Some(b) => p > b.coherence.unwrap_or(0.0) || (p == b.coherence.unwrap_or(0.0) && c.score > b.score),
        };
        if better {
            best = Some(c);
        }
    }
    Ok(best.expect("non-empty"))
}

/// Response token ids for `src` according to the strategy in `cfg`.
pub fn generate_ids<M: ResponseModel, R: Rng>(
    model: &M,
    src: &[TokenId],
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    match cfg.strategy {
        Strategy::Greedy => greedy_ids(model, src, &[], cfg),
        Strategy::Sample => sample_ids(model, src, &[], cfg, rng),
        Strategy::Beam => Ok(beam_search(model, src, cfg)?.into_iter().next().map(|c| c.tokens).unwrap_or_default()),
    }
}

/// Beam search followed by coherence re-ranking.
pub fn generate_with_rerank<M: ResponseModel, C: CoherenceClassifier + ?Sized>(
    model: &M,
    classifier: &C,
    context: &[Utterance],
    src: &[TokenId],
    cfg: &DecodeConfig,
    vocab: &Vocabulary,
) -> Result<Candidate> {
    let cands = beam_search(model, src, cfg)?;
    rerank(&cands, context, classifier, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed next-token tables keyed by prefix length and last token.
    pub(crate) struct Table {
        pub v: usize,
        pub f: fn(&[TokenId]) -> Vec<f64>,
    }

    impl ResponseModel for Table {
        type Memory = ();
        fn vocab_size(&self) -> usize {
            self.v
        }
        fn max_context_tokens(&self) -> usize {
            64
        }
        fn max_response_tokens(&self) -> usize {
            64
        }
        fn encode(&self, _: &[TokenId]) -> Result<()> {
            Ok(())
        }
        fn next_log_probs(&self, _: &(), prefix: &[TokenId]) -> Result<Vec<f64>> {
            Ok((self.f)(prefix).iter().map(|p| p.ln()).collect())
        }
    }

    fn peaked(prefix: &[TokenId]) -> Vec<f64> {
        // a single high-probability path: 8 9 10 EOS
        let mut p = vec![0.01; 11];
        let next = match prefix.len() {
            0 => 8,
            1 => 9,
            2 => 10,
            _ => EOS as usize,
        };
        p[next] = 1.0 - 0.01 * 10.0;
        p
    }

    #[test]
    fn greedy_follows_the_peak_and_beam1_matches() {
        let m = Table { v: 11, f: peaked };
        let cfg = DecodeConfig::greedy(8);
        assert_eq!(greedy_ids(&m, &[], &[], &cfg).unwrap(), vec![8, 9, 10]);
        let b = beam_search(&m, &[], &DecodeConfig::beam(1, 8)).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].tokens, vec![8, 9, 10]);
        let mut rng = rand::rng();
        let cold = DecodeConfig { temperature: 0.0, strategy: Strategy::Sample, ..cfg };
        assert_eq!(sample_ids(&m, &[], &[], &cold, &mut rng).unwrap(), vec![8, 9, 10]);
    }

    #[test]
    fn forced_prefix_and_max_length() {
        let m = Table { v: 11, f: peaked };
        let cfg = DecodeConfig::greedy(8);
        assert_eq!(greedy_ids(&m, &[], &[10, 10], &cfg).unwrap(), vec![10, 10, 10]);
        assert_eq!(greedy_ids(&m, &[], &[], &DecodeConfig::greedy(2)).unwrap(), vec![8, 9]);
    }

    #[test]
    fn min_length_blocks_early_eos() {
        fn eos_first(_: &[TokenId]) -> Vec<f64> {
            let mut p = vec![0.05; 9];
            p[EOS as usize] = 0.6;
            p
        }
        let m = Table { v: 9, f: eos_first };
        let out = greedy_ids(&m, &[], &[], &DecodeConfig::greedy(5)).unwrap();
        assert_eq!(out, vec![8]);
    }

    #[test]
    fn draw_respects_zero_weights() {
        let mut rng = rand::rng();
        for _ in 0..100 {
            assert_eq!(draw(&[0.0, 1.0, 0.0], &mut rng).unwrap(), 1);
        }
        assert!(draw(&[0.0, 0.0], &mut rng).is_err());
    }
}
