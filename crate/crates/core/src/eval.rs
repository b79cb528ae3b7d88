//! Self-talk simulation and offline/online metrics.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::coherence::{score, score_against_single_utterance, CoherenceClassifier, Label};
use crate::corpus::{Dialogue, Provenance, Speaker, TokenId, Tokenizer, TrainingPair, Utterance, Vocabulary};
use crate::decoding::{generate_ids, generate_with_rerank, DecodeConfig, Strategy};
use crate::error::{Error, Result};
use crate::model::{ResponseModel, Seq2SeqModel};
use crate::rng;
use crate::sampling::{context_source, response_targets};

/// Prompt plus generated turns; `labels[k]` judges `turns[k]` against everything before it.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfTalkTranscript {
    pub prompt: Utterance,
    pub turns: Vec<Utterance>,
    pub labels: Vec<Option<Label>>,
    /// Number of leading golden utterances (1 for plain self-talk: the prompt).
    pub golden_prefix: usize,
    pub model_id: String,
    pub seed: u64,
}

impl SelfTalkTranscript {
    /// Û = {u_1, r̂_2, ..., r̂_K}.
    pub fn utterances(&self) -> Vec<&Utterance> {
        std::iter::once(&self.prompt).chain(&self.turns).collect()
    }

    pub fn flat_tokens(&self) -> Vec<TokenId> {
        self.utterances().iter().flat_map(|u| u.tokens.iter().map(|t| t.id)).collect()
    }

    pub fn to_record(&self) -> TranscriptRecord {
        TranscriptRecord {
            model_id: self.model_id.clone(),
            seed: self.seed,
            golden_prefix: self.golden_prefix,
            utterances: self.utterances().iter().map(|u| u.text()).collect(),
            labels: self.labels.clone(),
        }
    }
}

/// Serialized transcript line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub model_id: String,
    pub seed: u64,
    #[serde(default = "one")]
    pub golden_prefix: usize,
    pub utterances: Vec<String>,
    pub labels: Vec<Option<Label>>,
}

fn one() -> usize {
    1
}

impl TranscriptRecord {
    pub fn to_transcript(&self, vocab: &Vocabulary, tokenizer: &dyn Tokenizer) -> Result<SelfTalkTranscript> {
        let mut utts = self
            .utterances
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let prov = if k < self.golden_prefix { Provenance::Golden } else { Provenance::Predicted };
                Utterance::from_text(t, vocab, tokenizer, Speaker::Unknown, prov)
            })
            .collect::<Result<Vec<_>>>()?;
        if utts.is_empty() {
            return Err(Error::invalid("transcript has no prompt"));
        }
        if self.labels.len() != utts.len() - 1 {
            return Err(Error::invalid("transcript needs one label slot per generated turn"));
        }
        let prompt = utts.remove(0);
        Ok(SelfTalkTranscript {
            prompt,
            turns: utts,
            labels: self.labels.clone(),
            golden_prefix: self.golden_prefix,
            model_id: self.model_id.clone(),
            seed: self.seed,
        })
    }
}

pub fn parse_transcripts<R: BufRead>(reader: R) -> Result<Vec<TranscriptRecord>> {
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TranscriptRecord = serde_json::from_str(&line).map_err(|e| Error::parse(k + 1, e))?;
        if rec.utterances.is_empty() || rec.labels.len() + 1 != rec.utterances.len() {
            return Err(Error::parse(k + 1, "expected a prompt and one label slot per generated turn"));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_transcripts<W: Write>(mut w: W, transcripts: &[SelfTalkTranscript]) -> Result<()> {
    for t in transcripts {
        serde_json::to_writer(&mut w, &t.to_record()).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// How self-talk turns are produced.
pub struct Generator<'a, C: CoherenceClassifier + ?Sized> {
    pub decode: &'a DecodeConfig,
    /// Candidate re-ranker, used when `decode.rerank` is set.
    pub reranker: Option<&'a C>,
    pub max_input_tokens: usize,
    pub vocab: &'a Vocabulary,
}

impl<C: CoherenceClassifier + ?Sized> Generator<'_, C> {
    /// Response to `context` using the turn-specific rng stream.
    pub fn respond<M: ResponseModel>(&self, model: &M, context: &[Utterance], seed: u64, turn: usize) -> Result<Utterance> {
        let src = context_source(context, self.max_input_tokens.min(model.max_context_tokens()));
        let ids = if self.decode.rerank && self.decode.strategy == Strategy::Beam {
            let clf = self.reranker.ok_or_else(|| Error::Config("re-ranking requires a classifier".into()))?;
            generate_with_rerank(model, clf, context, &src, self.decode, self.vocab)?.tokens
        } else {
            let mut r = rng::stream(seed, &[0x7475_726e, turn as u64]);
            generate_ids(model, &src, self.decode, &mut r)?
        };
        if ids.is_empty() {
            return Err(Error::invalid("decoder produced an empty response"));
        }
        Utterance::from_ids(&ids, self.vocab, Speaker::Bot, Provenance::Predicted)
    }
}

/// Self-talk of `k` utterances in total (the prompt plus k−1 generated turns),
/// starting after `golden` copied utterances.
pub fn self_talk_from<M: ResponseModel, C: CoherenceClassifier + ?Sized, J: CoherenceClassifier + ?Sized>(
    model: &M,
    golden: &[Utterance],
    k: usize,
    generator: &Generator<'_, C>,
    judge: Option<&J>,
    model_id: &str,
    seed: u64,
) -> Result<SelfTalkTranscript> {
    if k < 2 {
        return Err(Error::invalid("self-talk needs K ≥ 2"));
    }
    if golden.is_empty() {
        return Err(Error::invalid("self-talk needs a prompt"));
    }
    let g = golden.len().min(k);
    let mut all: Vec<Utterance> = golden[..g].to_vec();
    for turn in g + 1..=k {
        let r = generator.respond(model, &all, seed, turn)?;
        all.push(r);
    }
    let mut labels = Vec::with_capacity(k - 1);
    for t in 1..k {
        labels.push(match judge {
            Some(j) => Some(score(j, &all[..t], &all[t])?.label),
            None => None,
        });
    }
    let prompt = all.remove(0);
    Ok(SelfTalkTranscript { prompt, turns: all, labels, golden_prefix: g, model_id: model_id.to_string(), seed })
}

pub fn self_talk<M: ResponseModel, C: CoherenceClassifier + ?Sized, J: CoherenceClassifier + ?Sized>(
    model: &M,
    prompt: &Utterance,
    k: usize,
    generator: &Generator<'_, C>,
    judge: Option<&J>,
    model_id: &str,
    seed: u64,
) -> Result<SelfTalkTranscript> {
    self_talk_from(model, std::slice::from_ref(prompt), k, generator, judge, model_id, seed)
}

/// One transcript per prompt; prompt `n` uses seed `derive(seed, [n])`.
#[allow(clippy::too_many_arguments)]
pub fn self_talk_batch<M: ResponseModel, C: CoherenceClassifier + ?Sized, J: CoherenceClassifier + ?Sized>(
    model: &M,
    prompts: &[Utterance],
    k: usize,
    generator: &Generator<'_, C>,
    judge: Option<&J>,
    model_id: &str,
    seed: u64,
) -> Result<Vec<SelfTalkTranscript>> {
    prompts
        .iter()
        .enumerate()
        .map(|(n, p)| self_talk(model, p, k, generator, judge, model_id, rng::derive(seed, &[n as u64])))
        .collect()
}

/// c_k: share of transcripts whose k-th generated turn (1-based) is coherent.
pub fn coherence_rate(transcripts: &[SelfTalkTranscript], k: usize) -> Result<f64> {
    let labels: Vec<&[Option<Label>]> = transcripts.iter().map(|t| t.labels.as_slice()).collect();
    coherence_rate_of(&labels, k)
}

pub fn coherence_rate_of(labels: &[&[Option<Label>]], k: usize) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::invalid("coherence rate over zero transcripts"));
    }
    if k == 0 {
        return Err(Error::invalid("turn index k is 1-based"));
    }
    let mut hits = 0usize;
    for l in labels {
        match l.get(k - 1).copied().flatten() {
            Some(Label::NonContradiction) => hits += 1,
            Some(Label::Contradiction) => {}
            None => return Err(Error::invalid(format!("transcript has no label at turn {k}"))),
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// (avg_5, avg_10): means of the first 5 and 10 rates, absent if too few.
pub fn aggregate(rates: &[f64]) -> (Option<f64>, Option<f64>) {
    let avg = |n: usize| (rates.len() >= n).then(|| rates[..n].iter().sum::<f64>() / n as f64);
    (avg(5), avg(10))
}

/// Unique n-grams over total n-grams; `None` when fewer than n tokens.
pub fn distinct_n<T: std::hash::Hash + Eq>(tokens: &[T], n: usize) -> Option<f64> {
    if n == 0 || tokens.len() < n {
        return None;
    }
    let total = tokens.len() - n + 1;
    let unique: HashSet<&[T]> = tokens.windows(n).collect();
    Some(unique.len() as f64 / total as f64)
}

/// exp(total golden-response NLL / total golden-response tokens), EOS included.
pub fn perplexity(model: &Seq2SeqModel, pairs: &[TrainingPair], max_input_tokens: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("perplexity over zero pairs"));
    }
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for p in pairs {
        let t = response_targets(&p.response);
        let src = context_source(&p.context.utterances, max_input_tokens);
        nll += model.nll_loss(&src, &t)?;
        tokens += t.len();
    }
    Ok((nll / tokens as f64).exp())
}

/// Same quantity for any [`ResponseModel`].
pub fn perplexity_of<M: ResponseModel>(model: &M, pairs: &[TrainingPair], max_input_tokens: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("perplexity over zero pairs"));
    }
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for p in pairs {
        let t = response_targets(&p.response);
        let src = context_source(&p.context.utterances, max_input_tokens);
        nll -= model.score(&src, &t)?;
        tokens += t.len();
    }
    Ok((nll / tokens as f64).exp())
}

/// Contradiction rate ×100 of utterance `probe_turn` of Û (1-based, the prompt
/// is turn 1) against each earlier turn taken alone.
pub fn contradiction_by_turn<C: CoherenceClassifier + ?Sized>(
    transcripts: &[SelfTalkTranscript],
    classifier: &C,
    probe_turn: usize,
) -> Result<Vec<f64>> {
    if transcripts.is_empty() || probe_turn < 2 {
        return Err(Error::invalid("need transcripts and probe_turn ≥ 2"));
    }
    let mut counts = vec![0usize; probe_turn - 1];
    for tr in transcripts {
        let u = tr.utterances();
        if u.len() < probe_turn {
            return Err(Error::invalid(format!("transcript shorter than probe turn {probe_turn}")));
        }
        let r = u[probe_turn - 1];
        for t in 0..probe_turn - 1 {
            if !score_against_single_utterance(classifier, u[t], r)?.label.is_coherent() {
                counts[t] += 1;
            }
        }
    }
    Ok(counts.iter().map(|&c| 100.0 * c as f64 / transcripts.len() as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrefixCurve {
    pub golden_turns: usize,
    /// Rate for Û turns 2..=K (index 0 is turn 2).
    pub rates: Vec<f64>,
    pub used: usize,
    pub skipped: usize,
}

/// Self-talk seeded with the first `g` golden turns of each dialogue; every
/// turn 2..=K is judged (copied turns against their golden history).
#[allow(clippy::too_many_arguments)]
pub fn golden_prefix_run<M: ResponseModel, C: CoherenceClassifier + ?Sized, J: CoherenceClassifier + ?Sized>(
    model: &M,
    dialogues: &[Dialogue],
    g: usize,
    k: usize,
    generator: &Generator<'_, C>,
    judge: &J,
    seed: u64,
) -> Result<PrefixCurve> {
    if g == 0 || k < 2 {
        return Err(Error::invalid("golden prefix needs g ≥ 1 and K ≥ 2"));
    }
    let mut labels = Vec::new();
    let mut skipped = 0;
    for (n, d) in dialogues.iter().enumerate() {
        if d.utterances.len() < g {
            skipped += 1;
            continue;
        }
        let tr = self_talk_from(model, &d.utterances[..g], k, generator, Some(judge), &d.id, rng::derive(seed, &[n as u64]))?;
        labels.push(tr.labels);
    }
    let refs: Vec<&[Option<Label>]> = labels.iter().map(Vec::as_slice).collect();
    let rates = if refs.is_empty() {
        Vec::new()
    } else {
        (1..k).map(|t| coherence_rate_of(&refs, t)).collect::<Result<Vec<_>>>()?
    };
    Ok(PrefixCurve { golden_turns: g, rates, used: refs.len(), skipped })
}

/// Rate of coherent responses generated from golden contexts u_1..u_t, for
/// t = 1..turns (the offline counterpart of self-talk).
pub fn golden_context_rates<M: ResponseModel, C: CoherenceClassifier + ?Sized, J: CoherenceClassifier + ?Sized>(
    model: &M,
    dialogues: &[Dialogue],
    turns: usize,
    generator: &Generator<'_, C>,
    judge: &J,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut hits = vec![0usize; turns];
    let mut seen = vec![0usize; turns];
    for (n, d) in dialogues.iter().enumerate() {
        for t in 1..=turns.min(d.utterances.len()) {
            let ctx = &d.utterances[..t];
            let r = generator.respond(model, ctx, rng::derive(seed, &[n as u64]), t + 1)?;
            seen[t - 1] += 1;
            if score(judge, ctx, &r)?.label.is_coherent() {
                hits[t - 1] += 1;
            }
        }
    }
    Ok(hits.iter().zip(&seen).map(|(&h, &s)| if s == 0 { f64::NAN } else { h as f64 / s as f64 }).collect())
}

/// Pearson correlation; `None` for fewer than two points or zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SignTest {
    /// Pairs where only the candidate is correct.
    pub wins: usize,
    /// Pairs where only the baseline is correct.
    pub losses: usize,
    /// P(X ≥ wins) for X ~ Bin(wins + losses, 1/2).
    pub p_greater: f64,
    pub p_two_sided: f64,
}

/// Paired sign test on binary outcomes; ties are discarded.
pub fn sign_test(baseline: &[bool], candidate: &[bool]) -> Result<SignTest> {
    if baseline.len() != candidate.len() {
        return Err(Error::invalid("sign test needs paired samples"));
    }
    let wins = baseline.iter().zip(candidate).filter(|(&b, &c)| c && !b).count();
    let losses = baseline.iter().zip(candidate).filter(|(&b, &c)| b && !c).count();
    Ok(sign_test_counts(wins, losses))
}

pub fn sign_test_counts(wins: usize, losses: usize) -> SignTest {
    let n = (wins + losses) as u64;
    if n == 0 {
        return SignTest { wins, losses, p_greater: 1.0, p_two_sided: 1.0 };
    }
    let bin = Binomial::new(0.5, n).expect("valid binomial");
    let upper = |k: u64| if k == 0 { 1.0 } else { bin.sf(k - 1) };
    let p_greater = upper(wins as u64);
    let extreme = wins.max(losses) as u64;
    let p_two_sided = (2.0 * upper(extreme)).min(1.0);
    SignTest { wins, losses, p_greater, p_two_sided }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_id: String,
    pub transcripts: usize,
    /// c_1..c_n.
    pub coherence: Vec<f64>,
    pub avg_5: Option<f64>,
    pub avg_10: Option<f64>,
    /// Mean per-transcript distinct-1/2/3.
    pub distinct: [Option<f64>; 3],
    pub ppl: Option<f64>,
}

impl MetricsReport {
    pub fn from_transcripts(model_id: &str, transcripts: &[SelfTalkTranscript], ppl: Option<f64>) -> Result<Self> {
        let turns = transcripts.iter().map(|t| t.labels.len()).min().unwrap_or(0);
        let coherence = (1..=turns).map(|k| coherence_rate(transcripts, k)).collect::<Result<Vec<_>>>()?;
        let (avg_5, avg_10) = aggregate(&coherence);
        let mut distinct = [None; 3];
        for (n, slot) in distinct.iter_mut().enumerate() {
            let vals: Vec<f64> = transcripts.iter().filter_map(|t| distinct_n(&t.flat_tokens(), n + 1)).collect();
            if !vals.is_empty() {
                *slot = Some(vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        Ok(Self { model_id: model_id.to_string(), transcripts: transcripts.len(), coherence, avg_5, avg_10, distinct, ppl })
    }
}

/// Writes `series,x,rate` rows.
pub fn write_curve_csv(path: &Path, x_name: &str, rows: &[(String, f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::File { path: path.to_path_buf(), source: e.into() })?;
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(["series", x_name, "rate"]).map_err(io)?;
    for (s, x, r) in rows {
        w.write_record([s.clone(), x.to_string(), r.to_string()]).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_hand_counts() {
        let t = ["a", "b", "a", "b"];
        assert_eq!(distinct_n(&t, 1), Some(0.5));
        assert!((distinct_n(&t, 2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(distinct_n(&["a", "b", "c"], 2), Some(1.0));
        assert_eq!(distinct_n(&["a"], 2), None);
    }

    #[test]
    fn aggregates() {
        let row = [99.2, 96.5, 79.2, 67.7, 48.7];
        assert!((aggregate(&row).0.unwrap() - 78.26).abs() < 1e-9);
        assert_eq!(aggregate(&row).1, None);
        assert_eq!(aggregate(&[0.25; 10]), (Some(0.25), Some(0.25)));
    }

    #[test]
    fn rates_from_labels() {
        let c = Some(Label::NonContradiction);
        let x = Some(Label::Contradiction);
        let ls: Vec<Vec<Option<Label>>> = vec![vec![c], vec![x], vec![c], vec![x]];
        let refs: Vec<&[Option<Label>]> = ls.iter().map(Vec::as_slice).collect();
        assert_eq!(coherence_rate_of(&refs, 1).unwrap(), 0.5);
        assert!(coherence_rate_of(&refs, 2).is_err());
        assert!(coherence_rate_of(&[], 1).is_err());
    }

    #[test]
    fn pearson_cases() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    #[test]
    fn sign_test_values() {
        let s = sign_test_counts(9, 1);
        // P(X ≥ 9 | n = 10) = 11 / 1024
        assert!((s.p_greater - 11.0 / 1024.0).abs() < 1e-12);
        assert!((s.p_two_sided - 22.0 / 1024.0).abs() < 1e-12);
        assert_eq!(sign_test_counts(0, 0).p_greater, 1.0);
        assert_eq!(sign_test_counts(0, 3).p_greater, 1.0);
    }
}
