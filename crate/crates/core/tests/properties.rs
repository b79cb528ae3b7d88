use hiersample::coherence::{
    score, AlwaysCoherent, AlwaysContradiction, ClassifierConfig, CoherenceClassifier, CoherenceScore, EncoderClassifier, KeywordOracle, Label,
};
use hiersample::config::ExperimentConfig;
use hiersample::corpus::{
    encode_dialogue, flat_len, flatten, make_training_pairs, parse_dialogues, truncate_context, write_dialogues, ContextPolicy, CorpusFormat,
    DialogueContext, Provenance, RawDialogue, RawTurn, Speaker, TokenId, Utterance, Vocabulary, WhitespaceTokenizer, EOS, SEP,
};
use hiersample::decoding::{beam_search, rerank, DecodeConfig};
use hiersample::eval::{aggregate, coherence_rate, parse_transcripts, write_transcripts, MetricsReport, SelfTalkTranscript};
use hiersample::model::{ModelConfig, ResponseModel, Seq2SeqModel};
use hiersample::rl::{compute_reward, kl_term, surrogate, surrogate_grad, RLConfig};
use hiersample::sampling::{
    context_source, mix_example, sample_utterance_index, Orientation, SamplingConfig, SamplingMode, StepEnv,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 9] = ["a", "b", "c", "d", "x", "+f1", "-f1", "+f2", "-f2"];

fn vocab() -> Vocabulary {
    Vocabulary::new(WORDS)
}

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(&WORDS[..]), 1..6).prop_map(|w| w.join(" "))
}

fn speaker() -> impl Strategy<Value = Speaker> {
    prop_oneof![Just(Speaker::Human), Just(Speaker::Bot), Just(Speaker::Unknown)]
}

fn raw_dialogue() -> impl Strategy<Value = RawDialogue> {
    (
        "[a-z0-9]{1,6}",
        prop::option::of("[a-z ]{1,10}"),
        prop::collection::vec((speaker(), text()).prop_map(|(speaker, text)| RawTurn { speaker, text }), 2..8),
    )
        .prop_map(|(id, topic, turns)| RawDialogue { id, topic, turns })
}

fn utterance(v: &Vocabulary, t: &str) -> Utterance {
    Utterance::from_text(t, v, &WhitespaceTokenizer, Speaker::Unknown, Provenance::Golden).unwrap()
}

fn context() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(text(), 1..8)
}

fn tiny(seed: u64) -> Seq2SeqModel {
    Seq2SeqModel::new(ModelConfig {
        vocab_size: vocab().len(),
        d_model: 8,
        heads: 2,
        d_ff: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        max_positions: 64,
        init_seed: seed,
    })
    .unwrap()
}

fn word_ids() -> impl Strategy<Value = Vec<TokenId>> {
    let v = vocab();
    let first = (v.len() - WORDS.len()) as TokenId;
    prop::collection::vec(first..v.len() as TokenId, 1..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pairs_are_dialogue_prefixes(raw in raw_dialogue()) {
        let d = encode_dialogue(&raw, &vocab(), &WhitespaceTokenizer).unwrap();
        let full = make_training_pairs(&d, ContextPolicy::Full);
        prop_assert_eq!(full.len(), d.utterances.len() - 1);
        for (k, p) in full.iter().enumerate() {
            prop_assert_eq!(&p.context.utterances[..], &d.utterances[..k + 1]);
            prop_assert_eq!(&p.response, &d.utterances[k + 1]);
        }
        for (k, p) in make_training_pairs(&d, ContextPolicy::LastOne).iter().enumerate() {
            prop_assert_eq!(&p.context.utterances[..], &d.utterances[k..k + 1]);
        }
    }

    #[test]
    fn truncation_fits_is_idempotent_and_keeps_the_tail(texts in context(), budget in 1usize..40) {
        let v = vocab();
        let ctx = DialogueContext::new(texts.iter().map(|t| utterance(&v, t)).collect());
        let t = truncate_context(&ctx, budget);
        prop_assert!(t.flat_len() <= budget);
        prop_assert!(!t.is_empty());
        prop_assert_eq!(truncate_context(&t, budget), t.clone());
        let (all, kept) = (flatten(&ctx.utterances), t.flatten());
        prop_assert!(all.ends_with(&kept));
        prop_assert_eq!(kept.iter().filter(|&&x| x == SEP).count(), t.len() - 1);
        if flat_len(&ctx.utterances) <= budget {
            prop_assert_eq!(t, ctx);
        }
    }

    #[test]
    fn tokenize_detokenize_is_identity(t in text()) {
        let u = utterance(&vocab(), &t);
        prop_assert_eq!(u.text(), t);
        prop_assert!(u.tokens.iter().all(|tok| vocab().surface(tok.id) == tok.surface));
    }

    #[test]
    fn vocabulary_is_a_bijection(words in prop::collection::btree_set("[a-z+-]{1,5}", 0..30)) {
        let v = Vocabulary::new(words.iter().map(String::as_str));
        prop_assert!(v.len() >= 5);
        for id in 0..v.len() as TokenId {
            prop_assert_eq!(v.id(v.surface(id)), id);
        }
        prop_assert_eq!(Vocabulary::from_list(v.words().to_vec()).unwrap(), v);
    }

    #[test]
    fn dialogues_survive_write_then_parse(ds in prop::collection::vec(raw_dialogue(), 0..6)) {
        let mut buf = Vec::new();
        write_dialogues(&mut buf, &ds).unwrap();
        prop_assert_eq!(parse_dialogues(&buf[..], CorpusFormat::JsonlDialogue).unwrap(), ds);
    }

    #[test]
    fn config_survives_toml(
        seed in any::<u64>(),
        epochs in 1u32..50,
        geo_p in 0.01f64..1.0,
        i_max in 1usize..20,
        mode in prop::sample::select(vec![SamplingMode::Off, SamplingMode::Utterance, SamplingMode::Semi, SamplingMode::Hierarchical, SamplingMode::Noise]),
        beams in prop::collection::vec(1usize..30, 1..5),
    ) {
        let mut cfg = ExperimentConfig::toy();
        cfg.reseed(seed);
        cfg.train.epochs = epochs;
        cfg.sampling.geo_p = geo_p;
        cfg.sampling.i_max = i_max;
        cfg.sampling.mode = mode;
        cfg.eval.rerank_beams = beams;
        prop_assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn transcripts_survive_jsonl(
        turns in prop::collection::vec((text(), prop::option::of(any::<bool>())), 1..6),
        prompt in text(),
        seed in any::<u64>(),
    ) {
        let v = vocab();
        let tr = SelfTalkTranscript {
            prompt: utterance(&v, &prompt),
            turns: turns.iter().map(|(t, _)| utterance(&v, t).with_provenance(Provenance::Predicted)).collect(),
            labels: turns.iter().map(|(_, l)| l.map(|c| if c { Label::NonContradiction } else { Label::Contradiction })).collect(),
            golden_prefix: 1,
            model_id: "m".into(),
            seed,
        };
        let mut buf = Vec::new();
        write_transcripts(&mut buf, std::slice::from_ref(&tr)).unwrap();
        let recs = parse_transcripts(&buf[..]).unwrap();
        prop_assert_eq!(recs.len(), 1);
        let back = recs[0].to_transcript(&v, &WhitespaceTokenizer).unwrap();
        prop_assert_eq!(back.to_record(), tr.to_record());
        prop_assert_eq!(back.flat_tokens(), tr.flat_tokens());
    }

    #[test]
    fn rates_recount_labels_and_aggregate_by_mean(
        labels in prop::collection::vec(prop::collection::vec(any::<bool>(), 10), 1..20),
    ) {
        let v = vocab();
        let ts: Vec<SelfTalkTranscript> = labels
            .iter()
            .map(|ls| SelfTalkTranscript {
                prompt: utterance(&v, "a"),
                turns: ls.iter().map(|_| utterance(&v, "b")).collect(),
                labels: ls.iter().map(|&c| Some(if c { Label::NonContradiction } else { Label::Contradiction })).collect(),
                golden_prefix: 1,
                model_id: "m".into(),
                seed: 0,
            })
            .collect();
        let report = MetricsReport::from_transcripts("m", &ts, None).unwrap();
        for k in 1..=10 {
            let hits = labels.iter().filter(|ls| ls[k - 1]).count();
            prop_assert_eq!(coherence_rate(&ts, k).unwrap(), hits as f64 / labels.len() as f64);
            prop_assert!((0.0..=1.0).contains(&report.coherence[k - 1]));
        }
        let (a5, a10) = aggregate(&report.coherence);
        prop_assert_eq!(a5.unwrap(), report.coherence[..5].iter().sum::<f64>() / 5.0);
        prop_assert_eq!(a10.unwrap(), report.coherence.iter().sum::<f64>() / 10.0);
    }

    #[test]
    fn thresholds_never_flip_contradictions(p in 0.0f64..=1.0, t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        if CoherenceScore::new(p, lo).label == Label::Contradiction {
            prop_assert_eq!(CoherenceScore::new(p, hi).label, Label::Contradiction);
        }
    }

    #[test]
    fn stubs_obey_their_contracts(ctx in context(), resp in text()) {
        let v = vocab();
        let c: Vec<Utterance> = ctx.iter().map(|t| utterance(&v, t)).collect();
        let r = utterance(&v, &resp);
        prop_assert_eq!(score(&AlwaysCoherent, &c, &r).unwrap(), CoherenceScore { p_coherent: 1.0, label: Label::NonContradiction });
        prop_assert_eq!(score(&AlwaysContradiction, &c, &r).unwrap(), CoherenceScore { p_coherent: 0.0, label: Label::Contradiction });
        let o = KeywordOracle.p_coherent(&c, &r).unwrap();
        prop_assert!(o == 0.0 || o == 1.0);
    }

    #[test]
    fn sampled_index_stays_in_range(
        l in 2usize..40,
        geo_p in 0.01f64..=1.0,
        i_max in 1usize..15,
        last in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let cfg = SamplingConfig {
            geo_p,
            i_max,
            orientation: if last { Orientation::Last } else { Orientation::First },
            ..SamplingConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let i = sample_utterance_index(l, &cfg, &mut rng).unwrap();
            prop_assert!(i >= 1 && i <= l - 1);
            if !last {
                prop_assert!(i <= i_max);
            } else {
                prop_assert!(i >= (l - 1).saturating_sub(i_max) + 1);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn step_distributions_are_normalized_and_causal(seed in any::<u64>(), src in word_ids(), prefix in word_ids()) {
        let m = tiny(seed);
        let mem = m.encode(&src).unwrap();
        let full = m.token_log_probs(&src, &prefix).unwrap();
        for j in 0..=prefix.len() {
            let d = m.decode_step(&mem, &prefix[..j]).unwrap();
            prop_assert!((d.sum() - 1.0).abs() < 1e-6);
            if j < prefix.len() {
                let short = m.token_log_probs(&src, &prefix[..j + 1]).unwrap();
                prop_assert!((short[j] - full[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mixed_contexts_replace_at_most_one_utterance(
        seed in any::<u64>(),
        texts in prop::collection::vec(text(), 2..8),
        mode in prop::sample::select(vec![SamplingMode::Utterance, SamplingMode::Semi, SamplingMode::Hierarchical, SamplingMode::Noise]),
    ) {
        let v = vocab();
        let model = tiny(seed ^ 1);
        let utts: Vec<Utterance> = texts.iter().map(|t| utterance(&v, t)).collect();
        let d = hiersample::corpus::Dialogue { id: "d".into(), topic: None, utterances: utts.clone() };
        let pool = utts.clone();
        let env = StepEnv { vocab: &v, noise_pool: &pool, max_input_tokens: 64, apply_prob: 1.0 };
        let cfg = SamplingConfig { mode, ..SamplingConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for pair in make_training_pairs(&d, ContextPolicy::Full) {
            let mixed = mix_example(&model, &pair, &cfg, &env, &mut rng).unwrap();
            prop_assert_eq!(mixed.context.len(), pair.context.len());
            prop_assert!(mixed.non_golden_count() <= 1);
            for (k, (a, b)) in mixed.context.utterances.iter().zip(&pair.context.utterances).enumerate() {
                if mixed.replaced_index != Some(k + 1) {
                    prop_assert_eq!(a, b);
                } else {
                    prop_assert!(!a.is_empty());
                }
            }
        }
    }

    #[test]
    fn kl_vanishes_and_reward_decomposes(seed in any::<u64>(), ctx in context(), resp in word_ids(), beta in 0.0f64..2.0) {
        let v = vocab();
        let policy = tiny(seed);
        let reference = tiny(seed.wrapping_add(1));
        let c = DialogueContext::new(ctx.iter().map(|t| utterance(&v, t)).collect());
        let src = context_source(&c.utterances, 64);
        let mut targets = resp.clone();
        targets.push(EOS);
        prop_assert_eq!(kl_term(&policy, &policy.clone(), &src, &targets, 20).unwrap(), 0.0);
        let cfg = RLConfig { beta, max_input_tokens: 64, ..RLConfig::default() };
        let kl = kl_term(&policy, &reference, &src, &targets, cfg.kl_decode_truncation).unwrap();
        let r = Utterance::from_ids(&resp, &v, Speaker::Bot, Provenance::Predicted).unwrap();
        let fc = KeywordOracle.p_coherent(&c.utterances, &r).unwrap();
        let got = compute_reward(&policy, &reference, &KeywordOracle, &c, &targets, &cfg, &v).unwrap();
        prop_assert_eq!(got, fc - beta * kl);
    }

    #[test]
    fn beam_candidates_are_well_formed_and_reranking_picks_one(seed in any::<u64>(), src in word_ids(), k in 1usize..6, len in 1usize..5) {
        let v = vocab();
        let m = tiny(seed);
        let cfg = DecodeConfig::beam(k, len);
        let cands = beam_search(&m, &src, &cfg).unwrap();
        prop_assert_eq!(&beam_search(&m, &src, &cfg).unwrap(), &cands);
        prop_assert!(!cands.is_empty() && cands.len() <= k);
        for c in &cands {
            prop_assert!(c.ended_with_eos || c.tokens.len() == len);
        }
        let ctx = vec![utterance(&v, "+f1 a")];
        let best = rerank(&cands, &ctx, &KeywordOracle, &v).unwrap();
        prop_assert!(cands.iter().any(|c| c.tokens == best.tokens && c.log_prob == best.log_prob));
    }

    #[test]
    fn classifier_scores_are_probabilities(seed in any::<u64>(), ctx in context(), resp in text()) {
        let v = vocab();
        let clf = EncoderClassifier::new(
            ClassifierConfig { d_model: 8, heads: 2, d_ff: 16, layers: 1, seed, ..ClassifierConfig::default() },
            v.len(),
        )
        .unwrap();
        let c: Vec<Utterance> = ctx.iter().map(|t| utterance(&v, t)).collect();
        let r = utterance(&v, &resp);
        let p = clf.p_coherent(&c, &r).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert_eq!(clf.p_coherent(&c, &r).unwrap(), p);
    }
}

proptest! {
    #[test]
    fn clipped_surrogate_has_no_gradient_past_the_clip(eps in 0.01f64..0.9, a in 0.01f64..10.0, over in 1e-6f64..5.0) {
        let up = 1.0 + eps + over;
        prop_assert_eq!(surrogate_grad(up, a, eps), 0.0);
        prop_assert_eq!(surrogate(up, a, eps), (1.0 + eps) * a);
        let down = (1.0 - eps - over).max(0.0);
        if down < 1.0 - eps {
            prop_assert_eq!(surrogate_grad(down, -a, eps), 0.0);
        }
        prop_assert_eq!(surrogate_grad(1.0, a, eps), a);
    }
}

#[test]
fn out_of_vocabulary_ids_are_errors() {
    let m = tiny(0);
    let bad = vocab().len() as TokenId;
    assert!(m.encode(&[bad]).is_err());
    assert!(m.token_log_probs(&[8], &[bad, EOS]).is_err());
    let mem = m.encode(&[8]).unwrap();
    assert!(m.next_log_probs(&mem, &[bad]).is_err());
}
