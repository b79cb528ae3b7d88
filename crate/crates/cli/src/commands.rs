use std::io::BufReader;
use std::path::Path;
use std::sync::Arc;

use hiersample::checkpoint;
use hiersample::coherence::{train_classifier as fit_classifier, CoherenceClassifier, EncoderClassifier, KeywordOracle};
use hiersample::config::{ExperimentConfig, Judge};
use hiersample::corpus::{make_all_pairs, write_dialogues, Dialogue, Vocabulary, WhitespaceTokenizer};
use hiersample::eval::{
    contradiction_by_turn, golden_context_rates, golden_prefix_run, parse_transcripts, perplexity, write_curve_csv, write_transcripts,
    Generator, MetricsReport,
};
use hiersample::model::Seq2SeqModel;
use hiersample::pipeline::{
    coherence_data, continue_training, load_corpus, rerank_decode, rl_contexts, run_self_talk, train_policy, Corpus,
};
use hiersample::rl::rl_finetune as fit_rl;
use hiersample::train::EpochReport;
use hiersample_service::responder::load_registry;
use hiersample_service::{Service, ServiceConfig, Store};
use serde::Serialize;
use tracing::{info, warn};

use crate::failure::{io, Context, Failure};
use crate::run::{json_text, RunDir};
use crate::Global;

type Scorer<'a> = Box<dyn CoherenceClassifier + 'a>;

fn load_policy(path: &Path) -> Result<(Seq2SeqModel, Vocabulary), Failure> {
    checkpoint::read(path).and_then(|b| checkpoint::decode_model(&b)).context(format!("policy {}", path.display()))
}

fn load_classifier(path: &Path, vocab: &Vocabulary) -> Result<EncoderClassifier, Failure> {
    let (clf, v) =
        checkpoint::read(path).and_then(|b| checkpoint::decode_classifier(&b)).context(format!("classifier {}", path.display()))?;
    if v.hash() != vocab.hash() {
        return Err(Failure::Data(anyhow::anyhow!("classifier {}: vocabulary differs from the policy's", path.display())));
    }
    Ok(clf)
}

/// The configured corpus encoded with a checkpoint's vocabulary.
fn corpus_for(cfg: &ExperimentConfig, vocab: &Vocabulary) -> Result<Corpus, Failure> {
    let c = load_corpus(cfg).context("loading corpus")?;
    if c.vocab.hash() == vocab.hash() {
        return Ok(c);
    }
    warn!("corpus vocabulary differs from the checkpoint's; unknown words map to UNK");
    Corpus::from_raw(c.train_raw, c.test_raw, vocab.clone()).context("encoding corpus")
}

fn scorer<'a>(kind: Judge, clf: Option<&'a EncoderClassifier>, role: &str) -> Result<Scorer<'a>, Failure> {
    match (kind, clf) {
        (Judge::Oracle, _) => Ok(Box::new(KeywordOracle)),
        (Judge::Classifier, Some(c)) => Ok(Box::new(c)),
        (Judge::Classifier, None) => {
            Err(Failure::Data(anyhow::anyhow!("{role} is a classifier but none was given (--classifier or eval.classifier)")))
        }
    }
}

fn test_dialogues<'a>(cfg: &ExperimentConfig, corpus: &'a Corpus) -> Result<&'a [Dialogue], Failure> {
    let n = cfg.eval.prompts;
    if corpus.test.len() < n {
        return Err(Failure::Data(anyhow::anyhow!("{n} prompts requested but the test split has {}", corpus.test.len())));
    }
    Ok(&corpus.test[..n])
}

/// Perplexity on the golden pairs of the prompt dialogues.
fn test_ppl(cfg: &ExperimentConfig, model: &Seq2SeqModel, corpus: &Corpus) -> Result<Option<f64>, Failure> {
    let pairs = make_all_pairs(test_dialogues(cfg, corpus)?, cfg.corpus.context_policy);
    if pairs.is_empty() {
        return Ok(None);
    }
    Ok(Some(perplexity(model, &pairs, cfg.train.max_input_tokens)?))
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items.iter().map(|x| serde_json::to_string(x).expect("serializable") + "\n").collect()
}

#[derive(Serialize)]
struct CorpusStats {
    train_dialogues: usize,
    test_dialogues: usize,
    train_pairs: usize,
    mean_utterances: f64,
    vocab_size: usize,
    vocab_hash: String,
}

pub fn ingest(g: &Global, cfg: ExperimentConfig) -> Result<(), Failure> {
    let run = RunDir::create(g, &cfg, "ingest")?;
    let corpus = load_corpus(&cfg).context("loading corpus")?;
    for (name, raw) in [("train.jsonl", &corpus.train_raw), ("test.jsonl", &corpus.test_raw)] {
        let mut buf = Vec::new();
        write_dialogues(&mut buf, raw)?;
        run.write(name, &buf)?;
    }
    run.write("vocab.txt", (corpus.vocab.words().join("\n") + "\n").as_bytes())?;
    let utts: usize = corpus.train.iter().map(|d| d.utterances.len()).sum();
    let stats = CorpusStats {
        train_dialogues: corpus.train.len(),
        test_dialogues: corpus.test.len(),
        train_pairs: corpus.pairs(&cfg).len(),
        mean_utterances: utts as f64 / corpus.train.len().max(1) as f64,
        vocab_size: corpus.vocab.len(),
        vocab_hash: corpus.vocab.hash(),
    };
    run.write_json("stats.json", &stats)?;
    println!("{}", serde_json::to_string(&stats).expect("serializable"));
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    epochs: u32,
    steps: u64,
    final_loss: Option<f64>,
    test_ppl: Option<f64>,
}

pub fn train(g: &Global, cfg: ExperimentConfig, resume: Option<std::path::PathBuf>) -> Result<(), Failure> {
    let run = RunDir::create(g, &cfg, "train")?;
    let corpus = load_corpus(&cfg).context("loading corpus")?;
    let mut log: Vec<EpochReport> = Vec::new();
    let mut write_err = None;
    let state_path = run.file("train_state.ckpt");
    let mut on_epoch = |state: &hiersample::train::TrainState, r: &EpochReport| {
        info!("epoch {} loss {:.4} lr {:.2e} replaced {}/{}", r.epoch, r.mean_loss, r.lr, r.replaced, r.examples);
        log.push(r.clone());
        if let Err(e) = checkpoint::write(&state_path, &checkpoint::encode_train_state(state, &corpus.vocab)) {
            write_err.get_or_insert(e);
        }
    };
    let state = match resume {
        Some(path) => {
            let (mut state, vocab) = checkpoint::read(&path)
                .and_then(|b| checkpoint::decode_train_state(&b))
                .context(format!("train state {}", path.display()))?;
            if vocab.hash() != corpus.vocab.hash() {
                return Err(Failure::Data(anyhow::anyhow!("{}: vocabulary differs from the corpus", path.display())));
            }
            info!("resuming at epoch {}", state.epoch);
            continue_training(&mut state, &cfg, &corpus, &mut on_epoch)?;
            state
        }
        None => train_policy(&cfg, &corpus, &mut on_epoch)?,
    };
    if let Some(e) = write_err {
        return Err(io(e));
    }
    checkpoint::write(&run.file("policy.ckpt"), &checkpoint::encode_model(&state.model, &corpus.vocab))?;
    checkpoint::write(&state_path, &checkpoint::encode_train_state(&state, &corpus.vocab))?;
    run.write("train_log.jsonl", jsonl(&log).as_bytes())?;
    let cfg_ppl = ExperimentConfig { eval: hiersample::config::EvalConfig { prompts: corpus.test.len(), ..cfg.eval.clone() }, ..cfg.clone() };
    let summary = TrainSummary {
        epochs: state.epoch,
        steps: state.step,
        final_loss: log.last().map(|r| r.mean_loss),
        test_ppl: if corpus.test.is_empty() { None } else { test_ppl(&cfg_ppl, &state.model, &corpus)? },
    };
    run.write_json("train_report.json", &summary)?;
    println!("{}", run.file("policy.ckpt").display());
    Ok(())
}

#[derive(Serialize)]
struct ClassifierSummary {
    train_examples: usize,
    dev_examples: usize,
    #[serde(flatten)]
    report: hiersample::coherence::ClassifierReport,
}

pub fn train_classifier(g: &Global, cfg: ExperimentConfig) -> Result<(), Failure> {
    let run = RunDir::create(g, &cfg, "train-classifier")?;
    let corpus = load_corpus(&cfg).context("loading corpus")?;
    let (train, dev) = coherence_data(&cfg, &corpus).context("coherence data")?;
    info!("{} training and {} dev examples", train.len(), dev.len());
    let (clf, report) = fit_classifier(&train, &dev, corpus.vocab.len(), &cfg.classifier)?;
    info!("best dev accuracy {:.4} at epoch {}", report.best_dev_accuracy, report.best_epoch);
    checkpoint::write(&run.file("classifier.ckpt"), &checkpoint::encode_classifier(&clf, &corpus.vocab))?;
    run.write_json("classifier_report.json", &ClassifierSummary { train_examples: train.len(), dev_examples: dev.len(), report })?;
    println!("{}", run.file("classifier.ckpt").display());
    Ok(())
}

pub fn rl_finetune(g: &Global, cfg: ExperimentConfig, policy: &Path, classifier: &Path) -> Result<(), Failure> {
    let run = RunDir::create(g, &cfg, "rl-finetune")?;
    let (model, vocab) = load_policy(policy)?;
    let clf = load_classifier(classifier, &vocab)?;
    let corpus = corpus_for(&cfg, &vocab)?;
    let contexts = rl_contexts(&cfg, &corpus.train).context("rollout contexts")?;
    let (model, log) = fit_rl(model, &clf, &contexts, &cfg.rl, &vocab, |m| {
        info!("iteration {} reward {:.4} kl {:.4} coherence {:.4}", m.iteration, m.mean_reward, m.mean_kl, m.mean_coherence)
    })?;
    checkpoint::write(&run.file("policy.ckpt"), &checkpoint::encode_model(&model, &vocab))?;
    run.write("rl_log.jsonl", jsonl(&log).as_bytes())?;
    println!("{}", run.file("policy.ckpt").display());
    Ok(())
}

pub fn self_talk(g: &Global, cfg: ExperimentConfig, policy: &Path, classifier: Option<&Path>, model_id: &str) -> Result<(), Failure> {
    let run = RunDir::create(g, &cfg, "self-talk")?;
    let (model, vocab) = load_policy(policy)?;
    let clf = classifier.or(cfg.eval.classifier.as_deref()).map(|p| load_classifier(p, &vocab)).transpose()?;
    let corpus = corpus_for(&cfg, &vocab)?;
    let judge = scorer(cfg.eval.judge, clf.as_ref(), "eval.judge")?;
    let reranker = if cfg.decode.rerank { Some(scorer(cfg.eval.reranker, clf.as_ref(), "eval.reranker")?) } else { None };
    test_dialogues(&cfg, &corpus)?;
    let transcripts = run_self_talk(&cfg, &model, &corpus, &cfg.decode, reranker.as_deref(), Some(&*judge), model_id)?;
    let report = MetricsReport::from_transcripts(model_id, &transcripts, test_ppl(&cfg, &model, &corpus)?)?;
    let mut buf = Vec::new();
    write_transcripts(&mut buf, &transcripts)?;
    run.write("transcripts.jsonl", &buf)?;
    run.write_json("metrics.json", &report)?;
    // eval recomputes perplexity from this copy
    run.write("policy.ckpt", &checkpoint::read(policy)?)?;
    print!("{}", json_text(&report));
    Ok(())
}

#[derive(Serialize)]
struct Comparison<'a> {
    source: &'a Path,
    identical: bool,
}

pub fn eval(g: &Global, source: &Path) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::load(&source.join("config.toml")).context(format!("{} is not a self-talk run", source.display()))?;
    if let Some(out) = &g.out {
        cfg.output_dir = out.clone();
    }
    let metrics_path = source.join("metrics.json");
    let stored = std::fs::read_to_string(&metrics_path)
        .map_err(|e| Failure::Data(anyhow::anyhow!("{}: {e}", metrics_path.display())))?;
    let stored_report: MetricsReport =
        serde_json::from_str(&stored).map_err(|e| Failure::Data(anyhow::anyhow!("{}: {e}", metrics_path.display())))?;
    let (model, vocab) = load_policy(&source.join("policy.ckpt"))?;
    let tpath = source.join("transcripts.jsonl");
    let file = std::fs::File::open(&tpath).map_err(|e| Failure::Data(anyhow::anyhow!("{}: {e}", tpath.display())))?;
    let records = parse_transcripts(BufReader::new(file)).context(tpath.display())?;
    let transcripts = records
        .iter()
        .map(|r| r.to_transcript(&vocab, &WhitespaceTokenizer))
        .collect::<Result<Vec<_>, _>>()
        .context(tpath.display())?;
    let corpus = corpus_for(&cfg, &vocab)?;
    let report = MetricsReport::from_transcripts(&stored_report.model_id, &transcripts, test_ppl(&cfg, &model, &corpus)?)?;
    let text = json_text(&report);
    let identical = text == stored;
    let run = RunDir::create(g, &cfg, "eval")?;
    run.write("metrics.json", text.as_bytes())?;
    run.write_json("comparison.json", &Comparison { source, identical })?;
    print!("{text}");
    if !identical {
        return Err(Failure::Runtime(anyhow::anyhow!("recomputed metrics differ from {}", metrics_path.display())));
    }
    info!("metrics match {}", metrics_path.display());
    Ok(())
}

pub fn figures(g: &Global, cfg: ExperimentConfig, policy: &Path, classifier: Option<&Path>) -> Result<(), Failure> {
    let (model, vocab) = load_policy(policy)?;
    let clf = classifier.or(cfg.eval.classifier.as_deref()).map(|p| load_classifier(p, &vocab)).transpose()?;
    let judge = scorer(cfg.eval.judge, clf.as_ref(), "eval.judge")?;
    let reranker = scorer(cfg.eval.reranker, clf.as_ref(), "eval.reranker")?;
    let k = cfg.eval.turns + 1;
    if cfg.eval.probe_turn < 2 || cfg.eval.probe_turn > k {
        return Err(Failure::Usage(format!("eval.probe_turn must be in 2..={k}")));
    }
    let corpus = corpus_for(&cfg, &vocab)?;
    let dialogues = test_dialogues(&cfg, &corpus)?;
    let run = RunDir::create(g, &cfg, "figures")?;
    let greedy = Generator::<dyn CoherenceClassifier> {
        decode: &cfg.decode,
        reranker: None,
        max_input_tokens: cfg.train.max_input_tokens,
        vocab: &corpus.vocab,
    };
    let curve = |series: &str, rates: &[f64], first: usize| -> Vec<(String, f64, f64)> {
        rates.iter().enumerate().map(|(t, &r)| (series.to_string(), (t + first) as f64, r)).collect()
    };

    info!("coherence by turn");
    let predicted = run_self_talk::<dyn CoherenceClassifier, _>(&cfg, &model, &corpus, &cfg.decode, None, Some(&*judge), "policy")?;
    let report = MetricsReport::from_transcripts("policy", &predicted, None)?;
    let golden = golden_context_rates(&model, dialogues, cfg.eval.turns, &greedy, &*judge, cfg.seed)?;
    let mut rows = curve("golden", &golden, 1);
    rows.extend(curve("predicted", &report.coherence, 1));
    write_curve_csv(&run.file("coherence_by_turn.csv"), "turn", &rows)?;

    let mut rows = Vec::new();
    for &beam in &cfg.eval.rerank_beams {
        info!("re-ranking, beam {beam}");
        let dec = rerank_decode(&cfg, beam);
        let ts = run_self_talk(&cfg, &model, &corpus, &dec, Some(&*reranker), Some(&*judge), "policy")?;
        rows.extend(curve(&format!("beam={beam}"), &MetricsReport::from_transcripts("policy", &ts, None)?.coherence, 1));
    }
    write_curve_csv(&run.file("rerank_beams.csv"), "turn", &rows)?;

    info!("contradiction by turn");
    let rates = contradiction_by_turn(&predicted, &*judge, cfg.eval.probe_turn)?;
    write_curve_csv(&run.file("contradiction_by_turn.csv"), "turn", &curve("contradiction", &rates, 1))?;

    let mut rows = Vec::new();
    for &gp in &cfg.eval.golden_prefixes {
        info!("golden prefix {gp}");
        let c = golden_prefix_run(&model, dialogues, gp, k, &greedy, &*judge, cfg.seed)?;
        if c.skipped > 0 {
            warn!("golden prefix {gp}: {} dialogues too short", c.skipped);
        }
        rows.extend(curve(&format!("g={gp}"), &c.rates, 2));
    }
    write_curve_csv(&run.file("golden_prefix.csv"), "turn", &rows)?;
    println!("{}", run.path().display());
    Ok(())
}

pub fn serve(g: &Global, cfg: ExperimentConfig) -> Result<(), Failure> {
    let path = cfg
        .serve
        .registry
        .clone()
        .ok_or_else(|| Failure::Data(anyhow::anyhow!("serve needs a model registry (--registry or serve.registry)")))?;
    let beam = cfg.eval.rerank_beams.iter().copied().max().unwrap_or(1);
    let registry = load_registry(&path, &cfg.decode, beam, cfg.train.max_input_tokens).context(format!("registry {}", path.display()))?;
    RunDir::create(g, &cfg, "serve")?;
    std::fs::create_dir_all(&cfg.serve.store_dir).map_err(|e| io(anyhow::anyhow!("{}: {e}", cfg.serve.store_dir.display())))?;
    let log = cfg.serve.store_dir.join("sessions.jsonl");
    let store = Store::open(&log).context(format!("session log {}", log.display()))?;
    info!("{} sessions replayed from {}", store.sessions().count(), log.display());
    let svc = Arc::new(Service::new(store, registry, ServiceConfig { turn_limit: cfg.serve.turn_limit, seed: cfg.seed }));
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(cfg.workers).enable_all().build().map_err(io)?;
    rt.block_on(hiersample_service::serve(svc, cfg.serve.port)).map_err(io)
}
