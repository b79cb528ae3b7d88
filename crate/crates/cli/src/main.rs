//! `hiersample`: the experiment pipeline from corpus ingestion to figures and
//! the live annotation service.
//!
//! Config precedence, lowest first: the `--config` file (or `--preset`, or the
//! built-in defaults), then `--seed`, then `--workers`/`--out`, then each
//! `--set` in order, then command flags.
//!
//! Exit codes: 0 ok, 1 usage, 2 data error, 3 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hiersample::corpus::CorpusFormat;
use hiersample::sampling::SamplingMode;

mod commands;
mod failure;
mod run;

use failure::Failure;

#[derive(Debug, Parser)]
#[command(name = "hiersample", version, about = "Dialogue generation under predicted context")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Experiment config (TOML).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Built-in starting point, replaced by --config when both are given.
    #[arg(long, value_enum, global = true)]
    preset: Option<Preset>,
    /// Master seed; also reseeds every component.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Recorded in the snapshot; loops run on one thread.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Parent directory for run dirs (output_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Exact run directory instead of a timestamped one.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// `section.key=value` override, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Default,
    Toy,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and normalize a dialogue corpus (or the synthetic one).
    Ingest {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, value_parser = parse_format)]
        format: Option<CorpusFormat>,
    },
    /// MLE training under a sampling mode.
    Train {
        #[arg(long, value_parser = parse_mode)]
        mode: Option<SamplingMode>,
        #[arg(long)]
        epochs: Option<u32>,
        /// Training-state checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the coherence classifier.
    TrainClassifier {
        /// DECODE-style JSONL.
        #[arg(long)]
        coherence: Option<PathBuf>,
    },
    /// Coherence-reward fine-tuning with a KL penalty.
    RlFinetune {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Self-talk transcripts and their metrics.
    SelfTalk {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Generated turns per transcript.
        #[arg(long)]
        k: Option<usize>,
        /// Number of prompts.
        #[arg(long)]
        d: Option<usize>,
        /// Beam width; above 1 re-ranks candidates.
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long, default_value = "policy")]
        model_id: String,
    },
    /// Recompute a self-talk run's metrics and compare with the stored report.
    Eval {
        /// Run directory written by self-talk.
        run: PathBuf,
    },
    /// Plot data: coherence vs turns, re-ranking beams, contradiction by turn, golden prefixes.
    Figures {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
    },
    /// HTTP session service.
    Serve {
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        store: Option<PathBuf>,
    },
}

fn parse_format(s: &str) -> Result<CorpusFormat, String> {
    s.parse().map_err(|e: hiersample::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<SamplingMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown sampling mode {s:?}; expected off, utterance, semi, hierarchical or noise"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.global.verbose {
        0 => tracing::Level::INFO,
        1 => tracing::Level::DEBUG,
        _ => tracing::Level::TRACE,
    };
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_max_level(level).with_target(false).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    match cli.command {
        Command::Ingest { train, test, format } => {
            let mut cfg = run::resolve(g)?;
            if let Some(p) = train {
                cfg.corpus.train = Some(p);
            }
            if let Some(p) = test {
                cfg.corpus.test = Some(p);
            }
            if let Some(f) = format {
                cfg.corpus.format = f;
            }
            run::absolutize(&mut cfg);
            commands::ingest(g, cfg)
        }
        Command::Train { mode, epochs, resume } => {
            let mut cfg = run::resolve(g)?;
            if let Some(m) = mode {
                cfg.sampling.mode = m;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            commands::train(g, cfg, resume)
        }
        Command::TrainClassifier { coherence } => {
            let mut cfg = run::resolve(g)?;
            if let Some(p) = coherence {
                cfg.corpus.coherence = Some(p);
            }
            run::absolutize(&mut cfg);
            commands::train_classifier(g, cfg)
        }
        Command::RlFinetune { policy, classifier, iterations } => {
            let mut cfg = run::resolve(g)?;
            if let Some(n) = iterations {
                cfg.rl.iterations = n;
            }
            commands::rl_finetune(g, cfg, &policy, &classifier)
        }
        Command::SelfTalk { policy, classifier, k, d, beam, model_id } => {
            let mut cfg = run::resolve(g)?;
            run::eval_size(&mut cfg, k, d)?;
            if let Some(b) = beam {
                cfg.decode = hiersample::pipeline::rerank_decode(&cfg, b);
            }
            commands::self_talk(g, cfg, &policy, classifier.as_deref(), &model_id)
        }
        Command::Eval { run } => commands::eval(g, &run),
        Command::Figures { policy, classifier, k, d } => {
            let mut cfg = run::resolve(g)?;
            run::eval_size(&mut cfg, k, d)?;
            commands::figures(g, cfg, &policy, classifier.as_deref())
        }
        Command::Serve { registry, port, store } => {
            let mut cfg = run::resolve(g)?;
            if let Some(r) = registry {
                cfg.serve.registry = Some(r);
            }
            if let Some(p) = port {
                cfg.serve.port = p;
            }
            if let Some(s) = store {
                cfg.serve.store_dir = s;
            }
            run::absolutize(&mut cfg);
            commands::serve(g, cfg)
        }
    }
}
