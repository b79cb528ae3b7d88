//! Config resolution and run directories.

use std::path::{Path, PathBuf};

use hiersample::config::ExperimentConfig;
use serde::Serialize;

use crate::failure::{io, Failure};
use crate::{Global, Preset};

pub fn resolve(g: &Global) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match (&g.config, g.preset) {
        (Some(path), _) => ExperimentConfig::load(path).map_err(|e| Failure::Data(e.into()))?,
        (None, Some(Preset::Toy)) => ExperimentConfig::toy(),
        (None, _) => ExperimentConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.reseed(seed);
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    if let Some(out) = &g.out {
        cfg.output_dir = out.clone();
    }
    for spec in &g.overrides {
        cfg.apply_override(spec).map_err(|e| Failure::Usage(format!("--set {spec}: {e}")))?;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    absolutize(&mut cfg);
    Ok(cfg)
}

/// Command-line sizes for self-talk style commands.
pub fn eval_size(cfg: &mut ExperimentConfig, k: Option<usize>, d: Option<usize>) -> Result<(), Failure> {
    if let Some(k) = k {
        cfg.eval.turns = k;
    }
    if let Some(d) = d {
        cfg.eval.prompts = d;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))
}

/// Input paths in the snapshot are made absolute so a run can be replayed from anywhere.
pub fn absolutize(cfg: &mut ExperimentConfig) {
    let abs = |p: &mut PathBuf| {
        if let Ok(a) = std::path::absolute(&*p) {
            *p = a;
        }
    };
    for p in [
        &mut cfg.corpus.train,
        &mut cfg.corpus.test,
        &mut cfg.corpus.coherence,
        &mut cfg.eval.classifier,
        &mut cfg.serve.registry,
    ]
    .into_iter()
    .flatten()
    {
        abs(p);
    }
    abs(&mut cfg.serve.store_dir);
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    created: String,
    version: &'a str,
    args: Vec<String>,
}

pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Creates the run dir and writes `config.toml` and `run.json` into it.
    pub fn create(g: &Global, cfg: &ExperimentConfig, command: &str) -> Result<Self, Failure> {
        let now = chrono::Utc::now();
        let path = match &g.run_dir {
            Some(p) => p.clone(),
            None => {
                let stem = format!("{}-{command}", now.format("%Y%m%d-%H%M%S"));
                let mut p = cfg.output_dir.join(&stem);
                let mut n = 1;
                while p.exists() {
                    p = cfg.output_dir.join(format!("{stem}-{n}"));
                    n += 1;
                }
                p
            }
        };
        std::fs::create_dir_all(&path).map_err(|e| io(anyhow::anyhow!("{}: {e}", path.display())))?;
        let run = Self { path };
        run.write("config.toml", cfg.to_toml().as_bytes())?;
        let manifest = Manifest {
            command,
            created: now.to_rfc3339(),
            version: env!("CARGO_PKG_VERSION"),
            args: std::env::args().collect(),
        };
        run.write_json("run.json", &manifest)?;
        tracing::info!("run dir {}", run.path.display());
        Ok(run)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        let p = self.file(name);
        std::fs::write(&p, bytes).map_err(|e| io(anyhow::anyhow!("{}: {e}", p.display())))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), Failure> {
        self.write(name, json_text(value).as_bytes())
    }
}

/// Pretty JSON with a trailing newline; metrics files are compared byte for byte.
pub fn json_text<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}
