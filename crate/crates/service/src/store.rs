//! Sessions, annotations and their append-only JSONL log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Single,
    SideBySide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Open,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Human,
    Bot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Role,
    pub text: String,
    /// The context behind this reply exceeded the input budget and was truncated.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lane {
    /// Blind label shown to annotators: "A", "B".
    pub label: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub model_id: String,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub mode: Mode,
    pub lanes: Vec<Lane>,
    pub status: Status,
    pub created_at: DateTime<Utc>,
    pub seed: u64,
    pub rerank: bool,
    pub turn_limit: usize,
    pub human_turns: usize,
    /// Index into the requested model list for each lane.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lane_order: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_turn_id: Option<String>,
}

impl Session {
    pub fn lane(&self, label: &str) -> Option<&Lane> {
        self.lanes.iter().find(|l| l.label == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Scope {
    Dialogue,
    Turn { index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub session_id: String,
    pub scope: Scope,
    /// Lane label; absent means the only lane.
    #[serde(default)]
    pub lane: Option<String>,
    pub fluency: u8,
    pub non_repetition: u8,
    pub coherence: u8,
    pub annotator: String,
    pub timestamp: DateTime<Utc>,
    pub version: u32,
}

impl AnnotationRecord {
    fn key(&self) -> (String, Scope, Option<String>, String) {
        (self.session_id.clone(), self.scope, self.lane.clone(), self.annotator.clone())
    }
}

pub fn check_grade(name: &str, g: u8) -> ServiceResult<()> {
    if g > 2 {
        return Err(ServiceError::Invalid(format!("{name} grade {g} is outside {{0, 1, 2}}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reply {
    pub text: String,
    #[serde(default)]
    pub truncated: bool,
}

/// One line of the log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "event")]
pub enum Event {
    Created { session: Session },
    Exchange { session_id: String, human: String, replies: Vec<Reply>, turn_id: Option<String> },
    Closed { session_id: String },
    Annotated { record: AnnotationRecord },
}

/// In-memory index over an optional append-only log file.
#[derive(Debug, Default)]
pub struct Store {
    log: Option<(PathBuf, File)>,
    sessions: BTreeMap<String, Session>,
    annotations: Vec<AnnotationRecord>,
}

impl PartialEq for Store {
    fn eq(&self, other: &Self) -> bool {
        self.sessions == other.sessions && self.annotations == other.annotations
    }
}

impl Store {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if needed) the log at `path` and replays it.
    pub fn open(path: &Path) -> ServiceResult<Self> {
        let mut store = Self::default();
        if path.exists() {
            let f = File::open(path)?;
            for (k, line) in BufReader::new(f).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let ev: Event = serde_json::from_str(&line)
                    .map_err(|e| ServiceError::Invalid(format!("{}:{}: {e}", path.display(), k + 1)))?;
                store.apply(ev)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        store.log = Some((path.to_path_buf(), file));
        Ok(store)
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log.as_ref().map(|(p, _)| p.as_path())
    }

    /// Validates, persists, then applies an event.
    pub fn commit(&mut self, ev: Event) -> ServiceResult<()> {
        self.check(&ev)?;
        if let Some((_, f)) = &mut self.log {
            let mut line = serde_json::to_vec(&ev).map_err(|e| ServiceError::Invalid(e.to_string()))?;
            line.push(b'\n');
            f.write_all(&line)?;
            f.flush()?;
        }
        self.apply(ev)
    }

    fn check(&self, ev: &Event) -> ServiceResult<()> {
        match ev {
            Event::Created { session } if self.sessions.contains_key(&session.id) => {
                Err(ServiceError::Invalid(format!("session {} already exists", session.id)))
            }
            Event::Exchange { session_id, .. } | Event::Closed { session_id } => {
                let s = self.session(session_id)?;
                if s.status == Status::Complete {
                    return Err(ServiceError::Closed(session_id.clone()));
                }
                Ok(())
            }
            Event::Annotated { record } => {
                self.session(&record.session_id)?;
                for (n, g) in [("fluency", record.fluency), ("non_repetition", record.non_repetition), ("coherence", record.coherence)] {
                    check_grade(n, g)?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn apply(&mut self, ev: Event) -> ServiceResult<()> {
        match ev {
            Event::Created { session } => {
                self.sessions.insert(session.id.clone(), session);
            }
            Event::Exchange { session_id, human, replies, turn_id } => {
                let s = self.sessions.get_mut(&session_id).ok_or_else(|| ServiceError::NotFound(session_id.clone()))?;
                if replies.len() != s.lanes.len() {
                    return Err(ServiceError::Invalid("one reply per lane expected".into()));
                }
                for (lane, r) in s.lanes.iter_mut().zip(replies) {
                    lane.turns.push(Turn { speaker: Role::Human, text: human.clone(), truncated: false });
                    lane.turns.push(Turn { speaker: Role::Bot, text: r.text, truncated: r.truncated });
                }
                s.human_turns += 1;
                s.last_turn_id = turn_id;
                if s.human_turns >= s.turn_limit {
                    s.status = Status::Complete;
                }
            }
            Event::Closed { session_id } => {
                let s = self.sessions.get_mut(&session_id).ok_or_else(|| ServiceError::NotFound(session_id.clone()))?;
                s.status = Status::Complete;
            }
            Event::Annotated { record } => self.annotations.push(record),
        }
        Ok(())
    }

    pub fn session(&self, id: &str) -> ServiceResult<&Session> {
        self.sessions.get(id).ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    /// Every stored annotation version, in arrival order.
    pub fn annotation_history(&self) -> &[AnnotationRecord] {
        &self.annotations
    }

    /// Latest version per (session, scope, lane, annotator).
    pub fn annotations(&self) -> Vec<&AnnotationRecord> {
        let mut latest: BTreeMap<_, &AnnotationRecord> = BTreeMap::new();
        for a in &self.annotations {
            latest.insert(a.key(), a);
        }
        let mut out: Vec<&AnnotationRecord> = latest.into_values().collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }

    /// Version the next record with this key would get.
    pub fn next_version(&self, record: &AnnotationRecord) -> u32 {
        let key = record.key();
        self.annotations.iter().filter(|a| a.key() == key).map(|a| a.version).max().map_or(1, |v| v + 1)
    }

    pub fn next_session_id(&self) -> String {
        format!("s{:06}", self.sessions.len() + 1)
    }

    pub fn next_annotation_id(&self) -> String {
        format!("a{:06}", self.annotations.len() + 1)
    }
}

/// Which part of the store to export.
#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
pub struct ExportFilter {
    pub session: Option<String>,
    pub model: Option<String>,
    /// Include model ids; otherwise lanes are identified by label only.
    #[serde(default)]
    pub reveal: bool,
}

/// Mean grades over current annotations, keyed by model (or lane label when blinded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeSummary {
    pub key: String,
    pub n: usize,
    pub fluency: f64,
    pub non_repetition: f64,
    pub coherence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum BundleLine {
    Session(Session),
    Annotation(AnnotationRecord),
    Summary(GradeSummary),
}

fn blind(mut s: Session) -> Session {
    for l in &mut s.lanes {
        l.model_id.clear();
    }
    s.lane_order.clear();
    s
}

impl Store {
    pub fn export(&self, filter: &ExportFilter) -> Vec<BundleLine> {
        let keep = |s: &Session| {
            filter.session.as_ref().is_none_or(|id| &s.id == id)
                && filter.model.as_ref().is_none_or(|m| s.lanes.iter().any(|l| &l.model_id == m))
        };
        let sessions: Vec<&Session> = self.sessions.values().filter(|s| keep(s)).collect();
        let ids: std::collections::BTreeSet<&str> = sessions.iter().map(|s| s.id.as_str()).collect();
        let mut out: Vec<BundleLine> = sessions
            .iter()
            .map(|&s| BundleLine::Session(if filter.reveal { s.clone() } else { blind(s.clone()) }))
            .collect();
        let history: Vec<&AnnotationRecord> = if filter.reveal {
            self.annotations.iter().filter(|a| ids.contains(a.session_id.as_str())).collect()
        } else {
            self.annotations().into_iter().filter(|a| ids.contains(a.session_id.as_str())).collect()
        };
        out.extend(history.into_iter().cloned().map(BundleLine::Annotation));

        let mut sums: BTreeMap<String, (usize, [f64; 3])> = BTreeMap::new();
        for a in self.annotations().into_iter().filter(|a| ids.contains(a.session_id.as_str())) {
            let Ok(s) = self.session(&a.session_id) else { continue };
            let lane = match &a.lane {
                Some(label) => s.lane(label),
                None => s.lanes.first(),
            };
            let Some(lane) = lane else { continue };
            let key = if filter.reveal { lane.model_id.clone() } else { lane.label.clone() };
            let e = sums.entry(key).or_insert((0, [0.0; 3]));
            e.0 += 1;
            e.1[0] += a.fluency as f64;
            e.1[1] += a.non_repetition as f64;
            e.1[2] += a.coherence as f64;
        }
        out.extend(sums.into_iter().map(|(key, (n, t))| {
            let n_f = n as f64;
            BundleLine::Summary(GradeSummary { key, n, fluency: t[0] / n_f, non_repetition: t[1] / n_f, coherence: t[2] / n_f })
        }));
        out
    }

    pub fn export_jsonl(&self, filter: &ExportFilter) -> String {
        let mut s = String::new();
        for line in self.export(filter) {
            s.push_str(&serde_json::to_string(&line).expect("bundle serializes"));
            s.push('\n');
        }
        s
    }

    /// Rebuilds a store from a revealed bundle; summaries are recomputed, not read.
    pub fn import_jsonl(text: &str) -> ServiceResult<Self> {
        let mut store = Self::default();
        for (k, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let item: BundleLine =
                serde_json::from_str(line).map_err(|e| ServiceError::Invalid(format!("bundle line {}: {e}", k + 1)))?;
            match item {
                BundleLine::Session(s) => {
                    if s.lanes.iter().any(|l| l.model_id.is_empty()) {
                        return Err(ServiceError::Invalid("bundle is blinded; export with reveal=true to import".into()));
                    }
                    store.apply(Event::Created { session: s })?;
                }
                BundleLine::Annotation(a) => {
                    store.session(&a.session_id)?;
                    store.apply(Event::Annotated { record: a })?;
                }
                BundleLine::Summary(_) => {}
            }
        }
        Ok(store)
    }
}
