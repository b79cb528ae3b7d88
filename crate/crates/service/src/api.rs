//! Session operations and their HTTP routes.

use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::header;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use hiersample::rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use crate::error::{ServiceError, ServiceResult};
use crate::responder::Registry;
use crate::store::{
    check_grade, AnnotationRecord, Event, ExportFilter, Lane, Mode, Role, Scope, Session, Status, Store, Turn,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceConfig {
    pub turn_limit: usize,
    /// Seeds sessions created without an explicit seed.
    pub seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { turn_limit: 10, seed: 0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub models: Vec<String>,
    #[serde(default = "single")]
    pub mode: Mode,
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub rerank: bool,
}

fn single() -> Mode {
    Mode::Single
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostUtterance {
    pub text: String,
    /// Client-generated id; re-sending the last applied id returns the stored replies.
    #[serde(default)]
    pub turn_id: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitAnnotation {
    #[serde(default = "dialogue")]
    pub scope: Scope,
    #[serde(default)]
    pub lane: Option<String>,
    pub fluency: u8,
    pub non_repetition: u8,
    pub coherence: u8,
    pub annotator: String,
}

fn dialogue() -> Scope {
    Scope::Dialogue
}

/// Client-visible lane: no model identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneView {
    pub label: String,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub mode: Mode,
    pub status: Status,
    pub human_turns: usize,
    pub turn_limit: usize,
    pub rerank: bool,
    pub lanes: Vec<LaneView>,
}

impl From<&Session> for SessionView {
    fn from(s: &Session) -> Self {
        Self {
            id: s.id.clone(),
            mode: s.mode,
            status: s.status,
            human_turns: s.human_turns,
            turn_limit: s.turn_limit,
            rerank: s.rerank,
            lanes: s.lanes.iter().map(|l| LaneView { label: l.label.clone(), turns: l.turns.clone() }).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneReply {
    pub lane: String,
    pub text: String,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceResponse {
    pub replies: Vec<LaneReply>,
    pub human_turns: usize,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationResponse {
    pub id: String,
    pub version: u32,
}

/// Store plus models; every mutation goes through the single store lock.
pub struct Service {
    pub store: Mutex<Store>,
    pub registry: Registry,
    pub config: ServiceConfig,
}

impl Service {
    pub fn new(store: Store, registry: Registry, config: ServiceConfig) -> Self {
        Self { store: Mutex::new(store), registry, config }
    }

    pub async fn create_session(&self, req: CreateSession) -> ServiceResult<(SessionView, Option<UtteranceResponse>)> {
        let want = match req.mode {
            Mode::Single => 1,
            Mode::SideBySide => 2,
        };
        if req.models.len() != want {
            return Err(ServiceError::Invalid(format!("{:?} mode needs exactly {want} model id(s)", req.mode)));
        }
        for m in &req.models {
            let r = self.registry.get(m).ok_or_else(|| ServiceError::UnknownModel(m.clone()))?;
            if req.rerank && !r.supports_rerank() {
                return Err(ServiceError::Invalid(format!("model {m} cannot re-rank")));
            }
        }
        let view = {
            let mut store = self.store.lock().await;
            let id = store.next_session_id();
            let seed = req.seed.unwrap_or_else(|| rng::derive(self.config.seed, &[store.len() as u64]));
            let mut order: Vec<usize> = (0..want).collect();
            order.shuffle(&mut rng::stream(seed, &[0x6c616e65]));
            let lanes = order
                .iter()
                .enumerate()
                .map(|(k, &m)| Lane {
                    label: ((b'A' + k as u8) as char).to_string(),
                    model_id: req.models[m].clone(),
                    turns: Vec::new(),
                })
                .collect();
            let session = Session {
                id,
                mode: req.mode,
                lanes,
                status: Status::Open,
                created_at: Utc::now(),
                seed,
                rerank: req.rerank,
                turn_limit: self.config.turn_limit,
                human_turns: 0,
                lane_order: order,
                last_turn_id: None,
            };
            let view = SessionView::from(&session);
            store.commit(Event::Created { session })?;
            view
        };
        match req.prompt {
            Some(p) => {
                let first = self.post_utterance(&view.id, PostUtterance { text: p, turn_id: None }).await?;
                let view = self.view(&view.id).await?;
                Ok((view, Some(first)))
            }
            None => Ok((view, None)),
        }
    }

    pub async fn view(&self, id: &str) -> ServiceResult<SessionView> {
        Ok(SessionView::from(self.store.lock().await.session(id)?))
    }

    pub async fn post_utterance(&self, id: &str, req: PostUtterance) -> ServiceResult<UtteranceResponse> {
        let text = req.text.split_whitespace().collect::<Vec<_>>().join(" ");
        if text.is_empty() {
            return Err(ServiceError::Invalid("utterance text is empty".into()));
        }
        let mut store = self.store.lock().await;
        let session = store.session(id)?.clone();
        if req.turn_id.is_some() && req.turn_id == session.last_turn_id {
            return Ok(replies_of(&session));
        }
        if session.status == Status::Complete {
            return Err(ServiceError::Closed(id.to_string()));
        }
        let mut replies = Vec::with_capacity(session.lanes.len());
        for (k, lane) in session.lanes.iter().enumerate() {
            let responder = self.registry.get(&lane.model_id).ok_or_else(|| ServiceError::UnknownModel(lane.model_id.clone()))?;
            let mut history = lane.turns.clone();
            history.push(Turn { speaker: Role::Human, text: text.clone(), truncated: false });
            let seed = rng::derive(session.seed, &[k as u64, session.human_turns as u64]);
            replies.push(responder.reply(&history, seed, session.rerank)?);
        }
        store.commit(Event::Exchange { session_id: id.to_string(), human: text, replies, turn_id: req.turn_id })?;
        Ok(replies_of(store.session(id)?))
    }

    pub async fn close(&self, id: &str) -> ServiceResult<SessionView> {
        let mut store = self.store.lock().await;
        store.commit(Event::Closed { session_id: id.to_string() })?;
        Ok(SessionView::from(store.session(id)?))
    }

    pub async fn submit_annotation(&self, id: &str, req: SubmitAnnotation) -> ServiceResult<AnnotationResponse> {
        for (n, g) in [("fluency", req.fluency), ("non_repetition", req.non_repetition), ("coherence", req.coherence)] {
            check_grade(n, g)?;
        }
        if req.annotator.trim().is_empty() {
            return Err(ServiceError::Invalid("annotator id is empty".into()));
        }
        let mut store = self.store.lock().await;
        let session = store.session(id)?;
        match (&req.lane, session.mode) {
            (Some(l), _) if session.lane(l).is_none() => {
                return Err(ServiceError::Invalid(format!("session {id} has no lane {l}")));
            }
            (None, Mode::SideBySide) => {
                return Err(ServiceError::Invalid("side-by-side annotations must name a lane".into()));
            }
            _ => {}
        }
        if let Scope::Turn { index } = req.scope {
            if index == 0 || index > session.human_turns {
                return Err(ServiceError::Invalid(format!("turn {index} outside 1..={}", session.human_turns)));
            }
        }
        let mut record = AnnotationRecord {
            id: store.next_annotation_id(),
            session_id: id.to_string(),
            scope: req.scope,
            lane: req.lane,
            fluency: req.fluency,
            non_repetition: req.non_repetition,
            coherence: req.coherence,
            annotator: req.annotator,
            timestamp: Utc::now(),
            version: 0,
        };
        record.version = store.next_version(&record);
        let resp = AnnotationResponse { id: record.id.clone(), version: record.version };
        store.commit(Event::Annotated { record })?;
        Ok(resp)
    }

    pub async fn export(&self, filter: &ExportFilter) -> String {
        self.store.lock().await.export_jsonl(filter)
    }
}

fn replies_of(s: &Session) -> UtteranceResponse {
    let replies = s
        .lanes
        .iter()
        .map(|l| {
            let last = l.turns.last();
            LaneReply {
                lane: l.label.clone(),
                text: last.map(|t| t.text.clone()).unwrap_or_default(),
                truncated: last.is_some_and(|t| t.truncated),
            }
        })
        .collect();
    UtteranceResponse { replies, human_turns: s.human_turns, status: s.status }
}

#[derive(Serialize)]
struct Created {
    session: SessionView,
    #[serde(skip_serializing_if = "Option::is_none")]
    first: Option<UtteranceResponse>,
}

async fn create(State(svc): State<Arc<Service>>, Json(req): Json<CreateSession>) -> ServiceResult<impl IntoResponse> {
    let (session, first) = svc.create_session(req).await?;
    Ok((axum::http::StatusCode::CREATED, Json(Created { session, first })))
}

async fn get_session(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ServiceResult<Json<SessionView>> {
    Ok(Json(svc.view(&id).await?))
}

async fn utterance(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
    Json(req): Json<PostUtterance>,
) -> ServiceResult<Json<UtteranceResponse>> {
    Ok(Json(svc.post_utterance(&id, req).await?))
}

async fn close(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ServiceResult<Json<SessionView>> {
    Ok(Json(svc.close(&id).await?))
}

async fn annotation(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
    Json(req): Json<SubmitAnnotation>,
) -> ServiceResult<impl IntoResponse> {
    Ok((axum::http::StatusCode::CREATED, Json(svc.submit_annotation(&id, req).await?)))
}

async fn export(State(svc): State<Arc<Service>>, Query(filter): Query<ExportFilter>) -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "application/x-ndjson")], svc.export(&filter).await)
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/utterance", post(utterance))
        .route("/sessions/{id}/annotation", post(annotation))
        .route("/sessions/{id}/close", post(close))
        .route("/export", get(export))
        .with_state(svc)
}

/// Serves until the process is stopped.
pub async fn serve(svc: Arc<Service>, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(svc)).await
}
