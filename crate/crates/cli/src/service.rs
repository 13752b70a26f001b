// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! JSON-over-HTTP front end for one memory instance.
//!
//! Reads run concurrently under a shared lock. Mutations go through a single
//! writer thread fed by a queue, so they apply in arrival order.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use memfly_core::construction::{ConstructionError, IbDiagnostics, IngestReport, Turn};
use memfly_core::engine::{MemoryEngine, QueryOutcome};
use memfly_core::graph::SCHEMA_VERSION;
use memfly_core::retrieval::RetrievalError;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{mpsc, oneshot};
use tracing::{info, warn};

pub const SCHEMA_HEADER: &str = "x-memfly-schema-version";
const QUEUE_DEPTH: usize = 256;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestRequest {
    pub speaker: String,
    pub text: String,
    #[serde(default)]
    pub turn_id: Option<String>,
    #[serde(default)]
    pub date: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub question: String,
    #[serde(default)]
    pub iterative: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvolveResponse {
    pub topics: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotResponse {
    pub path: PathBuf,
    pub notes: usize,
}

enum Job {
    Ingest(Turn, oneshot::Sender<Result<IngestReport, ConstructionError>>),
    Evolve(oneshot::Sender<usize>),
    Snapshot(oneshot::Sender<Result<SnapshotResponse, String>>),
}

#[derive(Clone)]
pub struct AppState {
    engine: Arc<RwLock<MemoryEngine>>,
    jobs: mpsc::Sender<Job>,
    snapshotting: Arc<AtomicBool>,
    token: Option<Arc<str>>,
}

impl AppState {
    /// Start the writer thread. `snapshot_path` is where `/snapshot` writes.
    pub fn new(engine: MemoryEngine, snapshot_path: PathBuf, token: Option<String>) -> Self {
        let engine = Arc::new(RwLock::new(engine));
        let snapshotting = Arc::new(AtomicBool::new(false));
        let (tx, rx) = mpsc::channel(QUEUE_DEPTH);
        let writer_engine = engine.clone();
        let flag = snapshotting.clone();
        std::thread::Builder::new()
            .name("memfly-writer".into())
            .spawn(move || writer(rx, writer_engine, flag, snapshot_path))
            .expect("spawn writer thread");
        AppState {
            engine,
            jobs: tx,
            snapshotting,
            token: token.filter(|t| !t.is_empty()).map(Arc::from),
        }
    }

    pub fn snapshot_in_progress(&self) -> bool {
        self.snapshotting.load(Ordering::SeqCst)
    }

    /// Shared handle to the engine, for inspection by the embedding program.
    pub fn engine(&self) -> Arc<RwLock<MemoryEngine>> {
        self.engine.clone()
    }
}

fn writer(
    mut rx: mpsc::Receiver<Job>,
    engine: Arc<RwLock<MemoryEngine>>,
    snapshotting: Arc<AtomicBool>,
    path: PathBuf,
) {
    while let Some(job) = rx.blocking_recv() {
        match job {
            Job::Ingest(turn, reply) => {
                let out = engine.write().expect("engine lock poisoned").ingest(&turn);
                let _ = reply.send(out);
            }
            Job::Evolve(reply) => {
                let n = engine.write().expect("engine lock poisoned").evolve();
                let _ = reply.send(n);
            }
            Job::Snapshot(reply) => {
                snapshotting.store(true, Ordering::SeqCst);
                let e = engine.read().expect("engine lock poisoned");
                let out = e
                    .save(&path)
                    .map(|()| SnapshotResponse {
                        path: path.clone(),
                        notes: e.graph().note_count(),
                    })
                    .map_err(|err| err.to_string());
                drop(e);
                snapshotting.store(false, Ordering::SeqCst);
                info!(path = %path.display(), ok = out.is_ok(), "snapshot written");
                let _ = reply.send(out);
            }
        }
    }
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    Unauthorized,
    Busy,
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, msg) = match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::Unauthorized => (StatusCode::UNAUTHORIZED, "missing or wrong bearer token".into()),
            ApiError::Busy => (StatusCode::SERVICE_UNAVAILABLE, "snapshot write in progress".into()),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m),
        };
        (status, Json(json!({ "error": msg }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::BadRequest(r.body_text())
    }
}

fn gone() -> ApiError {
    ApiError::Internal("writer stopped".into())
}

impl AppState {
    fn writable(&self) -> Result<(), ApiError> {
        if self.snapshotting.load(Ordering::SeqCst) {
            Err(ApiError::Busy)
        } else {
            Ok(())
        }
    }

    async fn submit<T>(&self, make: impl FnOnce(oneshot::Sender<T>) -> Job) -> Result<T, ApiError> {
        self.writable()?;
        let (tx, rx) = oneshot::channel();
        self.jobs.send(make(tx)).await.map_err(|_| gone())?;
        rx.await.map_err(|_| gone())
    }
}

async fn ingest(
    State(state): State<AppState>,
    body: Result<Json<IngestRequest>, JsonRejection>,
) -> Result<Json<IngestReport>, ApiError> {
    let Json(req) = body?;
    let turn = Turn {
        speaker: req.speaker,
        text: req.text,
        turn_id: req.turn_id,
        date: req.date,
    };
    match state.submit(|tx| Job::Ingest(turn, tx)).await? {
        Ok(report) => Ok(Json(report)),
        Err(e @ ConstructionError::EmptyInput) => Err(ApiError::BadRequest(e.to_string())),
        Err(e) => Err(ApiError::Internal(e.to_string())),
    }
}

async fn query(
    State(state): State<AppState>,
    body: Result<Json<QueryRequest>, JsonRejection>,
) -> Result<Json<QueryOutcome>, ApiError> {
    let Json(req) = body?;
    let engine = state.engine.clone();
    let out = tokio::task::spawn_blocking(move || {
        engine
            .read()
            .expect("engine lock poisoned")
            .query(&req.question, req.iterative)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?;
    match out {
        Ok(o) => Ok(Json(o)),
        Err(e @ RetrievalError::EmptyQuery) => Err(ApiError::BadRequest(e.to_string())),
        Err(e) => Err(ApiError::Internal(e.to_string())),
    }
}

async fn stats(State(state): State<AppState>) -> Result<Json<IbDiagnostics>, ApiError> {
    let engine = state.engine.clone();
    tokio::task::spawn_blocking(move || engine.read().expect("engine lock poisoned").stats())
        .await
        .map(Json)
        .map_err(|e| ApiError::Internal(e.to_string()))
}

async fn evolve(State(state): State<AppState>) -> Result<Json<EvolveResponse>, ApiError> {
    let topics = state.submit(Job::Evolve).await?;
    Ok(Json(EvolveResponse { topics }))
}

async fn snapshot(State(state): State<AppState>) -> Result<Json<SnapshotResponse>, ApiError> {
    state.submit(Job::Snapshot).await?.map(Json).map_err(ApiError::Internal)
}

async fn auth(State(state): State<AppState>, req: Request, next: Next) -> Result<Response, ApiError> {
    if let Some(token) = &state.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token.as_ref());
        if !ok {
            warn!(path = %req.uri().path(), "rejected request without valid token");
            return Err(ApiError::Unauthorized);
        }
    }
    let mut resp = next.run(req).await;
    resp.headers_mut()
        .insert(SCHEMA_HEADER, HeaderValue::from(SCHEMA_VERSION));
    Ok(resp)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/ingest", post(ingest))
        .route("/query", post(query))
        .route("/stats", get(stats))
        .route("/evolve", post(evolve))
        .route("/snapshot", post(snapshot))
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .with_state(state)
}

/// Serve until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}
