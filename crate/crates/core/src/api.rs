//! HTTP+JSON surface.
//!
//! | Method | Path                                   | Purpose                          |
//! |--------|----------------------------------------|----------------------------------|
//! | POST   | `/api/entries`                         | submit a missing/finding entry   |
//! | GET    | `/api/entries/{id}`                    | current state of an entry        |
//! | GET    | `/api/verifications?state=PENDING`     | police work queue                |
//! | POST   | `/api/verifications/{case_id}/decision`| approve or deny a case           |
//! | GET    | `/api/outbox?kind=...`                 | notifications in emission order  |
//!
//! Police endpoints live under `/api/verifications` so that an authentication
//! layer can be attached to that prefix alone. Request bodies are parsed
//! strictly: unknown fields are a 400. JSON schemas for every body are in the
//! crate's `schemas/` directory.
//!
//! Handlers hold no business rules; each forwards to [`Pipeline`] on the
//! blocking pool and maps its result to a status code.

use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingError;
use crate::matching::{Disposition, Pipeline, PipelineError, Submission, SubmissionOutcome};
use crate::notification::NotificationKind;
use crate::registry::{EntryId, RegistryError, Side, UploaderInfo};
use crate::verification::{CaseId, CaseState, VerificationCase, VerificationError};

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ApiError {
    pub error: String,
    pub message: String,
}

struct Failure(StatusCode, ApiError);

impl Failure {
    fn new(status: StatusCode, error: &str, message: impl Into<String>) -> Self {
        Failure(
            status,
            ApiError {
                error: error.into(),
                message: message.into(),
            },
        )
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        use StatusCode as S;
        let msg = e.to_string();
        match e {
            PipelineError::Embedding(EmbeddingError::UndecodableImage(_)) => Failure::new(S::BAD_REQUEST, "undecodable_image", msg),
            PipelineError::Embedding(EmbeddingError::NoRecognizableFace { .. }) => {
                Failure::new(S::UNPROCESSABLE_ENTITY, "no_recognizable_face", msg)
            }
            PipelineError::Embedding(EmbeddingError::ProviderFailure(_)) => Failure::new(S::BAD_GATEWAY, "provider_failure", msg),
            PipelineError::Registry(RegistryError::UnknownEntry(_)) => Failure::new(S::NOT_FOUND, "unknown_entry", msg),
            PipelineError::Verification(VerificationError::UnknownCase(_)) => Failure::new(S::NOT_FOUND, "unknown_case", msg),
            PipelineError::Verification(VerificationError::AlreadyDecided(_)) => Failure::new(S::CONFLICT, "already_decided", msg),
            PipelineError::NotApproved(_)
            | PipelineError::NotInProcessing(_)
            | PipelineError::Registry(RegistryError::IllegalTransition { .. }) => Failure::new(S::CONFLICT, "conflict", msg),
            _ => {
                tracing::error!(error = %msg, "request failed");
                Failure::new(S::INTERNAL_SERVER_ERROR, "internal", msg)
            }
        }
    }
}

type AppState = Arc<Pipeline>;

async fn blocking<T, F>(f: F) -> Result<T, Failure>
where
    F: FnOnce() -> Result<T, PipelineError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| Failure::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(Failure::from)
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, Failure> {
    serde_json::from_slice(body).map_err(|e| Failure::new(StatusCode::BAD_REQUEST, "malformed_body", e.to_string()))
}

/// Status code for a submission outcome.
pub fn outcome_status(disposition: Disposition) -> StatusCode {
    match disposition {
        Disposition::Matched | Disposition::StoredNoMatch => StatusCode::CREATED,
        Disposition::PendingVerification => StatusCode::ACCEPTED,
        Disposition::RejectedInvalidInfo | Disposition::RejectedDuplicate => StatusCode::UNPROCESSABLE_ENTITY,
    }
}

async fn post_entry(State(p): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<SubmissionOutcome>), Failure> {
    let submission: Submission = parse_body(&body)?;
    let outcome = blocking(move || p.submit(submission)).await?;
    Ok((outcome_status(outcome.disposition), Json(outcome)))
}

async fn get_entry(State(p): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, Failure> {
    let id: EntryId = id
        .parse()
        .map_err(|_| Failure::new(StatusCode::NOT_FOUND, "unknown_entry", format!("unknown entry {id}")))?;
    let report = blocking(move || p.entry_report(id)).await?;
    Ok(Json(report).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateQuery {
    state: Option<String>,
}

/// What the police see for one case.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CaseView {
    #[serde(flatten)]
    pub case: VerificationCase,
    pub submission: CaseSubmission,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CaseSubmission {
    pub side: Side,
    pub subject_name: String,
    pub uploader: UploaderInfo,
}

/// Cases, optionally filtered by state, each with the submission summary.
pub fn case_views(p: &Pipeline, state: Option<CaseState>) -> Vec<CaseView> {
    p.cases()
        .list(state)
        .into_iter()
        .filter_map(|case| {
            let entry = p.entries().get_entry(case.entry_id)?;
            Some(CaseView {
                case,
                submission: CaseSubmission {
                    side: entry.side,
                    subject_name: entry.subject_name,
                    uploader: entry.uploader,
                },
            })
        })
        .collect()
}

async fn list_verifications(
    State(p): State<AppState>,
    query: Result<Query<StateQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<Vec<CaseView>>, Failure> {
    let Query(q) = query.map_err(|e| Failure::new(StatusCode::BAD_REQUEST, "bad_query", e.body_text()))?;
    let state = q
        .state
        .map(|s| s.parse::<CaseState>())
        .transpose()
        .map_err(|e| Failure::new(StatusCode::BAD_REQUEST, "bad_query", e))?;
    Ok(Json(blocking(move || Ok(case_views(&p, state))).await?))
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionBody {
    pub approve: bool,
}

async fn decide(
    State(p): State<AppState>,
    UrlPath(case_id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<SubmissionOutcome>, Failure> {
    let case_id: CaseId = case_id
        .parse()
        .map_err(|_| Failure::new(StatusCode::NOT_FOUND, "unknown_case", format!("unknown verification case {case_id}")))?;
    let DecisionBody { approve } = parse_body(&body)?;
    Ok(Json(blocking(move || p.decide_case(case_id, approve)).await?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct KindQuery {
    kind: Option<String>,
}

async fn outbox(
    State(p): State<AppState>,
    query: Result<Query<KindQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Response, Failure> {
    let Query(q) = query.map_err(|e| Failure::new(StatusCode::BAD_REQUEST, "bad_query", e.body_text()))?;
    let kind = q
        .kind
        .map(|k| k.parse::<NotificationKind>())
        .transpose()
        .map_err(|e| Failure::new(StatusCode::BAD_REQUEST, "bad_query", e))?;
    let list = blocking(move || p.read_outbox(kind)).await?;
    Ok(Json(list).into_response())
}

/// The five API routes.
pub fn router(pipeline: Arc<Pipeline>) -> Router {
    let police = Router::new()
        .route("/", get(list_verifications))
        .route("/{case_id}/decision", post(decide));
    Router::new()
        .route("/api/entries", post(post_entry))
        .route("/api/entries/{id}", get(get_entry))
        .nest("/api/verifications", police)
        .route("/api/outbox", get(outbox))
        .with_state(pipeline)
}

/// API routes plus, optionally, the web console's static assets at `/`.
/// CORS is open so the console can also be hosted elsewhere.
pub fn app(pipeline: Arc<Pipeline>, static_dir: Option<&Path>) -> Router {
    let mut app = router(pipeline);
    if let Some(dir) = static_dir {
        app = app.fallback_service(tower_http::services::ServeDir::new(dir));
    }
    app.layer(tower_http::cors::CorsLayer::permissive())
}

/// A server running on its own runtime thread; used by embedded scenarios,
/// examples and tests. Dropping the handle stops the server.
pub struct ServerHandle {
    addr: std::net::SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn spawn(app: Router, addr: &str) -> std::io::Result<Self> {
        let listener = std::net::TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        tracing::error!(error = %e, "cannot adopt listener");
                        return;
                    }
                };
                let shutdown = async {
                    let _ = stopped.await;
                };
                if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
                    tracing::error!(error = %e, "server stopped with error");
                }
            });
        });
        Ok(Self {
            addr,
            stop: Some(stop),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> std::net::SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}
