//! JSON HTTP API under `/api/v1`, guarded by a static bearer token.

use std::sync::Arc;
use std::time::Instant;

use axum::extract::{Path, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use guiderag_core::corpus::{Chunk, ChunkVariant};
use guiderag_core::engine::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::store::{ChatMode, Message, NewMessage, Rating, Role, Session, Store, StoreError};

pub const APOLOGY: &str = "Désolé, une erreur est survenue lors du traitement de votre question. Veuillez réessayer.";

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    pub engine: Arc<Engine>,
    pub token: Arc<str>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match e {
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            StoreError::Corrupt { .. } | StoreError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    #[serde(default)]
    pub title: String,
}

#[derive(Debug, Deserialize)]
pub struct PostMessage {
    pub text: String,
    pub mode: ChatMode,
}

#[derive(Debug, Deserialize)]
pub struct RateMessage {
    pub score: i64,
    #[serde(default)]
    pub comment: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Source {
    pub chunk_id: String,
    pub filename: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub page: Option<u32>,
    pub variant: ChunkVariant,
    pub full_chunk_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub html: Option<String>,
}

impl Source {
    fn of(chunk: &Chunk) -> Self {
        Self {
            chunk_id: chunk.id().to_string(),
            filename: chunk.metadata().filename.clone(),
            page: chunk.metadata().page,
            variant: chunk.variant(),
            full_chunk_text: chunk.full_text(),
            html: chunk.html().map(str::to_string),
        }
    }
}

async fn require_token(State(app): State<AppState>, request: Request, next: Next) -> Response {
    let presented = request
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if presented != Some(&*app.token) {
        return ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token").into_response();
    }
    next.run(request).await
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn create_session(State(app): State<AppState>, Json(body): Json<CreateSession>) -> Result<(StatusCode, Json<Session>), ApiError> {
    let title = if body.title.trim().is_empty() { "Nouvelle conversation".to_string() } else { body.title };
    Ok((StatusCode::CREATED, Json(app.store.create_session(&title)?)))
}

async fn list_sessions(State(app): State<AppState>) -> Json<Vec<Session>> {
    Json(app.store.list_sessions())
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Session> {
    Ok(Json(app.store.get_session(&id)?))
}

async fn post_message(State(app): State<AppState>, Path(id): Path<String>, Json(body): Json<PostMessage>) -> ApiResult<Message> {
    if body.text.trim().is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "message text is empty"));
    }
    let lock = app.store.session_lock(&id).ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("session {id} not found")))?;
    let _writer = lock.lock().await;
    app.store.append_message(&id, NewMessage::user(body.text.clone(), body.mode))?;

    let engine = Arc::clone(&app.engine);
    let question = body.text;
    let started = Instant::now();
    let outcome = tokio::task::spawn_blocking(move || engine.ask(&question, body.mode.into())).await;
    let reply = match outcome {
        Ok(Ok(outcome)) => NewMessage {
            role: Role::Assistant,
            text: outcome.answer.text,
            mode: body.mode,
            citations: outcome.answer.citations,
            trace: outcome.trace,
            latency_s: outcome.answer.latency_s,
            degraded: false,
        },
        failure => {
            let reason = match failure {
                Ok(Err(e)) => e.to_string(),
                Err(e) => e.to_string(),
                Ok(Ok(_)) => unreachable!(),
            };
            log::error!("pipeline failed for session {id}: {reason}");
            NewMessage {
                role: Role::Assistant,
                text: APOLOGY.to_string(),
                mode: body.mode,
                citations: vec![],
                trace: None,
                latency_s: started.elapsed().as_secs_f64(),
                degraded: true,
            }
        }
    };
    Ok(Json(app.store.append_message(&id, reply)?))
}

async fn get_source(State(app): State<AppState>, Path(chunk_id): Path<String>) -> ApiResult<Source> {
    app.engine
        .index()
        .chunk(&chunk_id)
        .map(|c| Json(Source::of(c)))
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("chunk {chunk_id} not found")))
}

async fn rate_message(State(app): State<AppState>, Path(id): Path<String>, Json(body): Json<RateMessage>) -> ApiResult<Rating> {
    Ok(Json(app.store.rate_message(&id, body.score, body.comment)?))
}

pub fn router(app: AppState) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sources/{chunk_id}", get(get_source))
        .route("/messages/{id}/rating", post(rate_message))
        .route_layer(middleware::from_fn_with_state(app.clone(), require_token))
        .with_state(app);
    Router::new().nest("/api/v1", api)
}

/// Serve until the process is stopped; `on_bound` receives the local address.
pub async fn serve(app: AppState, bind: &str, on_bound: impl FnOnce(std::net::SocketAddr)) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(app)).await
}
