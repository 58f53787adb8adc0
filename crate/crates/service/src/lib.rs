//! HTTP front end of the annotation store for human-teacher CFKD runs.
//!
//! Routes, all JSON:
//!
//! * `GET  /api/v1/tickets?limit&cursor`: a page of pending tickets.
//! * `GET  /api/v1/tickets/{id}`: one ticket, pending or resolved.
//! * `POST /api/v1/tickets/{id}/annotation`: a verdict; the first one wins.
//! * `GET  /api/v1/status`: run phase and ticket counts.
//!
//! Anything else is served from the console asset directory when one is
//! configured. Payload fields are documented in `docs/api.md`.

use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cfkd_core::teacher::{AnnotationError, AnnotationRecord, AnnotationStore, StoreStatus, Ticket, TicketStatus};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const MAX_PAGE_SIZE: usize = 1000;

/// Wire form of a ticket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TicketView {
    pub ticket_id: u64,
    pub status: TicketStatus,
    pub source_label: u8,
    pub target_label: u8,
    pub source_features: Vec<f64>,
    pub counterfactual_features: Vec<f64>,
    /// Counterfactual minus source, per feature.
    pub deltas: Vec<f64>,
    /// Classifier probability of the target class at the source.
    pub target_prob_before: f64,
    /// Classifier probability of the target class at the counterfactual.
    pub target_prob_after: f64,
    pub record: Option<AnnotationRecord>,
}

impl From<Ticket> for TicketView {
    fn from(t: Ticket) -> Self {
        let cf = t.counterfactual;
        let before = if cf.target_label == 1 {
            cf.source_prob
        } else {
            1.0 - cf.source_prob
        };
        Self {
            ticket_id: t.ticket_id,
            status: t.status,
            source_label: cf.source_label,
            target_label: cf.target_label,
            source_features: cf.source_features,
            counterfactual_features: cf.features,
            deltas: cf.perturbation,
            target_prob_before: before,
            target_prob_after: cf.achieved_prob,
            record: t.record,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TicketPage {
    pub tickets: Vec<TicketView>,
    pub next_cursor: Option<u64>,
    /// False when no CFKD run is feeding the store.
    pub active: bool,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
pub struct PageQuery {
    pub limit: Option<usize>,
    pub cursor: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRequest {
    pub teacher_label: u8,
    pub annotator_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    /// `not_found`, `conflict` or `invalid_label`.
    pub error: String,
    pub message: String,
}

struct ApiError(AnnotationError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = match self.0 {
            AnnotationError::UnknownTicket(_) => (StatusCode::NOT_FOUND, "not_found"),
            AnnotationError::Conflict(_) | AnnotationError::AlreadyAnnotated(_) => (StatusCode::CONFLICT, "conflict"),
            AnnotationError::InvalidLabel { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_label"),
            AnnotationError::Log(_) => (StatusCode::INTERNAL_SERVER_ERROR, "log_failure"),
        };
        let body = ErrorBody {
            error: code.into(),
            message: self.0.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

async fn list_tickets(State(store): State<Arc<AnnotationStore>>, Query(q): Query<PageQuery>) -> Json<TicketPage> {
    let limit = q.limit.unwrap_or(DEFAULT_PAGE_SIZE).clamp(1, MAX_PAGE_SIZE);
    let page = store.list_pending(limit, q.cursor);
    Json(TicketPage {
        tickets: page.tickets.into_iter().map(TicketView::from).collect(),
        next_cursor: page.next_cursor,
        active: page.active,
    })
}

async fn get_ticket(
    State(store): State<Arc<AnnotationStore>>,
    Path(id): Path<u64>,
) -> Result<Json<TicketView>, ApiError> {
    store
        .get(id)
        .map(|t| Json(t.into()))
        .ok_or(ApiError(AnnotationError::UnknownTicket(id)))
}

async fn post_annotation(
    State(store): State<Arc<AnnotationStore>>,
    Path(id): Path<u64>,
    Json(req): Json<AnnotationRequest>,
) -> Result<Json<AnnotationRecord>, ApiError> {
    store
        .post(id, req.teacher_label, &req.annotator_id)
        .map(Json)
        .map_err(ApiError)
}

async fn status(State(store): State<Arc<AnnotationStore>>) -> Json<StoreStatus> {
    Json(store.status())
}

const PLACEHOLDER: &str = "<!doctype html><title>CFKD annotation</title>\
<p>The annotation API is under <code>/api/v1</code>. No console bundle is configured.</p>";

/// The full application. `assets` is the console bundle directory, if any.
pub fn router(store: Arc<AnnotationStore>, assets: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/v1/tickets", get(list_tickets))
        .route("/api/v1/tickets/{id}", get(get_ticket))
        .route("/api/v1/tickets/{id}/annotation", post(post_annotation))
        .route("/api/v1/status", get(status))
        .with_state(store);
    match assets {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(PLACEHOLDER) })),
    }
}

/// Serves until `shutdown` resolves. Binds before returning the bound
/// address through `on_bound`, so callers can use port 0.
pub async fn serve(
    store: Arc<AnnotationStore>,
    addr: SocketAddr,
    assets: Option<PathBuf>,
    on_bound: impl FnOnce(SocketAddr),
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(store, assets))
        .with_graceful_shutdown(shutdown)
        .await
}
