//! HTTP API and server-sent event stream.

use std::convert::Infallible;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query as QueryParams, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use futures::Stream;
use serde::Deserialize;
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;
use tower_http::services::ServeDir;

use irrigo_core::schema::{topic, validate_node_id, Command, TopicKind};

use crate::service::EdgeServer;
use crate::store::{Query, RecordKind, StoreError, StoreRecord, MAX_LIMIT};
use crate::views::{downsample, export_csv};

pub const TOKEN_HEADER: &str = "x-irrigo-token";
/// Reconnect delay suggested to stream clients that fell behind.
pub const SSE_RETRY: Duration = Duration::from_secs(1);

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn bad(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"code": self.code, "message": self.message}))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Range { .. } => Self::bad("invalid_range", e.to_string()),
            StoreError::NodeId(_) => Self::bad("invalid_node", e.to_string()),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "store", e.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn node_id(id: &str) -> ApiResult<()> {
    validate_node_id(id).map_err(|e| ApiError::bad("invalid_node", e.to_string()))
}

fn params<T>(q: Result<QueryParams<T>, QueryRejection>) -> ApiResult<T> {
    q.map(|q| q.0).map_err(|e| ApiError::bad("invalid_query", e.body_text()))
}

impl EdgeServer {
    fn authorize(&self, headers: &HeaderMap) -> ApiResult<()> {
        match &self.shared.token {
            Some(t) if headers.get(TOKEN_HEADER).and_then(|v| v.to_str().ok()) != Some(t) => {
                Err(ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", format!("missing or wrong {TOKEN_HEADER}")))
            }
            _ => Ok(()),
        }
    }

    fn require_running(&self) -> ApiResult<()> {
        if self.is_paused() {
            Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "ingestion_paused", "ingestion is paused: the store refused a write"))
        } else {
            Ok(())
        }
    }

    /// All routes: the API under `/api` and the dashboard at `/`.
    pub fn router(&self) -> Router {
        let api = Router::new()
            .route("/health", get(health))
            .route("/nodes", get(nodes))
            .route("/nodes/{id}/latest", get(latest))
            .route("/nodes/{id}/history", get(history))
            .route("/nodes/{id}/events", get(events))
            .route("/nodes/{id}/cmd", axum::routing::post(command))
            .route("/nodes/{id}/config", get(get_config).put(put_config))
            .route("/nodes/{id}/export.csv", get(export))
            .route("/stream", get(stream))
            .fallback(not_found);
        let app = Router::new().nest("/api", api);
        let app = match &self.shared.static_dir {
            Some(dir) => app.fallback_service(ServeDir::new(dir)),
            None => app.route("/", get(index)).fallback(not_found),
        };
        app.with_state(self.clone())
    }
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

async fn index() -> Html<&'static str> {
    Html(concat!(
        "<!doctype html><meta charset=utf-8><title>irrigo</title>",
        "<p>irrigo edge server. Dashboard assets are not installed; the API lives under ",
        "<a href=/api/nodes>/api</a>.</p>"
    ))
}

async fn health(State(s): State<EdgeServer>) -> Response {
    let store = s.store();
    let body = json!({
        "status": if s.is_paused() { "paused" } else { "ok" },
        "ingest_paused": s.is_paused(),
        "records": store.record_count(),
        "dead_letters": store.dead_letter_count(),
        "bytes": store.bytes(),
        "recovery": store.recovery(),
        "ingest": s.stats(),
        "mqtt_connected": s.relay().is_connected(),
    });
    drop(store);
    let code = if s.is_paused() { StatusCode::SERVICE_UNAVAILABLE } else { StatusCode::OK };
    (code, Json(body)).into_response()
}

async fn nodes(State(s): State<EdgeServer>) -> Json<serde_json::Value> {
    Json(json!(s.node_views()))
}

async fn latest(State(s): State<EdgeServer>, Path(id): Path<String>) -> ApiResult<Json<StoreRecord>> {
    node_id(&id)?;
    s.latest(&id, RecordKind::Telemetry)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no_data", format!("no telemetry for {id}")))
}

#[derive(Debug, Deserialize)]
struct RangeParams {
    from: Option<i64>,
    to: Option<i64>,
    limit: Option<usize>,
    buckets: Option<usize>,
}

impl RangeParams {
    fn query(&self, id: &str, kind: RecordKind) -> Query {
        Query::new(id)
            .kind(kind)
            .range(self.from.unwrap_or(i64::MIN), self.to.unwrap_or(i64::MAX))
            .limit(self.limit.unwrap_or(MAX_LIMIT).min(MAX_LIMIT))
    }
}

async fn read(s: &EdgeServer, q: Query) -> ApiResult<Vec<StoreRecord>> {
    let snap = s.store().snapshot(&q)?;
    tokio::task::spawn_blocking(move || snap.read())
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(Into::into)
}

async fn history(
    State(s): State<EdgeServer>,
    Path(id): Path<String>,
    q: Result<QueryParams<RangeParams>, QueryRejection>,
) -> ApiResult<Json<serde_json::Value>> {
    node_id(&id)?;
    let p = params(q)?;
    let recs = read(&s, p.query(&id, RecordKind::Telemetry)).await?;
    match p.buckets {
        None => Ok(Json(json!({"node": id, "records": recs}))),
        Some(0) => Err(ApiError::bad("invalid_query", "buckets must be positive")),
        Some(n) => {
            let lo = p.from.or(recs.first().map(|r| r.ts));
            let hi = p.to.or(recs.last().map(|r| r.ts));
            let buckets = match (lo, hi) {
                (Some(lo), Some(hi)) => downsample(&recs, lo, hi, n),
                _ => Vec::new(),
            };
            Ok(Json(json!({"node": id, "buckets": buckets})))
        }
    }
}

async fn events(
    State(s): State<EdgeServer>,
    Path(id): Path<String>,
    q: Result<QueryParams<RangeParams>, QueryRejection>,
) -> ApiResult<Json<serde_json::Value>> {
    node_id(&id)?;
    let p = params(q)?;
    let recs = read(&s, p.query(&id, RecordKind::Event)).await?;
    Ok(Json(json!({"node": id, "events": recs})))
}

async fn command(State(s): State<EdgeServer>, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    s.authorize(&headers)?;
    node_id(&id)?;
    s.require_running()?;
    let cmd = Command::parse(&body).map_err(|e| ApiError::bad("invalid_command", e.to_string()))?;
    if let Command::IrrigateNow { ml: Some(ml) } = cmd {
        let max = s.config(&id).max_ml;
        if ml > max {
            return Err(ApiError::bad("invalid_command", format!("ml {ml} exceeds max_ml {max}")));
        }
    }
    let t = topic(&id, TopicKind::Cmd);
    s.relay().publish(&t, &body, false).map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "relay_unavailable", e.to_string()))?;
    Ok((StatusCode::ACCEPTED, Json(json!({"accepted": true, "topic": t}))).into_response())
}

async fn get_config(State(s): State<EdgeServer>, Path(id): Path<String>) -> ApiResult<Response> {
    node_id(&id)?;
    Ok(Json(s.config(&id)).into_response())
}

async fn put_config(State(s): State<EdgeServer>, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    s.authorize(&headers)?;
    node_id(&id)?;
    s.require_running()?;
    let cfg = s.config(&id).merge_json(&body).map_err(|e| ApiError::bad("invalid_config", e.to_string()))?;
    if cfg.node_id != id {
        return Err(ApiError::bad("invalid_config", "node_id cannot change"));
    }
    let payload = serde_json::to_vec(&cfg).expect("config serializes");
    s.relay()
        .publish(&topic(&id, TopicKind::Config), &payload, true)
        .map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "relay_unavailable", e.to_string()))?;
    s.set_config(&id, cfg.clone());
    Ok(Json(cfg).into_response())
}

async fn export(
    State(s): State<EdgeServer>,
    Path(id): Path<String>,
    q: Result<QueryParams<RangeParams>, QueryRejection>,
) -> ApiResult<Response> {
    node_id(&id)?;
    let p = params(q)?;
    let tel = read(&s, p.query(&id, RecordKind::Telemetry)).await?;
    let ev = read(&s, p.query(&id, RecordKind::Event)).await?;
    let cfg = s.config(&id);
    let window = (cfg.window_len as u64 * cfg.sample_period_ms) as i64;
    let csv = export_csv(&tel, &ev, window);
    let disposition = format!("attachment; filename=\"{id}.csv\"");
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8".to_string()), (header::CONTENT_DISPOSITION, disposition)], csv).into_response())
}

#[derive(Debug, Deserialize)]
struct StreamParams {
    node: Option<String>,
}

fn sse_event(r: &StoreRecord) -> Event {
    Event::default().event(r.kind.as_str()).data(serde_json::to_string(r).expect("record serializes"))
}

async fn stream(
    State(s): State<EdgeServer>,
    q: Result<QueryParams<StreamParams>, QueryRejection>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let p = params(q)?;
    if let Some(n) = &p.node {
        node_id(n)?;
    }
    let rx = s.subscribe();
    let filter = p.node;
    let events = futures::stream::unfold((rx, false), move |(mut rx, done)| {
        let filter = filter.clone();
        async move {
            if done {
                return None;
            }
            loop {
                match rx.recv().await {
                    Ok(r) if filter.as_deref().is_none_or(|n| n == r.node) => {
                        return Some((Ok(sse_event(&r)), (rx, false)));
                    }
                    Ok(_) => continue,
                    Err(RecvError::Lagged(n)) => {
                        let ev = Event::default().event("overflow").retry(SSE_RETRY).data(json!({"missed": n}).to_string());
                        return Some((Ok(ev), (rx, true)));
                    }
                    Err(RecvError::Closed) => return None,
                }
            }
        }
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

/// Serves the router on an already bound listener until the future is dropped.
pub async fn serve(listener: tokio::net::TcpListener, server: EdgeServer) -> std::io::Result<()> {
    axum::serve(listener, server.router()).await
}

/// Binds `addr` and serves in a background task; returns the bound address.
pub async fn spawn(addr: &str, server: EdgeServer) -> std::io::Result<(std::net::SocketAddr, tokio::task::JoinHandle<()>)> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let task = tokio::spawn(async move {
        if let Err(e) = serve(listener, server).await {
            log::error!("http server stopped: {e}");
        }
    });
    Ok((local, task))
}
