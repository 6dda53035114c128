//! The review API under `/api/v1`.
//!
//! GET endpoints are pure views over the store's published state; the
//! only mutation is `POST /violations/{id}/review`, which goes through the
//! store's single write path. Errors are `{"error": {"code", "message"}}`.

use std::collections::HashMap;
use std::future::Future;
use std::str::FromStr;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tokio::net::TcpListener;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use crate::store::{Bucket, Decision, ListQuery, ReviewStatus, Store, StoreError};
use crate::timestamp::Timestamp;

pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const MAX_PAGE_SIZE: usize = 500;

#[derive(Debug, Clone, Default)]
pub struct ApiConfig {
    /// Static bearer token; `None` disables auth.
    pub token: Option<String>,
    /// CORS origins; `"*"` allows any.
    pub cors_allow: Vec<String>,
}

#[derive(Clone)]
struct AppState {
    store: Store,
    token: Option<Arc<str>>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            code: "bad_request",
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(json!({"error": {"code": self.code, "message": self.message}}));
        let mut resp = (self.status, body).into_response();
        if self.status == StatusCode::UNAUTHORIZED {
            resp.headers_mut()
                .insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
        }
        resp
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let (status, code) = match &e {
            StoreError::NotFound(_) | StoreError::UnknownStream(_) => (StatusCode::NOT_FOUND, "not_found"),
            StoreError::Conflict { .. } => (StatusCode::CONFLICT, "conflict"),
            StoreError::BadWindow(_) | StoreError::BadStreamId(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            StoreError::Io { .. } | StoreError::Corrupt { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError {
            status,
            code,
            message: e.to_string(),
        }
    }
}

type Params = HashMap<String, String>;

fn reject_unknown(params: &Params, allowed: &[&str]) -> Result<(), ApiError> {
    match params.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(ApiError::bad_request(format!("unknown query parameter `{k}`"))),
        None => Ok(()),
    }
}

fn param<T: FromStr>(params: &Params, name: &str) -> Result<Option<T>, ApiError>
where
    T::Err: std::fmt::Display,
{
    params
        .get(name)
        .map(|v| {
            v.parse::<T>()
                .map_err(|e| ApiError::bad_request(format!("`{name}`: {e}")))
        })
        .transpose()
}

fn required<T: FromStr>(params: &Params, name: &str) -> Result<T, ApiError>
where
    T::Err: std::fmt::Display,
{
    param(params, name)?.ok_or_else(|| ApiError::bad_request(format!("`{name}` is required")))
}

fn parse_id(raw: &str) -> Result<u64, ApiError> {
    raw.parse()
        .map_err(|_| ApiError::bad_request(format!("violation id `{raw}` is not a non-negative integer")))
}

async fn list_violations(State(app): State<AppState>, Query(params): Query<Params>) -> Result<Response, ApiError> {
    reject_unknown(&params, &["status", "from", "to", "page", "page_size", "stream_id"])?;
    let page_size = param::<usize>(&params, "page_size")?.unwrap_or(DEFAULT_PAGE_SIZE);
    if !(1..=MAX_PAGE_SIZE).contains(&page_size) {
        return Err(ApiError::bad_request(format!("`page_size` must be in 1..={MAX_PAGE_SIZE}")));
    }
    let page = param::<usize>(&params, "page")?.unwrap_or(1);
    if page == 0 {
        return Err(ApiError::bad_request("`page` starts at 1"));
    }
    let query = ListQuery {
        status: param::<ReviewStatus>(&params, "status")?,
        from: param::<Timestamp>(&params, "from")?,
        to: param::<Timestamp>(&params, "to")?,
        stream_id: params.get("stream_id").cloned(),
        page,
        page_size,
    };
    Ok(Json(app.store.state().list(&query)?).into_response())
}

async fn get_violation(State(app): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let id = parse_id(&id)?;
    let state = app.store.state();
    let r = state.get(id).ok_or(StoreError::NotFound(id))?;
    Ok(Json(r).into_response())
}

async fn get_snapshot(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(params): Query<Params>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    reject_unknown(&params, &["rev"])?;
    let id = parse_id(&id)?;
    let record = app
        .store
        .state()
        .get(id)
        .cloned()
        .ok_or(StoreError::NotFound(id))?;
    let Some(path) = app.store.snapshot_path(&record) else {
        return Err(ApiError {
            status: StatusCode::CONFLICT,
            code: "snapshot_pending",
            message: format!("snapshot of violation {id} has not been written yet"),
        });
    };
    let etag = format!("\"{}-{}\"", record.violation_id, record.revision);
    let cache = if param::<u64>(&params, "rev")? == Some(record.revision) {
        "public, max-age=31536000, immutable"
    } else {
        "no-cache"
    };
    let etag_value = HeaderValue::from_str(&etag).expect("ascii etag");
    if headers
        .get(header::IF_NONE_MATCH)
        .is_some_and(|v| v.as_bytes() == etag.as_bytes())
    {
        return Ok((
            StatusCode::NOT_MODIFIED,
            [(header::ETAG, etag_value), (header::CACHE_CONTROL, HeaderValue::from_static(cache))],
        )
            .into_response());
    }
    let bytes = tokio::fs::read(&path).await.map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        code: "internal",
        message: format!("reading snapshot: {e}"),
    })?;
    Ok((
        StatusCode::OK,
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("image/png")),
            (header::ETAG, etag_value),
            (header::CACHE_CONTROL, HeaderValue::from_static(cache)),
        ],
        Body::from(bytes),
    )
        .into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReviewBody {
    decision: String,
    #[serde(default)]
    note: Option<String>,
}

async fn post_review(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let id = parse_id(&id)?;
    let body: ReviewBody =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("request body: {e}")))?;
    let decision = match body.decision.as_str() {
        "confirmed" => Decision::Confirmed,
        "dismissed" => Decision::Dismissed,
        other => {
            return Err(ApiError::bad_request(format!(
                "decision `{other}` must be `confirmed` or `dismissed`"
            )))
        }
    };
    let store = app.store.clone();
    let updated = tokio::task::spawn_blocking(move || store.review(id, decision, body.note))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: e.to_string(),
        })??;
    Ok(Json(updated).into_response())
}

async fn get_stats(State(app): State<AppState>, Query(params): Query<Params>) -> Result<Response, ApiError> {
    reject_unknown(&params, &["from", "to", "bucket", "stream_id"])?;
    let from: Timestamp = required(&params, "from")?;
    let to: Timestamp = required(&params, "to")?;
    let bucket = param::<Bucket>(&params, "bucket")?.unwrap_or(Bucket::Hour);
    let stats = app
        .store
        .state()
        .stats(from, to, bucket, params.get("stream_id").map(String::as_str))?;
    Ok(Json(stats).into_response())
}

async fn get_vehicles(
    State(app): State<AppState>,
    Path(stream): Path<String>,
    Query(params): Query<Params>,
) -> Result<Response, ApiError> {
    reject_unknown(&params, &["from", "to"])?;
    let from: Timestamp = required(&params, "from")?;
    let to: Timestamp = required(&params, "to")?;
    Ok(Json(app.store.state().vehicle_count(&stream, from, to)?).into_response())
}

async fn not_found() -> ApiError {
    ApiError {
        status: StatusCode::NOT_FOUND,
        code: "not_found",
        message: "no such endpoint".into(),
    }
}

async fn require_token(State(app): State<AppState>, request: Request, next: Next) -> Response {
    if let Some(token) = &app.token {
        let ok = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == &**token);
        if !ok {
            return ApiError {
                status: StatusCode::UNAUTHORIZED,
                code: "unauthorized",
                message: "missing or invalid bearer token".into(),
            }
            .into_response();
        }
    }
    next.run(request).await
}

fn cors(origins: &[String]) -> Option<CorsLayer> {
    if origins.is_empty() {
        return None;
    }
    let layer = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::AUTHORIZATION, header::CONTENT_TYPE])
        .expose_headers([header::ETAG]);
    Some(if origins.iter().any(|o| o == "*") {
        layer.allow_origin(Any)
    } else {
        layer.allow_origin(AllowOrigin::list(
            origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()),
        ))
    })
}

pub fn router(store: Store, config: &ApiConfig) -> Router {
    let state = AppState {
        store,
        token: config.token.as_deref().map(Arc::from),
    };
    let api = Router::new()
        .route("/violations", get(list_violations))
        .route("/violations/{id}", get(get_violation))
        .route("/violations/{id}/snapshot", get(get_snapshot))
        .route("/violations/{id}/review", post(post_review))
        .route("/stats", get(get_stats))
        .route("/streams/{stream}/vehicles", get(get_vehicles))
        .fallback(not_found)
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state);
    let app = Router::new().nest("/api/v1", api).fallback(not_found);
    match cors(&config.cors_allow) {
        Some(layer) => app.layer(layer),
        None => app,
    }
}

/// Serves until `shutdown` resolves, then finishes in-flight requests.
pub async fn serve(
    listener: TcpListener,
    router: Router,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router).with_graceful_shutdown(shutdown).await
}
