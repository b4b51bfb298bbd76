//! HTTP front of the back-end: enrollment, bundle distribution, consented
//! intake, fallback analysis and the image key service.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cfas_core::backend::{Backend, BackendError, FallbackRequest, IntakeRecord, SyncResponse};
use cfas_core::bundle::DetectorBundle;
use cfas_core::imageguard::{KeyService, KeyServiceError};
use serde::Deserialize;

use crate::clients::{KeyList, KeyRef, KeyRegistration, RegisterRequest, RegisterResponse, BUNDLE_SHA_HEADER, BUNDLE_VERSION_HEADER};

const MAX_BODY: usize = 32 << 20;

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({"error": self.1}))).into_response()
    }
}

impl From<BackendError> for ApiError {
    fn from(e: BackendError) -> Self {
        let status = match &e {
            BackendError::BadEnrollment | BackendError::Rejected(_) => StatusCode::FORBIDDEN,
            BackendError::Unregistered | BackendError::Unauthorized => StatusCode::UNAUTHORIZED,
            BackendError::Bundle(_) => StatusCode::BAD_REQUEST,
            BackendError::Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

fn bearer(headers: &HeaderMap) -> String {
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .unwrap_or_default()
        .to_string()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

type B = State<Arc<Backend>>;

async fn register(State(b): B, Json(req): Json<RegisterRequest>) -> Result<Json<RegisterResponse>, ApiError> {
    let token = b.register(&req.code, &req.iwp_id)?;
    Ok(Json(RegisterResponse { token }))
}

#[derive(Deserialize)]
struct EnrollRequest {
    household_id: String,
}

async fn enroll(State(b): B, headers: HeaderMap, Json(req): Json<EnrollRequest>) -> Result<Response, ApiError> {
    if bearer(&headers) != b.publisher_token() {
        return Err(BackendError::Unauthorized.into());
    }
    let code = b.issue_enrollment_code(&req.household_id);
    Ok(Json(serde_json::json!({ "code": code })).into_response())
}

async fn latest(State(b): B, headers: HeaderMap) -> Result<Response, ApiError> {
    let have = headers
        .get(header::IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        .map(|v| v.trim_matches('"').to_string());
    match b.sync_bundles(&bearer(&headers), have.as_deref())? {
        SyncResponse::NotModified => Ok(StatusCode::NOT_MODIFIED.into_response()),
        SyncResponse::Bundle(p) => Ok((
            [
                (header::CONTENT_TYPE, "application/zip".to_string()),
                (header::HeaderName::from_static(BUNDLE_VERSION_HEADER), p.version.clone()),
                (header::HeaderName::from_static(BUNDLE_SHA_HEADER), p.sha256.clone()),
            ],
            p.zip.to_vec(),
        )
            .into_response()),
    }
}

async fn publish(State(b): B, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let sha = headers
        .get(BUNDLE_SHA_HEADER)
        .and_then(|v| v.to_str().ok())
        .unwrap_or_default()
        .to_string();
    let bundle = DetectorBundle::from_zip(&body, &sha).map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))?;
    let version = b.publish_bundle(&bearer(&headers), bundle)?;
    let refreshed = b.clone();
    blocking(move || refreshed.refresh_fallback()).await??;
    Ok(Json(serde_json::json!({ "version": version })).into_response())
}

async fn intake(State(b): B, headers: HeaderMap, Json(record): Json<IntakeRecord>) -> Result<Response, ApiError> {
    let id = b.intake(&bearer(&headers), record)?;
    Ok((StatusCode::CREATED, Json(serde_json::json!({ "id": id }))).into_response())
}

async fn delete_intake(State(b): B, headers: HeaderMap) -> Result<Response, ApiError> {
    let n = b.delete_intake(&bearer(&headers))?;
    Ok(Json(serde_json::json!({ "deleted": n })).into_response())
}

async fn fallback(State(b): B, headers: HeaderMap, Json(req): Json<FallbackRequest>) -> Result<Response, ApiError> {
    let token = bearer(&headers);
    let resp = blocking(move || b.fallback_analyze(&token, req)).await??;
    Ok(Json(resp).into_response())
}

async fn put_key(State(b): B, headers: HeaderMap, Json(req): Json<KeyRegistration>) -> Result<Json<KeyRef>, ApiError> {
    b.authenticate(&bearer(&headers))?;
    let key: [u8; 32] = hex::decode(&req.key)
        .ok()
        .and_then(|k| k.try_into().ok())
        .ok_or_else(|| ApiError(StatusCode::BAD_REQUEST, "key must be 64 hex digits".into()))?;
    let key_ref = b
        .key_vault()
        .register(&req.image_fp, &req.audience, &key)
        .map_err(key_error)?;
    Ok(Json(KeyRef { key_ref }))
}

#[derive(Deserialize)]
struct ViewerQuery {
    viewer: String,
}

async fn get_key(
    State(b): B,
    headers: HeaderMap,
    Path(fp): Path<String>,
    Query(q): Query<ViewerQuery>,
) -> Result<Json<KeyList>, ApiError> {
    b.authenticate(&bearer(&headers))?;
    let keys = b.key_vault().fetch(&fp, &q.viewer).map_err(key_error)?;
    Ok(Json(KeyList {
        keys: keys.iter().map(hex::encode).collect(),
    }))
}

fn key_error(e: KeyServiceError) -> ApiError {
    match e {
        KeyServiceError::Rejected(m) => ApiError(StatusCode::FORBIDDEN, m),
        KeyServiceError::Unavailable(m) => ApiError(StatusCode::SERVICE_UNAVAILABLE, m),
    }
}

pub fn router(backend: Arc<Backend>) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/register", post(register))
        .route("/enroll", post(enroll))
        .route("/bundles/latest", get(latest))
        .route("/bundles", post(publish))
        .route("/intake", post(intake).delete(delete_intake))
        .route("/fallback/analyze", post(fallback))
        .route("/keys", post(put_key))
        .route("/keys/{fp}", get(get_key))
        .layer(DefaultBodyLimit::max(MAX_BODY))
        .with_state(backend)
}
