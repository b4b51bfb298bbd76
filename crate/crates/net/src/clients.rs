//! Blocking HTTP clients: the back-end as seen from an IWP, and the mock
//! external APIs behind the account/bot/video detectors.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use cfas_core::backend::{FallbackRequest, FallbackResponse, IntakeRecord, IntakeSink, PublishedBundle};
use cfas_core::detectors::{AccountFeatures, ApiError, BotApi, ExternalApis, TwitterApi, VideoApi, VideoFeatures};
use cfas_core::imageguard::{KeyService, KeyServiceError};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use ureq::Agent;

pub const BUNDLE_VERSION_HEADER: &str = "x-bundle-version";
pub const BUNDLE_SHA_HEADER: &str = "x-bundle-sha256";
const MAX_BUNDLE_BYTES: u64 = 32 << 20;

fn agent(timeout: Duration) -> Agent {
    Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(#[from] ureq::Error),
    #[error("status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("not registered with the back-end")]
    NoToken,
    #[error("malformed response: {0}")]
    Malformed(String),
}

fn check(mut resp: ureq::http::Response<ureq::Body>) -> Result<ureq::http::Response<ureq::Body>, ClientError> {
    let status = resp.status().as_u16();
    if (200..300).contains(&status) || status == 304 {
        return Ok(resp);
    }
    let body = resp.body_mut().read_to_string().unwrap_or_default();
    Err(ClientError::Status { status, body })
}

#[derive(Serialize, Deserialize)]
pub struct RegisterRequest {
    pub code: String,
    pub iwp_id: String,
}

#[derive(Serialize, Deserialize)]
pub struct RegisterResponse {
    pub token: String,
}

#[derive(Serialize, Deserialize)]
pub struct KeyRegistration {
    pub image_fp: String,
    pub audience: BTreeSet<String>,
    /// Hex-encoded 32-byte key.
    pub key: String,
}

#[derive(Serialize, Deserialize)]
pub struct KeyRef {
    pub key_ref: String,
}

#[derive(Serialize, Deserialize)]
pub struct KeyList {
    pub keys: Vec<String>,
}

/// The back-end API from an IWP's side.
pub struct BackendClient {
    base: String,
    agent: Agent,
    token: RwLock<Option<String>>,
}

impl BackendClient {
    pub fn new(base: &str, timeout: Duration) -> Self {
        Self {
            base: base.trim_end_matches('/').to_string(),
            agent: agent(timeout),
            token: RwLock::new(None),
        }
    }

    pub fn with_token(self, token: &str) -> Self {
        *self.token.write() = Some(token.to_string());
        self
    }

    pub fn token(&self) -> Option<String> {
        self.token.read().clone()
    }

    fn bearer(&self) -> Result<String, ClientError> {
        self.token
            .read()
            .as_ref()
            .map(|t| format!("Bearer {t}"))
            .ok_or(ClientError::NoToken)
    }

    pub fn health(&self) -> bool {
        self.agent
            .get(format!("{}/health", self.base))
            .call()
            .is_ok_and(|r| r.status() == 200)
    }

    pub fn register(&self, code: &str, iwp_id: &str) -> Result<String, ClientError> {
        let resp = self.agent.post(format!("{}/register", self.base)).send_json(RegisterRequest {
            code: code.into(),
            iwp_id: iwp_id.into(),
        })?;
        let r: RegisterResponse = check(resp)?
            .body_mut()
            .read_json()
            .map_err(|e| ClientError::Malformed(e.to_string()))?;
        *self.token.write() = Some(r.token.clone());
        Ok(r.token)
    }

    /// `None` when `have` is already the latest version. The caller must
    /// verify the hash before using the archive.
    pub fn sync(&self, have: Option<&str>) -> Result<Option<PublishedBundle>, ClientError> {
        let mut req = self
            .agent
            .get(format!("{}/bundles/latest", self.base))
            .header("authorization", &self.bearer()?);
        if let Some(v) = have {
            req = req.header("if-none-match", v);
        }
        let mut resp = check(req.call()?)?;
        if resp.status() == 304 {
            return Ok(None);
        }
        let header = |name: &str| {
            resp.headers()
                .get(name)
                .and_then(|v| v.to_str().ok())
                .map(str::to_string)
                .ok_or_else(|| ClientError::Malformed(format!("missing {name}")))
        };
        let version = header(BUNDLE_VERSION_HEADER)?;
        let sha256 = header(BUNDLE_SHA_HEADER)?;
        let zip = resp
            .body_mut()
            .with_config()
            .limit(MAX_BUNDLE_BYTES)
            .read_to_vec()
            .map_err(|e| ClientError::Malformed(e.to_string()))?;
        Ok(Some(PublishedBundle {
            version,
            sha256,
            zip: Arc::new(zip),
        }))
    }

    pub fn fallback_analyze(&self, req: &FallbackRequest) -> Result<FallbackResponse, ClientError> {
        let resp = self
            .agent
            .post(format!("{}/fallback/analyze", self.base))
            .header("authorization", &self.bearer()?)
            .send_json(req)?;
        check(resp)?
            .body_mut()
            .read_json()
            .map_err(|e| ClientError::Malformed(e.to_string()))
    }

    pub fn intake(&self, record: &IntakeRecord) -> Result<(), ClientError> {
        let resp = self
            .agent
            .post(format!("{}/intake", self.base))
            .header("authorization", &self.bearer()?)
            .send_json(record)?;
        check(resp).map(|_| ())
    }
}

impl IntakeSink for BackendClient {
    fn send(&self, record: IntakeRecord) -> Result<(), String> {
        self.intake(&record).map_err(|e| e.to_string())
    }
}

impl KeyService for BackendClient {
    fn register(&self, image_fp: &str, audience: &BTreeSet<String>, key: &[u8; 32]) -> Result<String, KeyServiceError> {
        let unavailable = |e: ClientError| KeyServiceError::Unavailable(e.to_string());
        let resp = self
            .agent
            .post(format!("{}/keys", self.base))
            .header("authorization", &self.bearer().map_err(unavailable)?)
            .send_json(KeyRegistration {
                image_fp: image_fp.into(),
                audience: audience.clone(),
                key: hex::encode(key),
            })
            .map_err(|e| unavailable(e.into()))?;
        match check(resp) {
            Ok(mut r) => r
                .body_mut()
                .read_json::<KeyRef>()
                .map(|k| k.key_ref)
                .map_err(|e| KeyServiceError::Unavailable(e.to_string())),
            Err(ClientError::Status { status, body }) if status < 500 => Err(KeyServiceError::Rejected(body)),
            Err(e) => Err(unavailable(e)),
        }
    }

    fn fetch(&self, image_fp: &str, viewer: &str) -> Result<Vec<[u8; 32]>, KeyServiceError> {
        let unavailable = |e: ClientError| KeyServiceError::Unavailable(e.to_string());
        let resp = self
            .agent
            .get(format!("{}/keys/{image_fp}", self.base))
            .query("viewer", viewer)
            .header("authorization", &self.bearer().map_err(unavailable)?)
            .call()
            .map_err(|e| unavailable(e.into()))?;
        match check(resp) {
            Ok(mut r) => {
                let list: KeyList = r
                    .body_mut()
                    .read_json()
                    .map_err(|e| KeyServiceError::Unavailable(e.to_string()))?;
                list.keys
                    .iter()
                    .map(|k| {
                        hex::decode(k)
                            .ok()
                            .and_then(|b| <[u8; 32]>::try_from(b).ok())
                            .ok_or_else(|| KeyServiceError::Unavailable("malformed key".into()))
                    })
                    .collect()
            }
            Err(ClientError::Status { status, body }) if status < 500 => Err(KeyServiceError::Rejected(body)),
            Err(e) => Err(unavailable(e)),
        }
    }
}

/// Clients for the mock bot, video and twitter APIs.
pub struct MockApis {
    base: String,
    agent: Agent,
}

impl MockApis {
    pub fn new(base: &str) -> Arc<Self> {
        Arc::new(Self {
            base: base.trim_end_matches('/').to_string(),
            agent: agent(Duration::from_secs(1)),
        })
    }

    pub fn external(self: &Arc<Self>) -> ExternalApis {
        ExternalApis {
            twitter: Some(self.clone()),
            bot: Some(self.clone()),
            video: Some(self.clone()),
        }
    }

    fn get_json<T: serde::de::DeserializeOwned>(&self, path: &str, query: Option<(&str, &str)>) -> Result<T, ApiError> {
        let mut req = self.agent.get(format!("{}{path}", self.base));
        if let Some((k, v)) = query {
            req = req.query(k, v);
        }
        let resp = req.call().map_err(|e| ApiError(e.to_string()))?;
        check(resp)
            .map_err(|e| ApiError(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| ApiError(e.to_string()))
    }
}

#[derive(Deserialize)]
struct BotAnswer {
    bot: bool,
}

impl BotApi for MockApis {
    fn is_bot(&self, username: &str) -> Result<bool, ApiError> {
        self.get_json::<BotAnswer>("/botcheck", Some(("user", username)))
            .map(|a| a.bot)
    }
}

impl VideoApi for MockApis {
    fn features(&self, video_id: &str) -> Result<VideoFeatures, ApiError> {
        if !video_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(ApiError(format!("bad video id {video_id:?}")));
        }
        self.get_json(&format!("/video/{video_id}"), None)
    }
}

impl TwitterApi for MockApis {
    fn recent_posts(&self, username: &str) -> Result<AccountFeatures, ApiError> {
        self.get_json("/twitter/recent", Some(("user", username)))
    }
}
