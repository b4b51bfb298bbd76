//! Mock social network and mock external APIs used in place of the real
//! platforms.
//!
//! The OSN serves three virtual hosts from one TLS listener, dispatching on
//! the `Host` header. Markup is stable on purpose: the extraction rules in
//! `data/extract_rules.toml` are written against it.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use cfas_core::detectors::{AccountFeatures, VideoFeatures};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::tls::{CertAuthority, TlsError};

pub const OSN_HOSTS: [&str; 3] = ["facebook.mock", "twitter.mock", "youtube.mock"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatMessage {
    pub id: String,
    pub dir: String,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedItem {
    pub id: String,
    pub author: String,
    pub text: String,
    pub media: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Profile {
    pub name: String,
    pub bio: String,
}

/// Fixture content of the mock OSN.
#[derive(Debug, Clone)]
pub struct OsnFixtures {
    pub chats: BTreeMap<String, Vec<ChatMessage>>,
    pub feed: Vec<FeedItem>,
    pub profiles: BTreeMap<String, Profile>,
    pub videos: BTreeMap<String, VideoFeatures>,
    pub media: BTreeMap<String, Vec<u8>>,
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("{file}: {reason}")]
    Bad { file: String, reason: String },
}

fn parse<T: serde::de::DeserializeOwned>(file: &str, raw: &str) -> Result<T, FixtureError> {
    serde_json::from_str(raw).map_err(|e| FixtureError::Bad {
        file: file.into(),
        reason: e.to_string(),
    })
}

impl OsnFixtures {
    pub fn builtin() -> Self {
        let mut media = BTreeMap::new();
        media.insert(
            "feed_landscape.png".to_string(),
            include_bytes!("../fixtures/osn/media/feed_landscape.png").to_vec(),
        );
        media.insert(
            "feed_pattern.png".to_string(),
            include_bytes!("../fixtures/osn/media/feed_pattern.png").to_vec(),
        );
        media.insert(
            "meme_blocked.png".to_string(),
            include_bytes!("../fixtures/osn/media/meme_blocked.png").to_vec(),
        );
        Self {
            chats: parse("chats.json", include_str!("../fixtures/osn/chats.json")).unwrap(),
            feed: parse("feed.json", include_str!("../fixtures/osn/feed.json")).unwrap(),
            profiles: parse("profiles.json", include_str!("../fixtures/osn/profiles.json")).unwrap(),
            videos: parse("videos.json", include_str!("../fixtures/osn/videos.json")).unwrap(),
            media,
        }
    }

    /// Loads `<dir>/osn/*.json` and `<dir>/osn/media/*`.
    pub fn load(dir: &Path) -> Result<Self, FixtureError> {
        let osn = dir.join("osn");
        let read = |name: &str| {
            std::fs::read_to_string(osn.join(name)).map_err(|e| FixtureError::Bad {
                file: name.into(),
                reason: e.to_string(),
            })
        };
        let mut media = BTreeMap::new();
        if let Ok(entries) = std::fs::read_dir(osn.join("media")) {
            for e in entries.flatten() {
                if let Ok(bytes) = std::fs::read(e.path()) {
                    media.insert(e.file_name().to_string_lossy().into_owned(), bytes);
                }
            }
        }
        Ok(Self {
            chats: parse("chats.json", &read("chats.json")?)?,
            feed: parse("feed.json", &read("feed.json")?)?,
            profiles: parse("profiles.json", &read("profiles.json")?)?,
            videos: parse("videos.json", &read("videos.json")?)?,
            media,
        })
    }
}

struct OsnState {
    data: Mutex<OsnFixtures>,
    posts: Mutex<Vec<String>>,
    next_id: Mutex<u64>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn page(title: &str, body: &str) -> Response {
    (
        [(header::CONTENT_TYPE, "text/html; charset=utf-8")],
        format!("<!doctype html><html><head><title>{}</title></head><body>{body}</body></html>", escape(title)),
    )
        .into_response()
}

fn not_found() -> Response {
    (StatusCode::NOT_FOUND, "not found").into_response()
}

#[derive(Deserialize)]
struct ChatSend {
    to: String,
    text: String,
}

#[derive(Deserialize)]
struct PostBody {
    text: String,
}

impl OsnState {
    fn next(&self, prefix: &str) -> String {
        let mut n = self.next_id.lock();
        *n += 1;
        format!("{prefix}-{n}")
    }

    fn facebook(&self, method: &Method, uri: &Uri, body: &[u8]) -> Response {
        let path = uri.path();
        match (method.as_str(), path) {
            ("GET", "/") | ("GET", "/login") => page(
                "login",
                r#"<form method="post" action="/login"><input name="user"><input name="password" type="password"></form>"#,
            ),
            ("POST", "/login") => (
                [(header::SET_COOKIE, "session=mock; Path=/; HttpOnly")],
                Json(serde_json::json!({"ok": true})),
            )
                .into_response(),
            ("POST", "/api/chat/send") => match serde_json::from_slice::<ChatSend>(body) {
                Ok(msg) => {
                    let id = self.next(&msg.to);
                    self.data.lock().chats.entry(msg.to).or_default().push(ChatMessage {
                        id: id.clone(),
                        dir: "out".into(),
                        text: msg.text,
                    });
                    Json(serde_json::json!({"ok": true, "id": id})).into_response()
                }
                Err(e) => (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
            },
            ("POST", "/api/chat/inject") => match serde_json::from_slice::<ChatSend>(body) {
                // Test hook: a message arriving from `to`.
                Ok(msg) => {
                    let id = self.next(&msg.to);
                    self.data.lock().chats.entry(msg.to).or_default().push(ChatMessage {
                        id: id.clone(),
                        dir: "in".into(),
                        text: msg.text,
                    });
                    Json(serde_json::json!({"ok": true, "id": id})).into_response()
                }
                Err(e) => (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
            },
            ("POST", "/api/posts") => match serde_json::from_slice::<PostBody>(body) {
                Ok(p) => {
                    self.posts.lock().push(p.text);
                    Json(serde_json::json!({"ok": true})).into_response()
                }
                Err(e) => (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
            },
            ("POST", "/api/photos") => {
                if image::guess_format(body).is_err() {
                    return (StatusCode::UNSUPPORTED_MEDIA_TYPE, "not an image").into_response();
                }
                let id = self.next("photo");
                let name = format!("{id}.png");
                self.data.lock().media.insert(name.clone(), body.to_vec());
                Json(serde_json::json!({"ok": true, "url": format!("/media/{name}")})).into_response()
            }
            ("GET", "/wall") => {
                let items: String = self
                    .posts
                    .lock()
                    .iter()
                    .map(|p| format!(r#"<div class="post">{}</div>"#, escape(p)))
                    .collect();
                page("wall", &items)
            }
            ("GET", "/feed") => {
                let items: String = self
                    .data
                    .lock()
                    .feed
                    .iter()
                    .map(|f| {
                        format!(
                            r#"<div class="post" data-id="{}"><span class="author">{}</span><p>{}</p><img class="feed-img" src="/media/{}"></div>"#,
                            escape(&f.id),
                            escape(&f.author),
                            escape(&f.text),
                            escape(&f.media)
                        )
                    })
                    .collect();
                page("feed", &items)
            }
            ("GET", p) if p.starts_with("/chat/") => {
                let peer = &p["/chat/".len()..];
                let data = self.data.lock();
                let Some(msgs) = data.chats.get(peer) else {
                    return not_found();
                };
                let items: String = msgs
                    .iter()
                    .map(|m| {
                        let from = if m.dir == "in" { peer } else { "me" };
                        format!(
                            r#"<div class="msg" data-id="{}" data-dir="{}" data-from="{}" data-conv="{}">{}</div>"#,
                            escape(&m.id),
                            escape(&m.dir),
                            escape(from),
                            escape(peer),
                            escape(&m.text)
                        )
                    })
                    .collect();
                page(&format!("chat with {peer}"), &items)
            }
            ("GET", p) if p.starts_with("/media/") => {
                let name = &p["/media/".len()..];
                match self.data.lock().media.get(name) {
                    Some(bytes) => {
                        let ct = match image::guess_format(bytes) {
                            Ok(image::ImageFormat::Jpeg) => "image/jpeg",
                            _ => "image/png",
                        };
                        ([(header::CONTENT_TYPE, ct)], bytes.clone()).into_response()
                    }
                    None => not_found(),
                }
            }
            _ => not_found(),
        }
    }

    fn twitter(&self, method: &Method, uri: &Uri) -> Response {
        if method != Method::GET {
            return not_found();
        }
        let user = uri.path().trim_start_matches('/');
        let data = self.data.lock();
        match data.profiles.get(user) {
            Some(p) => page(
                user,
                &format!(
                    r#"<div class="profile" data-username="{}"><h1>{}</h1><p>{}</p></div>"#,
                    escape(user),
                    escape(&p.name),
                    escape(&p.bio)
                ),
            ),
            None => not_found(),
        }
    }

    fn youtube(&self, method: &Method, uri: &Uri) -> Response {
        if method != Method::GET || uri.path() != "/watch" {
            return not_found();
        }
        let id = uri
            .query()
            .and_then(|q| q.split('&').find_map(|kv| kv.strip_prefix("v=")))
            .unwrap_or_default();
        let data = self.data.lock();
        match data.videos.get(id) {
            Some(v) => page(
                v.title.as_deref().unwrap_or(id),
                &format!(
                    r#"<div id="player" data-video-id="{}"><h1>{}</h1></div>"#,
                    escape(id),
                    escape(v.title.as_deref().unwrap_or(""))
                ),
            ),
            None => not_found(),
        }
    }
}

async fn osn(State(st): State<Arc<OsnState>>, method: Method, uri: Uri, headers: HeaderMap, body: Bytes) -> Response {
    let host = headers
        .get(header::HOST)
        .and_then(|h| h.to_str().ok())
        .or_else(|| uri.host())
        .unwrap_or_default();
    let host = host.split(':').next().unwrap_or_default().to_ascii_lowercase();
    match host.as_str() {
        "facebook.mock" => st.facebook(&method, &uri, &body),
        "twitter.mock" => st.twitter(&method, &uri),
        "youtube.mock" => st.youtube(&method, &uri),
        _ => (StatusCode::MISDIRECTED_REQUEST, "unknown host").into_response(),
    }
}

pub fn osn_router(fixtures: OsnFixtures) -> Router {
    let st = Arc::new(OsnState {
        data: Mutex::new(fixtures),
        posts: Mutex::new(Vec::new()),
        next_id: Mutex::new(0),
    });
    Router::new().fallback(osn).with_state(st)
}

/// CA plus server config for the mock OSN's own TLS listener.
pub fn osn_tls() -> Result<(CertAuthority, Arc<rustls::ServerConfig>), TlsError> {
    let ca = CertAuthority::generate("mock osn ca")?;
    let cfg = ca.server_config(&OSN_HOSTS)?;
    Ok((ca, cfg))
}

/// Fixture content of the mock external APIs.
#[derive(Debug, Clone)]
pub struct ApiFixtures {
    pub accounts: BTreeMap<String, AccountFeatures>,
    pub bots: BTreeMap<String, bool>,
    pub videos: BTreeMap<String, VideoFeatures>,
}

impl ApiFixtures {
    fn from_raw(accounts: &str, bots: &str, videos: &str) -> Result<Self, FixtureError> {
        let list: Vec<AccountFeatures> = parse("accounts.json", accounts)?;
        Ok(Self {
            accounts: list.into_iter().map(|a| (a.username.clone(), a)).collect(),
            bots: parse("bots.json", bots)?,
            videos: parse("videos.json", videos)?,
        })
    }

    pub fn builtin() -> Self {
        Self::from_raw(
            include_str!("../fixtures/api/accounts.json"),
            include_str!("../fixtures/api/bots.json"),
            include_str!("../fixtures/osn/videos.json"),
        )
        .unwrap()
    }

    pub fn load(dir: &Path) -> Result<Self, FixtureError> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|e| FixtureError::Bad {
                file: p.display().to_string(),
                reason: e.to_string(),
            })
        };
        Self::from_raw(
            &read(&dir.join("api/accounts.json"))?,
            &read(&dir.join("api/bots.json"))?,
            &read(&dir.join("osn/videos.json"))?,
        )
    }
}

#[derive(Deserialize)]
struct UserQuery {
    user: String,
}

async fn botcheck(State(f): State<Arc<ApiFixtures>>, Query(q): Query<UserQuery>) -> Response {
    match f.bots.get(&q.user) {
        Some(b) => Json(serde_json::json!({"bot": b})).into_response(),
        None => not_found(),
    }
}

async fn video(State(f): State<Arc<ApiFixtures>>, UrlPath(id): UrlPath<String>) -> Response {
    match f.videos.get(&id) {
        Some(v) => Json(v.clone()).into_response(),
        None => not_found(),
    }
}

async fn recent(State(f): State<Arc<ApiFixtures>>, Query(q): Query<UserQuery>) -> Response {
    match f.accounts.get(&q.user) {
        Some(a) => Json(a.clone()).into_response(),
        None => not_found(),
    }
}

/// `GET /botcheck?user=`, `GET /video/{id}`, `GET /twitter/recent?user=`.
pub fn api_router(fixtures: ApiFixtures) -> Router {
    Router::new()
        .route("/botcheck", get(botcheck))
        .route("/video/{id}", get(video))
        .route("/twitter/recent", get(recent))
        .route("/health", get(|| async { "ok" }))
        .with_state(Arc::new(fixtures))
}
