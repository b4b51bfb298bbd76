//! The intercepting forward proxy.
//!
//! CONNECT tunnels to intercepted hosts are terminated with a leaf signed
//! by the household CA; requests and responses are parsed by the extractor,
//! analyzed through the IWP and forwarded, altered or blocked. Every other
//! tunnel is copied byte for byte.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;

use bytes::Bytes;
use cfas_core::dal::{InterceptDecision, Replacement};
use cfas_core::imageguard::AudienceGroup;
use cfas_core::{EventKind, MechanismKind};
use http_body_util::{BodyExt, Full};
use hyper::body::Incoming;
use hyper::header::{self, HeaderMap, HeaderValue};
use hyper::service::service_fn;
use hyper::{Method, Request, Response, StatusCode};
use hyper_util::rt::TokioIo;
use rustls::pki_types::CertificateDer;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::watch;
use tokio_rustls::TlsAcceptor;

use crate::extract::{Extracted, Extractor, Source};
use crate::iwp::Iwp;
use crate::server::Running;
use crate::tls::CertAuthority;

const MAX_BODY: usize = 32 << 20;

const HOP_BY_HOP: [&str; 9] = [
    "connection",
    "keep-alive",
    "proxy-connection",
    "proxy-authenticate",
    "proxy-authorization",
    "te",
    "trailer",
    "transfer-encoding",
    "upgrade",
];

#[derive(Clone, Default)]
pub struct ProxyOptions {
    pub intercept_hosts: Vec<String>,
    /// Host or host/path-prefix entries blocked at cybersafety level 2.
    pub blocklist: Vec<String>,
    /// Fixed upstream addresses by host name.
    pub resolve: BTreeMap<String, SocketAddr>,
    /// Extra roots trusted for upstream TLS.
    pub upstream_roots: Vec<CertificateDer<'static>>,
}

/// Parses a blocklist file: one entry per line, `#` comments.
pub fn parse_blocklist(raw: &str) -> Vec<String> {
    raw.lines()
        .map(|l| l.split('#').next().unwrap_or_default().trim().to_ascii_lowercase())
        .filter(|l| !l.is_empty())
        .collect()
}

pub struct Proxy {
    iwp: Arc<Iwp>,
    ca: Arc<CertAuthority>,
    extractor: Extractor,
    options: ProxyOptions,
    upstream: reqwest::Client,
}

type Body = Full<Bytes>;

fn text_response(status: StatusCode, text: &str) -> Response<Body> {
    let mut r = Response::new(Full::new(Bytes::from(text.to_string())));
    *r.status_mut() = status;
    r.headers_mut()
        .insert(header::CONTENT_TYPE, HeaderValue::from_static("text/plain; charset=utf-8"));
    r
}

/// The page shown in place of blocked content.
pub fn blocked_page(reason: &str) -> Response<Body> {
    let html = format!(
        "<!doctype html><html><head><title>Blocked</title></head><body>\
         <h1>This content was blocked</h1><p>Your family safety settings blocked this ({reason}).</p>\
         </body></html>"
    );
    let mut r = Response::new(Full::new(Bytes::from(html)));
    *r.status_mut() = StatusCode::FORBIDDEN;
    r.headers_mut()
        .insert(header::CONTENT_TYPE, HeaderValue::from_static("text/html; charset=utf-8"));
    r.headers_mut()
        .insert("x-cfas-blocked", HeaderValue::from_str(reason).unwrap_or(HeaderValue::from_static("policy")));
    r
}

fn split_authority(authority: &str) -> (String, u16) {
    match authority.rsplit_once(':') {
        Some((h, p)) => (h.trim_matches(['[', ']']).to_ascii_lowercase(), p.parse().unwrap_or(443)),
        None => (authority.to_ascii_lowercase(), 443),
    }
}

fn escape_html(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Masks the given byte ranges of `text`, snapped outward to char boundaries.
pub fn mask(text: &str, ranges: &[(usize, usize)]) -> String {
    let hidden = |i: usize| ranges.iter().any(|&(s, e)| i >= s && i < e);
    text.char_indices()
        .map(|(i, c)| if hidden(i) && !c.is_whitespace() { '*' } else { c })
        .collect()
}

fn parse_audience(query: Option<&str>) -> Vec<AudienceGroup> {
    let raw = query
        .unwrap_or_default()
        .split('&')
        .find_map(|kv| kv.strip_prefix("audience="))
        .unwrap_or("family");
    let groups: Vec<AudienceGroup> = raw
        .split(',')
        .filter_map(|g| match g.trim() {
            "family" => Some(AudienceGroup::Family),
            "friends" => Some(AudienceGroup::Friends),
            "classmates" => Some(AudienceGroup::Classmates),
            "" => None,
            other => Some(AudienceGroup::Custom(vec![other.to_string()])),
        })
        .collect();
    if groups.is_empty() {
        vec![AudienceGroup::Family]
    } else {
        groups
    }
}

fn block_reason(m: MechanismKind) -> &'static str {
    m.as_str()
}

impl Proxy {
    pub fn new(iwp: Arc<Iwp>, ca: Arc<CertAuthority>, options: ProxyOptions) -> anyhow::Result<Arc<Self>> {
        let mut builder = reqwest::Client::builder()
            .use_rustls_tls()
            .redirect(reqwest::redirect::Policy::none())
            .no_proxy()
            .timeout(std::time::Duration::from_secs(30));
        for (host, addr) in &options.resolve {
            builder = builder.resolve(host, *addr);
        }
        for root in &options.upstream_roots {
            builder = builder.add_root_certificate(reqwest::Certificate::from_der(root)?);
        }
        Ok(Arc::new(Self {
            iwp,
            ca,
            extractor: Extractor::builtin(),
            options,
            upstream: builder.build()?,
        }))
    }

    pub fn iwp(&self) -> &Arc<Iwp> {
        &self.iwp
    }

    fn intercepts(&self, host: &str) -> bool {
        self.options.intercept_hosts.iter().any(|h| h.eq_ignore_ascii_case(host))
    }

    fn blocklisted(&self, host: &str, path: Option<&str>) -> bool {
        if self.options.blocklist.is_empty() {
            return false;
        }
        self.options.blocklist.iter().any(|entry| match entry.split_once('/') {
            Some((h, prefix)) => {
                h == host && path.is_some_and(|p| p.trim_start_matches('/').starts_with(prefix))
            }
            None => host == entry || host.ends_with(&format!(".{entry}")),
        })
    }

    fn blocklist_applies(&self) -> bool {
        self.iwp.cybersafety_level() == cfas_core::model::CybersafetyLevel::L2
    }

    pub async fn serve(self: Arc<Self>, listener: TcpListener) -> Running {
        let addr = listener.local_addr().expect("bound listener");
        let (tx, mut rx) = watch::channel(false);
        let task = tokio::spawn(async move {
            loop {
                let (tcp, _) = tokio::select! {
                    r = listener.accept() => match r {
                        Ok(c) => c,
                        Err(err) => {
                            tracing::warn!(%err, "proxy accept failed");
                            continue;
                        }
                    },
                    _ = rx.wait_for(|v| *v) => break,
                };
                let _ = tcp.set_nodelay(true);
                let proxy = self.clone();
                tokio::spawn(async move {
                    let svc = service_fn(move |req| {
                        let proxy = proxy.clone();
                        async move { Ok::<_, Infallible>(proxy.front(req).await) }
                    });
                    if let Err(err) = hyper::server::conn::http1::Builder::new()
                        .serve_connection(TokioIo::new(tcp), svc)
                        .with_upgrades()
                        .await
                    {
                        tracing::debug!(%err, "proxy client connection closed");
                    }
                });
            }
        });
        Running::new(addr, tx, task)
    }

    /// Requests arriving on the proxy port itself.
    async fn front(self: Arc<Self>, req: Request<Incoming>) -> Response<Body> {
        if req.method() == Method::CONNECT {
            return self.connect(req);
        }
        let Some(host) = req.uri().host().map(str::to_ascii_lowercase) else {
            return text_response(StatusCode::BAD_REQUEST, "absolute-form request expected");
        };
        if self.blocklist_applies() && self.blocklisted(&host, Some(req.uri().path())) {
            return blocked_page("blocklist");
        }
        // Plain HTTP is relayed without inspection; the mock platforms are
        // only reachable over TLS.
        let url = req.uri().to_string();
        self.forward(req, url).await.0
    }

    fn connect(self: Arc<Self>, req: Request<Incoming>) -> Response<Body> {
        let Some(authority) = req.uri().authority().map(|a| a.to_string()) else {
            return text_response(StatusCode::BAD_REQUEST, "CONNECT needs host:port");
        };
        let (host, port) = split_authority(&authority);
        if self.blocklist_applies() && self.blocklisted(&host, None) {
            return blocked_page("blocklist");
        }
        let intercept = self.intercepts(&host);
        let tls = if intercept {
            match self.ca.server_config(&[host.as_str()]) {
                Ok(c) => Some(c),
                Err(err) => {
                    tracing::error!(%err, host, "no leaf certificate, refusing tunnel");
                    return text_response(StatusCode::BAD_GATEWAY, "interception unavailable");
                }
            }
        } else {
            None
        };
        let proxy = self.clone();
        tokio::spawn(async move {
            let upgraded = match hyper::upgrade::on(req).await {
                Ok(u) => TokioIo::new(u),
                Err(err) => {
                    tracing::debug!(%err, "upgrade failed");
                    return;
                }
            };
            match tls {
                Some(config) => proxy.intercept(upgraded, config, host, port).await,
                None => proxy.tunnel(upgraded, &host, port).await,
            }
        });
        Response::new(Full::new(Bytes::new()))
    }

    async fn tunnel(&self, mut client: TokioIo<hyper::upgrade::Upgraded>, host: &str, port: u16) {
        let target = match self.options.resolve.get(host) {
            Some(addr) => TcpStream::connect(*addr).await,
            None => TcpStream::connect((host, port)).await,
        };
        let mut upstream = match target {
            Ok(s) => s,
            Err(err) => {
                tracing::debug!(%err, host, "tunnel target unreachable");
                return;
            }
        };
        let _ = upstream.set_nodelay(true);
        if let Err(err) = tokio::io::copy_bidirectional(&mut client, &mut upstream).await {
            tracing::debug!(%err, host, "tunnel closed");
        }
    }

    async fn intercept(
        self: Arc<Self>,
        client: TokioIo<hyper::upgrade::Upgraded>,
        config: Arc<rustls::ServerConfig>,
        host: String,
        port: u16,
    ) {
        let tls = match TlsAcceptor::from(config).accept(client).await {
            Ok(s) => s,
            Err(err) => {
                // The client does not trust the household CA; nothing is
                // passed through unseen.
                tracing::warn!(%err, host, "tls handshake with client failed");
                return;
            }
        };
        let authority = if port == 443 { host.clone() } else { format!("{host}:{port}") };
        let svc = service_fn(move |req| {
            let proxy = self.clone();
            let (host, authority) = (host.clone(), authority.clone());
            async move { Ok::<_, Infallible>(proxy.inspect(req, &host, &authority).await) }
        });
        if let Err(err) = hyper::server::conn::http1::Builder::new()
            .serve_connection(TokioIo::new(tls), svc)
            .await
        {
            tracing::debug!(%err, "intercepted connection closed");
        }
    }

    /// Sends `req` upstream; returns the response and, when asked, its body.
    async fn forward(&self, req: Request<Incoming>, url: String) -> (Response<Body>, Option<Bytes>) {
        let (parts, body) = req.into_parts();
        let body = match collect(body).await {
            Ok(b) => b,
            Err(resp) => return (resp, None),
        };
        self.send(&parts.method, &parts.headers, url, body).await
    }

    async fn send(&self, method: &Method, headers: &HeaderMap, url: String, body: Bytes) -> (Response<Body>, Option<Bytes>) {
        let mut out = self.upstream.request(method.clone(), &url);
        for (name, value) in headers {
            if !HOP_BY_HOP.contains(&name.as_str()) && name != header::HOST && name != header::CONTENT_LENGTH {
                out = out.header(name, value);
            }
        }
        let resp = match out.body(body).send().await {
            Ok(r) => r,
            Err(err) => {
                tracing::warn!(%err, url, "upstream request failed");
                return (text_response(StatusCode::BAD_GATEWAY, "upstream unreachable"), None);
            }
        };
        let status = resp.status();
        let headers = resp.headers().clone();
        let bytes = match resp.bytes().await {
            Ok(b) => b,
            Err(err) => {
                tracing::warn!(%err, url, "upstream body failed");
                return (text_response(StatusCode::BAD_GATEWAY, "upstream body failed"), None);
            }
        };
        (build_response(status, &headers, bytes.clone()), Some(bytes))
    }

    /// One request inside an intercepted tunnel.
    async fn inspect(self: Arc<Self>, req: Request<Incoming>, host: &str, authority: &str) -> Response<Body> {
        let method = req.method().clone();
        let path = req.uri().path().to_string();
        let query = req.uri().query().map(str::to_string);
        let path_and_query = req.uri().path_and_query().map_or("/".to_string(), |p| p.to_string());
        if self.blocklist_applies() && self.blocklisted(host, Some(&path)) {
            return blocked_page("blocklist");
        }
        let (parts, body) = req.into_parts();
        let mut body = match collect(body).await {
            Ok(b) => b,
            Err(resp) => return resp,
        };
        let child = self.iwp.child_id().to_string();

        let outbound = self
            .extractor
            .extract(Source::Request, host, method.as_str(), &path, &body, &child);
        for item in outbound {
            let decision = self.analyze(&item).await;
            match decision {
                InterceptDecision::Pass | InterceptDecision::Redact { .. } => {}
                InterceptDecision::Block { mechanism } => return blocked_page(block_reason(mechanism)),
                InterceptDecision::Replace { with } => {
                    let audience = parse_audience(query.as_deref());
                    let original = body.clone();
                    let iwp = self.iwp.clone();
                    let child = child.clone();
                    let replaced = tokio::task::spawn_blocking(move || {
                        iwp.transform_upload(&original, with, &child, &audience)
                    })
                    .await;
                    match replaced {
                        Ok(Ok(bytes)) => body = Bytes::from(bytes),
                        Ok(Err(err)) => {
                            tracing::warn!(%err, "upload transform failed, blocking");
                            return blocked_page(block_reason(MechanismKind::SensitiveImage));
                        }
                        Err(err) => {
                            tracing::error!(%err, "upload transform panicked, blocking");
                            return blocked_page(block_reason(MechanismKind::SensitiveImage));
                        }
                    }
                }
            }
        }

        let url = format!("https://{authority}{path_and_query}");
        let (resp, resp_body) = self.send(&method, &parts.headers, url, body).await;
        let Some(resp_body) = resp_body else {
            return resp;
        };
        if !resp.status().is_success() || !self.extractor.wants_response(host, method.as_str(), &path) {
            return resp;
        }
        self.inspect_response(resp, resp_body, host, method.as_str(), &path, &child).await
    }

    async fn inspect_response(
        &self,
        resp: Response<Body>,
        body: Bytes,
        host: &str,
        method: &str,
        path: &str,
        child: &str,
    ) -> Response<Body> {
        let mut body = body;
        let mut content_type = resp.headers().get(header::CONTENT_TYPE).cloned();
        if let Some(opened) = {
            let iwp = self.iwp.clone();
            let served = body.clone();
            tokio::task::spawn_blocking(move || iwp.open_feed_image(&served)).await.ok().flatten()
        } {
            body = Bytes::from(opened);
        }
        let inbound = self.extractor.extract(Source::Response, host, method, path, &body, child);
        let mut html: Option<String> = None;
        for item in inbound {
            let key = item.item_id.as_ref().map(|id| {
                let conv = match &item.event.payload {
                    cfas_core::EventPayload::Chat { conversation, .. } => conversation.as_str(),
                    _ => "",
                };
                format!("{host}/{conv}/{id}")
            });
            let decision = match key.as_deref().and_then(|k| self.iwp.item_decision(k)) {
                Some(d) => d,
                None => {
                    let d = self.analyze(&item).await;
                    if let Some(k) = &key {
                        self.iwp.remember_item(k, d.clone());
                    }
                    d
                }
            };
            match decision {
                InterceptDecision::Pass => {}
                InterceptDecision::Block { mechanism } => return blocked_page(block_reason(mechanism)),
                InterceptDecision::Replace { with: Replacement::StaticNotice } => {
                    body = Bytes::from_static(cfas_core::imageguard::notice_image());
                    content_type = Some(HeaderValue::from_static("image/png"));
                }
                InterceptDecision::Replace { with } => {
                    tracing::warn!(?with, "replacement not applicable to inbound content, blocking");
                    return blocked_page("policy");
                }
                InterceptDecision::Redact { ranges } => {
                    let Some(text) = item.event.text() else { continue };
                    let page = html.get_or_insert_with(|| String::from_utf8_lossy(&body).into_owned());
                    let (from, to) = (escape_html(text), escape_html(&mask(text, &ranges)));
                    *page = page.replacen(&format!(">{from}<"), &format!(">{to}<"), 1);
                }
            }
        }
        if let Some(page) = html {
            body = Bytes::from(page);
        }
        let mut out = build_response(resp.status(), resp.headers(), body);
        if let Some(ct) = content_type {
            out.headers_mut().insert(header::CONTENT_TYPE, ct);
        }
        out
    }

    async fn analyze(&self, item: &Extracted) -> InterceptDecision {
        let iwp = self.iwp.clone();
        let event = item.event.clone();
        let image = item.image.clone();
        let kind = event.kind;
        let result = tokio::task::spawn_blocking(move || {
            let hold = iwp.hold_for(kind);
            let analysis = iwp.analyze(event.clone(), image.as_deref(), hold);
            let decision = match analysis {
                Ok(a) => a.decision,
                Err(err) => {
                    tracing::error!(%err, kind = kind.as_str(), "analysis failed");
                    fail_decision(&iwp, kind)
                }
            };
            iwp.record_applied(&event, &decision);
            decision
        })
        .await;
        result.unwrap_or_else(|err| {
            tracing::error!(%err, "analysis task panicked");
            fail_decision(&self.iwp, kind)
        })
    }
}

/// Fail open, except that an upload the policy wants protected is blocked.
fn fail_decision(iwp: &Iwp, kind: EventKind) -> InterceptDecision {
    let protect = kind == EventKind::ImageUpload
        && iwp
            .policy()
            .map(|p| p.effective_cybersafety(chrono::Utc::now()).enforces(MechanismKind::SensitiveImage))
            .unwrap_or(true);
    if protect {
        InterceptDecision::Block {
            mechanism: MechanismKind::SensitiveImage,
        }
    } else {
        InterceptDecision::Pass
    }
}

async fn collect(body: Incoming) -> Result<Bytes, Response<Body>> {
    match http_body_util::Limited::new(body, MAX_BODY).collect().await {
        Ok(c) => Ok(c.to_bytes()),
        Err(err) => {
            tracing::warn!(%err, "request body rejected");
            Err(text_response(StatusCode::PAYLOAD_TOO_LARGE, "body too large"))
        }
    }
}

fn build_response(status: StatusCode, headers: &HeaderMap, body: Bytes) -> Response<Body> {
    let mut out = Response::new(Full::new(body));
    *out.status_mut() = status;
    for (name, value) in headers {
        if !HOP_BY_HOP.contains(&name.as_str()) && name != header::CONTENT_LENGTH {
            out.headers_mut().append(name, value.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_hides_only_the_ranges() {
        assert_eq!(mask("you are a loser ok", &[(10, 15)]), "you are a ***** ok");
        assert_eq!(mask("héllo", &[(0, 3)]), "**llo");
    }

    #[test]
    fn blocklist_parsing() {
        let l = parse_blocklist("# bad sites\nBad.example\n\nmock.site/adult # path\n");
        assert_eq!(l, vec!["bad.example", "mock.site/adult"]);
    }

    #[test]
    fn audience_query() {
        assert_eq!(parse_audience(None), vec![AudienceGroup::Family]);
        assert_eq!(
            parse_audience(Some("a=1&audience=friends,classmates")),
            vec![AudienceGroup::Friends, AudienceGroup::Classmates]
        );
    }
}
