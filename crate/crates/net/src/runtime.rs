//! Assembles the back-end, mock services and IWP from a [`Config`].

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use cfas_core::backend::{Backend, BackendConfig, IntakeSink, KeyVault};
use cfas_core::bundle::DetectorBundle;
use cfas_core::dal::{AuditLog, DalConfig};
use cfas_core::imageguard::KeyService;
use cfas_core::store::{DocumentStore, FileStore};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use crate::clients::{BackendClient, MockApis};
use crate::config::Config;
use crate::iwp::{Iwp, IwpSettings};
use crate::mock::{api_router, osn_router, ApiFixtures, OsnFixtures};
use crate::proxy::{parse_blocklist, Proxy, ProxyOptions};
use crate::server::{serve_plain, serve_tls, Running};
use crate::sync::{spawn_enrollment, spawn_poller, BundleCache};
use crate::tls::{load_pem_certs, CertAuthority};

/// Reads a secret from `path`, creating it with `fresh` on first use.
fn persisted_secret(path: &Path, fresh: impl FnOnce() -> Vec<u8>) -> anyhow::Result<Vec<u8>> {
    if let Ok(raw) = std::fs::read_to_string(path) {
        return hex::decode(raw.trim()).with_context(|| format!("corrupt secret in {}", path.display()));
    }
    let secret = fresh();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, hex::encode(&secret)).with_context(|| format!("writing {}", path.display()))?;
    Ok(secret)
}

fn key32(v: Vec<u8>) -> anyhow::Result<[u8; 32]> {
    v.try_into().map_err(|_| anyhow::anyhow!("key must be 32 bytes"))
}

async fn bind(addr: std::net::SocketAddr, what: &str) -> anyhow::Result<TcpListener> {
    TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {what} on {addr}"))
}

pub struct BackendNode {
    pub backend: Arc<Backend>,
    pub http: Running,
}

pub async fn start_backend(cfg: &Config) -> anyhow::Result<BackendNode> {
    let dir = &cfg.backend.data_dir;
    let store: Arc<dyn DocumentStore> = Arc::new(FileStore::open(dir.join("store"))?);
    let master_key = match cfg.master_key() {
        Some(k) => k,
        None => key32(persisted_secret(&dir.join("master.key"), || rand::random::<[u8; 32]>().to_vec())?)?,
    };
    let publisher_token = match &cfg.backend.publisher_token {
        Some(t) => t.clone(),
        None => hex::encode(persisted_secret(&dir.join("publisher.token"), || {
            rand::random::<[u8; 16]>().to_vec()
        })?),
    };
    let backend = Arc::new(Backend::new(
        store,
        BackendConfig {
            publisher_token,
            master_key,
            ..BackendConfig::default()
        },
        DetectorBundle::builtin(),
    )?);
    let http = serve_plain(bind(cfg.backend.addr, "back-end").await?, crate::backend_api::router(backend.clone())).await;
    tracing::info!(addr = %http.addr, "back-end listening");
    Ok(BackendNode { backend, http })
}

pub struct MockNode {
    pub osn: Running,
    pub api: Running,
    pub ca: Arc<CertAuthority>,
}

pub async fn start_mocks(cfg: &Config) -> anyhow::Result<MockNode> {
    let (osn_fixtures, api_fixtures) = match &cfg.mocks.fixtures_dir {
        Some(dir) => (OsnFixtures::load(dir)?, ApiFixtures::load(dir)?),
        None => (OsnFixtures::builtin(), ApiFixtures::builtin()),
    };
    let cert_path = &cfg.mocks.osn_ca_cert_path;
    let key_path = cert_path.with_extension("key.pem");
    let ca = Arc::new(CertAuthority::open("cfas mock platforms CA", &key_path, cert_path)?);
    let tls = ca.server_config(&crate::mock::OSN_HOSTS)?;
    let osn = serve_tls(bind(cfg.mocks.osn_addr, "mock platforms").await?, tls, osn_router(osn_fixtures)).await;
    let api = serve_plain(bind(cfg.mocks.api_addr, "mock APIs").await?, api_router(api_fixtures)).await;
    tracing::info!(osn = %osn.addr, api = %api.addr, "mock services listening");
    Ok(MockNode { osn, api, ca })
}

pub struct IwpNode {
    pub iwp: Arc<Iwp>,
    pub api: Running,
    pub proxy: Running,
    pub ca: Arc<CertAuthority>,
    pub backend: Option<Arc<BackendClient>>,
    /// Bearer tokens by member id, also written to `tokens.json`.
    pub tokens: BTreeMap<String, String>,
    tasks: Vec<JoinHandle<()>>,
}

impl IwpNode {
    pub async fn stop(self) {
        for t in &self.tasks {
            t.abort();
        }
        self.proxy.stop().await;
        self.api.stop().await;
        self.iwp.dal().shutdown();
    }
}

/// Starts the IWP. `enrollment_code` overrides the configured one.
pub async fn start_iwp(cfg: &Config, enrollment_code: Option<String>) -> anyhow::Result<IwpNode> {
    let icfg = &cfg.iwp;
    let dir = &icfg.data_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let household = cfg.household()?;
    let store: Arc<dyn DocumentStore> = Arc::new(FileStore::open(dir.join("store"))?);
    let audit = Arc::new(AuditLog::open(dir.join("audit.ndjson"))?);
    let salt = persisted_secret(&dir.join("salt"), || rand::random::<[u8; 16]>().to_vec())?;

    let mut tasks = Vec::new();
    let backend = match &icfg.backend_url {
        Some(url) => {
            let client = BackendClient::new(url, Duration::from_secs(5));
            let token_path = dir.join("backend.token");
            let client = match std::fs::read_to_string(&token_path) {
                Ok(t) => Arc::new(client.with_token(t.trim())),
                Err(_) => {
                    let client = Arc::new(client);
                    match enrollment_code.or_else(|| icfg.enrollment_code.clone()) {
                        Some(code) => tasks.push(spawn_enrollment(
                            client.clone(),
                            code,
                            format!("iwp-{}", household.household_id),
                            token_path,
                        )),
                        None => tracing::warn!("no back-end token and no enrollment code; back-end features stay off"),
                    }
                    client
                }
            };
            Some(client)
        }
        None => None,
    };
    let (keys, intake): (Arc<dyn KeyService>, Option<Arc<dyn IntakeSink>>) = match &backend {
        Some(c) => (c.clone(), Some(c.clone())),
        None => {
            tracing::warn!("no back-end configured; image keys are kept in a local vault");
            let master = key32(persisted_secret(&dir.join("vault.key"), || rand::random::<[u8; 32]>().to_vec())?)?;
            (Arc::new(KeyVault::new(store.clone(), master)), None)
        }
    };
    let external = icfg
        .external_api_url
        .as_deref()
        .map(|u| MockApis::new(u).external())
        .unwrap_or_default();
    let settings = IwpSettings {
        hold_deadline: Duration::from_millis(icfg.hold_deadline_ms),
        salt,
        heartbeat_interval: chrono::Duration::seconds(icfg.heartbeat_interval_secs as i64),
        heartbeat_missed: icfg.heartbeat_missed,
        threshold_overrides: cfg.threshold_overrides(),
        external,
        dal: DalConfig {
            workers: icfg.workers,
            ..DalConfig::default()
        },
    };
    let cache = BundleCache { dir: dir.join("bundle") };
    let bundle = cache.load().unwrap_or_else(DetectorBundle::builtin);
    let iwp = Iwp::new(household.clone(), store, &bundle, keys, intake, audit, settings)?;

    let mut tokens = BTreeMap::new();
    for m in &household.members {
        tokens.insert(m.member_id.clone(), iwp.pair(&m.member_id)?);
    }
    std::fs::write(dir.join("tokens.json"), serde_json::to_vec_pretty(&tokens)?)?;

    let ca = Arc::new(CertAuthority::open(
        "cfas household CA",
        &dir.join("ca.key.pem"),
        &icfg.ca_cert_path,
    )?);
    let blocklist = match &icfg.blocklist_path {
        Some(p) => parse_blocklist(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => Vec::new(),
    };
    let upstream_roots = match &icfg.upstream_ca_path {
        Some(p) => load_pem_certs(p)?,
        None => Vec::new(),
    };
    let proxy = Proxy::new(
        iwp.clone(),
        ca.clone(),
        ProxyOptions {
            intercept_hosts: icfg.intercept_hosts.clone(),
            blocklist,
            resolve: icfg.resolve.clone(),
            upstream_roots,
        },
    )?;
    let proxy_run = proxy.serve(bind(icfg.proxy_addr, "proxy").await?).await;
    let api = serve_plain(bind(icfg.api_addr, "IWP API").await?, crate::api::router(iwp.clone())).await;
    tracing::info!(proxy = %proxy_run.addr, api = %api.addr, "IWP listening");

    if let Some(client) = &backend {
        tasks.push(spawn_poller(
            iwp.clone(),
            client.clone(),
            Some(cache),
            Duration::from_secs(icfg.bundle_poll_secs),
        ));
    }
    tasks.push(spawn_housekeeping(iwp.clone(), Duration::from_secs(icfg.heartbeat_interval_secs)));

    Ok(IwpNode {
        iwp,
        api,
        proxy: proxy_run,
        ca,
        backend,
        tokens,
        tasks,
    })
}

/// Liveness checks every heartbeat interval; consent expiry and retention
/// purges every hour.
fn spawn_housekeeping(iwp: Arc<Iwp>, every: Duration) -> JoinHandle<()> {
    tokio::spawn(async move {
        let mut last_sweep: Option<tokio::time::Instant> = None;
        loop {
            let now = chrono::Utc::now();
            let sweep = last_sweep.is_none_or(|t| t.elapsed() >= Duration::from_secs(3600));
            let iwp = iwp.clone();
            let done = tokio::task::spawn_blocking(move || {
                iwp.check_liveness(now);
                if sweep {
                    if let Err(err) = iwp.expire_consents() {
                        tracing::warn!(%err, "consent expiry failed");
                    }
                    if let Err(err) = iwp.dal().purge_expired(now) {
                        tracing::warn!(%err, "retention purge failed");
                    }
                }
            })
            .await;
            if let Err(err) = done {
                tracing::error!(%err, "housekeeping panicked");
            }
            if sweep {
                last_sweep = Some(tokio::time::Instant::now());
            }
            tokio::time::sleep(every).await;
        }
    })
}

/// Which components to start in this process.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Parts {
    pub backend: bool,
    pub mocks: bool,
    pub iwp: bool,
}

impl Parts {
    pub const ALL: Parts = Parts {
        backend: true,
        mocks: true,
        iwp: true,
    };
}

/// Components started together. Addresses left unset in the IWP section
/// are filled in from the components started alongside it.
pub struct Stack {
    pub config: Config,
    pub backend: Option<BackendNode>,
    pub mocks: Option<MockNode>,
    pub iwp: Option<IwpNode>,
}

impl Stack {
    pub async fn start(mut config: Config, parts: Parts) -> anyhow::Result<Self> {
        let backend = if parts.backend { Some(start_backend(&config).await?) } else { None };
        let mocks = if parts.mocks { Some(start_mocks(&config).await?) } else { None };
        if let Some(m) = &mocks {
            for host in crate::mock::OSN_HOSTS {
                config.iwp.resolve.entry(host.to_string()).or_insert(m.osn.addr);
            }
            config
                .iwp
                .external_api_url
                .get_or_insert_with(|| format!("http://{}", m.api.addr));
            config
                .iwp
                .upstream_ca_path
                .get_or_insert_with(|| config.mocks.osn_ca_cert_path.clone());
        }
        if let Some(b) = &backend {
            config.iwp.backend_url.get_or_insert_with(|| format!("http://{}", b.http.addr));
        }
        let iwp = if parts.iwp {
            let token_saved = config.iwp.data_dir.join("backend.token").exists();
            let code = match &backend {
                Some(b) if !token_saved && config.iwp.enrollment_code.is_none() => {
                    Some(b.backend.issue_enrollment_code(&config.household.id))
                }
                _ => None,
            };
            Some(start_iwp(&config, code).await?)
        } else {
            None
        };
        Ok(Self {
            config,
            backend,
            mocks,
            iwp,
        })
    }

    pub async fn stop(self) {
        if let Some(i) = self.iwp {
            i.stop().await;
        }
        if let Some(m) = self.mocks {
            m.osn.stop().await;
            m.api.stop().await;
        }
        if let Some(b) = self.backend {
            b.http.stop().await;
        }
    }
}

/// A small household used by the demo config and tests.
pub const DEMO_HOUSEHOLD: &str = r#"
[household]
id = "demo-household"
child = { id = "kid", name = "John", avatar = "owl", groups = ["family"] }
custodians = [
    { id = "mum", name = "Mary", groups = ["family"] },
    { id = "dad", name = "Tom", groups = ["family"] },
]
"#;

/// A config whose listeners all bind ephemeral ports under `dir`.
pub fn ephemeral_config(dir: &Path) -> Config {
    let mut cfg = Config::parse(DEMO_HOUSEHOLD).expect("demo household parses");
    let any: std::net::SocketAddr = "127.0.0.1:0".parse().expect("literal address");
    cfg.iwp.api_addr = any;
    cfg.iwp.proxy_addr = any;
    cfg.iwp.data_dir = dir.join("iwp");
    cfg.iwp.ca_cert_path = dir.join("iwp/ca.pem");
    cfg.backend.addr = any;
    cfg.backend.data_dir = dir.join("backend");
    cfg.mocks.osn_addr = any;
    cfg.mocks.api_addr = any;
    cfg.mocks.osn_ca_cert_path = dir.join("mock/osn-ca.pem");
    cfg
}
