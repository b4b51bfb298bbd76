//! Starting components from a config, skipping ones already up.

use std::net::SocketAddr;
use std::time::Duration;

use cfas_net::config::Config;
use cfas_net::runtime::{Parts, Stack};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Backend,
    Mocks,
    Iwp,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Backend => "back-end",
            Component::Mocks => "mock services",
            Component::Iwp => "IWP",
        }
    }

    /// The address whose `/health` route identifies the component.
    pub fn health_addr(self, cfg: &Config) -> SocketAddr {
        match self {
            Component::Backend => cfg.backend.addr,
            Component::Mocks => cfg.mocks.api_addr,
            Component::Iwp => cfg.iwp.api_addr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PortState {
    Free,
    /// Our component already answers there.
    Running,
    /// Something else holds the port.
    Taken,
}

#[derive(Debug, thiserror::Error)]
pub enum LaunchError {
    #[error("{component}: port {addr} is in use by another program")]
    PortConflict { component: &'static str, addr: SocketAddr },
    #[error(transparent)]
    Start(#[from] anyhow::Error),
}

pub async fn healthy(addr: SocketAddr) -> bool {
    let Ok(client) = reqwest::Client::builder()
        .no_proxy()
        .timeout(Duration::from_secs(2))
        .build()
    else {
        return false;
    };
    matches!(
        client.get(format!("http://{addr}/health")).send().await,
        Ok(r) if r.status().is_success()
    )
}

pub async fn probe(addr: SocketAddr) -> PortState {
    if addr.port() == 0 {
        return PortState::Free;
    }
    if std::net::TcpListener::bind(addr).is_ok() {
        return PortState::Free;
    }
    if healthy(addr).await {
        PortState::Running
    } else {
        PortState::Taken
    }
}

/// Points the IWP at the configured back-end and mock services when the
/// config leaves those links unset.
pub fn wire(cfg: &mut Config) {
    if cfg.backend.addr.port() != 0 && cfg.iwp.backend_url.is_none() {
        cfg.iwp.backend_url = Some(format!("http://{}", cfg.backend.addr));
    }
    if cfg.mocks.osn_addr.port() != 0 {
        for host in cfas_net::mock::OSN_HOSTS {
            cfg.iwp.resolve.entry(host.to_string()).or_insert(cfg.mocks.osn_addr);
        }
        if cfg.iwp.upstream_ca_path.is_none() && cfg.mocks.osn_ca_cert_path.exists() {
            cfg.iwp.upstream_ca_path = Some(cfg.mocks.osn_ca_cert_path.clone());
        }
    }
    if cfg.mocks.api_addr.port() != 0 && cfg.iwp.external_api_url.is_none() {
        cfg.iwp.external_api_url = Some(format!("http://{}", cfg.mocks.api_addr));
    }
}

pub struct Launched {
    pub stack: Stack,
    pub started: Vec<Component>,
    pub already_running: Vec<Component>,
}

/// Starts the requested components. Ones whose health endpoint already
/// answers are reported and left alone.
pub async fn launch(mut cfg: Config, parts: Parts) -> Result<Launched, LaunchError> {
    let requested = [
        (Component::Backend, parts.backend),
        (Component::Mocks, parts.mocks),
        (Component::Iwp, parts.iwp),
    ];
    let mut start = parts;
    let mut already_running = Vec::new();
    for (c, wanted) in requested {
        if !wanted {
            continue;
        }
        let addr = c.health_addr(&cfg);
        match probe(addr).await {
            PortState::Free => {}
            PortState::Running => {
                already_running.push(c);
                match c {
                    Component::Backend => start.backend = false,
                    Component::Mocks => start.mocks = false,
                    Component::Iwp => start.iwp = false,
                }
            }
            PortState::Taken => {
                return Err(LaunchError::PortConflict {
                    component: c.name(),
                    addr,
                })
            }
        }
    }
    wire(&mut cfg);
    let stack = Stack::start(cfg, start).await?;
    let started = requested
        .iter()
        .filter(|(c, wanted)| *wanted && !already_running.contains(c))
        .map(|(c, _)| *c)
        .collect();
    Ok(Launched {
        stack,
        started,
        already_running,
    })
}

/// Live health addresses of what `stack` started.
pub fn started_addrs(stack: &Stack) -> Vec<(Component, SocketAddr)> {
    let mut out = Vec::new();
    if let Some(b) = &stack.backend {
        out.push((Component::Backend, b.http.addr));
    }
    if let Some(m) = &stack.mocks {
        out.push((Component::Mocks, m.api.addr));
    }
    if let Some(i) = &stack.iwp {
        out.push((Component::Iwp, i.api.addr));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn port_states() {
        assert_eq!(probe("127.0.0.1:0".parse().unwrap()).await, PortState::Free);
        let held = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = held.local_addr().unwrap();
        assert_eq!(probe(addr).await, PortState::Taken);
    }

    #[test]
    fn wiring_fills_only_unset_links() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = Config::parse(cfas_net::runtime::DEMO_HOUSEHOLD).unwrap();
        cfg.mocks.osn_ca_cert_path = dir.path().join("absent.pem");
        cfg.iwp.backend_url = Some("http://example.test".into());
        wire(&mut cfg);
        assert_eq!(cfg.iwp.backend_url.as_deref(), Some("http://example.test"));
        assert_eq!(cfg.iwp.resolve["facebook.mock"], cfg.mocks.osn_addr);
        assert_eq!(cfg.iwp.upstream_ca_path, None);
        assert_eq!(cfg.iwp.external_api_url, Some(format!("http://{}", cfg.mocks.api_addr)));
    }
}
