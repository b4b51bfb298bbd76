#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use cfas_core::model::{CybersafetyLevel, OptionChange, VisibilityLevel};
use cfas_core::notify::{MemoryChannel, PushMessage};
use cfas_core::MechanismKind;
use cfas_net::config::Config;
use cfas_net::iwp::Iwp;
use cfas_net::runtime::{ephemeral_config, Parts, Stack};
use tempfile::TempDir;

pub struct Env {
    pub dir: TempDir,
    pub stack: Stack,
}

pub async fn start(tweak: impl FnOnce(&mut Config, &std::path::Path)) -> Env {
    start_parts(Parts::ALL, tweak).await
}

pub async fn start_parts(parts: Parts, tweak: impl FnOnce(&mut Config, &std::path::Path)) -> Env {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ephemeral_config(dir.path());
    tweak(&mut cfg, dir.path());
    let stack = Stack::start(cfg, parts).await.unwrap();
    Env { dir, stack }
}

impl Env {
    pub fn iwp(&self) -> &Arc<Iwp> {
        &self.stack.iwp.as_ref().unwrap().iwp
    }

    pub fn api(&self) -> String {
        format!("http://{}", self.stack.iwp.as_ref().unwrap().api.addr)
    }

    pub fn token(&self, member: &str) -> String {
        self.stack.iwp.as_ref().unwrap().tokens[member].clone()
    }

    /// A client that reaches the platforms through the proxy and trusts
    /// the household CA, like the child's configured browser.
    pub fn browser(&self) -> reqwest::Client {
        let node = self.stack.iwp.as_ref().unwrap();
        let ca = reqwest::Certificate::from_der(&node.ca.cert_der()).unwrap();
        reqwest::Client::builder()
            .use_rustls_tls()
            .proxy(reqwest::Proxy::all(format!("http://{}", node.proxy.addr)).unwrap())
            .add_root_certificate(ca)
            .tls_built_in_root_certs(false)
            .build()
            .unwrap()
    }

    /// A client that talks to the mock platforms directly.
    pub fn direct(&self) -> reqwest::Client {
        let mocks = self.stack.mocks.as_ref().unwrap();
        let ca = reqwest::Certificate::from_der(&mocks.ca.cert_der()).unwrap();
        let mut b = reqwest::Client::builder()
            .use_rustls_tls()
            .no_proxy()
            .add_root_certificate(ca)
            .tls_built_in_root_certs(false);
        for host in cfas_net::mock::OSN_HOSTS {
            b = b.resolve(host, mocks.osn.addr);
        }
        b.build().unwrap()
    }

    pub fn api_client(&self) -> reqwest::Client {
        reqwest::Client::builder().no_proxy().build().unwrap()
    }

    /// Proposes `change` as a custodian and has the child approve it.
    pub async fn approve(&self, change: OptionChange) {
        let iwp = self.iwp().clone();
        tokio::task::spawn_blocking(move || {
            let record = iwp.propose("mum", change).unwrap();
            iwp.decide("kid", &record.record_id, true).unwrap();
        })
        .await
        .unwrap();
    }

    pub async fn enforce(&self, mechanisms: &[MechanismKind]) {
        self.approve(OptionChange::Cybersafety {
            level: CybersafetyLevel::L2,
            enabled: MechanismKind::ALL.into_iter().collect(),
            enforce: mechanisms.iter().copied().collect(),
        })
        .await;
    }

    pub async fn parental_l3(&self) {
        self.approve(OptionChange::Parental {
            level: VisibilityLevel::L3,
            selections: BTreeSet::new(),
        })
        .await;
    }

    pub fn listen(&self, member: &str) -> Arc<MemoryChannel> {
        let ch = MemoryChannel::new();
        self.iwp().register_channel(member, ch.clone());
        ch
    }
}

pub async fn eventually<T>(what: &str, timeout: Duration, mut probe: impl FnMut() -> Option<T>) -> T {
    let start = Instant::now();
    loop {
        if let Some(v) = probe() {
            return v;
        }
        if start.elapsed() > timeout {
            panic!("timed out waiting for {what}");
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
}

pub async fn messages_matching(ch: &MemoryChannel, what: &str, pred: impl Fn(&PushMessage) -> bool) -> Vec<PushMessage> {
    eventually(what, Duration::from_secs(10), || {
        let got: Vec<_> = ch.received().into_iter().filter(|m| pred(m)).collect();
        (!got.is_empty()).then_some(got)
    })
    .await
}
