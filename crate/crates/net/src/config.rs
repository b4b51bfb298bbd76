//! Service configuration, loaded from a TOML file.
//!
//! Unknown keys are rejected so that typos surface at start-up with the
//! offending key named.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use cfas_core::model::{Household, HouseholdMember, MechanismKind, PolicyError};
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub household: HouseholdConfig,
    #[serde(default)]
    pub iwp: IwpConfig,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub mocks: MocksConfig,
    /// Per-mechanism score thresholds overriding the bundle's table.
    #[serde(default)]
    pub thresholds: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberConfig {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub avatar: Option<String>,
    #[serde(default)]
    pub groups: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HouseholdConfig {
    pub id: String,
    pub child: MemberConfig,
    pub custodians: Vec<MemberConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IwpConfig {
    pub api_addr: SocketAddr,
    pub proxy_addr: SocketAddr,
    pub data_dir: PathBuf,
    pub intercept_hosts: Vec<String>,
    pub ca_cert_path: PathBuf,
    pub hold_deadline_ms: u64,
    pub blocklist_path: Option<PathBuf>,
    /// Extra root certificate trusted for upstream TLS (the mock OSN's CA).
    pub upstream_ca_path: Option<PathBuf>,
    /// Host name to socket address overrides for upstream connections.
    pub resolve: BTreeMap<String, SocketAddr>,
    pub backend_url: Option<String>,
    pub enrollment_code: Option<String>,
    pub bundle_poll_secs: u64,
    pub heartbeat_interval_secs: u64,
    pub heartbeat_missed: u32,
    /// Base URL of the mock bot/video/twitter APIs.
    pub external_api_url: Option<String>,
    pub workers: usize,
}

impl Default for IwpConfig {
    fn default() -> Self {
        Self {
            api_addr: "127.0.0.1:8700".parse().unwrap(),
            proxy_addr: "127.0.0.1:8080".parse().unwrap(),
            data_dir: PathBuf::from("var/iwp"),
            intercept_hosts: crate::mock::OSN_HOSTS.iter().map(|h| h.to_string()).collect(),
            ca_cert_path: PathBuf::from("var/iwp/ca.pem"),
            hold_deadline_ms: 2000,
            blocklist_path: None,
            upstream_ca_path: None,
            resolve: BTreeMap::new(),
            backend_url: None,
            enrollment_code: None,
            bundle_poll_secs: 300,
            heartbeat_interval_secs: 10,
            heartbeat_missed: 3,
            external_api_url: None,
            workers: 4,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    pub addr: SocketAddr,
    pub data_dir: PathBuf,
    pub publisher_token: Option<String>,
    /// Hex-encoded 32-byte key sealing image keys at rest.
    pub master_key: Option<String>,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8800".parse().unwrap(),
            data_dir: PathBuf::from("var/backend"),
            publisher_token: None,
            master_key: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MocksConfig {
    pub osn_addr: SocketAddr,
    pub api_addr: SocketAddr,
    pub fixtures_dir: Option<PathBuf>,
    /// Where the mock OSN writes the CA certificate its TLS chain hangs off.
    pub osn_ca_cert_path: PathBuf,
}

impl Default for MocksConfig {
    fn default() -> Self {
        Self {
            osn_addr: "127.0.0.1:8443".parse().unwrap(),
            api_addr: "127.0.0.1:8900".parse().unwrap(),
            fixtures_dir: None,
            osn_ca_cert_path: PathBuf::from("var/mock/osn-ca.pem"),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&raw)
    }

    pub fn parse(raw: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(raw).map_err(|e| {
            let msg = e.message().to_string();
            match unknown_field(&msg) {
                Some(key) => ConfigError::UnknownKey(key),
                None => ConfigError::Parse(msg),
            }
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), ConfigError> {
        for (name, value) in &self.thresholds {
            if MechanismKind::parse(name).is_none() {
                return Err(ConfigError::UnknownKey(format!("thresholds.{name}")));
            }
            if !(0.0..=1.0).contains(value) {
                return Err(ConfigError::Invalid {
                    key: format!("thresholds.{name}"),
                    reason: "must lie in [0, 1]".into(),
                });
            }
        }
        if let Some(k) = &self.backend.master_key {
            if hex::decode(k).map(|b| b.len()) != Ok(32) {
                return Err(ConfigError::Invalid {
                    key: "backend.master_key".into(),
                    reason: "expected 64 hex digits".into(),
                });
            }
        }
        if self.iwp.heartbeat_missed == 0 || self.iwp.heartbeat_interval_secs == 0 {
            return Err(ConfigError::Invalid {
                key: "iwp.heartbeat_missed".into(),
                reason: "heartbeat settings must be positive".into(),
            });
        }
        self.household().map_err(|e| ConfigError::Invalid {
            key: "household".into(),
            reason: e.to_string(),
        })?;
        Ok(())
    }

    pub fn household(&self) -> Result<Household, PolicyError> {
        let h = &self.household;
        let mut child = HouseholdMember::child(
            &h.child.id,
            &h.child.name,
            h.child.avatar.as_deref().unwrap_or("owl"),
        );
        child.groups = h.child.groups.iter().cloned().collect();
        let mut members = vec![child];
        for c in &h.custodians {
            let mut m = HouseholdMember::custodian(&c.id, &c.name);
            m.groups = c.groups.iter().cloned().collect();
            members.push(m);
        }
        Household::new(&h.id, members)
    }

    pub fn threshold_overrides(&self) -> BTreeMap<MechanismKind, f64> {
        self.thresholds
            .iter()
            .filter_map(|(k, v)| Some((MechanismKind::parse(k)?, *v)))
            .collect()
    }

    pub fn master_key(&self) -> Option<[u8; 32]> {
        let raw = hex::decode(self.backend.master_key.as_ref()?).ok()?;
        raw.try_into().ok()
    }
}

fn unknown_field(msg: &str) -> Option<String> {
    let rest = msg.split("unknown field `").nth(1)?;
    Some(rest.split('`').next()?.to_string())
}
