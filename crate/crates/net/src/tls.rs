//! Per-install certificate authority and TLS configs for both sides of an
//! intercepted connection.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use rcgen::{
    BasicConstraints, CertificateParams, DistinguishedName, DnType, IsCa, KeyPair, KeyUsagePurpose,
};
use rustls::pki_types::pem::PemObject;
use rustls::pki_types::{CertificateDer, PrivateKeyDer, PrivatePkcs8KeyDer, ServerName};
use rustls::{ClientConfig, RootCertStore, ServerConfig};

#[derive(Debug, thiserror::Error)]
pub enum TlsError {
    #[error("certificate generation: {0}")]
    Rcgen(#[from] rcgen::Error),
    #[error("tls: {0}")]
    Rustls(#[from] rustls::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("no certificate in {0}")]
    NoCertificate(String),
}

pub fn provider() -> Arc<rustls::crypto::CryptoProvider> {
    Arc::new(rustls::crypto::ring::default_provider())
}

/// A locally generated CA that mints leaf certificates on demand.
pub struct CertAuthority {
    cert: rcgen::Certificate,
    key: KeyPair,
    leaves: Mutex<HashMap<String, Arc<ServerConfig>>>,
}

impl CertAuthority {
    pub fn generate(common_name: &str) -> Result<Self, TlsError> {
        Self::with_key(common_name, KeyPair::generate()?)
    }

    /// Loads the CA key from `key_path` (creating it on first use) and
    /// writes the CA certificate to `cert_path`. The subject is fixed, so a
    /// certificate installed earlier keeps validating new leaves.
    pub fn open(common_name: &str, key_path: &Path, cert_path: &Path) -> Result<Self, TlsError> {
        let key = match std::fs::read_to_string(key_path) {
            Ok(pem) => KeyPair::from_pem(&pem)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let key = KeyPair::generate()?;
                if let Some(dir) = key_path.parent() {
                    std::fs::create_dir_all(dir)?;
                }
                std::fs::write(key_path, key.serialize_pem())?;
                key
            }
            Err(e) => return Err(e.into()),
        };
        let ca = Self::with_key(common_name, key)?;
        if !cert_path.exists() {
            ca.write_pem(cert_path)?;
        }
        Ok(ca)
    }

    fn with_key(common_name: &str, key: KeyPair) -> Result<Self, TlsError> {
        let mut params = CertificateParams::default();
        let mut dn = DistinguishedName::new();
        dn.push(DnType::CommonName, common_name);
        dn.push(DnType::OrganizationName, "cfas local");
        params.distinguished_name = dn;
        params.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
        params.key_usages = vec![
            KeyUsagePurpose::KeyCertSign,
            KeyUsagePurpose::CrlSign,
            KeyUsagePurpose::DigitalSignature,
        ];
        let cert = params.self_signed(&key)?;
        Ok(Self {
            cert,
            key,
            leaves: Mutex::new(HashMap::new()),
        })
    }

    pub fn cert_pem(&self) -> String {
        self.cert.pem()
    }

    pub fn cert_der(&self) -> CertificateDer<'static> {
        self.cert.der().clone()
    }

    pub fn write_pem(&self, path: &Path) -> Result<(), TlsError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.cert_pem())?;
        Ok(())
    }

    /// Server config presenting a leaf for `names`, cached per name list.
    pub fn server_config(&self, names: &[&str]) -> Result<Arc<ServerConfig>, TlsError> {
        let cache_key = names.join(",");
        if let Some(c) = self.leaves.lock().get(&cache_key) {
            return Ok(c.clone());
        }
        let mut params = CertificateParams::new(names.iter().map(|s| s.to_string()).collect::<Vec<_>>())?;
        params.distinguished_name.push(DnType::CommonName, names[0]);
        let key = KeyPair::generate()?;
        let leaf = params.signed_by(&key, &self.cert, &self.key)?;
        let chain = vec![leaf.der().clone(), self.cert_der()];
        let key_der = PrivateKeyDer::Pkcs8(PrivatePkcs8KeyDer::from(key.serialize_der()));
        let mut cfg = ServerConfig::builder_with_provider(provider())
            .with_safe_default_protocol_versions()?
            .with_no_client_auth()
            .with_single_cert(chain, key_der)?;
        cfg.alpn_protocols = vec![b"http/1.1".to_vec()];
        let cfg = Arc::new(cfg);
        self.leaves.lock().insert(cache_key, cfg.clone());
        Ok(cfg)
    }
}

/// Reads every certificate from a PEM file.
pub fn load_pem_certs(path: &Path) -> Result<Vec<CertificateDer<'static>>, TlsError> {
    let raw = std::fs::read(path)?;
    pem_certs(&raw).ok_or_else(|| TlsError::NoCertificate(path.display().to_string()))
}

pub fn pem_certs(raw: &[u8]) -> Option<Vec<CertificateDer<'static>>> {
    let certs: Vec<_> = CertificateDer::pem_slice_iter(raw).collect::<Result<_, _>>().ok()?;
    (!certs.is_empty()).then_some(certs)
}

/// Client config trusting the public web roots plus `extra`.
pub fn client_config(extra: &[CertificateDer<'static>]) -> Result<Arc<ClientConfig>, TlsError> {
    let mut roots = RootCertStore::empty();
    roots.extend(webpki_roots::TLS_SERVER_ROOTS.iter().cloned());
    for c in extra {
        roots.add(c.clone())?;
    }
    let mut cfg = ClientConfig::builder_with_provider(provider())
        .with_safe_default_protocol_versions()?
        .with_root_certificates(roots)
        .with_no_client_auth();
    cfg.alpn_protocols = vec![b"http/1.1".to_vec()];
    Ok(Arc::new(cfg))
}

pub fn server_name(host: &str) -> Option<ServerName<'static>> {
    ServerName::try_from(host.to_string()).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pem_roundtrip() {
        let ca = CertAuthority::generate("test ca").unwrap();
        let certs = pem_certs(ca.cert_pem().as_bytes()).unwrap();
        assert_eq!(certs, vec![ca.cert_der()]);
        assert!(pem_certs(b"nothing here").is_none());
    }

    #[test]
    fn leaves_are_cached() {
        let ca = CertAuthority::generate("test ca").unwrap();
        let a = ca.server_config(&["facebook.mock"]).unwrap();
        let b = ca.server_config(&["facebook.mock"]).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
    }
}
