//! Enrollment with the back-end and the detector bundle poller.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use cfas_core::bundle::DetectorBundle;
use tokio::task::JoinHandle;

use crate::clients::{BackendClient, ClientError};
use crate::iwp::Iwp;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PollOutcome {
    Current,
    Installed(String),
    /// The archive failed verification; the running bundle is kept.
    Rejected(String),
}

/// Where the last verified bundle is kept across restarts.
#[derive(Clone)]
pub struct BundleCache {
    pub dir: PathBuf,
}

impl BundleCache {
    pub fn load(&self) -> Option<DetectorBundle> {
        let zip = std::fs::read(self.dir.join("bundle.zip")).ok()?;
        let sha = std::fs::read_to_string(self.dir.join("bundle.sha256")).ok()?;
        match DetectorBundle::from_zip(&zip, sha.trim()) {
            Ok(b) => Some(b),
            Err(err) => {
                tracing::warn!(%err, "cached bundle unusable, using the built-in one");
                None
            }
        }
    }

    fn save(&self, zip: &[u8], sha: &str) -> std::io::Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        std::fs::write(self.dir.join("bundle.zip"), zip)?;
        std::fs::write(self.dir.join("bundle.sha256"), sha)
    }
}

/// One poll: fetch, verify and install a newer bundle if there is one.
pub fn poll_once(iwp: &Iwp, client: &BackendClient, cache: Option<&BundleCache>) -> Result<PollOutcome, ClientError> {
    let have = iwp.detector_version();
    let Some(published) = client.sync(Some(&have))? else {
        return Ok(PollOutcome::Current);
    };
    let bundle = match DetectorBundle::from_zip(&published.zip, &published.sha256) {
        Ok(b) => b,
        Err(err) => {
            tracing::error!(%err, version = published.version, kept = have, "bundle rejected");
            return Ok(PollOutcome::Rejected(err.to_string()));
        }
    };
    if let Err(err) = iwp.install_bundle(&bundle) {
        tracing::error!(%err, version = published.version, "bundle does not load");
        return Ok(PollOutcome::Rejected(err.to_string()));
    }
    if let Some(cache) = cache {
        if let Err(err) = cache.save(&published.zip, &published.sha256) {
            tracing::warn!(%err, "bundle cache not written");
        }
    }
    tracing::info!(from = have, to = bundle.version, "detector bundle installed");
    Ok(PollOutcome::Installed(bundle.version))
}

pub fn spawn_poller(
    iwp: Arc<Iwp>,
    client: Arc<BackendClient>,
    cache: Option<BundleCache>,
    interval: Duration,
) -> JoinHandle<()> {
    tokio::spawn(async move {
        loop {
            let (iwp, client, cache) = (iwp.clone(), client.clone(), cache.clone());
            let polled = tokio::task::spawn_blocking(move || {
                if client.token().is_none() {
                    return Ok(PollOutcome::Current);
                }
                poll_once(&iwp, &client, cache.as_ref())
            })
            .await;
            match polled {
                Ok(Err(err)) => tracing::warn!(%err, "bundle poll failed"),
                Err(err) => tracing::error!(%err, "bundle poll panicked"),
                Ok(Ok(_)) => {}
            }
            tokio::time::sleep(interval).await;
        }
    })
}

/// Registers with the back-end, retrying with capped backoff until it
/// answers. The token is written to `token_path`.
pub fn spawn_enrollment(
    client: Arc<BackendClient>,
    code: String,
    iwp_id: String,
    token_path: PathBuf,
) -> JoinHandle<()> {
    tokio::spawn(async move {
        let mut wait = Duration::from_millis(500);
        loop {
            let (c, code, id) = (client.clone(), code.clone(), iwp_id.clone());
            match tokio::task::spawn_blocking(move || c.register(&code, &id)).await {
                Ok(Ok(token)) => {
                    if let Err(err) = std::fs::write(&token_path, &token) {
                        tracing::warn!(%err, "back-end token not saved");
                    }
                    tracing::info!("registered with the back-end");
                    return;
                }
                Ok(Err(ClientError::Status { status, body })) if status == 403 => {
                    tracing::error!(status, body, "enrollment code refused; not retrying");
                    return;
                }
                Ok(Err(err)) => tracing::warn!(%err, retry_in = ?wait, "back-end unreachable, will retry"),
                Err(err) => tracing::error!(%err, "enrollment task panicked"),
            }
            tokio::time::sleep(wait).await;
            wait = (wait * 2).min(Duration::from_secs(30));
        }
    })
}
