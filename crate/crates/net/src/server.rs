//! Small helpers for running axum routers over plain TCP or TLS with a
//! shutdown handle.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::Router;
use hyper_util::rt::{TokioExecutor, TokioIo};
use hyper_util::server::conn::auto;
use hyper_util::service::TowerToHyperService;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;
use tokio_rustls::TlsAcceptor;

const SHUTDOWN_GRACE: Duration = Duration::from_secs(2);

/// A running listener; dropping it does not stop the service, `stop` does.
pub struct Running {
    pub addr: SocketAddr,
    stop: watch::Sender<bool>,
    task: JoinHandle<()>,
}

impl Running {
    pub fn new(addr: SocketAddr, stop: watch::Sender<bool>, task: JoinHandle<()>) -> Self {
        Self { addr, stop, task }
    }

    /// Signals shutdown and waits for open connections to drain; long-lived
    /// ones (push streams) are cut after a grace period.
    pub async fn stop(mut self) {
        let _ = self.stop.send(true);
        if tokio::time::timeout(SHUTDOWN_GRACE, &mut self.task).await.is_err() {
            self.task.abort();
        }
    }

    pub fn is_finished(&self) -> bool {
        self.task.is_finished()
    }
}

pub async fn serve_plain(listener: TcpListener, router: Router) -> Running {
    let addr = listener.local_addr().expect("bound listener");
    let (tx, mut rx) = watch::channel(false);
    let task = tokio::spawn(async move {
        let shutdown = async move {
            let _ = rx.wait_for(|v| *v).await;
        };
        if let Err(err) = axum::serve(listener, router).with_graceful_shutdown(shutdown).await {
            tracing::error!(%err, "server stopped");
        }
    });
    Running::new(addr, tx, task)
}

pub async fn serve_tls(listener: TcpListener, tls: Arc<rustls::ServerConfig>, router: Router) -> Running {
    let addr = listener.local_addr().expect("bound listener");
    let (tx, mut rx) = watch::channel(false);
    let acceptor = TlsAcceptor::from(tls);
    let task = tokio::spawn(async move {
        loop {
            let (tcp, peer) = tokio::select! {
                r = listener.accept() => match r {
                    Ok(c) => c,
                    Err(err) => {
                        tracing::warn!(%err, "accept failed");
                        continue;
                    }
                },
                _ = rx.wait_for(|v| *v) => break,
            };
            let acceptor = acceptor.clone();
            let router = router.clone();
            tokio::spawn(async move {
                let stream = match acceptor.accept(tcp).await {
                    Ok(s) => s,
                    Err(err) => {
                        tracing::debug!(%err, %peer, "tls handshake failed");
                        return;
                    }
                };
                let svc = TowerToHyperService::new(router);
                if let Err(err) = auto::Builder::new(TokioExecutor::new())
                    .serve_connection(TokioIo::new(stream), svc)
                    .await
                {
                    tracing::debug!(%err, "connection closed with error");
                }
            });
        }
    });
    Running::new(addr, tx, task)
}
