//! HTTP service around the replay engine: uploads scenario bundles, queues
//! replays on a bounded worker pool and serves the run artifacts.

pub mod api;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

pub use api::{router, AppState};
pub use store::{RunStatus, Store, StoreError, StoredRun, StoredScenario};

pub const DEFAULT_BIND_ADDR: &str = "127.0.0.1:8080";
pub const DEFAULT_WORKERS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub bind_addr: String,
    /// Bearer token required on mutating endpoints when set.
    pub token: Option<String>,
    pub workers: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("trackbench-data"),
            bind_addr: DEFAULT_BIND_ADDR.into(),
            token: None,
            workers: DEFAULT_WORKERS,
        }
    }
}

impl ServiceConfig {
    /// Reads `TRACKBENCH_DATA_DIR`, `TRACKBENCH_BIND_ADDR`,
    /// `TRACKBENCH_TOKEN` and `TRACKBENCH_WORKERS`, falling back to the
    /// defaults.
    pub fn from_env() -> Self {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Self {
        let d = Self::default();
        Self {
            data_dir: get("TRACKBENCH_DATA_DIR").map(PathBuf::from).unwrap_or(d.data_dir),
            bind_addr: get("TRACKBENCH_BIND_ADDR").unwrap_or(d.bind_addr),
            token: get("TRACKBENCH_TOKEN").filter(|t| !t.is_empty()),
            workers: get("TRACKBENCH_WORKERS")
                .and_then(|w| w.parse().ok())
                .filter(|&w| w > 0)
                .unwrap_or(d.workers),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Opens the store and serves until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> Result<(), ServeError> {
    let store = Arc::new(Store::open(&config.data_dir)?);
    let state = AppState::new(store, config.token.clone(), config.workers);
    let listener = tokio::net::TcpListener::bind(&config.bind_addr)
        .await
        .map_err(|source| ServeError::Bind {
            addr: config.bind_addr.clone(),
            source,
        })?;
    let addr: SocketAddr = listener.local_addr()?;
    log::info!("listening on http://{addr}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
