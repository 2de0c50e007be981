//! HTTP service over the quantum-network control plane: request
//! submission, topology browsing, status and event streaming, measurement
//! retrieval, with static-token auth and an append-only audit log.

pub mod api;
pub mod audit;
pub mod auth;
pub mod engine;
pub mod model;
pub mod store;

use std::path::PathBuf;
use std::sync::Arc;

use axum::Router;
use qnet_core::control::ControlConfig;
use qnet_core::physics::profiles::Profile;
use qnet_core::topology::Topology;
use thiserror::Error;
use tokio::sync::watch;

pub use api::AppState;
pub use audit::{AuditLog, AuditRecord};
pub use auth::{Scope, Session, TokenFileError, TokenTable};
pub use engine::{DiscoveryStatus, EngineSettings};
pub use model::{RequestStatus, ServiceEvent};
pub use store::FileStore;

pub const STORE_FILE: &str = "store.jsonl";
pub const AUDIT_FILE: &str = "audit.jsonl";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("data directory {path}: {source}")]
    DataDir {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot start control plane: {0}")]
    Engine(#[source] std::io::Error),
}

pub struct ServiceConfig {
    pub topology: Topology,
    pub profile: Profile,
    pub control: ControlConfig,
    pub tokens: TokenTable,
    /// Where the journal and audit log live; `None` keeps both in memory.
    pub data_dir: Option<PathBuf>,
    /// Simulated seconds per wall-clock second; `None` runs unthrottled.
    pub time_scale: Option<f64>,
    pub seed: u64,
}

/// A running service: the engine thread plus shared state for the router.
pub struct Service {
    state: AppState,
}

impl Service {
    pub fn start(cfg: ServiceConfig) -> Result<Self, ServiceError> {
        let (store, audit) = match &cfg.data_dir {
            Some(dir) => {
                let io = |source| ServiceError::DataDir {
                    path: dir.clone(),
                    source,
                };
                std::fs::create_dir_all(dir).map_err(io)?;
                (
                    FileStore::open(&dir.join(STORE_FILE)).map_err(io)?,
                    AuditLog::open(&dir.join(AUDIT_FILE)).map_err(io)?,
                )
            }
            None => (FileStore::in_memory(), AuditLog::in_memory()),
        };
        let settings = EngineSettings {
            topology: cfg.topology,
            profile: cfg.profile,
            control: cfg.control,
            seed: cfg.seed,
            time_scale: cfg.time_scale,
        };
        let (engine, shared) =
            engine::EngineHandle::spawn(settings, store).map_err(ServiceError::Engine)?;
        let state = Arc::new(api::AppInner {
            tokens: cfg.tokens,
            audit,
            shared,
            engine: std::sync::Mutex::new(engine),
            closing: watch::channel(false).0,
        });
        Ok(Self { state })
    }

    pub fn router(&self) -> Router {
        api::router(self.state.clone())
    }

    pub fn state(&self) -> &AppState {
        &self.state
    }

    /// Ends open event streams so that a graceful HTTP shutdown can finish.
    pub fn close_streams(&self) {
        self.state.closing.send_replace(true);
    }

    /// Closes streams, stops the engine (live requests end as interrupted)
    /// and flushes the journal and audit log.
    pub fn shutdown(&self) {
        self.close_streams();
        self.state.engine.lock().expect("engine lock").shutdown();
        self.state.audit.sync();
    }
}
