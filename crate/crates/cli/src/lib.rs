//! HTTP service and command-line front end for `umivr-core`.

pub mod config;
pub mod error;
pub mod ingest;
pub mod server;

use std::sync::Arc;

use umivr_core::embedding_store::EmbeddingIndex;
use umivr_core::session::{SessionConfig, SessionStore};

use crate::config::ServiceConfig;
use crate::error::AppError;
use crate::server::AppState;

/// Builds the service state from a configuration. The index must exist.
pub fn app_state(cfg: &ServiceConfig) -> Result<AppState, AppError> {
    let index = EmbeddingIndex::load(&cfg.index)
        .map_err(|e| AppError::io(format!("index {}: {e}", cfg.index.display())))?;
    let embedder = cfg.embedder(index.dim());
    let gateway = Arc::new(cfg.gateway()?);
    let store = SessionStore::open(&cfg.sessions_dir)?;
    Ok(AppState::new(index, cfg.index.clone(), embedder, gateway, store, SessionConfig::default()))
}

/// Serves the API until the process receives Ctrl-C.
pub async fn serve(cfg: ServiceConfig) -> Result<(), AppError> {
    let addr = cfg.listen_addr()?;
    let state = Arc::new(app_state(&cfg)?);
    let app = server::router(state, &cfg.cors_origins);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
