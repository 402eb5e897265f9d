//! HTTP session API over a loaded checkpoint.
//!
//! A session pins one instance and an ordered list of interventions. Every
//! response is recomputed from (checkpoint, history, server seed), so undo is
//! a replay of the shorter history rather than an inverse update.

pub mod api;
mod routes;
mod state;

use std::future::Future;
use std::path::Path;
use std::sync::Arc;

pub use routes::router;
pub use state::{
    covariate_key, ApiError, ApiResult, AppState, Instance, ServeConfig, Session, SessionHandle,
    SNAPSHOT_SCHEMA, SUGGESTION_STREAM,
};

/// Serves until `shutdown` resolves, then writes a session snapshot to
/// `snapshot` when one is given.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    snapshot: Option<&Path>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    if let Some(path) = snapshot {
        let snap = state.snapshot().await;
        let bytes = serde_json::to_vec_pretty(&snap).map_err(std::io::Error::other)?;
        scbm::format::write_atomic(path, &bytes).map_err(std::io::Error::other)?;
        tracing::info!(path = %path.display(), sessions = snap.sessions.len(), "wrote session snapshot");
    }
    Ok(())
}

/// Restores sessions from `path` if it exists.
pub fn restore_snapshot(state: &AppState, path: &Path) -> scbm::Result<usize> {
    if !path.exists() {
        return Ok(0);
    }
    let bytes = std::fs::read(path)?;
    let snap: api::Snapshot = serde_json::from_slice(&bytes)
        .map_err(|e| scbm::Error::Config(format!("invalid snapshot {}: {e}", path.display())))?;
    state.restore(&snap)?;
    Ok(snap.sessions.len())
}
