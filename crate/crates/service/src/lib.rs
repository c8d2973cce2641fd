//! HTTP front end for a trained checkpoint and its retrieval index.
//!
//! | method | path             | body / response                                   |
//! |--------|------------------|---------------------------------------------------|
//! | GET    | `/health`        | `{"status":"ok","d","index_size"}`                |
//! | POST   | `/query`         | `{"sketch_png_base64","k","rerank"}` → ranked hits |
//! | GET    | `/image/{id}`    | stored image bytes                                |
//! | GET    | `/classes`       | class names with indexed image counts             |
//! | POST   | `/index/rebuild` | re-encodes the asset root and swaps the index in  |
//!
//! Request bodies are capped at [`MAX_BODY_BYTES`].

mod config;
mod routes;
mod state;

pub use config::ServiceConfig;
pub use routes::{router, ClassCount, QueryRequest, QueryResponse, QueryResult, RebuildResponse, MAX_BODY_BYTES};
pub use state::AppState;

use std::sync::Arc;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("invalid service configuration: {0}")]
    Config(String),

    #[error("{0}; pass force to start anyway")]
    FingerprintMismatch(String),

    #[error(transparent)]
    Core(#[from] sketchret_core::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Serves on an already-bound listener until the future is dropped or the
/// listener fails.
pub async fn run(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// Loads the checkpoint and index, binds `cfg.bind` and serves until Ctrl-C.
pub async fn serve(cfg: ServiceConfig) -> Result<(), ServiceError> {
    let bind = cfg.bind.clone();
    let state =
        Arc::new(tokio::task::spawn_blocking(move || AppState::load(cfg)).await.map_err(std::io::Error::other)??);
    let listener = tokio::net::TcpListener::bind(&bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
