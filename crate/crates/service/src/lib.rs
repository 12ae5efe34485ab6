//! HTTP API over a trained descriptor network: browse images, click to store
//! preferred keypoints, render fused preference heatmaps and track pixels
//! between images.
//!
//! All endpoints live under `/api/`; a static directory, when configured, is
//! served at `/`.

mod api;
mod error;
mod state;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use descry::heatmap::HeatmapConfig;
use serde::{Deserialize, Serialize};

pub use api::{router, AnnotateRequest, HeatmapMeta, ImageInfo, TrackResponse};
pub use error::ApiError;
pub use state::SessionState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub image_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub db_dir: PathBuf,
    pub static_dir: Option<PathBuf>,
    /// descriptor images kept in memory
    pub cache_capacity: usize,
    pub heatmap: HeatmapConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            image_dir: PathBuf::from("images"),
            checkpoint: PathBuf::from("checkpoint.dscr"),
            db_dir: PathBuf::from("db"),
            static_dir: None,
            cache_capacity: 32,
            heatmap: HeatmapConfig::default(),
        }
    }
}

/// Binds `config.listen` and serves until the process is stopped.
pub async fn serve(config: ServiceConfig) -> descry::Result<()> {
    let addr = config.listen;
    let state = Arc::new(SessionState::open(config)?);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| descry::Error::io(format!("listen address {addr}"), e))?;
    axum::serve(listener, router(state))
        .await
        .map_err(|e| descry::Error::io(format!("server on {addr}"), e))
}
