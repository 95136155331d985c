//! HTTP service over slides, tiles, tissue previews and pipeline runs.
//!
//! Images are PNG, bodies are JSON and run events are newline-delimited JSON. Slides are
//! containers under `{data_dir}/slides/{id}`, saved pipelines are `{data_dir}/pipelines/{name}.txt`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize};
use std::sync::{Arc, RwLock};

use axum::routing::{get, post};
use axum::Router;
use pyraflow::models::ModelRegistry;
use pyraflow::pyramid::ImagePyramid;
use pyraflow::tilecache::{CacheBudget, TileCache, DEFAULT_CACHE_BUDGET};

mod error;
mod pipelines;
mod runs;
mod slides;

pub use error::{ApiError, ApiResult};
pub use runs::{RunInfo, RunState};

pub const DATA_DIR_ENV: &str = "PYRAFLOW_DATA_DIR";

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub data_dir: PathBuf,
    /// Byte budget of each slide's tile cache.
    pub cache_budget: u64,
    pub max_concurrent_runs: usize,
}

impl ServerConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self { data_dir: data_dir.into(), cache_budget: DEFAULT_CACHE_BUDGET, max_concurrent_runs: 1 }
    }

    /// Data directory from `PYRAFLOW_DATA_DIR`, else `./data`.
    pub fn from_env() -> Self {
        Self::new(std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from))
    }
}

pub(crate) struct SlideEntry {
    pub pyramid: Arc<ImagePyramid>,
    pub cache: Arc<TileCache>,
}

pub struct AppState {
    pub(crate) config: ServerConfig,
    pub(crate) slides: RwLock<HashMap<String, Arc<SlideEntry>>>,
    pub(crate) runs: RwLock<HashMap<String, Arc<runs::RunEntry>>>,
    pub(crate) registry: Arc<ModelRegistry<f32>>,
    pub(crate) active_runs: AtomicUsize,
    pub(crate) next_run: AtomicU64,
}

impl AppState {
    pub fn new(config: ServerConfig) -> Arc<Self> {
        Self::with_registry(config, ModelRegistry::with_mocks())
    }

    pub fn with_registry(config: ServerConfig, registry: ModelRegistry<f32>) -> Arc<Self> {
        Arc::new(Self {
            config,
            slides: RwLock::default(),
            runs: RwLock::default(),
            registry: Arc::new(registry),
            active_runs: AtomicUsize::new(0),
            next_run: AtomicU64::new(1),
        })
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    /// Registers an in-memory slide under `id`, replacing any slide of that id.
    pub fn insert_slide(&self, id: &str, pyramid: Arc<ImagePyramid>) -> ApiResult<()> {
        let cache = TileCache::new(pyramid.clone(), CacheBudget { max_bytes: self.config.cache_budget })
            .map_err(ApiError::internal)?;
        let entry = Arc::new(SlideEntry { pyramid, cache: Arc::new(cache) });
        self.slides.write().unwrap_or_else(|e| e.into_inner()).insert(id.to_string(), entry);
        Ok(())
    }

    /// Resident bytes of a slide's tile cache, if the slide is open.
    pub fn cache_resident_bytes(&self, id: &str) -> Option<u64> {
        self.slides.read().unwrap_or_else(|e| e.into_inner()).get(id).map(|s| s.cache.resident_bytes())
    }

    /// Number of runs currently executing.
    pub fn active_runs(&self) -> usize {
        self.active_runs.load(std::sync::atomic::Ordering::SeqCst)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/slides", get(slides::list))
        .route("/slides/{id}", get(slides::manifest))
        .route("/slides/{id}/tiles/{level}/{col}/{row}", get(slides::tile))
        .route("/slides/{id}/tissue-preview", get(slides::tissue_preview))
        .route("/slides/{id}/runs", post(runs::start))
        .route("/runs", get(runs::list))
        .route("/runs/{id}", get(runs::info))
        .route("/runs/{id}/halt", post(runs::halt))
        .route("/runs/{id}/events", get(runs::events))
        .route("/runs/{id}/overlay/{level}/{col}/{row}", get(runs::overlay))
        .route("/runs/{id}/stats", get(runs::stats))
        .route("/runs/{id}/export", get(runs::export))
        .route("/pipelines", get(pipelines::list))
        .route("/pipelines/validate", post(pipelines::validate))
        .route("/pipelines/{name}", get(pipelines::get_one).put(pipelines::put))
        .route("/models", get(pipelines::models))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(config: ServerConfig, port: u16) -> std::io::Result<()> {
    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {} with data in {}", listener.local_addr()?, config.data_dir.display());
    axum::serve(listener, router(AppState::new(config))).await
}
