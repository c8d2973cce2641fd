use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, RwLock};

use sketchret_core::checkpoint::{self, Fingerprint};
use sketchret_core::data::load_dataset;
use sketchret_core::index::{build_index, search, BuildReport};
use sketchret_core::tokenizer::{decode_raster, preprocess_image, preprocess_sketch};
use sketchret_core::{Modality, Model, RankedResult, RetrievalIndex, Tensor};

use crate::{ServiceConfig, ServiceError};

/// Model, fingerprint and the current index snapshot. Readers clone the
/// snapshot `Arc` and never hold the lock while computing.
pub struct AppState {
    pub config: ServiceConfig,
    pub model: Model<f32>,
    pub fingerprint: Fingerprint,
    index: RwLock<Arc<RetrievalIndex>>,
    rebuilding: tokio::sync::Mutex<()>,
}

impl AppState {
    /// Loads the checkpoint and index named by `config`. A fingerprint
    /// mismatch is an error unless `config.force` is set.
    pub fn load(config: ServiceConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        let ckpt = checkpoint::load(&config.checkpoint)?;
        let index = RetrievalIndex::load(&config.index)?;
        if index.dim != ckpt.model.config.dim {
            return Err(ServiceError::Config(format!(
                "index dimension {} does not match model dimension {}",
                index.dim, ckpt.model.config.dim
            )));
        }
        if let Some(msg) = index.fingerprint_warning(&ckpt.fingerprint) {
            if !config.force {
                return Err(ServiceError::FingerprintMismatch(msg));
            }
            log::warn!("{msg}; continuing because force is set");
        }
        Ok(Self::new(config, ckpt.model, ckpt.fingerprint, index))
    }

    pub fn new(config: ServiceConfig, model: Model<f32>, fingerprint: Fingerprint, index: RetrievalIndex) -> Self {
        AppState {
            config,
            model,
            fingerprint,
            index: RwLock::new(Arc::new(index)),
            rebuilding: tokio::sync::Mutex::new(()),
        }
    }

    pub fn snapshot(&self) -> Arc<RetrievalIndex> {
        self.index.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn swap(&self, index: RetrievalIndex) {
        *self.index.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(index);
    }

    /// File backing an image id, if the id is a plain relative path.
    pub fn asset_path(&self, id: &str) -> Option<PathBuf> {
        let rel = Path::new(id);
        rel.components().all(|c| matches!(c, Component::Normal(_))).then(|| self.config.asset_root.join(rel))
    }

    fn encode_image(&self, id: &str) -> Option<Tensor<f32>> {
        let bytes = std::fs::read(self.asset_path(id)?).ok()?;
        let img = decode_raster(&bytes).ok()?;
        self.model.encode(&preprocess_image(&img, &self.model.config), Modality::Image).ok()
    }

    /// Encoded sketch token matrix for raw PNG/JPEG bytes.
    pub fn encode_sketch(&self, bytes: &[u8]) -> sketchret_core::Result<Tensor<f32>> {
        let img = decode_raster(bytes)?;
        self.model.encode(&preprocess_sketch(&img, self.model.config.image_size), Modality::Sketch)
    }

    /// Ranks the current snapshot for an encoded sketch; reranking uses the
    /// configured depth.
    pub fn query(&self, sketch_tokens: &Tensor<f32>, k: usize, rerank: bool) -> sketchret_core::Result<RankedResult> {
        let index = self.snapshot();
        let depth = rerank.then_some(self.config.rerank_depth);
        let (result, _) = search(&self.model, &index, sketch_tokens, k, depth, |id| self.encode_image(id))?;
        Ok(result)
    }

    /// Re-encodes every image under the asset root, writes the index file and
    /// swaps the new index in. Concurrent calls run one at a time.
    pub async fn rebuild(self: &Arc<Self>) -> Result<(usize, BuildReport, Vec<String>), ServiceError> {
        let _guard = self.rebuilding.lock().await;
        let state = Arc::clone(self);
        let (index, report, warnings) = tokio::task::spawn_blocking(move || -> Result<_, ServiceError> {
            let (ds, warnings) = load_dataset(&state.config.asset_root)?;
            let (index, report) = build_index(&state.model, state.fingerprint, &ds.items)?;
            let tmp = state.config.index.with_extension("idx.tmp");
            index.save(&tmp)?;
            std::fs::rename(&tmp, &state.config.index)?;
            Ok((index, report, warnings))
        })
        .await
        .map_err(std::io::Error::other)??;
        let size = index.len();
        self.swap(index);
        log::info!("index rebuilt with {size} images");
        Ok((size, report, warnings))
    }
}
