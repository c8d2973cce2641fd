use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ServiceError;

/// Service settings, read from JSON. Relative paths in a config file are
/// resolved against the file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    pub checkpoint: PathBuf,
    pub index: PathBuf,
    /// Results per query when the request does not name `k`.
    #[serde(default = "default_k")]
    pub default_k: usize,
    /// Candidates rescored in post mode when a request asks for reranking.
    #[serde(default = "default_rerank_depth")]
    pub rerank_depth: usize,
    /// Dataset root holding `images/<class>/<file>`; image ids resolve here.
    pub asset_root: PathBuf,
    /// Start even if the index was built by a different checkpoint.
    #[serde(default)]
    pub force: bool,
}

fn default_bind() -> String {
    "127.0.0.1:8080".into()
}

fn default_k() -> usize {
    10
}

fn default_rerank_depth() -> usize {
    10
}

impl ServiceConfig {
    pub fn new(checkpoint: impl Into<PathBuf>, index: impl Into<PathBuf>, asset_root: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            bind: default_bind(),
            checkpoint: checkpoint.into(),
            index: index.into(),
            default_k: default_k(),
            rerank_depth: default_rerank_depth(),
            asset_root: asset_root.into(),
            force: false,
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: ServiceConfig =
            serde_json::from_str(&text).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.checkpoint, &mut cfg.index, &mut cfg.asset_root] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.default_k == 0 {
            return Err(ServiceError::Config("default_k must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_optional_fields_and_paths_resolve() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("svc.json");
        std::fs::write(&path, r#"{"checkpoint":"m.ckpt","index":"/abs/g.idx","asset_root":"data"}"#).unwrap();
        let cfg = ServiceConfig::from_file(&path).unwrap();
        assert_eq!(cfg.checkpoint, dir.path().join("m.ckpt"));
        assert_eq!(cfg.index, PathBuf::from("/abs/g.idx"));
        assert_eq!(cfg.asset_root, dir.path().join("data"));
        assert_eq!((cfg.default_k, cfg.rerank_depth, cfg.force), (10, 10, false));
    }

    #[test]
    fn rejects_zero_k_and_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("svc.json");
        std::fs::write(&path, r#"{"checkpoint":"a","index":"b","asset_root":"c","default_k":0}"#).unwrap();
        assert!(matches!(ServiceConfig::from_file(&path), Err(ServiceError::Config(_))));
        std::fs::write(&path, r#"{"checkpoint":"a","index":"b","asset_root":"c","port":1}"#).unwrap();
        assert!(matches!(ServiceConfig::from_file(&path), Err(ServiceError::Config(_))));
    }
}
