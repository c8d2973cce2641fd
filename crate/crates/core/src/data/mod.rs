//! Labeled sketch/image collections, the on-disk loader, seen/unseen splits
//! and a procedural generator for desk-scale experiments.

mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::DynamicImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::tokenizer::{decode_raster, preprocess_image, preprocess_sketch, Modality};
use crate::training::FoldSpec;

pub use synthetic::{generate_synthetic, render_shape, ShapeKind, SHAPES};

const SKETCH_DIR: &str = "sketches";
const IMAGE_DIR: &str = "images";

#[derive(Clone, Debug)]
pub enum Source {
    File(PathBuf),
    Memory(Arc<DynamicImage>),
}

#[derive(Clone, Debug)]
pub struct Item {
    /// Path relative to the dataset root, `/`-separated.
    pub id: String,
    pub modality: Modality,
    pub label: String,
    pub source: Source,
}

impl Item {
    pub fn raster(&self) -> Result<DynamicImage> {
        match &self.source {
            Source::File(path) => {
                let bytes = std::fs::read(path)?;
                decode_raster(&bytes).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
            }
            Source::Memory(img) => Ok((**img).clone()),
        }
    }

    /// Preprocessed model input for this item's modality.
    pub fn tensor<T: Real>(&self, cfg: &ModelConfig) -> Result<Tensor<T>> {
        let img = self.raster()?;
        Ok(match self.modality {
            Modality::Sketch => preprocess_sketch(&img, cfg.image_size),
            Modality::Image => preprocess_image(&img, cfg),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: Option<String>,
    pub modality: Modality,
    pub label: String,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub items: Vec<Item>,
    /// Sorted class names.
    pub classes: Vec<String>,
}

impl Dataset {
    /// Builds a dataset, checking id uniqueness and the class catalog.
    pub fn new(items: Vec<Item>, classes: Vec<String>) -> Result<Self> {
        let catalog: BTreeSet<&str> = classes.iter().map(String::as_str).collect();
        if catalog.len() != classes.len() {
            return Err(Error::contract("dataset", "duplicate class names"));
        }
        let mut ids = BTreeSet::new();
        for item in &items {
            if !ids.insert(item.id.as_str()) {
                return Err(Error::contract("dataset", format!("duplicate id {}", item.id)));
            }
            if !catalog.contains(item.label.as_str()) {
                return Err(Error::contract("dataset", format!("{} has unknown label {}", item.id, item.label)));
            }
        }
        let mut classes = classes;
        classes.sort();
        Ok(Dataset { items, classes })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn of_modality(&self, modality: Modality) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(move |i| i.modality == modality)
    }

    pub fn get(&self, id: &str) -> Option<&Item> {
        self.items.iter().find(|i| i.id == id)
    }

    /// Items whose label is in `labels`; the catalog shrinks to match.
    pub fn restrict(&self, labels: &[String]) -> Dataset {
        let keep: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
        Dataset {
            items: self.items.iter().filter(|i| keep.contains(i.label.as_str())).cloned().collect(),
            classes: self.classes.iter().filter(|c| keep.contains(c.as_str())).cloned().collect(),
        }
    }

    /// Union of two disjoint datasets.
    pub fn merge(&self, other: &Dataset) -> Result<Dataset> {
        let mut classes: BTreeSet<String> = self.classes.iter().cloned().collect();
        classes.extend(other.classes.iter().cloned());
        let items = self.items.iter().chain(&other.items).cloned().collect();
        Dataset::new(items, classes.into_iter().collect())
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.items
            .iter()
            .map(|i| ManifestEntry {
                id: i.id.clone(),
                path: match &i.source {
                    Source::File(p) => Some(p.display().to_string()),
                    Source::Memory(_) => None,
                },
                modality: i.modality,
                label: i.label.clone(),
            })
            .collect()
    }

    /// Writes every item as PNG at `root/<id>` plus `root/manifest.json`.
    pub fn save_to_dir(&self, root: &Path) -> Result<()> {
        for item in &self.items {
            let path = root.join(&item.id);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            item.raster()?.save_with_format(&path, image::ImageFormat::Png)?;
        }
        let manifest: Vec<ManifestEntry> =
            self.manifest().into_iter().map(|e| ManifestEntry { path: Some(e.id.clone()), ..e }).collect();
        std::fs::write(root.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }
}

fn is_raster(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Files per class directory under `root/<kind>`.
fn scan_modality(root: &Path, kind: &str) -> Result<BTreeMap<String, Vec<PathBuf>>> {
    let dir = root.join(kind);
    if !dir.is_dir() {
        return Err(Error::Layout { path: dir, msg: format!("missing `{kind}` directory") });
    }
    let mut classes = BTreeMap::new();
    for class_dir in sorted_entries(&dir)? {
        if !class_dir.is_dir() {
            continue;
        }
        let Some(name) = class_dir.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let files: Vec<PathBuf> =
            sorted_entries(&class_dir)?.into_iter().filter(|p| p.is_file() && is_raster(p)).collect();
        classes.insert(name.to_string(), files);
    }
    Ok(classes)
}

/// Loads `root/{sketches,images}/<class>/<file>`. Classes lacking either
/// modality are excluded; the reasons are returned as warnings.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<(Dataset, Vec<String>)> {
    let root = root.as_ref();
    let sketches = scan_modality(root, SKETCH_DIR)?;
    let images = scan_modality(root, IMAGE_DIR)?;
    let names: BTreeSet<&String> = sketches.keys().chain(images.keys()).collect();

    let mut warnings = Vec::new();
    let mut classes = Vec::new();
    let mut items = Vec::new();
    for name in names {
        let s = sketches.get(name).map(Vec::as_slice).unwrap_or_default();
        let r = images.get(name).map(Vec::as_slice).unwrap_or_default();
        if s.is_empty() || r.is_empty() {
            let missing = if s.is_empty() { SKETCH_DIR } else { IMAGE_DIR };
            let msg = format!("class `{name}` has no {missing}; excluded");
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        classes.push(name.clone());
        for (kind, modality, files) in [(SKETCH_DIR, Modality::Sketch, s), (IMAGE_DIR, Modality::Image, r)] {
            for path in files {
                let file = path.file_name().and_then(|f| f.to_str()).unwrap_or_default();
                items.push(Item {
                    id: format!("{kind}/{name}/{file}"),
                    modality,
                    label: name.clone(),
                    source: Source::File(path.clone()),
                });
            }
        }
    }
    // Sketches before images, each in class then file order.
    items.sort_by(|a, b| (a.modality, &a.id).cmp(&(b.modality, &b.id)));
    Ok((Dataset::new(items, classes)?, warnings))
}

/// Training pool and the two test pools of one fold.
#[derive(Clone, Debug)]
pub struct Split {
    /// Seen-class sketches and the training half of seen-class images.
    pub train: Dataset,
    /// Held-out half of seen-class images.
    pub test_seen: Dataset,
    /// Every sketch and image of the unseen classes.
    pub test_unseen: Dataset,
}

impl Split {
    /// Seen-class sketches used as queries at test time.
    pub fn seen_queries(&self) -> Vec<&Item> {
        self.train.of_modality(Modality::Sketch).collect()
    }

    pub fn unseen_queries(&self) -> Vec<&Item> {
        self.test_unseen.of_modality(Modality::Sketch).collect()
    }

    /// All held-out images, seen and unseen classes together.
    pub fn gallery(&self) -> Vec<&Item> {
        self.test_seen.of_modality(Modality::Image).chain(self.test_unseen.of_modality(Modality::Image)).collect()
    }
}

/// Shuffles each seen class's images under `seed` and splits them 50/50,
/// the training half taking the odd item.
pub fn split_seen(ds: &Dataset, fold: &FoldSpec, seed: u64) -> Result<Split> {
    let catalog: BTreeSet<&String> = ds.classes.iter().collect();
    let fold_classes: BTreeSet<&String> = fold.seen.iter().chain(&fold.unseen).collect();
    if catalog != fold_classes {
        return Err(Error::contract(
            "split_seen",
            format!("fold {} classes do not match the dataset catalog", fold.id),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test_seen = Vec::new();
    for class in &fold.seen {
        train.extend(ds.items.iter().filter(|i| &i.label == class && i.modality == Modality::Sketch).cloned());
        let mut images: Vec<&Item> =
            ds.items.iter().filter(|i| &i.label == class && i.modality == Modality::Image).collect();
        images.shuffle(&mut rng);
        let cut = images.len().div_ceil(2);
        train.extend(images[..cut].iter().map(|i| (*i).clone()));
        test_seen.extend(images[cut..].iter().map(|i| (*i).clone()));
    }
    let mut seen = fold.seen.clone();
    seen.sort();
    let unseen = ds.restrict(&fold.unseen);
    Ok(Split {
        train: Dataset::new(train, seen.clone())?,
        test_seen: Dataset::new(test_seen, seen)?,
        test_unseen: unseen,
    })
}
