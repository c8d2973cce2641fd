//! Precomputed retrieval-token store with exact nearest-neighbor search and
//! optional cross-attention reranking.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic "MLGT" | version u32 | d u32 | count u64
//! count × { id_len u16 | id | label_len u16 | label | d × f32 }
//! fingerprint [u8; 32]
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{fingerprint_hex, Fingerprint};
use crate::cross_attention::DistanceMode;
use crate::data::Item;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::tokenizer::Modality;

const MAGIC: &[u8; 4] = b"MLGT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    pub label: String,
    pub vector: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    pub dim: usize,
    pub entries: Vec<IndexEntry>,
    pub fingerprint: Fingerprint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub label: String,
    pub distance: f64,
    pub mode: DistanceMode,
}

/// Gallery items ordered by distance, ties by ascending id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query: Option<String>,
    pub hits: Vec<Hit>,
}

#[derive(Clone, Debug, Default)]
pub struct BuildReport {
    /// `(id, reason)` for every image left out.
    pub skipped: Vec<(String, String)>,
}

/// Euclidean distance accumulated in `f64`.
pub fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn rank_order(a: &Hit, b: &Hit) -> std::cmp::Ordering {
    a.distance.total_cmp(&b.distance).then_with(|| a.id.cmp(&b.id))
}

impl RetrievalIndex {
    pub fn new(dim: usize, entries: Vec<IndexEntry>, fingerprint: Fingerprint) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for e in &entries {
            if e.vector.len() != dim {
                return Err(Error::dims("index entry", &[e.vector.len()], &[dim]));
            }
            if !ids.insert(e.id.as_str()) {
                return Err(Error::contract("index", format!("duplicate id {}", e.id)));
            }
        }
        Ok(RetrievalIndex { dim, entries, fingerprint })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Exact top-`k` by L2 distance; `k` larger than the index returns everything.
    pub fn knn(&self, query: &[f32], k: usize) -> Result<RankedResult> {
        if query.len() != self.dim {
            return Err(Error::dims("knn", &[query.len()], &[self.dim]));
        }
        if k == 0 {
            return Err(Error::contract("knn", "k must be at least 1"));
        }
        let mut hits: Vec<Hit> = self
            .entries
            .iter()
            .map(|e| Hit {
                id: e.id.clone(),
                label: e.label.clone(),
                distance: l2_distance(query, &e.vector),
                mode: DistanceMode::Pre,
            })
            .collect();
        let k = k.min(hits.len());
        if k < hits.len() {
            hits.select_nth_unstable_by(k, rank_order);
            hits.truncate(k);
        }
        hits.sort_by(rank_order);
        Ok(RankedResult { query: None, hits })
    }

    /// Warning text when the index was built by a different checkpoint.
    pub fn fingerprint_warning(&self, checkpoint: &Fingerprint) -> Option<String> {
        (self.fingerprint != *checkpoint).then(|| {
            format!(
                "index fingerprint {} does not match checkpoint {}",
                fingerprint_hex(&self.fingerprint),
                fingerprint_hex(checkpoint)
            )
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(52 + self.entries.len() * (self.dim * 4 + 32));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let dim = u32::try_from(self.dim).map_err(|_| Error::contract("save_index", "width exceeds u32"))?;
        out.extend_from_slice(&dim.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            for s in [&e.id, &e.label] {
                let len = u16::try_from(s.len())
                    .map_err(|_| Error::contract("save_index", format!("string longer than 65535 bytes: {s}")))?;
                out.extend_from_slice(&len.to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
            for v in &e.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.fingerprint);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, offset: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format { offset: 0, msg: "bad index magic".into() });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format { offset: 4, msg: format!("unsupported index version {version}") });
        }
        let dim = r.u32("width")? as usize;
        let count = r.u64("entry count")?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let id = r.string("id")?;
            let label = r.string("label")?;
            let raw = r.take(dim * 4, "vector")?;
            let vector = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            entries.push(IndexEntry { id, label, vector });
        }
        let fingerprint: Fingerprint = r.take(32, "fingerprint")?.try_into().unwrap();
        if r.offset != bytes.len() {
            return Err(Error::Format { offset: r.offset as u64, msg: "trailing bytes after fingerprint".into() });
        }
        RetrievalIndex::new(dim, entries, fingerprint).map_err(|e| Error::Format { offset: 20, msg: e.to_string() })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.offset.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            offset: self.offset as u64,
            msg: format!("truncated while reading {what}"),
        })?;
        let s = &self.bytes[self.offset..end];
        self.offset = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()) as usize;
        let at = self.offset as u64;
        String::from_utf8(self.take(len, what)?.to_vec())
            .map_err(|_| Error::Format { offset: at, msg: format!("{what} is not valid UTF-8") })
    }
}

/// One pre-mode retrieval token per image. Images that fail to load are
/// skipped and listed in the report.
pub fn build_index<'a>(
    model: &Model<f32>,
    fingerprint: Fingerprint,
    images: impl IntoIterator<Item = &'a Item>,
) -> Result<(RetrievalIndex, BuildReport)> {
    let mut entries = Vec::new();
    let mut report = BuildReport::default();
    for item in images {
        if item.modality != Modality::Image {
            continue;
        }
        match item.tensor::<f32>(&model.config) {
            Ok(x) => entries.push(IndexEntry {
                id: item.id.clone(),
                label: item.label.clone(),
                vector: model.retrieval_token(&x, Modality::Image)?,
            }),
            Err(e) => {
                log::warn!("skipping {}: {e}", item.id);
                report.skipped.push((item.id.clone(), e.to_string()));
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::Input("no image could be indexed".into()));
    }
    Ok((RetrievalIndex::new(model.config.dim, entries, fingerprint)?, report))
}

/// Rescores the first `m` candidates with post-mode distances and re-sorts
/// them; the remaining hits keep their pre-mode order after the head.
/// `encoded_image` returns an image's encoder output by id, or `None` when
/// the image is unavailable, in which case the candidate is dropped.
pub fn rerank(
    model: &Model<f32>,
    sketch_tokens: &Tensor<f32>,
    candidates: &RankedResult,
    m: usize,
    mut encoded_image: impl FnMut(&str) -> Option<Tensor<f32>>,
) -> Result<(RankedResult, Vec<String>)> {
    let m = m.min(candidates.hits.len());
    let mut warnings = Vec::new();
    let mut head = Vec::with_capacity(m);
    for hit in &candidates.hits[..m] {
        let Some(tokens) = encoded_image(&hit.id) else {
            let msg = format!("rerank: image {} unavailable; dropped", hit.id);
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        };
        let score = model.score_encoded(sketch_tokens, &tokens, DistanceMode::Post)?;
        head.push(Hit { distance: score.distance as f64, mode: DistanceMode::Post, ..hit.clone() });
    }
    head.sort_by(rank_order);
    head.extend(candidates.hits[m..].iter().cloned());
    Ok((RankedResult { query: candidates.query.clone(), hits: head }, warnings))
}

/// Top-`k` gallery hits for an encoded sketch. With `rerank_depth = Some(m)`
/// the first `max(k, m)` pre-mode candidates are fetched, the first `m` are
/// rescored by [`rerank`], and the result is cut back to `k`.
pub fn search(
    model: &Model<f32>,
    index: &RetrievalIndex,
    sketch_tokens: &Tensor<f32>,
    k: usize,
    rerank_depth: Option<usize>,
    encoded_image: impl FnMut(&str) -> Option<Tensor<f32>>,
) -> Result<(RankedResult, Vec<String>)> {
    let fetch = rerank_depth.map_or(k, |m| k.max(m));
    let candidates = index.knn(sketch_tokens.row(0), fetch)?;
    let (mut result, warnings) = match rerank_depth {
        Some(m) => rerank(model, sketch_tokens, &candidates, m, encoded_image)?,
        None => (candidates, Vec::new()),
    };
    result.hits.truncate(k);
    Ok((result, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_index(n: usize, d: usize, seed: u64) -> RetrievalIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = (0..n)
            .map(|i| IndexEntry {
                id: format!("img{i:04}"),
                label: format!("c{}", i % 3),
                vector: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        RetrievalIndex::new(d, entries, [7; 32]).unwrap()
    }

    #[test]
    fn exact_match_ranks_first() {
        let idx = random_index(50, 8, 0);
        let q = idx.entries[17].vector.clone();
        let r = idx.knn(&q, 5).unwrap();
        assert_eq!(r.hits[0].id, "img0017");
        assert_eq!(r.hits[0].distance, 0.0);
        assert_eq!(r.hits.len(), 5);
    }

    #[test]
    fn k_is_clamped_and_width_checked() {
        let idx = random_index(6, 4, 1);
        assert_eq!(idx.knn(&[0.0; 4], 100).unwrap().hits.len(), 6);
        assert!(matches!(idx.knn(&[0.0; 3], 1), Err(Error::Dimension { .. })));
        assert!(idx.knn(&[0.0; 4], 0).is_err());
    }

    #[test]
    fn ties_break_by_id() {
        let entries = ["b", "a", "c"]
            .iter()
            .map(|id| IndexEntry { id: id.to_string(), label: "x".into(), vector: vec![1.0, 0.0] })
            .collect();
        let idx = RetrievalIndex::new(2, entries, [0; 32]).unwrap();
        let ids: Vec<_> = idx.knn(&[0.0, 0.0], 3).unwrap().hits.into_iter().map(|h| h.id).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn save_load_round_trip() {
        let idx = random_index(20, 5, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.idx");
        idx.save(&path).unwrap();
        let back = RetrievalIndex::load(&path).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected_with_offsets() {
        let bytes = random_index(3, 4, 3).to_bytes().unwrap();
        for cut in [0, 3, 10, 25, bytes.len() - 1] {
            match RetrievalIndex::from_bytes(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(RetrievalIndex::from_bytes(&bad), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn fingerprint_mismatch_warns() {
        let idx = random_index(2, 2, 0);
        assert!(idx.fingerprint_warning(&[7; 32]).is_none());
        assert!(idx.fingerprint_warning(&[8; 32]).unwrap().contains("does not match"));
    }

    fn encoded_pair(model: &Model<f32>, n: usize) -> (Tensor<f32>, Vec<(String, Tensor<f32>)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let size = model.config.image_size;
        let sketch =
            model.encode(&Tensor::from_fn([1, size, size], |_| rng.random_range(0.0..1.0)), Modality::Sketch).unwrap();
        let images = (0..n)
            .map(|i| {
                let x = Tensor::from_fn([3, size, size], |_| rng.random_range(-1.0..1.0));
                (format!("img{i}"), model.encode(&x, Modality::Image).unwrap())
            })
            .collect();
        (sketch, images)
    }

    fn pre_ranking(sketch: &Tensor<f32>, images: &[(String, Tensor<f32>)]) -> RankedResult {
        let entries = images
            .iter()
            .map(|(id, t)| IndexEntry { id: id.clone(), label: "x".into(), vector: t.row(0).to_vec() })
            .collect();
        let idx = RetrievalIndex::new(sketch.last_dim(), entries, [0; 32]).unwrap();
        idx.knn(sketch.row(0), images.len()).unwrap()
    }

    fn lookup(images: &[(String, Tensor<f32>)]) -> impl FnMut(&str) -> Option<Tensor<f32>> + '_ {
        |id| images.iter().find(|(i, _)| i == id).map(|(_, t)| t.clone())
    }

    #[test]
    fn rerank_depth_zero_is_identity() {
        let model = Model::<f32>::new(crate::ModelConfig::toy(), 0).unwrap();
        let (sketch, images) = encoded_pair(&model, 5);
        let pre = pre_ranking(&sketch, &images);
        let (out, warnings) = rerank(&model, &sketch, &pre, 0, lookup(&images)).unwrap();
        assert_eq!(out, pre);
        assert!(warnings.is_empty());
    }

    #[test]
    fn rerank_with_silent_cross_attention_keeps_order() {
        let mut model = Model::<f32>::new(crate::ModelConfig::toy(), 0).unwrap();
        for t in [&mut model.params.cross.value.weight, &mut model.params.cross.proj.weight] {
            t.data_mut().fill(0.0);
        }
        let (sketch, images) = encoded_pair(&model, 8);
        let pre = pre_ranking(&sketch, &images);
        let (out, _) = rerank(&model, &sketch, &pre, images.len(), lookup(&images)).unwrap();
        let ids = |r: &RankedResult| r.hits.iter().map(|h| h.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&out), ids(&pre));
        assert!(out.hits.iter().all(|h| h.mode == DistanceMode::Post));
    }

    #[test]
    fn rerank_flags_head_and_tail_and_drops_missing() {
        let model = Model::<f32>::new(crate::ModelConfig::toy(), 0).unwrap();
        let (sketch, images) = encoded_pair(&model, 6);
        let pre = pre_ranking(&sketch, &images);
        let missing = pre.hits[1].id.clone();
        let (out, warnings) =
            rerank(&model, &sketch, &pre, 3, |id| (id != missing).then(|| lookup(&images)(id)).flatten()).unwrap();
        assert_eq!(warnings.len(), 1);
        assert_eq!(out.hits.len(), 5);
        assert!(out.hits[..2].iter().all(|h| h.mode == DistanceMode::Post));
        assert!(out.hits[..2].windows(2).all(|w| w[0].distance <= w[1].distance));
        assert_eq!(out.hits[2..], pre.hits[3..]);
    }

    #[test]
    fn search_reranks_beyond_k_then_truncates() {
        let model = Model::<f32>::new(crate::ModelConfig::toy(), 0).unwrap();
        let (sketch, images) = encoded_pair(&model, 7);
        let pre = pre_ranking(&sketch, &images);
        let entries = images
            .iter()
            .map(|(id, t)| IndexEntry { id: id.clone(), label: "x".into(), vector: t.row(0).to_vec() })
            .collect();
        let idx = RetrievalIndex::new(sketch.last_dim(), entries, [0; 32]).unwrap();

        let (plain, _) = search(&model, &idx, &sketch, 3, None, lookup(&images)).unwrap();
        assert_eq!(plain.hits, pre.hits[..3]);

        let (full, _) = rerank(&model, &sketch, &pre, 5, lookup(&images)).unwrap();
        let (out, warnings) = search(&model, &idx, &sketch, 3, Some(5), lookup(&images)).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(out.hits, full.hits[..3]);
    }

    #[test]
    fn index_vectors_match_pair_scoring() {
        use crate::data::generate_synthetic;
        let model = Model::<f32>::new(crate::ModelConfig::toy(), 3).unwrap();
        let ds = generate_synthetic(2, 1, 2, 64, 0).unwrap();
        let (idx, report) = build_index(&model, [1; 32], &ds.items).unwrap();
        assert_eq!(idx.len(), 4);
        assert!(report.skipped.is_empty());
        let sketch = ds.of_modality(Modality::Sketch).next().unwrap();
        let sketch_tokens = model.encode(&sketch.tensor(&model.config).unwrap(), Modality::Sketch).unwrap();
        for e in &idx.entries {
            let image = model.encode(&ds.get(&e.id).unwrap().tensor(&model.config).unwrap(), Modality::Image).unwrap();
            let score = model.score_encoded(&sketch_tokens, &image, DistanceMode::Pre).unwrap();
            assert_eq!(score.rt_image, e.vector);
        }
        let (again, _) = build_index(&model, [1; 32], &ds.items).unwrap();
        assert_eq!(again, idx);
    }
}
