//! Seen/unseen retrieval evaluation over one fold.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Fingerprint;
use crate::data::{Item, Split};
use crate::error::{Error, Result};
use crate::index::{rerank, IndexEntry, RankedResult, RetrievalIndex};
use crate::metrics::{average_precision, map_metric, topk_accuracy};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::tokenizer::Modality;

pub const TOP_K: [usize; 3] = [10, 50, 100];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub top10: f64,
    pub top50: f64,
    pub top100: f64,
}

impl RetrievalScores {
    pub fn compute(results: &[RankedResult], labels: &[String]) -> Self {
        let [k10, k50, k100] = TOP_K;
        RetrievalScores {
            map: map_metric(results, labels).map,
            top10: topk_accuracy(results, labels, k10),
            top50: topk_accuracy(results, labels, k50),
            top100: topk_accuracy(results, labels, k100),
        }
    }
}

/// The persisted evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub fold: String,
    pub seen: RetrievalScores,
    pub unseen: RetrievalScores,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    /// Rerank depth; `None` skips reranking.
    pub rerank: Option<usize>,
    /// Shuffles used for the random-ranking baseline.
    pub permutations: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { rerank: None, permutations: 100, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    /// Mean mAP of uniformly shuffled rankings for each query set.
    pub seen_random_map: f64,
    pub unseen_random_map: f64,
    /// Scores with the rerank head applied, when requested.
    pub reranked: Option<(RetrievalScores, RetrievalScores)>,
    pub seen_results: Vec<RankedResult>,
    pub unseen_results: Vec<RankedResult>,
}

/// Mean mAP over `permutations` uniformly shuffled rankings of the gallery.
pub fn random_baseline_map(
    query_labels: &[String],
    gallery_labels: &[String],
    permutations: usize,
    rng: &mut impl rand::Rng,
) -> f64 {
    if permutations == 0 || query_labels.is_empty() {
        return 0.0;
    }
    let mut order: Vec<&String> = gallery_labels.iter().collect();
    let mut total = 0.0;
    for _ in 0..permutations {
        let mut aps = Vec::with_capacity(query_labels.len());
        for q in query_labels {
            order.shuffle(rng);
            let relevant: Vec<bool> = order.iter().map(|l| *l == q).collect();
            if let Some(ap) = average_precision(&relevant) {
                aps.push(ap);
            }
        }
        if !aps.is_empty() {
            total += aps.iter().sum::<f64>() / aps.len() as f64;
        }
    }
    total / permutations as f64
}

fn labels(items: &[&Item]) -> Vec<String> {
    items.iter().map(|i| i.label.clone()).collect()
}

/// Ranks every query against the whole index.
fn rank_all(index: &RetrievalIndex, queries: &[(String, Vec<f32>)]) -> Result<Vec<RankedResult>> {
    queries
        .iter()
        .map(|(id, v)| {
            let mut r = index.knn(v, index.len())?;
            r.query = Some(id.clone());
            Ok(r)
        })
        .collect()
}

/// Pre-mode evaluation with an arbitrary embedding function. The gallery is
/// every held-out image of the fold, seen and unseen classes together.
pub fn evaluate_with(
    embed: impl Fn(&Item) -> Result<Vec<f32>>,
    split: &Split,
    fold: &str,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let gallery = split.gallery();
    if gallery.is_empty() {
        return Err(Error::Input("empty gallery".into()));
    }
    let mut entries = Vec::with_capacity(gallery.len());
    for item in &gallery {
        entries.push(IndexEntry { id: item.id.clone(), label: item.label.clone(), vector: embed(item)? });
    }
    let dim = entries[0].vector.len();
    let index = RetrievalIndex::new(dim, entries, [0; 32])?;
    let embed_queries = |items: &[&Item]| -> Result<Vec<(String, Vec<f32>)>> {
        items.iter().map(|i| Ok((i.id.clone(), embed(i)?))).collect()
    };
    let seen_q = split.seen_queries();
    let unseen_q = split.unseen_queries();
    let seen_results = rank_all(&index, &embed_queries(&seen_q)?)?;
    let unseen_results = rank_all(&index, &embed_queries(&unseen_q)?)?;
    finish(split, fold, opts, seen_results, unseen_results, None)
}

fn finish(
    split: &Split,
    fold: &str,
    opts: &EvalOptions,
    seen_results: Vec<RankedResult>,
    unseen_results: Vec<RankedResult>,
    reranked: Option<(RetrievalScores, RetrievalScores)>,
) -> Result<Evaluation> {
    let seen_labels = labels(&split.seen_queries());
    let unseen_labels = labels(&split.unseen_queries());
    let gallery_labels = labels(&split.gallery());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    Ok(Evaluation {
        report: EvalReport {
            fold: fold.to_string(),
            seen: RetrievalScores::compute(&seen_results, &seen_labels),
            unseen: RetrievalScores::compute(&unseen_results, &unseen_labels),
        },
        seen_random_map: random_baseline_map(&seen_labels, &gallery_labels, opts.permutations, &mut rng),
        unseen_random_map: random_baseline_map(&unseen_labels, &gallery_labels, opts.permutations, &mut rng),
        reranked,
        seen_results,
        unseen_results,
    })
}

/// Full evaluation of a trained model, optionally reranking each query's
/// head with post-mode distances.
pub fn evaluate(
    model: &Model<f32>,
    fingerprint: Fingerprint,
    split: &Split,
    fold: &str,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let encode = |item: &Item| -> Result<Tensor<f32>> { model.encode(&item.tensor(&model.config)?, item.modality) };
    let gallery = split.gallery();
    let mut encoded: HashMap<String, Tensor<f32>> = HashMap::with_capacity(gallery.len());
    let mut entries = Vec::with_capacity(gallery.len());
    for item in &gallery {
        let tokens = encode(item)?;
        entries.push(IndexEntry { id: item.id.clone(), label: item.label.clone(), vector: tokens.row(0).to_vec() });
        encoded.insert(item.id.clone(), tokens);
    }
    let index = RetrievalIndex::new(model.config.dim, entries, fingerprint)?;

    let run = |queries: &[&Item]| -> Result<(Vec<RankedResult>, Vec<RankedResult>)> {
        let mut plain = Vec::with_capacity(queries.len());
        let mut reranked = Vec::new();
        for q in queries {
            debug_assert_eq!(q.modality, Modality::Sketch);
            let tokens = encode(q)?;
            let mut r = index.knn(tokens.row(0), index.len())?;
            r.query = Some(q.id.clone());
            if let Some(m) = opts.rerank {
                reranked.push(rerank(model, &tokens, &r, m, |id| encoded.get(id).cloned())?.0);
            }
            plain.push(r);
        }
        Ok((plain, reranked))
    };
    let seen_q = split.seen_queries();
    let unseen_q = split.unseen_queries();
    let (seen_results, seen_rr) = run(&seen_q)?;
    let (unseen_results, unseen_rr) = run(&unseen_q)?;
    let reranked = opts.rerank.map(|_| {
        (RetrievalScores::compute(&seen_rr, &labels(&seen_q)), RetrievalScores::compute(&unseen_rr, &labels(&unseen_q)))
    });
    finish(split, fold, opts, seen_results, unseen_results, reranked)
}
