//! Ranking quality: mean average precision and precision at K.

use crate::index::RankedResult;

/// Mean over relevant items of precision at their rank; `None` when nothing
/// is relevant.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, _) in relevant.iter().enumerate().filter(|(_, &r)| r) {
        hits += 1;
        sum += hits as f64 / (rank + 1) as f64;
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    pub map: f64,
    /// Queries with no relevant gallery item, by position.
    pub excluded: Vec<usize>,
}

fn relevance(result: &RankedResult, label: &str) -> Vec<bool> {
    result.hits.iter().map(|h| h.label == label).collect()
}

/// Mean average precision over queries that have at least one relevant item.
pub fn map_metric(results: &[RankedResult], query_labels: &[String]) -> MapReport {
    let mut excluded = Vec::new();
    let mut aps = Vec::new();
    for (i, (r, label)) in results.iter().zip(query_labels).enumerate() {
        match average_precision(&relevance(r, label)) {
            Some(ap) => aps.push(ap),
            None => excluded.push(i),
        }
    }
    let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
    MapReport { map, excluded }
}

/// Mean over queries of the same-label fraction among the first `k` hits;
/// queries with fewer than `k` hits are scored over what is available.
pub fn topk_accuracy(results: &[RankedResult], query_labels: &[String], k: usize) -> f64 {
    let scores: Vec<f64> = results
        .iter()
        .zip(query_labels)
        .filter_map(|(r, label)| {
            let n = k.min(r.hits.len());
            (n > 0).then(|| r.hits[..n].iter().filter(|h| &h.label == label).count() as f64 / n as f64)
        })
        .collect();
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}
