use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::cross_attention::{pair_distance_var, DistanceMode};
use crate::error::{Error, Result};
use crate::model::forward;
use crate::params::ModelParams;
use crate::tensor::Real;
use crate::tokenizer::{Modality, TokenEmbedding};

/// Which retrieval-token distances the triplet loss is taken over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Pre,
    Post,
    /// Sum of the pre and post losses.
    #[default]
    Both,
}

impl LossMode {
    fn distance_modes(self) -> &'static [DistanceMode] {
        match self {
            LossMode::Pre => &[DistanceMode::Pre],
            LossMode::Post => &[DistanceMode::Post],
            LossMode::Both => &[DistanceMode::Pre, DistanceMode::Post],
        }
    }
}

/// `max(d⁺ − d⁻ + m, 0)` for plain numbers.
pub fn triplet_hinge(d_pos: f64, d_neg: f64, margin: f64) -> f64 {
    (d_pos - d_neg + margin).max(0.0)
}

/// Mean hinge over paired positive and negative distance nodes.
pub fn triplet_loss_from_distances<T: Real>(g: &mut Graph<T>, pos: &[Var], neg: &[Var], margin: f64) -> Result<Var> {
    if pos.is_empty() || pos.len() != neg.len() {
        return Err(Error::contract(
            "triplet_loss",
            format!("need T ≥ 1 matched pairs, got {} positive and {} negative", pos.len(), neg.len()),
        ));
    }
    let mut total: Option<Var> = None;
    for (&p, &n) in pos.iter().zip(neg) {
        let diff = g.sub(p, n)?;
        let shifted = g.add_const(diff, T::of(margin))?;
        let hinge = g.relu(shifted)?;
        total = Some(match total {
            Some(t) => g.add(t, hinge)?,
            None => hinge,
        });
    }
    g.scale(total.expect("non-empty"), T::of(1.0 / pos.len() as f64))
}

/// Preprocessed inputs of one triplet, already in the graph.
#[derive(Clone, Copy, Debug)]
pub struct TripletInputs {
    pub sketch: Var,
    pub positive: Var,
    pub negative: Var,
}

/// Full forward pass and triplet loss for a batch.
pub fn triplet_loss<T: Real>(
    g: &mut Graph<T>,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    batch: &[TripletInputs],
    margin: f64,
    mode: LossMode,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::contract("triplet_loss", "empty batch"));
    }
    let mut encoded: Vec<[TokenEmbedding; 3]> = Vec::with_capacity(batch.len());
    for t in batch {
        encoded.push([
            forward(g, p, cfg, t.sketch, Modality::Sketch)?.tokens,
            forward(g, p, cfg, t.positive, Modality::Image)?.tokens,
            forward(g, p, cfg, t.negative, Modality::Image)?.tokens,
        ]);
    }
    let mut loss: Option<Var> = None;
    for &mode in mode.distance_modes() {
        let mut pos = Vec::with_capacity(batch.len());
        let mut neg = Vec::with_capacity(batch.len());
        for &[s, r_pos, r_neg] in &encoded {
            pos.push(pair_distance_var(g, s, r_pos, &p.cross, cfg, mode)?);
            neg.push(pair_distance_var(g, s, r_neg, &p.cross, cfg, mode)?);
        }
        let part = triplet_loss_from_distances(g, &pos, &neg, margin)?;
        loss = Some(match loss {
            Some(l) => g.add(l, part)?,
            None => part,
        });
    }
    Ok(loss.expect("at least one mode"))
}
