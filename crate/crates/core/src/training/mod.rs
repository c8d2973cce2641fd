//! Triplet training with AdamW on the seen classes of one fold.

mod folds;
mod loss;
mod optim;
mod sampling;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::CheckpointMeta;
use crate::config::ModelConfig;
use crate::data::{split_seen, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{Bind, ParamTree};
use crate::tensor::Tensor;

pub use folds::{fold_by_id, make_folds, FoldSpec, FOLD_IDS};
pub use loss::{triplet_hinge, triplet_loss, triplet_loss_from_distances, LossMode, TripletInputs};
pub use optim::{AdamW, AdamWConfig};
pub use sampling::{sample_triplets, Triplet, TripletBatch, TripletSampler};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub margin: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Optimizer steps; each draws a fresh batch with replacement.
    pub steps: usize,
    pub seed: u64,
    pub fold: String,
    pub loss_mode: LossMode,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 0.3,
            lr: 2e-5,
            weight_decay: 0.01,
            batch_size: 16,
            steps: 1000,
            seed: 0,
            fold: "S1".into(),
            loss_mode: LossMode::Both,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return fail("margin must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail("learning rate must be non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight decay must be non-negative");
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1");
        }
        self.model.validate()
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    /// Batch loss after each step's forward pass.
    pub losses: Vec<f64>,
    /// Every class label that entered a batch.
    pub labels_seen: BTreeSet<String>,
    pub split: Split,
    pub meta: CheckpointMeta,
}

/// Splits `ds` by `fold` and trains a fresh model on the training pool.
pub fn train(ds: &Dataset, fold: &FoldSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let split = split_seen(ds, fold, cfg.seed)?;
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    let (model, losses, labels_seen) = train_model(model, &split.train, cfg)?;
    if let Some(leak) = fold.unseen.iter().find(|c| labels_seen.contains(*c)) {
        return Err(Error::contract("train", format!("unseen class `{leak}` entered a batch")));
    }
    Ok(TrainOutcome {
        model,
        losses,
        labels_seen,
        split,
        meta: CheckpointMeta { fold: Some(fold.id.clone()), split_seed: Some(cfg.seed), steps: cfg.steps },
    })
}

/// Runs `cfg.steps` optimizer steps on `pool`.
pub fn train_model(
    mut model: Model<f32>,
    pool: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Model<f32>, Vec<f64>, BTreeSet<String>)> {
    cfg.validate()?;
    let sampler = TripletSampler::new(pool)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = AdamW::new(cfg.optimizer());
    let mut cache: Vec<Option<Tensor<f32>>> = vec![None; pool.len()];
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut labels = BTreeSet::new();

    for step in 0..cfg.steps {
        let batch = sampler.sample(cfg.batch_size, &mut rng)?;
        let mut g = Graph::<f32>::new();
        let params = model.params.bind(&mut g, true);
        let mut inputs = Vec::with_capacity(batch.triplets.len());
        for t in &batch.triplets {
            labels.insert(t.label.clone());
            labels.insert(t.negative_label.clone());
            let mut input = |i: usize| -> Result<_> {
                if cache[i].is_none() {
                    cache[i] = Some(pool.items[i].tensor(&model.config)?);
                }
                Ok(g.constant(cache[i].clone().expect("filled above")))
            };
            inputs.push(TripletInputs {
                sketch: input(t.sketch)?,
                positive: input(t.positive)?,
                negative: input(t.negative)?,
            });
        }
        let loss = triplet_loss(&mut g, &params, &model.config, &inputs, cfg.margin, cfg.loss_mode)?;
        g.backward(loss)?;
        let grads: Vec<Tensor<f32>> = params.leaves().into_iter().map(|&v| g.grad(v)).collect();
        let mut leaves = Vec::new();
        model.params.leaves_mut(&mut leaves);
        opt.step(&mut leaves, &grads)?;

        let value = g.value(loss).data()[0] as f64;
        losses.push(value);
        if (step + 1) % 100 == 0 {
            log::info!("step {}/{}: loss {value:.4}", step + 1, cfg.steps);
        }
    }
    Ok((model, losses, labels))
}

/// `step,loss` rows, one per optimizer step.
pub fn write_loss_csv(path: impl AsRef<Path>, losses: &[f64]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(out, "{i},{l}")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    fn tiny() -> (Dataset, FoldSpec, TrainConfig) {
        let ds = generate_synthetic(4, 2, 4, 32, 0).unwrap();
        let fold = make_folds(&ds.classes).unwrap().remove(0);
        let cfg = TrainConfig {
            steps: 4,
            batch_size: 2,
            lr: 1e-3,
            model: ModelConfig { image_size: 32, dim: 16, heads: 2, cross_heads: 2, layers: 1, ..ModelConfig::toy() },
            ..TrainConfig::default()
        };
        (ds, fold, cfg)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (ds, fold, mut cfg) = tiny();
        cfg.lr = 0.0;
        let out = train(&ds, &fold, &cfg).unwrap();
        let init = Model::<f32>::new(cfg.model.clone(), cfg.seed).unwrap();
        assert_eq!(out.model, init);
        assert_eq!(out.losses.len(), 4);
    }

    #[test]
    fn runs_are_deterministic_and_audited() {
        let (ds, fold, cfg) = tiny();
        let a = train(&ds, &fold, &cfg).unwrap();
        let b = train(&ds, &fold, &cfg).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.model, b.model);
        assert!(a.labels_seen.iter().all(|l| fold.seen.contains(l)));
        assert_ne!(a.model, Model::new(cfg.model.clone(), cfg.seed).unwrap());
    }

    #[test]
    fn loss_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_loss_csv(&path, &[0.5, 0.25]).unwrap();
        assert_eq!(std::fs::read_to_string(path).unwrap(), "step,loss\n0,0.5\n1,0.25\n");
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig { margin: 0.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let cfg: TrainConfig = serde_json::from_str(r#"{"lr": 0.001, "loss_mode": "pre"}"#).unwrap();
        assert_eq!(cfg.loss_mode, LossMode::Pre);
        assert_eq!(cfg.margin, 0.3);
    }
}
