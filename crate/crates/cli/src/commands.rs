use std::path::Path;

use anyhow::{Context, Result};
use sketchret_core::checkpoint::{self, CheckpointMeta};
use sketchret_core::data::{generate_synthetic, load_dataset, split_seen, Item};
use sketchret_core::eval::{evaluate_with, EvalOptions, Evaluation, RetrievalScores};
use sketchret_core::index::{build_index as build, search};
use sketchret_core::tokenizer::{decode_raster, preprocess_sketch};
use sketchret_core::training::{fold_by_id, write_loss_csv};
use sketchret_core::{eval, training, Modality, ModelConfig, RetrievalIndex, TrainConfig};
use sketchret_service::{ServiceConfig, ServiceError};

use crate::{BuildIndexArgs, EvaluateArgs, GenDataArgs, Preset, QueryArgs, ServeArgs, TrainArgs};
use crate::{EXIT_DATA, EXIT_INTERNAL, EXIT_USAGE};

/// A flag combination that only fails once files have been read.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    use sketchret_core::Error as E;
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Dimension { .. } | E::NonFinite { .. } => EXIT_INTERNAL,
                _ => EXIT_DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<ServiceError>() {
            return match e {
                ServiceError::Core(E::Dimension { .. } | E::NonFinite { .. }) => EXIT_INTERNAL,
                _ => EXIT_DATA,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_DATA;
        }
    }
    EXIT_INTERNAL
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let ds = generate_synthetic(a.classes, a.sketches, a.images, a.size, a.seed)?;
    ds.save_to_dir(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} items in {} classes to {}", ds.len(), ds.classes.len(), a.out.display());
    Ok(())
}

fn read_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(path) => read_train_config(path)?,
        None => TrainConfig::default(),
    };
    if let Some(p) = a.preset {
        cfg.model = match p {
            Preset::Toy => ModelConfig::toy(),
            Preset::Base => ModelConfig::base(),
        };
    }
    if let Some(v) = a.fold {
        cfg.fold = v;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = a.margin {
        cfg.margin = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }

    let (ds, _) = load_dataset(&a.data)?;
    let fold = fold_by_id(&ds.classes, &cfg.fold)?;
    log::info!("fold {}: unseen {:?}", fold.id, fold.unseen);
    let outcome = training::train(&ds, &fold, &cfg)?;
    let fp = checkpoint::save(&outcome.model, &outcome.meta, &a.out)?;
    let csv = a.loss_csv.unwrap_or_else(|| a.out.with_extension("loss.csv"));
    write_loss_csv(&csv, &outcome.losses)?;

    let tail = outcome.losses.len().min(100);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    println!(
        "trained {} steps on fold {}: loss {:.4} -> {:.4} (mean of first/last {tail})",
        cfg.steps,
        fold.id,
        mean(&outcome.losses[..tail]),
        mean(&outcome.losses[outcome.losses.len() - tail..]),
    );
    println!("checkpoint {} ({})", a.out.display(), checkpoint::fingerprint_hex(&fp));
    println!("loss curve {}", csv.display());
    Ok(())
}

pub fn build_index(a: BuildIndexArgs) -> Result<()> {
    let ckpt = checkpoint::load(&a.ckpt)?;
    let (ds, _) = load_dataset(&a.data)?;
    let (index, report) = build(&ckpt.model, ckpt.fingerprint, &ds.items)?;
    index.save(&a.out)?;
    for (id, why) in &report.skipped {
        eprintln!("skipped {id}: {why}");
    }
    println!("indexed {} images (d = {}) into {}", index.len(), index.dim, a.out.display());
    Ok(())
}

pub fn query(a: QueryArgs) -> Result<()> {
    let ckpt = checkpoint::load(&a.ckpt)?;
    let index = RetrievalIndex::load(&a.index)?;
    if let Some(msg) = index.fingerprint_warning(&ckpt.fingerprint) {
        if !a.force {
            return Err(ServiceError::FingerprintMismatch(msg).into());
        }
        log::warn!("{msg}");
    }
    let model = &ckpt.model;
    let bytes = std::fs::read(&a.sketch).with_context(|| format!("reading {}", a.sketch.display()))?;
    let img = decode_raster(&bytes).with_context(|| format!("decoding {}", a.sketch.display()))?;
    let tokens = model.encode(&preprocess_sketch(&img, model.config.image_size), Modality::Sketch)?;

    let root = a.data.clone().unwrap_or_default();
    let encode_image = |id: &str| -> Option<_> {
        let item = Item {
            id: id.to_string(),
            modality: Modality::Image,
            label: String::new(),
            source: sketchret_core::data::Source::File(root.join(id)),
        };
        model.encode(&item.tensor(&model.config).ok()?, Modality::Image).ok()
    };
    let (result, warnings) = search(model, &index, &tokens, a.k as usize, a.rerank, encode_image)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    for (rank, hit) in result.hits.iter().enumerate() {
        let mode = serde_json::to_value(hit.mode)?;
        println!(
            "{:>4}  {:.6}  {:<4}  {:<16}  {}",
            rank + 1,
            hit.distance,
            mode.as_str().unwrap_or("?"),
            hit.label,
            hit.id
        );
    }
    Ok(())
}

fn print_scores(name: &str, s: &RetrievalScores) {
    println!("{name:<10}{:>8.4}{:>9.4}{:>9.4}{:>9.4}", s.map, s.top10, s.top50, s.top100);
}

fn print_evaluation(ev: &Evaluation) {
    println!("fold {}", ev.report.fold);
    println!("{:<10}{:>8}{:>9}{:>9}{:>9}", "", "mAP", "Top-10", "Top-50", "Top-100");
    print_scores("seen", &ev.report.seen);
    print_scores("unseen", &ev.report.unseen);
    if let Some((seen, unseen)) = &ev.reranked {
        print_scores("seen+rr", seen);
        print_scores("unseen+rr", unseen);
    }
    println!("random-ranking mAP: seen {:.4}, unseen {:.4}", ev.seen_random_map, ev.unseen_random_map);
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let (ds, _) = load_dataset(&a.data)?;
    let (ckpt, meta) = match &a.ckpt {
        Some(path) => {
            let c = checkpoint::load(path)?;
            let meta = c.meta.clone();
            (Some(c), meta)
        }
        None => (None, CheckpointMeta::default()),
    };
    let fold_id = match (&a.fold, &meta.fold) {
        (Some(f), _) | (None, Some(f)) => f.clone(),
        (None, None) => return Err(Usage("--fold is required when the checkpoint records no fold".into()).into()),
    };
    let seed = a.seed.or(meta.split_seed).unwrap_or(0);
    let fold = fold_by_id(&ds.classes, &fold_id)?;
    let split = split_seen(&ds, &fold, seed)?;
    let opts = EvalOptions { rerank: a.rerank, seed, ..EvalOptions::default() };

    let ev = match &ckpt {
        Some(c) => eval::evaluate(&c.model, c.fingerprint, &split, &fold.id, &opts)?,
        None => {
            let classes = ds.classes.clone();
            let one_hot = move |item: &Item| -> sketchret_core::Result<Vec<f32>> {
                Ok(classes.iter().map(|c| if *c == item.label { 1.0 } else { 0.0 }).collect())
            };
            evaluate_with(one_hot, &split, &fold.id, &opts)?
        }
    };
    print_evaluation(&ev);
    write_report(&a.report, &ev)?;
    println!("report {}", a.report.display());
    Ok(())
}

fn write_report(path: &Path, ev: &Evaluation) -> Result<()> {
    let mut json = serde_json::to_string_pretty(&ev.report)?;
    json.push('\n');
    std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}

pub fn serve(a: ServeArgs) -> Result<()> {
    let mut cfg = ServiceConfig::from_file(&a.config)?;
    if let Some(bind) = a.bind {
        cfg.bind = bind;
    }
    cfg.force |= a.force;
    let runtime = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    runtime.block_on(sketchret_service::serve(cfg))?;
    Ok(())
}
