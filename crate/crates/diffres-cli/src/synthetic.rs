//! `train-synthetic`: fits the small point-cloud network on one of the
//! bundled 2-D datasets and writes the training trace, optional feature
//! snapshots, the final parameters, and a summary of the run.
//!
//! Derived streams: dataset sampling uses stream 0 of the base seed,
//! parameter initialization stream 1, dropout masks stream 2. The
//! requested step size is clamped to the measured stability bound of the
//! built graph when it lands above it; the summary records both values.

use anyhow::{bail, Context, Result};
use diffres::datasets::{gen_circle, gen_moon, gen_spiral_with, gen_xor, SpiralConfig};
use diffres::derive_seed;
use diffres::diffusion::{capped_config, DiffusionConfig};
use diffres::graph::build_weight_matrix;
use diffres::points::PointSet;
use diffres::resnet::{forward, train, DiffResNetParams, MetricsTrace, TrainConfig, TrainData};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{SyntheticConfig, SyntheticDataset};
use crate::{output, RunContext};

pub fn run(cfg: &SyntheticConfig, hash: &str, ctx: &RunContext, no_diffusion: bool) -> Result<()> {
    let points = generate(cfg, derive_seed(ctx.seed, 0));
    let coords = points.coords();
    let labels = points.labels();
    let classes = 1 + labels
        .iter()
        .copied()
        .flatten()
        .max()
        .context("the dataset has no labeled points")?;

    let rounds = if no_diffusion { 0 } else { cfg.rounds };
    let (weights, diff) = if rounds > 0 {
        let w = build_weight_matrix(&coords, cfg.n_top, &cfg.sigma.into())?;
        let diff = capped_config(&w, cfg.gamma, rounds)?;
        (Some(w), diff)
    } else {
        (None, DiffusionConfig::disabled())
    };

    let params = DiffResNetParams::init(
        points.dim(),
        classes,
        cfg.s,
        true,
        cfg.dropout,
        derive_seed(ctx.seed, 1),
    )?;
    let n_parameters = params.n_parameters();

    let all: Vec<usize> = (0..points.n()).collect();
    let data = TrainData {
        x: coords,
        labels,
        train_idx: &all,
        val_idx: &[],
        test_idx: &[],
        weights: weights.as_ref(),
        prototypes: None,
        proto_idx: &[],
    };
    let train_cfg = TrainConfig {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        epochs: cfg.epochs,
        multistep: cfg.multistep,
        dropout_seed: derive_seed(ctx.seed, 2),
        mu: 0.0,
        alpha: 0.0,
    };

    let (trained, trace) = train(&data, params.clone(), &diff, &train_cfg)?;
    write_trace(&ctx.path("trace.csv"), hash, &trace)?;
    write_snapshots(cfg, hash, ctx, &params, &data, &diff, &train_cfg)?;

    let model: Value = serde_json::from_str(&trained.to_json()?)?;
    output::write_json(&ctx.path("params.json"), hash, json!({ "model": model }))?;

    let best_train_acc = trace
        .epochs
        .iter()
        .map(|m| m.train_acc)
        .fold(f64::NEG_INFINITY, f64::max);
    output::write_json(
        &ctx.path("run.json"),
        hash,
        json!({
            "dataset": cfg.dataset.name(),
            "n_points": points.n(),
            "seed": ctx.seed,
            "no_diffusion": no_diffusion,
            "rounds": rounds,
            "gamma_requested": cfg.gamma,
            "gamma_used": if rounds > 0 { diff.gamma } else { 0.0 },
            "epochs_requested": cfg.epochs,
            "epochs_completed": trace.epochs.len(),
            "diverged_at": trace.diverged_at,
            "n_parameters": n_parameters,
            "best_train_acc": finite_or_null(best_train_acc),
            "final_train_acc": trace.epochs.last().map(|m| m.train_acc),
        }),
    )?;
    Ok(())
}

fn generate(cfg: &SyntheticConfig, seed: u64) -> PointSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match cfg.dataset {
        SyntheticDataset::Xor => gen_xor(&mut rng),
        SyntheticDataset::Moon => gen_moon(&mut rng),
        SyntheticDataset::Circle => gen_circle(&mut rng),
        SyntheticDataset::Spiral => {
            let geometry = cfg
                .spiral
                .as_ref()
                .map_or_else(SpiralConfig::default, |s| s.resolve());
            gen_spiral_with(&geometry, &mut rng)
        }
    }
}

fn write_trace(path: &std::path::Path, hash: &str, trace: &MetricsTrace) -> Result<()> {
    let mut writer = output::csv_writer(path, hash)?;
    writer.write_record(["epoch", "loss", "train_acc"])?;
    for m in &trace.epochs {
        writer.write_record([m.epoch.to_string(), m.loss.to_string(), m.train_acc.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

/// Dumps the classifier-input features after each requested epoch count by
/// replaying the run's prefix from the identical initialization and
/// derived streams. Exact prefix equality needs a constant learning rate,
/// so the multistep schedule is rejected when snapshots are requested.
fn write_snapshots(
    cfg: &SyntheticConfig,
    hash: &str,
    ctx: &RunContext,
    init: &DiffResNetParams,
    data: &TrainData,
    diff: &DiffusionConfig,
    train_cfg: &TrainConfig,
) -> Result<()> {
    if cfg.snapshot_epochs.is_empty() {
        return Ok(());
    }
    if cfg.multistep {
        bail!("feature snapshots need a constant learning rate; disable multistep");
    }
    let mut eval_rng = ChaCha8Rng::seed_from_u64(0);
    for &epoch in &cfg.snapshot_epochs {
        if epoch > cfg.epochs {
            bail!("snapshot epoch {epoch} exceeds the {} training epochs", cfg.epochs);
        }
        let params = if epoch == 0 {
            init.clone()
        } else {
            let prefix = TrainConfig { epochs: epoch, ..*train_cfg };
            train(data, init.clone(), diff, &prefix)?.0
        };
        let (_, cache) = forward(&data.x, &params, data.weights, diff, &mut eval_rng, false)?;
        output::write_points_csv(
            &ctx.path(&format!("features_epoch_{epoch}.csv")),
            hash,
            &cache.features(),
            data.labels,
        )?;
    }
    Ok(())
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}
