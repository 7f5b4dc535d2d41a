//! `train-graph`: semi-supervised node classification with the
//! feature-propagating residual network, repeated over fresh label splits
//! and parameter initializations, reported as mean ± standard deviation.
//!
//! Derived streams: dataset generation uses stream 0 of the base seed,
//! split `i` stream `100 + i`, the init `j` of split `i` stream
//! `1000 + i·inits + j`, and the depth sweep offsets every stream by
//! `2000 · (1 + position)` so no stream collides with the main protocol.

use anyhow::{Context, Result};
use diffres::datasets::{gen_sbm, load_graph_dataset, sample_graph_split, GraphDataset};
use diffres::derive_seed;
use diffres::diffusion::{capped_config, DiffusionConfig};
use diffres::resnet::{train, DiffResNetParams, TrainConfig, TrainData};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{GraphConfig, GraphSource};
use crate::{output, RunContext};

pub fn run(cfg: &GraphConfig, hash: &str, ctx: &RunContext, no_diffusion: bool) -> Result<()> {
    let dataset = load(cfg, derive_seed(ctx.seed, 0))?;
    let rounds = if no_diffusion { 0 } else { cfg.rounds };

    let mut writer = output::csv_writer(&ctx.path("runs.csv"), hash)?;
    writer.write_record(["split", "init", "val_acc", "test_acc"])?;
    let mut test_accs = Vec::new();
    let mut val_accs = Vec::new();
    for split_id in 0..cfg.splits {
        let splits = resolve_split(&dataset, ctx.seed, split_id)?;
        for init in 0..cfg.inits {
            let seed = derive_seed(ctx.seed, 1000 + (split_id * cfg.inits + init) as u64);
            let (val, test) = train_once(cfg, &dataset, &splits, rounds, seed)?;
            writer.write_record([
                split_id.to_string(),
                init.to_string(),
                val.to_string(),
                test.to_string(),
            ])?;
            val_accs.push(val);
            test_accs.push(test);
        }
    }
    writer.flush()?;

    output::write_json(
        &ctx.path("summary.json"),
        hash,
        json!({
            "n_nodes": dataset.n(),
            "n_edges": dataset.n_edges(),
            "n_classes": dataset.n_classes,
            "seed": ctx.seed,
            "no_diffusion": no_diffusion,
            "rounds": rounds,
            "splits": cfg.splits,
            "inits": cfg.inits,
            "runs": test_accs.len(),
            "val_acc_mean": output::mean(&val_accs),
            "val_acc_std": output::std_dev(&val_accs),
            "test_acc_mean": output::mean(&test_accs),
            "test_acc_std": output::std_dev(&test_accs),
        }),
    )?;

    if let Some(depths) = &cfg.depth_sweep {
        write_depth_sweep(cfg, &dataset, hash, ctx, no_diffusion, depths)?;
    }
    Ok(())
}

fn load(cfg: &GraphConfig, seed: u64) -> Result<GraphDataset> {
    match &cfg.source {
        GraphSource::Sbm { classes, per_class, p_in, p_out, feature_dim } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(gen_sbm(*classes, *per_class, *p_in, *p_out, *feature_dim, &mut rng)?)
        }
        GraphSource::Files { edges, features, labels } => {
            Ok(load_graph_dataset(edges, features, labels)?)
        }
    }
}

/// The split shipped with an on-disk dataset is reused when present;
/// generated datasets get one fresh split per repetition.
fn resolve_split(
    dataset: &GraphDataset,
    base_seed: u64,
    split_id: usize,
) -> Result<diffres::datasets::GraphSplits> {
    if let Some(splits) = &dataset.splits {
        return Ok(splits.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base_seed, 100 + split_id as u64));
    Ok(sample_graph_split(&dataset.labels, &mut rng)?)
}

fn train_once(
    cfg: &GraphConfig,
    dataset: &GraphDataset,
    splits: &diffres::datasets::GraphSplits,
    rounds: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let diff = if rounds > 0 {
        capped_config(&dataset.adjacency, cfg.gamma, rounds)?
    } else {
        DiffusionConfig::disabled()
    };
    let params = DiffResNetParams::init(
        dataset.feature_dim(),
        dataset.n_classes,
        cfg.s,
        false,
        cfg.dropout,
        seed,
    )?;
    let labels: Vec<Option<usize>> = dataset.labels.iter().map(|&c| Some(c)).collect();
    let data = TrainData {
        x: dataset.features.view(),
        labels: &labels,
        train_idx: &splits.train,
        val_idx: &splits.val,
        test_idx: &splits.test,
        weights: (rounds > 0 || cfg.mu > 0.0).then_some(&dataset.adjacency),
        prototypes: None,
        proto_idx: &[],
    };
    let train_cfg = TrainConfig {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        epochs: cfg.epochs,
        multistep: cfg.multistep,
        dropout_seed: seed,
        mu: cfg.mu,
        alpha: 0.0,
    };
    let (_, trace) = train(&data, params, &diff, &train_cfg)?;
    let last = trace
        .epochs
        .last()
        .context("the run diverged before completing a single epoch")?;
    Ok((last.val_acc, last.test_acc))
}

/// Re-runs the whole protocol once per listed round count, everything else
/// identical, and writes one summary row per depth.
fn write_depth_sweep(
    cfg: &GraphConfig,
    dataset: &GraphDataset,
    hash: &str,
    ctx: &RunContext,
    no_diffusion: bool,
    depths: &[usize],
) -> Result<()> {
    let mut writer = output::csv_writer(&ctx.path("depth_sweep.csv"), hash)?;
    writer.write_record(["rounds", "test_acc_mean", "test_acc_std", "runs"])?;
    for (pos, &depth) in depths.iter().enumerate() {
        let rounds = if no_diffusion { 0 } else { depth };
        let stream_base = 2000 * (1 + pos as u64);
        let mut accs = Vec::new();
        for split_id in 0..cfg.splits {
            let splits = if dataset.splits.is_some() {
                resolve_split(dataset, ctx.seed, split_id)?
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    ctx.seed,
                    stream_base + 100 + split_id as u64,
                ));
                sample_graph_split(&dataset.labels, &mut rng)?
            };
            for init in 0..cfg.inits {
                let seed = derive_seed(
                    ctx.seed,
                    stream_base + 1000 + (split_id * cfg.inits + init) as u64,
                );
                let (_, test) = train_once(cfg, dataset, &splits, rounds, seed)?;
                accs.push(test);
            }
        }
        writer.write_record([
            depth.to_string(),
            output::mean(&accs).to_string(),
            output::std_dev(&accs).to_string(),
            accs.len().to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}
