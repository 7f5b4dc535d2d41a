//! `fewshot`: paired episode evaluation of the configured classifiers on a
//! planted-cluster feature set (or a labeled CSV), with optional sweeps
//! over diffusion depth at fixed total strength and over the neighbor
//! count.
//!
//! Derived streams: feature generation uses stream 0 of the base seed,
//! episode sampling stream 1, and the per-episode network/dropout seeds
//! derive from stream 2. All methods and all sweep settings see the exact
//! same episodes, so comparisons are paired.

use anyhow::{bail, Context, Result};
use diffres::datasets::gen_two_level_clusters;
use diffres::derive_seed;
use diffres::fewshot::{evaluate_methods, sample_episodes, summarize, Episode, FewShotConfig, Method};
use diffres::points::PointSet;
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{FeatureSource, FewshotConfig};
use crate::{output, RunContext};

pub fn run(cfg: &FewshotConfig, hash: &str, ctx: &RunContext) -> Result<()> {
    let by_class = features_by_class(&cfg.source, derive_seed(ctx.seed, 0))?;
    let episodes = sample_episodes(
        &by_class,
        cfg.n_way,
        cfg.k_shot,
        cfg.queries,
        cfg.episodes,
        derive_seed(ctx.seed, 1),
    )?;
    let methods: Vec<Method> = cfg.methods.iter().map(|&m| m.into()).collect();
    if methods.is_empty() {
        bail!("the config lists no methods to evaluate");
    }
    let fs_cfg = episode_config(cfg, derive_seed(ctx.seed, 2));

    let records = evaluate_methods(&episodes, &methods, &fs_cfg)?;
    let mut writer = output::csv_writer(&ctx.path("episodes.csv"), hash)?;
    writer.write_record(["episode", "method", "accuracy", "warning"])?;
    for r in &records {
        writer.write_record([
            r.episode_id.to_string(),
            r.method.name().to_string(),
            r.accuracy.to_string(),
            r.warning.to_string(),
        ])?;
    }
    writer.flush()?;

    let summaries = summarize(&records);
    output::write_json(
        &ctx.path("summary.json"),
        hash,
        json!({
            "n_way": cfg.n_way,
            "k_shot": cfg.k_shot,
            "queries": cfg.queries,
            "episodes": episodes.len(),
            "seed": ctx.seed,
            "methods": summaries,
        }),
    )?;

    if let Some(sweep) = &cfg.flatness_sweep {
        write_flatness_sweep(ctx, hash, &episodes, &fs_cfg, sweep)?;
    }
    if let Some(counts) = &cfg.ntop_sweep {
        write_ntop_sweep(ctx, hash, &episodes, &fs_cfg, counts)?;
    }
    Ok(())
}

/// Rows grouped by class label, the layout episode sampling expects.
fn features_by_class(source: &FeatureSource, seed: u64) -> Result<Vec<Array2<f64>>> {
    match source {
        FeatureSource::TwoLevel { .. } => {
            let gen_cfg = source.two_level().expect("matched the generator variant");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ds = gen_two_level_clusters(&gen_cfg, &mut rng)?;
            let mut rows: Vec<Vec<usize>> = vec![Vec::new(); ds.classes()];
            for (r, &(c, _)) in ds.tags().iter().enumerate() {
                rows[c].push(r);
            }
            Ok(rows
                .iter()
                .map(|idx| ds.coords().select(Axis(0), idx))
                .collect())
        }
        FeatureSource::Csv { points } => {
            let ps = PointSet::read_csv(points)
                .with_context(|| format!("reading feature CSV {points}"))?;
            let classes = 1 + ps
                .labels()
                .iter()
                .copied()
                .flatten()
                .max()
                .context("the feature CSV has no labeled rows")?;
            let mut rows: Vec<Vec<usize>> = vec![Vec::new(); classes];
            for (r, label) in ps.labels().iter().enumerate() {
                match label {
                    Some(c) => rows[*c].push(r),
                    None => bail!("feature CSV row {} is unlabeled", r + 1),
                }
            }
            Ok(rows
                .iter()
                .map(|idx| ps.coords().select(Axis(0), idx))
                .collect())
        }
    }
}

fn episode_config(cfg: &FewshotConfig, seed: u64) -> FewShotConfig {
    FewShotConfig {
        n_top: cfg.n_top,
        sigma: cfg.sigma.into(),
        gamma: cfg.gamma,
        rounds: cfg.rounds,
        lambda: cfg.lambda,
        mu: cfg.mu,
        alpha: cfg.alpha,
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        epochs: cfg.epochs,
        center: cfg.center,
        shift: cfg.shift,
        rectify: cfg.rectify,
        base_mean: None,
        seed,
    }
}

/// Varies the diffusion depth of the in-network variant while holding the
/// total strength `rounds × gamma` fixed, one summary row per depth.
fn write_flatness_sweep(
    ctx: &RunContext,
    hash: &str,
    episodes: &[Episode],
    fs_cfg: &FewShotConfig,
    sweep: &crate::config::FlatnessSweep,
) -> Result<()> {
    let mut writer = output::csv_writer(&ctx.path("flatness.csv"), hash)?;
    writer.write_record(["rounds", "gamma", "mean_accuracy", "ci95"])?;
    for &rounds in &sweep.rounds {
        if rounds == 0 {
            bail!("the depth sweep needs positive round counts");
        }
        let gamma = sweep.total_strength / rounds as f64;
        let cfg = FewShotConfig { gamma, rounds, ..fs_cfg.clone() };
        let records = evaluate_methods(episodes, &[Method::InternalCd], &cfg)
            .with_context(|| format!("depth sweep at {rounds} rounds (step {gamma})"))?;
        let accs: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
        writer.write_record([
            rounds.to_string(),
            gamma.to_string(),
            output::mean(&accs).to_string(),
            output::ci95(&accs).to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Varies the kept-neighbor count of the episode graph, one row per value.
fn write_ntop_sweep(
    ctx: &RunContext,
    hash: &str,
    episodes: &[Episode],
    fs_cfg: &FewShotConfig,
    counts: &[usize],
) -> Result<()> {
    let mut writer = output::csv_writer(&ctx.path("ntop.csv"), hash)?;
    writer.write_record(["n_top", "mean_accuracy", "ci95"])?;
    for &n_top in counts {
        let cfg = FewShotConfig { n_top, ..fs_cfg.clone() };
        let records = evaluate_methods(episodes, &[Method::InternalCd], &cfg)
            .with_context(|| format!("neighbor sweep at n_top = {n_top}"))?;
        let accs: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
        writer.write_record([
            n_top.to_string(),
            output::mean(&accs).to_string(),
            output::ci95(&accs).to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}
