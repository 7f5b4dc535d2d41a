//! `build-graph` and `diffuse`: the graph-construction pipeline as a
//! standalone tool. Both read a point CSV, build the normalized top-k
//! similarity graph, and either export it or push the coordinates through
//! the diffusion operator.

use std::io::Write;

use anyhow::{Context, Result};
use diffres::diffusion::{capped_config, diffuse, stability_max_step};
use diffres::graph::{build_weight_matrix, component_count, SparseWeights};
use diffres::points::PointSet;
use serde_json::json;

use crate::config::{BuildGraphConfig, DiffuseConfig};
use crate::{output, RunContext};

pub fn build(cfg: &BuildGraphConfig, hash: &str, ctx: &RunContext) -> Result<()> {
    let points = PointSet::read_csv(&cfg.points)
        .with_context(|| format!("reading point CSV {}", cfg.points))?;
    let w = build_weight_matrix(&points.coords(), cfg.n_top, &cfg.sigma.into())?;
    write_edges(&ctx.path("edges.txt"), hash, &w)?;
    output::write_json(
        &ctx.path("graph.json"),
        hash,
        json!({
            "n": w.n(),
            "dim": points.dim(),
            "edges": w.nnz() / 2,
            "components": component_count(&w),
            "stability_max_step": stability_max_step(&w),
        }),
    )?;
    Ok(())
}

pub fn diffuse_points(cfg: &DiffuseConfig, hash: &str, ctx: &RunContext) -> Result<()> {
    let points = PointSet::read_csv(&cfg.points)
        .with_context(|| format!("reading point CSV {}", cfg.points))?;
    let w = build_weight_matrix(&points.coords(), cfg.n_top, &cfg.sigma.into())?;
    let diff = capped_config(&w, cfg.gamma, cfg.rounds)?;
    let result = diffuse(&points.coords(), &w, &diff)?;
    output::write_points_csv(&ctx.path("diffused.csv"), hash, &result.view(), points.labels())?;
    output::write_json(
        &ctx.path("diffuse.json"),
        hash,
        json!({
            "n": points.n(),
            "rounds": cfg.rounds,
            "gamma_requested": cfg.gamma,
            "gamma_used": diff.gamma,
        }),
    )?;
    Ok(())
}

/// Whitespace-separated `i j weight` rows, each undirected edge once
/// (`i < j`), hash comment first.
fn write_edges(path: &std::path::Path, hash: &str, w: &SparseWeights) -> Result<()> {
    let mut file = std::fs::File::create(path)
        .with_context(|| format!("creating {}", path.display()))?;
    writeln!(file, "# config {hash}")?;
    for i in 0..w.n() {
        for &(j, value) in w.row(i) {
            if i < j {
                writeln!(file, "{i} {j} {value}")?;
            }
        }
    }
    Ok(())
}
