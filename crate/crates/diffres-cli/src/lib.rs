//! Experiment runner for the `diffres` crate: each subcommand reads a JSON
//! config (unknown keys rejected), derives every random stream from one base
//! seed, and writes CSV traces and JSON summaries stamped with the config
//! hash, so a run is reproducible from its output files alone.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

pub mod config;
mod fewshot_cmd;
mod graph_cmd;
mod graph_io;
mod output;
mod synthetic;
mod verify;

/// Environment variable that overrides the default output directory (the
/// `--out` flag still wins over it).
pub const OUT_DIR_ENV: &str = "DIFFRES_OUT";

#[derive(Debug, Parser)]
#[command(
    name = "diffres",
    about = "Diffusion-augmented residual network experiments",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON experiment config; see the bundled `configs/` directory.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base seed; every random stream in the run derives from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default `.`; the DIFFRES_OUT variable overrides
    /// the default, the flag overrides both).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the small point-cloud network on a bundled synthetic dataset.
    TrainSynthetic {
        #[command(flatten)]
        common: CommonArgs,
        /// Run the ablation: zero diffusion rounds, everything else equal.
        #[arg(long)]
        no_diffusion: bool,
    },
    /// Semi-supervised node classification over repeated splits and inits.
    TrainGraph {
        #[command(flatten)]
        common: CommonArgs,
        /// Run the ablation: zero diffusion rounds, everything else equal.
        #[arg(long)]
        no_diffusion: bool,
    },
    /// Paired few-shot episode evaluation across the configured methods.
    Fewshot {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the built-in numerical claims and write a pass/fail report.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        /// Restrict to one claim (see the report for the full list).
        #[arg(long)]
        claim: Option<String>,
    },
    /// Build the neighbor graph for a point CSV and export it.
    BuildGraph {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Apply the diffusion operator to a point CSV and write the result.
    Diffuse {
        #[command(flatten)]
        common: CommonArgs,
    },
}

/// Dispatches a parsed command line; the returned code is the process exit
/// status (verify reports claim failures through it).
pub fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::TrainSynthetic { common, no_diffusion } => {
            let (cfg, hash): (config::SyntheticConfig, String) = load_config(common)?;
            let ctx = RunContext::new(common, cfg.seed, cfg.out.as_deref())?;
            synthetic::run(&cfg, &hash, &ctx, *no_diffusion)?;
            Ok(0)
        }
        Command::TrainGraph { common, no_diffusion } => {
            let (cfg, hash): (config::GraphConfig, String) = load_config(common)?;
            let ctx = RunContext::new(common, cfg.seed, cfg.out.as_deref())?;
            graph_cmd::run(&cfg, &hash, &ctx, *no_diffusion)?;
            Ok(0)
        }
        Command::Fewshot { common } => {
            let (cfg, hash): (config::FewshotConfig, String) = load_config(common)?;
            let ctx = RunContext::new(common, cfg.seed, cfg.out.as_deref())?;
            fewshot_cmd::run(&cfg, &hash, &ctx)?;
            Ok(0)
        }
        Command::Verify { common, claim } => {
            let (cfg, hash): (config::VerifyConfig, String) = load_config(common)?;
            let ctx = RunContext::new(common, cfg.seed, cfg.out.as_deref())?;
            let all_passed = verify::run(&cfg, &hash, &ctx, claim.as_deref())?;
            Ok(if all_passed { 0 } else { 1 })
        }
        Command::BuildGraph { common } => {
            let (cfg, hash): (config::BuildGraphConfig, String) = load_config(common)?;
            let ctx = RunContext::new(common, None, cfg.out.as_deref())?;
            graph_io::build(&cfg, &hash, &ctx)?;
            Ok(0)
        }
        Command::Diffuse { common } => {
            let (cfg, hash): (config::DiffuseConfig, String) = load_config(common)?;
            let ctx = RunContext::new(common, None, cfg.out.as_deref())?;
            graph_io::diffuse_points(&cfg, &hash, &ctx)?;
            Ok(0)
        }
    }
}

/// Resolved run inputs: the base seed and the directory outputs land in.
pub struct RunContext {
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl RunContext {
    fn new(common: &CommonArgs, config_seed: Option<u64>, config_out: Option<&str>) -> Result<Self> {
        let seed = common.seed.or(config_seed).unwrap_or(0);
        let out_dir = resolve_out_dir(common.out.as_deref(), config_out);
        std::fs::create_dir_all(&out_dir)
            .with_context(|| format!("creating output directory {}", out_dir.display()))?;
        Ok(RunContext { seed, out_dir })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.out_dir.join(file)
    }
}

/// `--out` flag beats the config's `out`, which beats `DIFFRES_OUT`, which
/// beats the current directory.
fn resolve_out_dir(flag: Option<&Path>, config_out: Option<&str>) -> PathBuf {
    if let Some(dir) = flag {
        return dir.to_path_buf();
    }
    if let Some(dir) = config_out {
        return PathBuf::from(dir);
    }
    if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    PathBuf::from(".")
}

/// Loads and validates the config, returning it with the hash that stamps
/// every output file. Commands with full defaults (verify) run configless;
/// the others require `--config`.
fn load_config<T>(common: &CommonArgs) -> Result<(T, String)>
where
    T: serde::de::DeserializeOwned + Default + config::RequiresConfig,
{
    match &common.config {
        Some(path) => {
            let bytes = std::fs::read(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let cfg: T = serde_json::from_slice(&bytes)
                .with_context(|| format!("parsing config {}", path.display()))?;
            Ok((cfg, fnv1a_hex(&bytes)))
        }
        None if T::REQUIRED => bail!("this command needs --config PATH"),
        None => {
            let cfg = T::default();
            // Hash the canonical serialization of the defaults so the
            // stamp still identifies exactly what ran.
            let canonical = serde_json::to_vec(&serde_json::json!({
                "defaults": std::any::type_name::<T>(),
            }))
            .expect("static document serializes");
            Ok((cfg, fnv1a_hex(&canonical)))
        }
    }
}

/// FNV-1a over the raw config bytes, printed as 16 hex digits. Collision
/// resistance is irrelevant here; the stamp only ties outputs to inputs.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}
