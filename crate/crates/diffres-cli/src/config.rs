//! Per-command JSON schemas. Every struct rejects unknown keys so a typo'd
//! parameter fails loudly instead of silently running the defaults.

use diffres::datasets::{SpiralConfig, TwoLevelConfig};
use diffres::fewshot::Method;
use diffres::graph::SigmaRule;
use serde::{Deserialize, Serialize};

/// Marker deciding whether a command can run without `--config`.
pub trait RequiresConfig {
    const REQUIRED: bool;
}

/// Kernel bandwidth rule, as it appears in config files:
/// `{"fixed": 0.5}` or `{"adaptive": 7}`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaSpec {
    Fixed(f64),
    Adaptive(usize),
}

impl From<SigmaSpec> for SigmaRule {
    fn from(spec: SigmaSpec) -> Self {
        match spec {
            SigmaSpec::Fixed(v) => SigmaRule::Fixed(v),
            SigmaSpec::Adaptive(k) => SigmaRule::Adaptive(k),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticDataset {
    Xor,
    Moon,
    Circle,
    Spiral,
}

impl SyntheticDataset {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticDataset::Xor => "xor",
            SyntheticDataset::Moon => "moon",
            SyntheticDataset::Circle => "circle",
            SyntheticDataset::Spiral => "spiral",
        }
    }
}

/// Spiral geometry override; fields default to the generator's values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpiralOverride {
    pub n_per_arm: Option<usize>,
    pub theta_min: Option<f64>,
    pub theta_max: Option<f64>,
    pub noise: Option<f64>,
}

impl SpiralOverride {
    pub fn resolve(&self) -> SpiralConfig {
        let base = SpiralConfig::default();
        SpiralConfig {
            n_per_arm: self.n_per_arm.unwrap_or(base.n_per_arm),
            theta_min: self.theta_min.unwrap_or(base.theta_min),
            theta_max: self.theta_max.unwrap_or(base.theta_max),
            noise: self.noise.unwrap_or(base.noise),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub dataset: SyntheticDataset,
    pub n_top: usize,
    pub sigma: SigmaSpec,
    pub gamma: f64,
    pub rounds: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    #[serde(default)]
    pub multistep: bool,
    /// Residual blocks; the published point-cloud runs use one.
    #[serde(default = "one")]
    pub s: usize,
    #[serde(default)]
    pub dropout: f64,
    /// Epochs at which to dump the classifier-input features as CSV.
    #[serde(default)]
    pub snapshot_epochs: Vec<usize>,
    #[serde(default)]
    pub spiral: Option<SpiralOverride>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<String>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            dataset: SyntheticDataset::Circle,
            n_top: 50,
            sigma: SigmaSpec::Fixed(0.5),
            gamma: 1.0,
            rounds: 200,
            lr: 1.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            multistep: false,
            s: 1,
            dropout: 0.0,
            snapshot_epochs: Vec::new(),
            spiral: None,
            seed: None,
            out: None,
        }
    }
}

impl RequiresConfig for SyntheticConfig {
    const REQUIRED: bool = true;
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum GraphSource {
    /// Planted-partition generator: `classes` blocks of `per_class` nodes.
    Sbm {
        classes: usize,
        per_class: usize,
        p_in: f64,
        p_out: f64,
        feature_dim: usize,
    },
    /// On-disk dataset: edge list plus feature and label CSVs.
    Files {
        edges: String,
        features: String,
        labels: String,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub source: GraphSource,
    pub gamma: f64,
    pub rounds: usize,
    /// Residual blocks (the graph variant has no second block map).
    pub s: usize,
    pub dropout: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    #[serde(default = "yes")]
    pub multistep: bool,
    /// Label-smoothness regularizer weight (0 disables it).
    #[serde(default)]
    pub mu: f64,
    #[serde(default = "ten")]
    pub splits: usize,
    #[serde(default = "three")]
    pub inits: usize,
    /// Re-run the whole protocol at each listed depth and emit a CSV.
    #[serde(default)]
    pub depth_sweep: Option<Vec<usize>>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<String>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            source: GraphSource::Sbm {
                classes: 4,
                per_class: 100,
                p_in: 0.1,
                p_out: 0.005,
                feature_dim: 8,
            },
            gamma: 0.25,
            rounds: 20,
            s: 2,
            dropout: 0.25,
            lr: 0.2,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 100,
            multistep: true,
            mu: 0.0,
            splits: 10,
            inits: 3,
            depth_sweep: None,
            seed: None,
            out: None,
        }
    }
}

impl RequiresConfig for GraphConfig {
    const REQUIRED: bool = true;
}

fn yes() -> bool {
    true
}
fn ten() -> usize {
    10
}
fn three() -> usize {
    3
}

/// Method names accepted in config files (snake_case).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum MethodSpec {
    NearestPrototype,
    Diffusion,
    Convection,
    ExternalCd,
    InternalCd,
}

impl From<MethodSpec> for Method {
    fn from(spec: MethodSpec) -> Self {
        match spec {
            MethodSpec::NearestPrototype => Method::NearestPrototype,
            MethodSpec::Diffusion => Method::Diffusion,
            MethodSpec::Convection => Method::Convection,
            MethodSpec::ExternalCd => Method::ExternalCd,
            MethodSpec::InternalCd => Method::InternalCd,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum FeatureSource {
    /// Clustered features with planted subclass structure.
    TwoLevel {
        classes: usize,
        modes_per_class: usize,
        dim: usize,
        n_per_mode: usize,
        class_sep: f64,
        mode_spread: f64,
        noise: f64,
    },
    /// Labeled point CSV (the [`diffres::points::PointSet`] layout).
    Csv { points: String },
}

/// Sweep of diffusion rounds at constant total strength `rounds × gamma`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlatnessSweep {
    pub total_strength: f64,
    pub rounds: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewshotConfig {
    pub source: FeatureSource,
    pub n_way: usize,
    pub k_shot: usize,
    pub queries: usize,
    pub episodes: usize,
    pub methods: Vec<MethodSpec>,
    pub n_top: usize,
    pub sigma: SigmaSpec,
    pub gamma: f64,
    pub rounds: usize,
    pub lambda: f64,
    pub mu: f64,
    pub alpha: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    #[serde(default = "yes")]
    pub center: bool,
    #[serde(default = "yes")]
    pub shift: bool,
    #[serde(default = "yes")]
    pub rectify: bool,
    #[serde(default)]
    pub flatness_sweep: Option<FlatnessSweep>,
    #[serde(default)]
    pub ntop_sweep: Option<Vec<usize>>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<String>,
}

impl Default for FewshotConfig {
    fn default() -> Self {
        FewshotConfig {
            source: FeatureSource::TwoLevel {
                classes: 5,
                modes_per_class: 2,
                dim: 16,
                n_per_mode: 20,
                class_sep: 9.0,
                mode_spread: 4.0,
                noise: 0.7,
            },
            n_way: 5,
            k_shot: 1,
            queries: 15,
            episodes: 200,
            methods: vec![
                MethodSpec::NearestPrototype,
                MethodSpec::Convection,
                MethodSpec::ExternalCd,
                MethodSpec::InternalCd,
            ],
            n_top: 8,
            sigma: SigmaSpec::Adaptive(4),
            gamma: 0.5,
            rounds: 10,
            lambda: 0.5,
            mu: 0.01,
            alpha: 0.0,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 100,
            center: true,
            shift: true,
            rectify: true,
            flatness_sweep: None,
            ntop_sweep: None,
            seed: None,
            out: None,
        }
    }
}

impl RequiresConfig for FewshotConfig {
    const REQUIRED: bool = true;
}

impl FeatureSource {
    pub fn two_level(&self) -> Option<TwoLevelConfig> {
        match *self {
            FeatureSource::TwoLevel {
                classes,
                modes_per_class,
                dim,
                n_per_mode,
                class_sep,
                mode_spread,
                noise,
            } => Some(TwoLevelConfig {
                classes,
                modes_per_class,
                dim,
                n_per_mode,
                class_sep,
                mode_spread,
                noise,
            }),
            FeatureSource::Csv { .. } => None,
        }
    }
}

/// Instance counts for the verification suites; the defaults finish in
/// well under a minute.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default = "twenty")]
    pub stability_graphs: usize,
    #[serde(default = "five")]
    pub oracle_graphs: usize,
    #[serde(default = "ten")]
    pub flow_instances: usize,
    #[serde(default = "five")]
    pub separation_datasets: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<String>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            stability_graphs: 20,
            oracle_graphs: 5,
            flow_instances: 10,
            separation_datasets: 5,
            seed: None,
            out: None,
        }
    }
}

impl RequiresConfig for VerifyConfig {
    const REQUIRED: bool = false;
}

fn twenty() -> usize {
    20
}
fn five() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildGraphConfig {
    /// Input point CSV (the [`diffres::points::PointSet`] layout).
    pub points: String,
    pub n_top: usize,
    pub sigma: SigmaSpec,
    #[serde(default)]
    pub out: Option<String>,
}

impl Default for BuildGraphConfig {
    fn default() -> Self {
        BuildGraphConfig {
            points: String::new(),
            n_top: 10,
            sigma: SigmaSpec::Adaptive(7),
            out: None,
        }
    }
}

impl RequiresConfig for BuildGraphConfig {
    const REQUIRED: bool = true;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffuseConfig {
    /// Input point CSV (the [`diffres::points::PointSet`] layout).
    pub points: String,
    pub n_top: usize,
    pub sigma: SigmaSpec,
    pub gamma: f64,
    pub rounds: usize,
    #[serde(default)]
    pub out: Option<String>,
}

impl Default for DiffuseConfig {
    fn default() -> Self {
        DiffuseConfig {
            points: String::new(),
            n_top: 10,
            sigma: SigmaSpec::Adaptive(7),
            gamma: 0.5,
            rounds: 10,
            out: None,
        }
    }
}

impl RequiresConfig for DiffuseConfig {
    const REQUIRED: bool = true;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let json = r#"{
            "dataset": "circle", "n_top": 50, "sigma": {"fixed": 0.5},
            "gamma": 1.0, "rounds": 200, "lr": 1.0, "momentum": 0.9,
            "weight_decay": 5e-4, "epochs": 30, "learning_rate": 0.1
        }"#;
        let err = serde_json::from_str::<SyntheticConfig>(json).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn sigma_spec_maps_to_the_kernel_rule() {
        let fixed: SigmaSpec = serde_json::from_str(r#"{"fixed": 0.5}"#).unwrap();
        assert!(matches!(SigmaRule::from(fixed), SigmaRule::Fixed(v) if v == 0.5));
        let adaptive: SigmaSpec = serde_json::from_str(r#"{"adaptive": 7}"#).unwrap();
        assert!(matches!(SigmaRule::from(adaptive), SigmaRule::Adaptive(7)));
    }

    #[test]
    fn graph_defaults_fill_protocol_counts() {
        let json = r#"{
            "source": {"sbm": {"classes": 4, "per_class": 100, "p_in": 0.1,
                               "p_out": 0.005, "feature_dim": 8}},
            "gamma": 0.25, "rounds": 20, "s": 2, "dropout": 0.25,
            "lr": 0.2, "momentum": 0.9, "weight_decay": 5e-4, "epochs": 100
        }"#;
        let cfg: GraphConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.splits, 10);
        assert_eq!(cfg.inits, 3);
        assert!(cfg.multistep);
    }
}
