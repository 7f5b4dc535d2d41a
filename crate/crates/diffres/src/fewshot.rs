//! Few-shot episode evaluation: feature transforms, prototype classifiers,
//! graph label propagation, and the five-method comparison harness.
//!
//! An [`Episode`] is a tiny classification task: a labeled support set
//! (`n_way` classes × `k_shot` points) and an unlabeled query set whose
//! hidden labels are used only for scoring. [`run_episode`] evaluates one
//! of five classifiers on it:
//!
//! 1. **Nearest prototype** — class means of the support set, queries
//!    assigned to the closest mean.
//! 2. **Diffusion** — label propagation over a similarity graph on the
//!    query set ([`laplacian_label_propagation`]); no network.
//! 3. **Convection** — a two-block residual network trained with
//!    cross-entropy on the support set only.
//! 4. **External convection–diffusion** — the same network, plus a graph
//!    smoothness penalty on its softmax outputs over support ∪ query.
//! 5. **Internal convection–diffusion** — the same network with diffusion
//!    rounds inside each block (and optionally a prototype-attraction
//!    term), trained on the support cross-entropy.
//!
//! Methods 3–5 differ only in where the sample graph enters (not at all /
//! in the loss / in the architecture), which is the comparison the harness
//! exists to make. Two exact degeneracies pin the implementations to each
//! other: method 5 with zero diffusion rounds is bitwise method 3, and
//! method 2 with `lambda = 0` predicts exactly like method 1.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::graph::{build_weight_matrix, SigmaRule, SparseWeights};
use crate::resnet::{train, DiffResNetParams, TrainConfig, TrainData};

/// One few-shot task: labeled support points, query points with hidden
/// labels, both relabeled to episode-local class ids `0..n_way`.
#[derive(Debug, Clone)]
pub struct Episode {
    support: Array2<f64>,
    support_labels: Vec<usize>,
    query: Array2<f64>,
    query_labels: Vec<usize>,
    n_way: usize,
    /// Original dataset class id behind each episode class, when the
    /// episode came from [`sample_episodes`].
    source_classes: Vec<usize>,
}

impl Episode {
    /// Builds an episode, checking that both sets are nonempty and share a
    /// feature dimension, every label is below `n_way`, and every episode
    /// class has at least one support point.
    pub fn new(
        support: Array2<f64>,
        support_labels: Vec<usize>,
        query: Array2<f64>,
        query_labels: Vec<usize>,
        n_way: usize,
    ) -> Result<Self> {
        if n_way == 0 {
            return Err(Error::InvalidParameter("an episode needs n_way >= 1".into()));
        }
        if support.nrows() == 0 || query.nrows() == 0 {
            return Err(Error::InvalidParameter(
                "support and query sets must both be nonempty".into(),
            ));
        }
        if support.nrows() != support_labels.len() || query.nrows() != query_labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} support rows / {} labels, {} query rows / {} labels",
                support.nrows(),
                support_labels.len(),
                query.nrows(),
                query_labels.len()
            )));
        }
        if support.ncols() != query.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "support features have {} columns, query {}",
                support.ncols(),
                query.ncols()
            )));
        }
        let mut seen = vec![false; n_way];
        for (row, &label) in support_labels.iter().enumerate() {
            if label >= n_way {
                return Err(Error::BadLabel {
                    row,
                    label,
                    classes: n_way,
                });
            }
            seen[label] = true;
        }
        if let Some(class) = seen.iter().position(|s| !s) {
            return Err(Error::ClassTooSmall {
                class,
                have: 0,
                need: 1,
            });
        }
        for (row, &label) in query_labels.iter().enumerate() {
            if label >= n_way {
                return Err(Error::BadLabel {
                    row,
                    label,
                    classes: n_way,
                });
            }
        }
        Ok(Episode {
            support,
            support_labels,
            query,
            query_labels,
            n_way,
            source_classes: Vec::new(),
        })
    }

    pub fn n_way(&self) -> usize {
        self.n_way
    }

    pub fn dim(&self) -> usize {
        self.support.ncols()
    }

    pub fn n_support(&self) -> usize {
        self.support.nrows()
    }

    pub fn n_query(&self) -> usize {
        self.query.nrows()
    }

    pub fn support(&self) -> ArrayView2<'_, f64> {
        self.support.view()
    }

    pub fn query(&self) -> ArrayView2<'_, f64> {
        self.query.view()
    }

    pub fn support_labels(&self) -> &[usize] {
        &self.support_labels
    }

    /// Held-out query labels; only scoring code should look at these.
    pub fn query_labels(&self) -> &[usize] {
        &self.query_labels
    }

    /// Original class ids per episode class; empty for hand-built episodes.
    pub fn source_classes(&self) -> &[usize] {
        &self.source_classes
    }
}

/// Per-class mean vectors, `n_way × dim` (possibly rectified).
#[derive(Debug, Clone)]
pub struct Prototypes {
    means: Array2<f64>,
}

impl Prototypes {
    pub fn new(means: Array2<f64>) -> Result<Self> {
        if means.nrows() == 0 {
            return Err(Error::InvalidParameter("no prototype rows".into()));
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "prototypes must be finite".into(),
            ));
        }
        Ok(Prototypes { means })
    }

    pub fn n_classes(&self) -> usize {
        self.means.nrows()
    }

    pub fn means(&self) -> ArrayView2<'_, f64> {
        self.means.view()
    }
}

/// Per-class means of a labeled point set. Every class in `0..n_way` must
/// have at least one point.
pub fn class_prototypes(
    points: &ArrayView2<f64>,
    labels: &[usize],
    n_way: usize,
) -> Result<Prototypes> {
    if points.nrows() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} points but {} labels",
            points.nrows(),
            labels.len()
        )));
    }
    let mut sums = Array2::<f64>::zeros((n_way, points.ncols()));
    let mut counts = vec![0usize; n_way];
    for (row, &label) in labels.iter().enumerate() {
        if label >= n_way {
            return Err(Error::BadLabel {
                row,
                label,
                classes: n_way,
            });
        }
        let mut target = sums.row_mut(label);
        target += &points.row(row);
        counts[label] += 1;
    }
    for (class, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::ClassTooSmall {
                class,
                have: 0,
                need: 1,
            });
        }
        let mut row = sums.row_mut(class);
        row /= count as f64;
    }
    Prototypes::new(sums)
}

/// Centers every row at `base_mean` and scales it to unit Euclidean norm:
/// `x ← (x − x̄)/‖x − x̄‖`. A row equal to `base_mean` has no direction
/// left and is an error.
pub fn center_normalize(
    features: &ArrayView2<f64>,
    base_mean: &ArrayView1<f64>,
) -> Result<Array2<f64>> {
    if features.ncols() != base_mean.len() {
        return Err(Error::DimensionMismatch(format!(
            "features have {} columns but the base mean has {}",
            features.ncols(),
            base_mean.len()
        )));
    }
    let mut out = features.to_owned();
    for (row, mut r) in out.rows_mut().into_iter().enumerate() {
        r -= base_mean;
        let norm = r.dot(&r).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroFeature(row));
        }
        r /= norm;
    }
    Ok(out)
}

/// Translates the query set so its mean coincides with the support mean:
/// `Δ = mean(support) − mean(query)`, `query ← query + Δ`.
pub fn cross_domain_shift(
    support: &ArrayView2<f64>,
    query: &ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if support.nrows() == 0 || query.nrows() == 0 {
        return Err(Error::InvalidParameter(
            "the domain shift needs nonempty support and query sets".into(),
        ));
    }
    if support.ncols() != query.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "support features have {} columns, query {}",
            support.ncols(),
            query.ncols()
        )));
    }
    let delta = support.mean_axis(Axis(0)).expect("nonempty")
        - query.mean_axis(Axis(0)).expect("nonempty");
    Ok(query + &delta)
}

/// Assigns each point to the prototype with the smallest squared Euclidean
/// distance; a tie keeps the lowest class id.
pub fn nearest_prototype(points: &ArrayView2<f64>, protos: &Prototypes) -> Vec<usize> {
    let means = protos.means();
    points
        .rows()
        .into_iter()
        .map(|x| {
            let mut best = 0usize;
            let mut best_d2 = f64::INFINITY;
            for (c, m) in means.rows().into_iter().enumerate() {
                let diff = &x - &m;
                let d2 = diff.dot(&diff);
                if d2 < best_d2 {
                    best_d2 = d2;
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn cosine(x: &ArrayView1<f64>, y: &ArrayView1<f64>) -> f64 {
    let nx = x.dot(x).sqrt();
    let ny = y.dot(y).sqrt();
    if nx == 0.0 || ny == 0.0 {
        return 0.0;
    }
    x.dot(y) / (nx * ny)
}

/// Replaces each prototype by a cosine-softmax-weighted mean of its
/// believed members: one nearest-prototype pass splits the query set into
/// per-class pools, each pool is joined with the class's support points,
/// and the new prototype is `Σ_x softmax(cos(x, m_c))·x` over that pool.
/// The weights sum to one per class, so the rectified prototype is a
/// convex combination of the pool (a plain mean when all similarities
/// tie). Classes whose pool would be empty cannot occur: support points
/// always participate.
pub fn rectify_prototypes(
    support: &ArrayView2<f64>,
    support_labels: &[usize],
    query: &ArrayView2<f64>,
    protos: &Prototypes,
) -> Result<Prototypes> {
    if support.nrows() != support_labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} support rows but {} labels",
            support.nrows(),
            support_labels.len()
        )));
    }
    if support.ncols() != protos.means().ncols()
        || (query.nrows() > 0 && query.ncols() != support.ncols())
    {
        return Err(Error::DimensionMismatch(
            "support, query, and prototypes must share a feature dimension".into(),
        ));
    }
    let n_way = protos.n_classes();
    let assigned = nearest_prototype(query, protos);
    let mut means = Array2::<f64>::zeros((n_way, support.ncols()));
    for class in 0..n_way {
        let mut pool: Vec<ArrayView1<f64>> = Vec::new();
        for (row, &label) in support_labels.iter().enumerate() {
            if label == class {
                pool.push(support.row(row));
            }
        }
        for (row, &label) in assigned.iter().enumerate() {
            if label == class {
                pool.push(query.row(row));
            }
        }
        if pool.is_empty() {
            return Err(Error::ClassTooSmall {
                class,
                have: 0,
                need: 1,
            });
        }
        let m = protos.means();
        let proto = m.row(class);
        let sims: Vec<f64> = pool.iter().map(|x| cosine(x, &proto)).collect();
        let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = sims.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut target = means.row_mut(class);
        for (x, w) in pool.iter().zip(&weights) {
            target.scaled_add(w / total, x);
        }
    }
    Prototypes::new(means)
}

/// Convergence tolerance for label propagation: a sweep that moves no
/// assignment entry by more than this counts as converged.
const PROPAGATION_TOL: f64 = 1e-6;

/// Result of [`laplacian_label_propagation`].
#[derive(Debug, Clone)]
pub struct Propagation {
    /// Hard labels: row-wise argmax of `soft` (ties → lowest class).
    pub labels: Vec<usize>,
    /// Final soft assignments, one simplex row per point.
    pub soft: Array2<f64>,
    /// Full sweeps performed.
    pub sweeps: usize,
    /// False when the sweep limit was hit before the tolerance.
    pub converged: bool,
    /// Surrogate objective after the initialization and after each sweep;
    /// non-increasing by construction.
    pub objective_trace: Vec<f64>,
}

/// The objective the propagation sweeps descend: unary prototype-distance
/// costs, an entropy term (zero on hard labelings), and a neighbor
/// agreement reward,
/// `Σ_i y_i·d_i + Σ_ic y_ic ln y_ic − (λ/2) Σ_ij w_ij ⟨y_i, y_j⟩`,
/// with `d_ic = ‖x_i − m_c‖`. On hard labelings this is the usual
/// "unary cost minus λ/2-weighted same-label reward" energy — the
/// smoothness objective the method trades accuracy of the unary term
/// against.
pub fn propagation_objective(
    query: &ArrayView2<f64>,
    protos: &Prototypes,
    w: &SparseWeights,
    lambda: f64,
    soft: &ArrayView2<f64>,
) -> f64 {
    let d = unary_distances(query, protos);
    let mut value = 0.0;
    for i in 0..soft.nrows() {
        for c in 0..soft.ncols() {
            let y = soft[[i, c]];
            value += y * d[[i, c]];
            if y > 0.0 {
                value += y * y.ln();
            }
        }
    }
    for i in 0..w.n() {
        for &(j, weight) in w.row(i) {
            value -= lambda / 2.0 * weight * soft.row(i).dot(&soft.row(j));
        }
    }
    value
}

fn unary_distances(query: &ArrayView2<f64>, protos: &Prototypes) -> Array2<f64> {
    let means = protos.means();
    let mut d = Array2::zeros((query.nrows(), means.nrows()));
    for (i, x) in query.rows().into_iter().enumerate() {
        for (c, m) in means.rows().into_iter().enumerate() {
            let diff = &x - &m;
            d[[i, c]] = diff.dot(&diff).sqrt();
        }
    }
    d
}

fn softmax_slice(scores: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        total += *s;
    }
    for s in scores.iter_mut() {
        *s /= total;
    }
}

fn argmax_row(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Graph label propagation over the query set: soft assignments start at
/// the prototype-distance softmax and are swept in place with
/// `y_i ← softmax(−d(x_i, m_c) + λ (W y)_ic)` until no entry moves more
/// than 1e-6 or `max_sweeps` is reached. Each in-place update is an exact
/// coordinate minimization of [`propagation_objective`] (the entropy term
/// makes the softmax the closed-form minimizer), so the objective trace is
/// non-increasing and the sweep limit is a safety net, not a tuning knob.
/// With `lambda = 0` the fixed point is reached immediately and the labels
/// equal [`nearest_prototype`].
pub fn laplacian_label_propagation(
    query: &ArrayView2<f64>,
    protos: &Prototypes,
    w: &SparseWeights,
    lambda: f64,
    max_sweeps: usize,
) -> Result<Propagation> {
    if w.n() != query.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "weights are over {} vertices but the query set has {} points",
            w.n(),
            query.nrows()
        )));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "the propagation strength must be finite and >= 0, got {lambda}"
        )));
    }
    w.check_symmetric(1e-12)?;
    let n = query.nrows();
    let k = protos.n_classes();
    let d = unary_distances(query, protos);

    let mut soft = Array2::zeros((n, k));
    for i in 0..n {
        let mut scores: Vec<f64> = (0..k).map(|c| -d[[i, c]]).collect();
        softmax_slice(&mut scores);
        for c in 0..k {
            soft[[i, c]] = scores[c];
        }
    }
    let mut trace = vec![propagation_objective(query, protos, w, lambda, &soft.view())];

    let mut converged = lambda == 0.0;
    let mut sweeps = 0;
    while !converged && sweeps < max_sweeps {
        let mut max_change = 0.0f64;
        for i in 0..n {
            let mut scores: Vec<f64> = (0..k).map(|c| -d[[i, c]]).collect();
            for &(j, weight) in w.row(i) {
                for c in 0..k {
                    scores[c] += lambda * weight * soft[[j, c]];
                }
            }
            softmax_slice(&mut scores);
            for c in 0..k {
                max_change = max_change.max((scores[c] - soft[[i, c]]).abs());
                soft[[i, c]] = scores[c];
            }
        }
        sweeps += 1;
        trace.push(propagation_objective(query, protos, w, lambda, &soft.view()));
        converged = max_change <= PROPAGATION_TOL;
    }

    let labels = soft.rows().into_iter().map(argmax_row).collect();
    Ok(Propagation {
        labels,
        soft,
        sweeps,
        converged,
        objective_trace: trace,
    })
}

/// Draws `count` episodes: `n_way` classes sampled uniformly without
/// replacement, then `k_shot + n_query` points per class without
/// replacement (first `k_shot` become support). Episode class ids follow
/// the sampled class order; the original ids are kept in
/// [`Episode::source_classes`]. Deterministic in `seed`.
pub fn sample_episodes(
    features_by_class: &[Array2<f64>],
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    if n_way == 0 || k_shot == 0 || n_query == 0 {
        return Err(Error::InvalidParameter(
            "episode sampling needs n_way, k_shot, n_query >= 1".into(),
        ));
    }
    if n_way > features_by_class.len() {
        return Err(Error::InvalidParameter(format!(
            "cannot sample {n_way} ways from {} classes",
            features_by_class.len()
        )));
    }
    let dim = features_by_class
        .first()
        .map(|f| f.ncols())
        .ok_or_else(|| Error::InvalidParameter("no classes to sample from".into()))?;
    let need = k_shot + n_query;
    for (class, feats) in features_by_class.iter().enumerate() {
        if feats.ncols() != dim {
            return Err(Error::DimensionMismatch(format!(
                "class {class} has {} feature columns, class 0 has {dim}",
                feats.ncols()
            )));
        }
        if feats.nrows() < need {
            return Err(Error::ClassTooSmall {
                class,
                have: feats.nrows(),
                need,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = Vec::with_capacity(count);
    for _ in 0..count {
        let classes: Vec<usize> =
            rand::seq::index::sample(&mut rng, features_by_class.len(), n_way).into_vec();
        let mut support = Array2::zeros((n_way * k_shot, dim));
        let mut query = Array2::zeros((n_way * n_query, dim));
        let mut support_labels = Vec::with_capacity(n_way * k_shot);
        let mut query_labels = Vec::with_capacity(n_way * n_query);
        for (episode_class, &class) in classes.iter().enumerate() {
            let feats = &features_by_class[class];
            let rows = rand::seq::index::sample(&mut rng, feats.nrows(), need).into_vec();
            for (pos, &row) in rows.iter().enumerate() {
                if pos < k_shot {
                    let dest = episode_class * k_shot + pos;
                    support.row_mut(dest).assign(&feats.row(row));
                    support_labels.push(episode_class);
                } else {
                    let dest = episode_class * n_query + (pos - k_shot);
                    query.row_mut(dest).assign(&feats.row(row));
                    query_labels.push(episode_class);
                }
            }
        }
        let mut episode = Episode::new(support, support_labels, query, query_labels, n_way)?;
        episode.source_classes = classes;
        episodes.push(episode);
    }
    Ok(episodes)
}

/// The five classifiers compared per episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    NearestPrototype,
    Diffusion,
    Convection,
    ExternalCd,
    InternalCd,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::NearestPrototype,
        Method::Diffusion,
        Method::Convection,
        Method::ExternalCd,
        Method::InternalCd,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::NearestPrototype => "nearest_prototype",
            Method::Diffusion => "diffusion",
            Method::Convection => "convection",
            Method::ExternalCd => "external_cd",
            Method::InternalCd => "internal_cd",
        }
    }

    pub fn from_name(name: &str) -> Option<Method> {
        Method::ALL.iter().copied().find(|m| m.name() == name)
    }
}

/// Settings shared by all five methods. The defaults are the benchmark
/// ablation settings: top-8 neighbors with the adaptive bandwidth at the
/// 4th-nearest distance, step 0.5 × 10 rounds, propagation strength 0.5,
/// smoothness weight 0.01, no prototype attraction (the 5-shot runs use
/// 0.5), SGD at 0.1 with momentum 0.9, weight decay 1e-4, 100 epochs with
/// tenfold decays at half and three quarters, and all feature transforms
/// on.
#[derive(Debug, Clone)]
pub struct FewShotConfig {
    /// Kept neighbors per row of the similarity graph (capped at n−1 for
    /// tiny point sets).
    pub n_top: usize,
    /// Gaussian kernel bandwidth rule (adaptive ranks are capped the same
    /// way).
    pub sigma: SigmaRule,
    /// Diffusion step size inside the internal variant.
    pub gamma: f64,
    /// Diffusion rounds per residual block inside the internal variant.
    pub rounds: usize,
    /// Neighbor-agreement strength of label propagation.
    pub lambda: f64,
    /// Weight of the smoothness penalty in the external variant.
    pub mu: f64,
    /// Weight of the prototype-attraction term in the internal variant.
    pub alpha: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Center features at `base_mean` and project to the unit sphere.
    pub center: bool,
    /// Translate the query mean onto the support mean.
    pub shift: bool,
    /// Rectify prototypes with the cosine-softmax pooling pass.
    pub rectify: bool,
    /// Mean used for centering; per-episode pooled mean when absent.
    pub base_mean: Option<Array1<f64>>,
    /// Seed for network initialization (episode runners derive one per
    /// episode).
    pub seed: u64,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        FewShotConfig {
            n_top: 8,
            sigma: SigmaRule::Adaptive(4),
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
            base_mean: None,
            seed: 0,
        }
    }
}

/// Outcome of one method on one episode.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeOutcome {
    /// Fraction of query points classified to their hidden label.
    pub accuracy: f64,
    /// True when label propagation hit its sweep limit before converging.
    pub warning: bool,
}

fn transformed_features(ep: &Episode, cfg: &FewShotConfig) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut support = ep.support().to_owned();
    let mut query = ep.query().to_owned();
    if cfg.center {
        let base = match &cfg.base_mean {
            Some(m) => {
                if m.len() != ep.dim() {
                    return Err(Error::DimensionMismatch(format!(
                        "base mean has {} entries, features {}",
                        m.len(),
                        ep.dim()
                    )));
                }
                m.clone()
            }
            None => {
                let mut total = support.sum_axis(Axis(0)) + query.sum_axis(Axis(0));
                total /= (ep.n_support() + ep.n_query()) as f64;
                total
            }
        };
        support = center_normalize(&support.view(), &base.view())?;
        query = center_normalize(&query.view(), &base.view())?;
    }
    if cfg.shift {
        query = cross_domain_shift(&support.view(), &query.view())?;
    }
    Ok((support, query))
}

/// The similarity graph for a (possibly tiny) point set: the configured
/// neighbor count and adaptive rank are capped at `n − 1` so desk-scale
/// episodes stay buildable.
fn episode_weights(points: &ArrayView2<f64>, cfg: &FewShotConfig) -> Result<SparseWeights> {
    let n = points.nrows();
    let cap = n.saturating_sub(1).max(1);
    let n_top = cfg.n_top.min(cap);
    let sigma = match cfg.sigma {
        SigmaRule::Fixed(s) => SigmaRule::Fixed(s),
        SigmaRule::Adaptive(k) => SigmaRule::Adaptive(k.min(cap)),
    };
    build_weight_matrix(points, n_top, &sigma)
}

fn score(predicted: &[usize], hidden: &[usize]) -> f64 {
    let hits = predicted
        .iter()
        .zip(hidden)
        .filter(|(p, h)| p == h)
        .count();
    hits as f64 / hidden.len() as f64
}

fn run_network(
    ep: &Episode,
    support: &Array2<f64>,
    query: &Array2<f64>,
    protos: &Prototypes,
    cfg: &FewShotConfig,
    rounds: usize,
    mu: f64,
    alpha: f64,
) -> Result<EpisodeOutcome> {
    let n1 = ep.n_support();
    let n2 = ep.n_query();
    let dim = ep.dim();
    let mut x = Array2::zeros((n1 + n2, dim));
    for i in 0..n1 {
        x.row_mut(i).assign(&support.row(i));
    }
    for i in 0..n2 {
        x.row_mut(n1 + i).assign(&query.row(i));
    }
    // Hidden query labels enter only through the accuracy metric; the
    // cross-entropy mask stays on the support rows.
    let labels: Vec<Option<usize>> = ep
        .support_labels()
        .iter()
        .chain(ep.query_labels())
        .map(|&l| Some(l))
        .collect();
    let train_idx: Vec<usize> = (0..n1).collect();
    let test_idx: Vec<usize> = (n1..n1 + n2).collect();

    let weights = if rounds > 0 || mu > 0.0 {
        Some(episode_weights(&x.view(), cfg)?)
    } else {
        None
    };
    let proto_idx: Vec<usize> = if alpha > 0.0 { test_idx.clone() } else { Vec::new() };

    let params = DiffResNetParams::init(dim, ep.n_way(), 2, true, 0.0, cfg.seed)?;
    let diff = DiffusionConfig::new(cfg.gamma, rounds);
    let tc = TrainConfig {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        epochs: cfg.epochs,
        multistep: true,
        dropout_seed: cfg.seed,
        mu,
        alpha,
    };
    let data = TrainData {
        x: x.view(),
        labels: &labels,
        train_idx: &train_idx,
        val_idx: &[],
        test_idx: &test_idx,
        weights: weights.as_ref(),
        prototypes: if alpha > 0.0 { Some(protos.means()) } else { None },
        proto_idx: &proto_idx,
    };
    let (_, trace) = train(&data, params, &diff, &tc)?;
    let accuracy = trace.final_test_acc().expect("epochs >= 1 was checked");
    Ok(EpisodeOutcome {
        accuracy,
        warning: false,
    })
}

/// Applies the configured feature transforms and evaluates one method on
/// one episode. The sample graph enters exactly where the method puts it:
/// nowhere (1, 3), over the query set for label propagation (2), over
/// support ∪ query for the loss penalty (4) or the in-network diffusion
/// (5).
pub fn run_episode(method: Method, ep: &Episode, cfg: &FewShotConfig) -> Result<EpisodeOutcome> {
    let (support, query) = transformed_features(ep, cfg)?;
    let base = class_prototypes(&support.view(), ep.support_labels(), ep.n_way())?;
    let protos = if cfg.rectify {
        rectify_prototypes(&support.view(), ep.support_labels(), &query.view(), &base)?
    } else {
        base
    };
    match method {
        Method::NearestPrototype => {
            let predicted = nearest_prototype(&query.view(), &protos);
            Ok(EpisodeOutcome {
                accuracy: score(&predicted, ep.query_labels()),
                warning: false,
            })
        }
        Method::Diffusion => {
            let w = episode_weights(&query.view(), cfg)?;
            let prop = laplacian_label_propagation(&query.view(), &protos, &w, cfg.lambda, 50)?;
            Ok(EpisodeOutcome {
                accuracy: score(&prop.labels, ep.query_labels()),
                warning: !prop.converged,
            })
        }
        Method::Convection => run_network(ep, &support, &query, &protos, cfg, 0, 0.0, 0.0),
        Method::ExternalCd => run_network(ep, &support, &query, &protos, cfg, 0, cfg.mu, 0.0),
        Method::InternalCd => {
            run_network(ep, &support, &query, &protos, cfg, cfg.rounds, 0.0, cfg.alpha)
        }
    }
}

/// One row of an evaluation run.
#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub episode_id: usize,
    pub method: Method,
    pub accuracy: f64,
    pub warning: bool,
}

/// Evaluates every method on every episode. Each episode uses a seed
/// derived from `cfg.seed` and its id, so results do not depend on
/// evaluation order and episodes may be processed independently.
pub fn evaluate_methods(
    episodes: &[Episode],
    methods: &[Method],
    cfg: &FewShotConfig,
) -> Result<Vec<EpisodeRecord>> {
    let mut records = Vec::with_capacity(episodes.len() * methods.len());
    for (episode_id, ep) in episodes.iter().enumerate() {
        let mut episode_cfg = cfg.clone();
        episode_cfg.seed = crate::derive_seed(cfg.seed, episode_id as u64);
        for &method in methods {
            let outcome = run_episode(method, ep, &episode_cfg)?;
            records.push(EpisodeRecord {
                episode_id,
                method,
                accuracy: outcome.accuracy,
                warning: outcome.warning,
            });
        }
    }
    Ok(records)
}

/// Mean accuracy of one method with its 95% confidence half-width
/// `1.96·s/√n` (sample standard deviation; zero for a single episode).
#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub episodes: usize,
    pub mean_accuracy: f64,
    pub ci95: f64,
}

/// Groups records by method (in the canonical method order) and reduces
/// each group to mean ± confidence half-width.
pub fn summarize(records: &[EpisodeRecord]) -> Vec<MethodSummary> {
    Method::ALL
        .iter()
        .filter_map(|&method| {
            let accs: Vec<f64> = records
                .iter()
                .filter(|r| r.method == method)
                .map(|r| r.accuracy)
                .collect();
            if accs.is_empty() {
                return None;
            }
            let n = accs.len();
            let mean = accs.iter().sum::<f64>() / n as f64;
            let ci95 = if n > 1 {
                let var =
                    accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                1.96 * var.sqrt() / (n as f64).sqrt()
            } else {
                0.0
            };
            Some(MethodSummary {
                method: method.name().to_string(),
                episodes: n,
                mean_accuracy: mean,
                ci95,
            })
        })
        .collect()
}

/// CSV export with columns `episode_id,method,accuracy`.
pub fn write_records_csv(records: &[EpisodeRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::csv(&display, e))?;
    writer
        .write_record(["episode_id", "method", "accuracy"])
        .map_err(|e| Error::csv(&display, e))?;
    for r in records {
        writer
            .write_record([
                r.episode_id.to_string(),
                r.method.name().to_string(),
                r.accuracy.to_string(),
            ])
            .map_err(|e| Error::csv(&display, e))?;
    }
    writer.flush().map_err(|e| Error::io(&display, e))?;
    Ok(())
}

/// JSON export of the per-method summaries.
pub fn write_summary_json(summaries: &[MethodSummary], path: impl AsRef<Path>) -> Result<()> {
    let display = path.as_ref().display().to_string();
    let text = serde_json::to_string_pretty(summaries)?;
    std::fs::write(path, text).map_err(|e| Error::io(&display, e))
}

/// Reads a feature file with header `class_id,x_1,…,x_M` into per-class
/// matrices. Class ids may be any nonnegative integers; they are remapped
/// to `0..` in ascending order. All rows must share a width.
pub fn read_features_csv(path: impl AsRef<Path>) -> Result<Vec<Array2<f64>>> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::csv(&display, e))?;
    let mut by_class: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    let mut width: Option<usize> = None;
    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(&display, e))?;
        let line = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(0);
        if record.len() < 2 {
            return Err(Error::MalformedLine {
                path: display,
                line,
                reason: "expected a class id and at least one coordinate".into(),
            });
        }
        let class: usize = record[0].trim().parse().map_err(|_| Error::MalformedLine {
            path: display.clone(),
            line,
            reason: format!("bad class id {:?}", &record[0]),
        })?;
        let coords: Vec<f64> = record
            .iter()
            .skip(1)
            .map(|f| {
                f.trim().parse().map_err(|_| Error::MalformedLine {
                    path: display.clone(),
                    line,
                    reason: format!("bad coordinate {f:?}"),
                })
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(coords.len()),
            Some(w) if w != coords.len() => {
                return Err(Error::MalformedLine {
                    path: display,
                    line,
                    reason: format!("row has {} coordinates, earlier rows {w}", coords.len()),
                });
            }
            _ => {}
        }
        by_class.entry(class).or_default().push(coords);
    }
    if by_class.is_empty() {
        return Err(Error::MalformedLine {
            path: display,
            line: 0,
            reason: "no data rows".into(),
        });
    }
    let dim = width.expect("nonempty");
    Ok(by_class
        .into_values()
        .map(|rows| {
            let mut m = Array2::zeros((rows.len(), dim));
            for (i, row) in rows.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    m[[i, j]] = v;
                }
            }
            m
        })
        .collect())
}
