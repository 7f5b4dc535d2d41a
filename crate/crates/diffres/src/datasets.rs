//! Synthetic point clouds, random graphs, and citation-style graph loading.
//!
//! The point-cloud generators ([`gen_xor`], [`gen_moon`], [`gen_circle`],
//! [`gen_spiral`]) produce the classic two-class benchmarks in their usual
//! parameterizations; [`gen_xor_structured`] exposes the XOR disks with
//! their (class, subclass) structure for the separation analyses in
//! [`crate::theory`]. [`gen_structured_clusters`] and
//! [`gen_two_level_clusters`] build cluster layouts with prescribed
//! diameter/gap geometry, and [`gen_sbm`] samples a stochastic block model
//! with Gaussian node features. Graph data on disk is read by
//! [`load_graph_dataset`] and written back by [`GraphDataset::export`].
//!
//! Every generator is deterministic in the passed RNG: the same seed
//! reproduces the same dataset bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{self, SparseWeights};
use crate::points::PointSet;
use crate::theory::StructuredDataset;

const TAU: f64 = std::f64::consts::TAU;

/// Uniform point in the disk of `radius` around (`cx`, `cy`).
fn disk_point(cx: f64, cy: f64, radius: f64, rng: &mut impl Rng) -> (f64, f64) {
    let theta = rng.random_range(0.0..TAU);
    let r = radius * rng.random_range(0.0f64..1.0).sqrt();
    (cx + r * theta.cos(), cy + r * theta.sin())
}

/// The XOR disks with their subclass structure: four uniform disks of
/// radius 0.75 centred on the corners of a side-2 square. The diagonal
/// pairs share a class, so neither class is connected — the configuration
/// a single hyperplane famously cannot split.
///
/// Disk order (and RNG consumption order) is (0,0), (0,2), (2,0), (2,2)
/// with 100 points each; tags are (class, subclass) = (0,0), (1,0), (1,1),
/// (0,1) respectively.
pub fn gen_xor_structured(rng: &mut impl Rng) -> StructuredDataset {
    const DISKS: [(f64, f64, usize, usize); 4] = [
        (0.0, 0.0, 0, 0),
        (0.0, 2.0, 1, 0),
        (2.0, 0.0, 1, 1),
        (2.0, 2.0, 0, 1),
    ];
    const N_PER: usize = 100;
    let mut flat = Vec::with_capacity(4 * N_PER * 2);
    let mut tags = Vec::with_capacity(4 * N_PER);
    for &(cx, cy, class, sub) in &DISKS {
        for _ in 0..N_PER {
            let (x, y) = disk_point(cx, cy, 0.75, rng);
            flat.push(x);
            flat.push(y);
            tags.push((class, sub));
        }
    }
    let coords = Array2::from_shape_vec((4 * N_PER, 2), flat).expect("counted rows");
    StructuredDataset::new(2, 2, coords, tags).expect("tags are in range by construction")
}

/// The XOR disks as a labeled point set (see [`gen_xor_structured`]); the
/// same generator state yields the same coordinates in both forms.
pub fn gen_xor(rng: &mut impl Rng) -> PointSet {
    gen_xor_structured(rng).to_point_set()
}

/// Two interleaved crescents, 500 points each: class 0 on the upper arc of
/// the unit circle at the origin, class 1 on the lower arc of the unit
/// circle at (1, 0.5), both with N(0, 0.05²) noise per coordinate.
pub fn gen_moon(rng: &mut impl Rng) -> PointSet {
    const N_PER: usize = 500;
    let mut flat = Vec::with_capacity(2 * N_PER * 2);
    let mut labels = Vec::with_capacity(2 * N_PER);
    for _ in 0..N_PER {
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        flat.push(theta.cos() + 0.05 * nx);
        flat.push(theta.sin() + 0.05 * ny);
        labels.push(Some(0));
    }
    for _ in 0..N_PER {
        let theta = rng.random_range(std::f64::consts::PI..TAU);
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        flat.push(1.0 + theta.cos() + 0.05 * nx);
        flat.push(0.5 + theta.sin() + 0.05 * ny);
        labels.push(Some(1));
    }
    let coords = Array2::from_shape_vec((2 * N_PER, 2), flat).expect("counted rows");
    PointSet::new(coords, labels).expect("label count matches")
}

/// Two concentric circles centred at the origin, 500 points each: class 0
/// on radius 1, class 1 on radius 2, with N(0, 0.05²) noise per coordinate.
pub fn gen_circle(rng: &mut impl Rng) -> PointSet {
    const N_PER: usize = 500;
    let mut flat = Vec::with_capacity(2 * N_PER * 2);
    let mut labels = Vec::with_capacity(2 * N_PER);
    for (class, radius) in [(0usize, 1.0f64), (1, 2.0)] {
        for _ in 0..N_PER {
            let theta = rng.random_range(0.0..TAU);
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            flat.push(radius * theta.cos() + 0.05 * nx);
            flat.push(radius * theta.sin() + 0.05 * ny);
            labels.push(Some(class));
        }
    }
    let coords = Array2::from_shape_vec((2 * N_PER, 2), flat).expect("counted rows");
    PointSet::new(coords, labels).expect("label count matches")
}

/// Geometry of [`gen_spiral_with`]. The defaults give two interlocking
/// Archimedean arms `r = ±(1 + θ)` traced over `θ ∈ [π/4, 4π]` — the lower
/// cut keeps the arms from overlapping near the origin, where `r ≈ 1` for
/// both and the class regions would otherwise touch.
#[derive(Debug, Clone, Copy)]
pub struct SpiralConfig {
    pub n_per_arm: usize,
    pub theta_min: f64,
    pub theta_max: f64,
    /// Standard deviation of the per-coordinate Gaussian noise.
    pub noise: f64,
}

impl Default for SpiralConfig {
    fn default() -> Self {
        SpiralConfig {
            n_per_arm: 500,
            theta_min: std::f64::consts::FRAC_PI_4,
            theta_max: 4.0 * std::f64::consts::PI,
            noise: 0.1,
        }
    }
}

/// Two interlocking spiral arms; see [`SpiralConfig`] for the geometry.
/// Class 0 follows `r = 1 + θ`, class 1 its point reflection `r = −(1+θ)`.
pub fn gen_spiral_with(cfg: &SpiralConfig, rng: &mut impl Rng) -> PointSet {
    let n = cfg.n_per_arm;
    let mut flat = Vec::with_capacity(2 * n * 2);
    let mut labels = Vec::with_capacity(2 * n);
    for (class, sign) in [(0usize, 1.0f64), (1, -1.0)] {
        for _ in 0..n {
            let theta = rng.random_range(cfg.theta_min..cfg.theta_max);
            let r = sign * (1.0 + theta);
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            flat.push(r * theta.cos() + cfg.noise * nx);
            flat.push(r * theta.sin() + cfg.noise * ny);
            labels.push(Some(class));
        }
    }
    let coords = Array2::from_shape_vec((2 * n, 2), flat).expect("counted rows");
    PointSet::new(coords, labels).expect("label count matches")
}

/// [`gen_spiral_with`] under the default [`SpiralConfig`].
pub fn gen_spiral(rng: &mut impl Rng) -> PointSet {
    gen_spiral_with(&SpiralConfig::default(), rng)
}

/// Node-index partition of a graph dataset into train/val/test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphSplits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// A preprocessed graph for node classification.
///
/// Loading (or generating) applies the standard pipeline: keep the largest
/// connected component, add unit self-loops, normalize the adjacency
/// symmetrically (`D^{-1/2} W D^{-1/2}`), and L2-normalize feature rows.
/// Rows whose features were all zero cannot be normalized and are listed in
/// `zero_feature_rows` (their features stay zero).
#[derive(Debug, Clone)]
pub struct GraphDataset {
    pub adjacency: SparseWeights,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    /// Number of label classes in the source data; nodes outside the kept
    /// component may leave some classes unrepresented here.
    pub n_classes: usize,
    pub splits: Option<GraphSplits>,
    pub zero_feature_rows: Vec<usize>,
}

impl GraphDataset {
    pub fn n(&self) -> usize {
        self.adjacency.n()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Number of undirected edges, self-loops excluded.
    pub fn n_edges(&self) -> usize {
        self.adjacency
            .triples()
            .iter()
            .filter(|&&(i, j, _)| i < j)
            .count()
    }

    /// Writes the dataset back to the three-file on-disk format read by
    /// [`load_graph_dataset`]: one `u v` line per undirected edge
    /// (self-loops omitted — the loader re-adds them), comma-separated
    /// feature rows, and one label per line.
    ///
    /// Reloading the export reproduces the adjacency bit for bit: the
    /// normalized weights depend only on the edge pattern, which the
    /// export preserves exactly. Feature rows are re-normalized on load,
    /// and an already-normalized row is a fixed point of that map only up
    /// to rounding, so reloaded features match to ~1e-15 rather than
    /// exactly.
    pub fn export(
        &self,
        edges_path: impl AsRef<Path>,
        features_path: impl AsRef<Path>,
        labels_path: impl AsRef<Path>,
    ) -> Result<()> {
        let mut edges = String::new();
        for (i, j, _) in self.adjacency.triples() {
            if i < j {
                writeln!(edges, "{i} {j}").expect("string writes cannot fail");
            }
        }
        write_text(edges_path.as_ref(), &edges)?;

        let mut features = String::new();
        for row in self.features.rows() {
            let mut first = true;
            for v in row.iter() {
                if !first {
                    features.push(',');
                }
                write!(features, "{v}").expect("string writes cannot fail");
                first = false;
            }
            features.push('\n');
        }
        write_text(features_path.as_ref(), &features)?;

        let mut labels = String::new();
        for l in &self.labels {
            writeln!(labels, "{l}").expect("string writes cannot fail");
        }
        write_text(labels_path.as_ref(), &labels)?;
        Ok(())
    }
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_features(path: &Path) -> Result<Array2<f64>> {
    let display = path.display().to_string();
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    let mut flat = Vec::new();
    let mut width = None;
    let mut rows = 0usize;
    for (idx, raw) in body.lines().enumerate() {
        let line = idx + 1;
        let text = raw.trim();
        if text.is_empty() {
            return Err(Error::MalformedLine {
                path: display,
                line,
                reason: "empty feature row".into(),
            });
        }
        let mut count = 0usize;
        for token in text.split(',') {
            let token = token.trim();
            let value: f64 = token.parse().map_err(|_| Error::MalformedLine {
                path: display.clone(),
                line,
                reason: format!("unparseable feature value '{token}'"),
            })?;
            flat.push(value);
            count += 1;
        }
        match width {
            None => width = Some(count),
            Some(w) if w != count => {
                return Err(Error::MalformedLine {
                    path: display,
                    line,
                    reason: format!("expected {w} values, found {count}"),
                });
            }
            Some(_) => {}
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::TooFewPoints { need: 1, got: 0 });
    }
    Array2::from_shape_vec((rows, width.expect("rows > 0")), flat)
        .map_err(|e| Error::InvalidParameter(e.to_string()))
}

fn read_labels(path: &Path, n: usize) -> Result<Vec<usize>> {
    let display = path.display().to_string();
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    let mut labels = Vec::new();
    for (idx, raw) in body.lines().enumerate() {
        let line = idx + 1;
        let text = raw.trim();
        if text.is_empty() {
            return Err(Error::MalformedLine {
                path: display,
                line,
                reason: "empty label line".into(),
            });
        }
        let value: usize = text.parse().map_err(|_| Error::MalformedLine {
            path: display.clone(),
            line,
            reason: format!("unparseable label '{text}'"),
        })?;
        labels.push(value);
    }
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} feature rows but {} labels",
            labels.len()
        )));
    }
    Ok(labels)
}

fn read_edges(path: &Path, n: usize) -> Result<Vec<(usize, usize)>> {
    let display = path.display().to_string();
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    let mut edges = Vec::new();
    for (idx, raw) in body.lines().enumerate() {
        let line = idx + 1;
        let text = raw.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let mut tokens = text.split_whitespace();
        let (Some(a), Some(b), None) = (tokens.next(), tokens.next(), tokens.next()) else {
            return Err(Error::MalformedLine {
                path: display,
                line,
                reason: "expected two whitespace-separated vertex ids".into(),
            });
        };
        let u: usize = a.parse().map_err(|_| Error::MalformedLine {
            path: display.clone(),
            line,
            reason: format!("unparseable vertex id '{a}'"),
        })?;
        let v: usize = b.parse().map_err(|_| Error::MalformedLine {
            path: display.clone(),
            line,
            reason: format!("unparseable vertex id '{b}'"),
        })?;
        if u >= n || v >= n {
            return Err(Error::EdgeOutOfRange { u, v, n });
        }
        if u == v {
            continue; // self-loops are added uniformly during preprocessing
        }
        edges.push((u, v));
    }
    Ok(edges)
}

/// Rows of the largest connected component, ascending; ties between equal
/// component sizes go to the component seen first (lowest row index).
fn largest_component(w: &SparseWeights) -> Vec<usize> {
    let component_of = graph::connected_components(w);
    let k = component_of.iter().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k];
    for &c in &component_of {
        counts[c] += 1;
    }
    let best = (0..k)
        .max_by_key(|&c| (counts[c], std::cmp::Reverse(c)))
        .unwrap_or(0);
    (0..component_of.len())
        .filter(|&i| component_of[i] == best)
        .collect()
}

/// Shared tail of the preprocessing pipeline: largest component, unit
/// self-loops, symmetric normalization, feature L2 normalization.
fn assemble_graph(
    n: usize,
    edges: &[(usize, usize)],
    features: Array2<f64>,
    labels: Vec<usize>,
    n_classes: usize,
) -> Result<GraphDataset> {
    let mut triples = Vec::with_capacity(edges.len() * 2);
    for &(u, v) in edges {
        triples.push((u, v, 1.0));
        triples.push((v, u, 1.0));
    }
    let raw = SparseWeights::from_triples(n, &triples)?;
    let keep = largest_component(&raw);
    let raw = raw.submatrix(&keep)?;
    let adjacency = graph::normalize_symmetric(&raw.add_self_loops(1.0)?)?;

    let mut kept_features = Array2::zeros((keep.len(), features.ncols()));
    let mut kept_labels = Vec::with_capacity(keep.len());
    for (row, &src) in keep.iter().enumerate() {
        kept_features.row_mut(row).assign(&features.row(src));
        kept_labels.push(labels[src]);
    }
    let mut zero_feature_rows = Vec::new();
    for (row, mut feats) in kept_features.rows_mut().into_iter().enumerate() {
        let norm = feats.dot(&feats).sqrt();
        if norm == 0.0 {
            zero_feature_rows.push(row);
        } else {
            feats.mapv_inplace(|v| v / norm);
        }
    }

    Ok(GraphDataset {
        adjacency,
        features: kept_features,
        labels: kept_labels,
        n_classes,
        splits: None,
        zero_feature_rows,
    })
}

/// Reads a graph dataset from its three-file on-disk format and applies
/// the standard preprocessing (see [`GraphDataset`]).
///
/// * `edges_path` — one `u v` edge per line (whitespace-separated, 0-based
///   ids); blank lines and lines starting with `#` are skipped, self-loop
///   lines are ignored, and duplicate or reversed edges collapse into one
///   undirected edge.
/// * `features_path` — headerless CSV, one row of floats per node.
/// * `labels_path` — one nonnegative integer per node line.
///
/// Parse failures report the file and 1-based line number. Vertex ids must
/// lie below the number of feature rows, and the label count must match
/// it. The class count is taken from the full label file, before the cut
/// to the largest connected component.
pub fn load_graph_dataset(
    edges_path: impl AsRef<Path>,
    features_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<GraphDataset> {
    let features = read_features(features_path.as_ref())?;
    let n = features.nrows();
    let labels = read_labels(labels_path.as_ref(), n)?;
    let edges = read_edges(edges_path.as_ref(), n)?;
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    assemble_graph(n, &edges, features, labels, n_classes)
}

/// Samples the standard semi-supervised split: 20 train and 30 validation
/// nodes per class, drawn without replacement, everything else test. Each
/// split comes back sorted. Every class must have at least 50 nodes.
pub fn sample_graph_split(labels: &[usize], rng: &mut impl Rng) -> Result<GraphSplits> {
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &c) in labels.iter().enumerate() {
        per_class[c].push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (class, mut members) in per_class.into_iter().enumerate() {
        if members.len() < 50 {
            return Err(Error::ClassTooSmall {
                class,
                have: members.len(),
                need: 50,
            });
        }
        members.shuffle(rng);
        train.extend_from_slice(&members[..20]);
        val.extend_from_slice(&members[20..50]);
        test.extend_from_slice(&members[50..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(GraphSplits { train, val, test })
}

/// Uniform point in the `dim`-ball of `radius` around `centre`.
fn ball_point(centre: &[f64], radius: f64, rng: &mut impl Rng) -> Vec<f64> {
    let d = centre.len();
    if radius == 0.0 {
        return centre.to_vec();
    }
    let mut dir = vec![0.0f64; d];
    let mut norm = 0.0;
    while norm < 1e-12 {
        for v in dir.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    let r = radius * rng.random_range(0.0f64..1.0).powf(1.0 / d as f64);
    centre
        .iter()
        .zip(dir.iter())
        .map(|(c, v)| c + r * v / norm)
        .collect()
}

/// Rejection-samples `m` centres in `[0, side]^dim` with pairwise distance
/// at least `sep`, giving each centre `retries` draws before failing.
fn place_centres(
    m: usize,
    dim: usize,
    sep: f64,
    side: f64,
    retries: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    let mut centres: Vec<Vec<f64>> = Vec::with_capacity(m);
    'outer: for _ in 0..m {
        for _ in 0..retries {
            let candidate: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..side)).collect();
            let clear = centres.iter().all(|c| {
                let d2: f64 = c
                    .iter()
                    .zip(candidate.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                d2 >= sep * sep
            });
            if clear {
                centres.push(candidate);
                continue 'outer;
            }
        }
        return Err(Error::PlacementFailed { m, sep, retries });
    }
    Ok(centres)
}

/// Generates `classes × subclasses` ball-shaped clusters of `n_per` points
/// each whose geometry is certified by construction: every cluster has
/// diameter at most `target_diameter` (points are uniform in a ball of
/// half that) and any two clusters are at least `target_gap` apart (centres
/// are rejection-sampled with separation `target_gap + target_diameter`
/// inside a box scaled to make placement easy).
///
/// The returned dataset therefore satisfies
/// `structured_stats(..) = (D, L)` with `D ≤ target_diameter` and
/// `L ≥ target_gap` under the plain Euclidean convention.
pub fn gen_structured_clusters(
    classes: usize,
    subclasses: usize,
    dim: usize,
    n_per: usize,
    target_diameter: f64,
    target_gap: f64,
    rng: &mut impl Rng,
) -> Result<StructuredDataset> {
    if classes == 0 || subclasses == 0 || n_per == 0 || dim == 0 {
        return Err(Error::InvalidParameter(
            "cluster generation needs positive classes, subclasses, points, and dimension".into(),
        ));
    }
    if !(target_diameter.is_finite() && target_diameter >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "target diameter must be finite and nonnegative, got {target_diameter}"
        )));
    }
    if !(target_gap.is_finite() && target_gap > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "target gap must be finite and positive, got {target_gap}"
        )));
    }
    let m = classes * subclasses;
    let sep = target_gap + target_diameter;
    // Generous box: at least 2·m^(1/d) separation lengths per side, so the
    // rejection sampler has plenty of room.
    let side = sep * (2.0 * (m as f64).powf(1.0 / dim as f64) + 2.0);
    let centres = place_centres(m, dim, sep, side, 10_000, rng)?;

    let radius = target_diameter / 2.0;
    let mut flat = Vec::with_capacity(m * n_per * dim);
    let mut tags = Vec::with_capacity(m * n_per);
    for c in 0..classes {
        for s in 0..subclasses {
            let centre = &centres[c * subclasses + s];
            for _ in 0..n_per {
                flat.extend(ball_point(centre, radius, rng));
                tags.push((c, s));
            }
        }
    }
    let coords = Array2::from_shape_vec((m * n_per, dim), flat).expect("counted rows");
    StructuredDataset::new(classes, subclasses, coords, tags)
}

/// Geometry of [`gen_two_level_clusters`]: classes that are themselves
/// unions of well-spread modes — the regime where per-class prototypes are
/// misleading but within-class diffusion still finds the structure.
#[derive(Debug, Clone, Copy)]
pub struct TwoLevelConfig {
    pub classes: usize,
    pub modes_per_class: usize,
    pub dim: usize,
    pub n_per_mode: usize,
    /// Minimum distance between class centres.
    pub class_sep: f64,
    /// Mode centres are uniform in a ball of this radius around their
    /// class centre.
    pub mode_spread: f64,
    /// Per-coordinate Gaussian noise around the mode centre.
    pub noise: f64,
}

impl Default for TwoLevelConfig {
    fn default() -> Self {
        TwoLevelConfig {
            classes: 5,
            modes_per_class: 2,
            dim: 10,
            n_per_mode: 30,
            class_sep: 10.0,
            mode_spread: 2.0,
            noise: 0.5,
        }
    }
}

/// Hierarchical Gaussian clusters: class centres spread at least
/// `class_sep` apart, `modes_per_class` mode centres per class inside a
/// `mode_spread` ball, and `n_per_mode` points of isotropic `noise` around
/// each mode centre. Tags are (class, mode).
pub fn gen_two_level_clusters(
    cfg: &TwoLevelConfig,
    rng: &mut impl Rng,
) -> Result<StructuredDataset> {
    if cfg.classes == 0 || cfg.modes_per_class == 0 || cfg.n_per_mode == 0 || cfg.dim == 0 {
        return Err(Error::InvalidParameter(
            "two-level generation needs positive classes, modes, points, and dimension".into(),
        ));
    }
    if !(cfg.class_sep.is_finite() && cfg.class_sep > 0.0)
        || !(cfg.mode_spread.is_finite() && cfg.mode_spread >= 0.0)
        || !(cfg.noise.is_finite() && cfg.noise >= 0.0)
    {
        return Err(Error::InvalidParameter(
            "two-level separations and noise must be finite and nonnegative".into(),
        ));
    }
    let side = cfg.class_sep * (2.0 * (cfg.classes as f64).powf(1.0 / cfg.dim as f64) + 2.0);
    let class_centres = place_centres(cfg.classes, cfg.dim, cfg.class_sep, side, 10_000, rng)?;

    let total = cfg.classes * cfg.modes_per_class * cfg.n_per_mode;
    let mut flat = Vec::with_capacity(total * cfg.dim);
    let mut tags = Vec::with_capacity(total);
    for (class, centre) in class_centres.iter().enumerate() {
        for mode in 0..cfg.modes_per_class {
            let mode_centre = ball_point(centre, cfg.mode_spread, rng);
            for _ in 0..cfg.n_per_mode {
                for &c in &mode_centre {
                    let noise: f64 = rng.sample(StandardNormal);
                    flat.push(c + cfg.noise * noise);
                }
                tags.push((class, mode));
            }
        }
    }
    let coords = Array2::from_shape_vec((total, cfg.dim), flat).expect("counted rows");
    StructuredDataset::new(cfg.classes, cfg.modes_per_class, coords, tags)
}

/// Samples a stochastic block model with Gaussian node features and runs
/// it through the same preprocessing as [`load_graph_dataset`].
///
/// Nodes come in `classes` blocks of `n_per`; an edge joins two nodes with
/// probability `p_in` inside a block and `p_out` across blocks
/// (`0 ≤ p_out ≤ p_in ≤ 1` — equality means the graph carries no class
/// signal). Node features are the class's unit basis vector plus unit
/// Gaussian noise in `feat_dim ≥ classes` dimensions. With `p_out = 0`
/// components never cross classes, so the kept component is single-class;
/// at the usual operating points (say `p_in = 0.1`, `p_out = 0.005`,
/// `n_per = 100`) the graph is connected with high probability and
/// everything survives.
pub fn gen_sbm(
    classes: usize,
    n_per: usize,
    p_in: f64,
    p_out: f64,
    feat_dim: usize,
    rng: &mut impl Rng,
) -> Result<GraphDataset> {
    if classes == 0 || n_per == 0 {
        return Err(Error::InvalidParameter(
            "block model needs at least one class and one node per class".into(),
        ));
    }
    if !(0.0..=1.0).contains(&p_out) || !(0.0..=1.0).contains(&p_in) || p_out > p_in {
        return Err(Error::InvalidParameter(format!(
            "edge probabilities must satisfy 0 <= p_out <= p_in <= 1, got p_in={p_in}, p_out={p_out}"
        )));
    }
    if feat_dim < classes {
        return Err(Error::InvalidParameter(format!(
            "feature dimension {feat_dim} cannot one-hot encode {classes} classes"
        )));
    }
    let n = classes * n_per;
    let labels: Vec<usize> = (0..n).map(|u| u / n_per).collect();

    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { p_in } else { p_out };
            if rng.random_range(0.0f64..1.0) < p {
                edges.push((u, v));
            }
        }
    }

    let mut features = Array2::zeros((n, feat_dim));
    for u in 0..n {
        for j in 0..feat_dim {
            let noise: f64 = rng.sample(StandardNormal);
            features[[u, j]] = if j == labels[u] { 1.0 } else { 0.0 } + noise;
        }
    }

    assemble_graph(n, &edges, features, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::theory::{structured_stats, NormConvention};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::path::PathBuf;

    fn temp_path(tag: &str) -> PathBuf {
        std::env::temp_dir().join(format!("diffres-ds-{}-{tag}", std::process::id()))
    }

    #[test]
    fn xor_has_four_disks_of_one_hundred() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = gen_xor_structured(&mut rng);
        assert_eq!(ds.n(), 400);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.classes(), 2);
        assert_eq!(ds.subclasses(), 2);
        let members = ds.subset_members();
        assert!(members.iter().all(|m| m.len() == 100));

        // Every point lies inside its disk; disk centroids sit within a
        // six-sigma envelope of the centres (sigma of a disk-uniform mean
        // is r/(2·sqrt(n)) per coordinate).
        let centres = [
            ((0.0, 0.0), (0usize, 0usize)),
            ((0.0, 2.0), (1, 0)),
            ((2.0, 0.0), (1, 1)),
            ((2.0, 2.0), (0, 1)),
        ];
        let envelope = 6.0 * 0.75 / (2.0 * (100f64).sqrt());
        for &((cx, cy), (class, sub)) in &centres {
            let rows = &members[class * 2 + sub];
            let mut mx = 0.0;
            let mut my = 0.0;
            for &r in rows {
                let dx = ds.coords()[[r, 0]] - cx;
                let dy = ds.coords()[[r, 1]] - cy;
                assert!(dx * dx + dy * dy <= 0.75 * 0.75 + 1e-12);
                mx += dx;
                my += dy;
            }
            assert!((mx / 100.0).abs() < envelope);
            assert!((my / 100.0).abs() < envelope);
        }
    }

    #[test]
    fn xor_point_set_matches_structured_coords() {
        let mut rng_a = ChaCha8Rng::seed_from_u64(7);
        let mut rng_b = ChaCha8Rng::seed_from_u64(7);
        let ps = gen_xor(&mut rng_a);
        let ds = gen_xor_structured(&mut rng_b);
        assert_eq!(ps.coords(), ds.coords());
        for (row, &(class, _)) in ds.tags().iter().enumerate() {
            assert_eq!(ps.labels()[row], Some(class));
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let a = gen_moon(&mut ChaCha8Rng::seed_from_u64(3));
        let b = gen_moon(&mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a.coords(), b.coords());
        let a = gen_spiral(&mut ChaCha8Rng::seed_from_u64(3));
        let b = gen_spiral(&mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a.coords(), b.coords());
    }

    #[test]
    fn moon_arcs_stay_near_their_circles() {
        let ps = gen_moon(&mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(ps.n(), 1000);
        for i in 0..ps.n() {
            let x = ps.coords()[[i, 0]];
            let y = ps.coords()[[i, 1]];
            let (cx, cy, upper) = match ps.labels()[i] {
                Some(0) => (0.0, 0.0, true),
                Some(1) => (1.0, 0.5, false),
                other => panic!("unexpected label {other:?}"),
            };
            let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            assert!((r - 1.0).abs() < 0.5, "point {i} at radius {r}");
            // Six sigma of 0.05 noise keeps arc points on their side.
            if upper {
                assert!(y > cy - 0.3);
            } else {
                assert!(y < cy + 0.3);
            }
        }
    }

    #[test]
    fn circle_classes_sit_on_their_radii() {
        let ps = gen_circle(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(ps.n(), 1000);
        for i in 0..ps.n() {
            let x = ps.coords()[[i, 0]];
            let y = ps.coords()[[i, 1]];
            let r = (x * x + y * y).sqrt();
            let expected = match ps.labels()[i] {
                Some(0) => 1.0,
                Some(1) => 2.0,
                other => panic!("unexpected label {other:?}"),
            };
            assert!((r - expected).abs() < 0.5);
        }
    }

    #[test]
    fn spiral_arms_grow_with_the_angle() {
        let ps = gen_spiral(&mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(ps.n(), 1000);
        let min_r = 1.0 + std::f64::consts::FRAC_PI_4;
        let max_r = 1.0 + 4.0 * std::f64::consts::PI;
        for i in 0..ps.n() {
            let x = ps.coords()[[i, 0]];
            let y = ps.coords()[[i, 1]];
            let r = (x * x + y * y).sqrt();
            assert!(r > min_r - 1.0 && r < max_r + 1.0, "point {i} at radius {r}");
        }
        let labels: Vec<_> = ps.labels().iter().flatten().copied().collect();
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 500);
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 500);
    }

    #[test]
    fn loader_keeps_the_largest_component_and_normalizes() {
        let edges = temp_path("edges-ok");
        let feats = temp_path("feats-ok");
        let labels = temp_path("labels-ok");
        std::fs::write(
            &edges,
            "# triangle plus a separate pair and an isolated node\n0 1\n1 2\n\n2 0\n3 4\n5 5\n",
        )
        .unwrap();
        std::fs::write(&feats, "1,0\n0,2\n3,0\n1,1\n2,2\n0,0\n").unwrap();
        std::fs::write(&labels, "0\n1\n2\n0\n1\n2\n").unwrap();
        let ds = load_graph_dataset(&edges, &feats, &labels).unwrap();
        std::fs::remove_file(&edges).ok();
        std::fs::remove_file(&feats).ok();
        std::fs::remove_file(&labels).ok();

        assert_eq!(ds.n(), 3);
        assert_eq!(ds.n_edges(), 3);
        assert_eq!(ds.labels, vec![0, 1, 2]);
        assert_eq!(ds.n_classes, 3);
        assert!(ds.zero_feature_rows.is_empty());
        // Triangle with unit self-loops: every degree is 3, so every kept
        // weight is 1/3.
        for i in 0..3 {
            for j in 0..3 {
                assert!((ds.adjacency.get(i, j) - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        // Feature rows are unit length.
        for row in ds.features.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loader_records_zero_feature_rows() {
        let edges = temp_path("edges-zero");
        let feats = temp_path("feats-zero");
        let labels = temp_path("labels-zero");
        std::fs::write(&edges, "0 1\n1 2\n").unwrap();
        std::fs::write(&feats, "1,0\n0,0\n0,1\n").unwrap();
        std::fs::write(&labels, "0\n1\n0\n").unwrap();
        let ds = load_graph_dataset(&edges, &feats, &labels).unwrap();
        std::fs::remove_file(&edges).ok();
        std::fs::remove_file(&feats).ok();
        std::fs::remove_file(&labels).ok();
        assert_eq!(ds.zero_feature_rows, vec![1]);
        assert_eq!(ds.features.row(1).iter().filter(|&&v| v != 0.0).count(), 0);
    }

    #[test]
    fn loader_reports_line_numbers() {
        let edges = temp_path("edges-bad");
        let feats = temp_path("feats-for-bad");
        let labels = temp_path("labels-for-bad");
        std::fs::write(&feats, "1,0\n0,1\n").unwrap();
        std::fs::write(&labels, "0\n1\n").unwrap();

        std::fs::write(&edges, "0 1\n0 x\n").unwrap();
        match load_graph_dataset(&edges, &feats, &labels) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected a malformed line, got {other:?}"),
        }

        std::fs::write(&edges, "0 1 2\n").unwrap();
        match load_graph_dataset(&edges, &feats, &labels) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected a malformed line, got {other:?}"),
        }

        std::fs::write(&edges, "0 7\n").unwrap();
        match load_graph_dataset(&edges, &feats, &labels) {
            Err(Error::EdgeOutOfRange { u: 0, v: 7, n: 2 }) => {}
            other => panic!("expected an out-of-range edge, got {other:?}"),
        }
        std::fs::remove_file(&edges).ok();
        std::fs::remove_file(&feats).ok();
        std::fs::remove_file(&labels).ok();
    }

    #[test]
    fn loader_validates_features_and_labels() {
        let edges = temp_path("edges-val");
        let feats = temp_path("feats-val");
        let labels = temp_path("labels-val");
        std::fs::write(&edges, "0 1\n").unwrap();

        std::fs::write(&feats, "1,0\n0\n").unwrap();
        std::fs::write(&labels, "0\n1\n").unwrap();
        match load_graph_dataset(&edges, &feats, &labels) {
            Err(Error::MalformedLine { line, reason, .. }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("expected 2 values"));
            }
            other => panic!("expected a malformed feature row, got {other:?}"),
        }

        std::fs::write(&feats, "1,0\n0,1\n").unwrap();
        std::fs::write(&labels, "0\n").unwrap();
        assert!(matches!(
            load_graph_dataset(&edges, &feats, &labels),
            Err(Error::DimensionMismatch(_))
        ));

        std::fs::write(&labels, "0\n-1\n").unwrap();
        match load_graph_dataset(&edges, &feats, &labels) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected a malformed label, got {other:?}"),
        }
        std::fs::remove_file(&edges).ok();
        std::fs::remove_file(&feats).ok();
        std::fs::remove_file(&labels).ok();
    }

    #[test]
    fn export_reload_roundtrip_is_exact_on_the_adjacency() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let ds = gen_sbm(3, 10, 0.9, 0.2, 3, &mut rng).unwrap();
        assert_eq!(ds.n(), 30, "dense blocks should stay connected");

        let edges = temp_path("edges-rt");
        let feats = temp_path("feats-rt");
        let labels = temp_path("labels-rt");
        ds.export(&edges, &feats, &labels).unwrap();
        let back = load_graph_dataset(&edges, &feats, &labels).unwrap();
        std::fs::remove_file(&edges).ok();
        std::fs::remove_file(&feats).ok();
        std::fs::remove_file(&labels).ok();

        assert_eq!(ds.adjacency.to_dense(), back.adjacency.to_dense());
        assert_eq!(ds.labels, back.labels);
        let diff = (&ds.features - &back.features)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff <= 1e-14, "feature drift {diff}");
    }

    #[test]
    fn split_takes_twenty_and_thirty_per_class() {
        let labels: Vec<usize> = (0..115).map(|i| i % 2).collect(); // 58 / 57
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let splits = sample_graph_split(&labels, &mut rng).unwrap();
        assert_eq!(splits.train.len(), 40);
        assert_eq!(splits.val.len(), 60);
        assert_eq!(splits.test.len(), 15);
        for class in 0..2 {
            assert_eq!(
                splits.train.iter().filter(|&&i| labels[i] == class).count(),
                20
            );
            assert_eq!(
                splits.val.iter().filter(|&&i| labels[i] == class).count(),
                30
            );
        }
        // Disjoint cover of all nodes, each split sorted.
        let mut all: Vec<usize> = splits
            .train
            .iter()
            .chain(&splits.val)
            .chain(&splits.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..115).collect::<Vec<_>>());
        assert!(splits.train.windows(2).all(|w| w[0] < w[1]));

        // Deterministic under the same seed.
        let again = sample_graph_split(&labels, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(splits, again);
    }

    #[test]
    fn split_rejects_small_classes() {
        let labels: Vec<usize> = (0..99).map(|i| i % 2).collect(); // 50 / 49
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            sample_graph_split(&labels, &mut rng),
            Err(Error::ClassTooSmall {
                class: 1,
                have: 49,
                need: 50
            })
        ));
    }

    #[test]
    fn structured_clusters_meet_their_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds = gen_structured_clusters(2, 3, 4, 25, 1.0, 5.0, &mut rng).unwrap();
        assert_eq!(ds.n(), 150);
        assert_eq!(ds.dim(), 4);
        let (d, l) = structured_stats(&ds, NormConvention::Unsquared).unwrap();
        assert!(d <= 1.0 + 1e-9, "diameter {d}");
        assert!(l >= 5.0 - 1e-9, "gap {l}");
    }

    #[test]
    fn impossible_placement_fails_cleanly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Three centres 10 apart cannot fit in a unit box.
        assert!(matches!(
            place_centres(3, 2, 10.0, 1.0, 5, &mut rng),
            Err(Error::PlacementFailed {
                m: 3,
                retries: 5,
                ..
            })
        ));
    }

    #[test]
    fn two_level_clusters_have_mode_structure() {
        let cfg = TwoLevelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ds = gen_two_level_clusters(&cfg, &mut rng).unwrap();
        assert_eq!(ds.n(), 5 * 2 * 30);
        assert_eq!(ds.classes(), 5);
        assert_eq!(ds.subclasses(), 2);
        // Within a mode, points scatter by the noise scale; across classes
        // the separation dominates. Compare mean within-mode distance to
        // the smallest between-class centroid distance.
        let members = ds.subset_members();
        let coords = ds.coords();
        let mut centroids = Vec::new();
        for rows in members.iter().filter(|m| !m.is_empty()) {
            let mut c = vec![0.0; ds.dim()];
            for &r in rows {
                for (j, v) in c.iter_mut().enumerate() {
                    *v += coords[[r, j]] / rows.len() as f64;
                }
            }
            centroids.push(c);
        }
        let mut min_cross = f64::INFINITY;
        for (i, a) in centroids.iter().enumerate() {
            for b in centroids.iter().skip(i + 1) {
                let d: f64 = a
                    .iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                min_cross = min_cross.min(d);
            }
        }
        // Mode centroids of one class can be close, but class centres sit
        // at least class_sep apart, far above the noise floor.
        assert!(min_cross.is_finite());
        let (d, _) = structured_stats(&ds, NormConvention::Unsquared).unwrap();
        assert!(d < cfg.class_sep, "modes should be tighter than classes");
    }

    #[test]
    fn sbm_rejects_bad_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(gen_sbm(2, 10, 0.5, 0.6, 2, &mut rng).is_err()); // p_out > p_in
        assert!(gen_sbm(2, 10, 1.5, 0.1, 2, &mut rng).is_err()); // p_in > 1
        assert!(gen_sbm(3, 10, 0.5, 0.1, 2, &mut rng).is_err()); // feat_dim < classes
        assert!(gen_sbm(0, 10, 0.5, 0.1, 2, &mut rng).is_err());
    }

    #[test]
    fn sbm_without_cross_edges_keeps_one_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ds = gen_sbm(3, 20, 0.8, 0.0, 3, &mut rng).unwrap();
        assert!(ds.n() <= 20);
        let first = ds.labels[0];
        assert!(ds.labels.iter().all(|&l| l == first));
        assert_eq!(ds.n_classes, 3);
    }

    #[test]
    fn sbm_is_deterministic_and_connected_when_dense() {
        let a = gen_sbm(4, 30, 0.4, 0.05, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = gen_sbm(4, 30, 0.4, 0.05, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.n(), 120, "dense blocks with cross edges stay connected");
        assert_eq!(a.adjacency.to_dense(), b.adjacency.to_dense());
        assert_eq!(a.features, b.features);
        // Block structure should show: same-class edge density exceeds the
        // cross-class density.
        let mut within = 0usize;
        let mut across = 0usize;
        for (i, j, _) in a.adjacency.triples() {
            if i < j {
                if a.labels[i] == a.labels[j] {
                    within += 1;
                } else {
                    across += 1;
                }
            }
        }
        let within_rate = within as f64 / (4.0 * 30.0 * 29.0 / 2.0);
        let across_rate = across as f64 / ((120.0 * 119.0 / 2.0) - 4.0 * 30.0 * 29.0 / 2.0);
        assert!(within_rate > 3.0 * across_rate);
    }
}
