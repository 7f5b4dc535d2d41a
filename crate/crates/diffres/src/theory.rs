//! Executable forms of the separation guarantees behind diffusion layers.
//!
//! The pieces fit together like this: [`StructuredDataset`] tags every point
//! with a (class, subclass) pair; [`structured_stats`] measures the largest
//! subclass diameter `D` and the smallest gap between subclasses `L`. Once
//! the ratio `L/D` clears [`separation_threshold`], a single direction whose
//! subclass projections form pairwise-disjoint intervals exists, and
//! [`check_parallel_separable`] searches for it — exactly in the plane, by
//! randomized sampling in higher dimensions. Given such a direction,
//! [`construct_separating_flow`] builds the piecewise-constant vector field
//! that a width-`w` two-layer ReLU unit realizes, [`apply_flow`] integrates
//! it in closed form, and [`linear_separability`] certifies the result.
//! [`ratio_trace`] and [`verify_stability`] connect this back to the
//! diffusion step itself: diameters shrink, gaps survive, and the step size
//! obeys the contraction bound.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{self, DiffusionConfig};
use crate::eigen;
use crate::error::{Error, Result};
use crate::graph::{self, SparseWeights};
use crate::points::PointSet;

/// Which norm enters diameter and gap computations.
///
/// All quoted numeric examples in the docs use plain Euclidean distances, so
/// that is the default; the squared variant is kept because the ratio bound
/// is sometimes stated against squared distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormConvention {
    #[default]
    Unsquared,
    Squared,
}

/// A point cloud partitioned into `classes × subclasses` tagged subsets.
///
/// Subsets are indexed flat as `class * subclasses + subclass`; empty
/// subsets are legal placeholders (a class need not populate every slot).
#[derive(Debug, Clone)]
pub struct StructuredDataset {
    classes: usize,
    subclasses: usize,
    coords: Array2<f64>,
    tags: Vec<(usize, usize)>,
}

impl StructuredDataset {
    pub fn new(
        classes: usize,
        subclasses: usize,
        coords: Array2<f64>,
        tags: Vec<(usize, usize)>,
    ) -> Result<Self> {
        if classes == 0 || subclasses == 0 {
            return Err(Error::InvalidParameter(
                "need at least one class and one subclass slot".into(),
            ));
        }
        if coords.nrows() != tags.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} coordinate rows but {} subset tags",
                coords.nrows(),
                tags.len()
            )));
        }
        for (row, &(c, s)) in tags.iter().enumerate() {
            if c >= classes || s >= subclasses {
                return Err(Error::InvalidParameter(format!(
                    "subset tag ({c}, {s}) at row {row} out of range for {classes} classes x {subclasses} subclasses"
                )));
            }
        }
        Ok(StructuredDataset {
            classes,
            subclasses,
            coords,
            tags,
        })
    }

    pub fn n(&self) -> usize {
        self.coords.nrows()
    }

    pub fn dim(&self) -> usize {
        self.coords.ncols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn subclasses(&self) -> usize {
        self.subclasses
    }

    /// Number of subset slots, `classes * subclasses`, counting empty ones.
    pub fn n_subsets(&self) -> usize {
        self.classes * self.subclasses
    }

    pub fn coords(&self) -> ArrayView2<'_, f64> {
        self.coords.view()
    }

    pub fn tags(&self) -> &[(usize, usize)] {
        &self.tags
    }

    /// Row indices of every subset slot, in flat `class * subclasses + sub`
    /// order.
    pub fn subset_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.n_subsets()];
        for (row, &(c, s)) in self.tags.iter().enumerate() {
            members[c * self.subclasses + s].push(row);
        }
        members
    }

    /// The same points with subclass structure forgotten: labels keep only
    /// the class tag.
    pub fn to_point_set(&self) -> PointSet {
        let labels = self.tags.iter().map(|&(c, _)| Some(c)).collect();
        PointSet::new(self.coords.clone(), labels)
            .expect("tag and row counts match by construction")
    }

    /// Same tags over new positions (for tracing a flow or a diffusion).
    pub fn with_coords(&self, coords: Array2<f64>) -> Result<Self> {
        StructuredDataset::new(self.classes, self.subclasses, coords, self.tags.clone())
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Worst subset diameter `D` and smallest between-subset gap `L`.
///
/// `D` is the largest pairwise distance within any one subset (zero for
/// singletons); `L` is the smallest distance between points of two distinct
/// subsets. Both are brute-force `O(N²)` scans. Needs at least two nonempty
/// subsets, otherwise the gap is undefined.
pub fn structured_stats(
    ds: &StructuredDataset,
    convention: NormConvention,
) -> Result<(f64, f64)> {
    let members = ds.subset_members();
    let nonempty: Vec<&Vec<usize>> = members.iter().filter(|m| !m.is_empty()).collect();
    if nonempty.len() < 2 {
        return Err(Error::SingleSubset);
    }
    let c = ds.coords();
    let mut diameter: f64 = 0.0;
    for rows in &nonempty {
        for (pos, &a) in rows.iter().enumerate() {
            for &b in &rows[pos + 1..] {
                diameter = diameter.max(sq_dist(c.row(a), c.row(b)));
            }
        }
    }
    let mut gap = f64::INFINITY;
    for (i, rows_a) in nonempty.iter().enumerate() {
        for rows_b in &nonempty[i + 1..] {
            for &a in rows_a.iter() {
                for &b in rows_b.iter() {
                    gap = gap.min(sq_dist(c.row(a), c.row(b)));
                }
            }
        }
    }
    Ok(match convention {
        NormConvention::Squared => (diameter, gap),
        NormConvention::Unsquared => (diameter.sqrt(), gap.sqrt()),
    })
}

/// Gap-to-diameter ratio above which `m` subsets in `d` dimensions are
/// guaranteed separable by parallel hyperplanes: `m(m−1)·√π·d / 4`.
///
/// The bound comes from a union bound on the directions each subset pair
/// can block; it is monotone in both arguments.
pub fn separation_threshold(m: usize, d: usize) -> f64 {
    let m = m as f64;
    let d = d as f64;
    m * (m - 1.0) * std::f64::consts::PI.sqrt() * d / 4.0
}

/// Outcome of a direction search over subset projections.
enum DirectionSearch {
    /// Unit direction whose subset projection intervals are pairwise
    /// disjoint.
    Witness(Array1<f64>),
    /// No direction found; the pair of flat subset ids that overlapped in
    /// the least-blocked direction tested.
    Blocked(usize, usize),
}

/// Projection interval (lo, hi) of each listed subset along `w`.
fn projection_intervals(
    coords: &ArrayView2<f64>,
    subsets: &[(usize, &[usize])],
    w: &ArrayView1<f64>,
) -> Vec<(f64, f64, usize)> {
    subsets
        .iter()
        .map(|&(id, rows)| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &r in rows {
                let p = coords.row(r).dot(w);
                lo = lo.min(p);
                hi = hi.max(p);
            }
            (lo, hi, id)
        })
        .collect()
}

/// Strict disjointness check; on failure returns one overlapping pair and
/// the number of overlapping adjacent pairs (a proxy for how blocked the
/// direction is).
fn interval_overlaps(intervals: &mut [(f64, f64, usize)]) -> Option<((usize, usize), usize)> {
    intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut first: Option<(usize, usize)> = None;
    let mut count = 0;
    for pair in intervals.windows(2) {
        let (_, hi_a, id_a) = pair[0];
        let (lo_b, _, id_b) = pair[1];
        if hi_a >= lo_b {
            count += 1;
            if first.is_none() {
                first = Some((id_a.min(id_b), id_a.max(id_b)));
            }
        }
    }
    first.map(|pair| (pair, count))
}

fn search_direction(
    coords: &ArrayView2<f64>,
    subsets: &[(usize, &[usize])],
    n_directions: usize,
    rng: &mut impl Rng,
) -> DirectionSearch {
    let d = coords.ncols();
    if subsets.len() < 2 {
        // One subset is separable along any axis.
        let mut w = Array1::<f64>::zeros(d);
        w[0] = 1.0;
        return DirectionSearch::Witness(w);
    }

    let mut best_block: Option<((usize, usize), usize)> = None;
    let consider = |w: Array1<f64>,
                        best: &mut Option<((usize, usize), usize)>|
     -> Option<Array1<f64>> {
        let mut intervals = projection_intervals(coords, subsets, &w.view());
        match interval_overlaps(&mut intervals) {
            None => Some(w),
            Some((pair, count)) => {
                if best.map(|(_, c)| count < c).unwrap_or(true) {
                    *best = Some((pair, count));
                }
                None
            }
        }
    };

    if d == 1 {
        let w = Array1::from_vec(vec![1.0]);
        return match consider(w, &mut best_block) {
            Some(w) => DirectionSearch::Witness(w),
            None => {
                let ((a, b), _) = best_block.expect("overlap recorded on failure");
                DirectionSearch::Blocked(a, b)
            }
        };
    }

    if d == 2 {
        // Exact sweep. The projection order of a cross-subset point pair
        // flips only at the angle perpendicular to their difference, so the
        // disjointness verdict is constant on each arc between consecutive
        // critical angles (mod π). Testing one midpoint per arc decides the
        // question completely.
        let mut angles = Vec::new();
        for (i, &(_, rows_a)) in subsets.iter().enumerate() {
            for &(_, rows_b) in &subsets[i + 1..] {
                for &a in rows_a {
                    for &b in rows_b {
                        let vx = coords[[a, 0]] - coords[[b, 0]];
                        let vy = coords[[a, 1]] - coords[[b, 1]];
                        if vx == 0.0 && vy == 0.0 {
                            continue;
                        }
                        let theta = (vy.atan2(vx) + std::f64::consts::FRAC_PI_2)
                            .rem_euclid(std::f64::consts::PI);
                        angles.push(theta);
                    }
                }
            }
        }
        angles.sort_by(f64::total_cmp);
        angles.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

        let mut candidates = Vec::with_capacity(angles.len() + 1);
        if angles.is_empty() {
            candidates.push(0.0);
        } else {
            for pair in angles.windows(2) {
                candidates.push((pair[0] + pair[1]) / 2.0);
            }
            // Wrap-around arc between the last angle and the first + π.
            let last = angles[angles.len() - 1];
            candidates.push(
                ((last + angles[0] + std::f64::consts::PI) / 2.0)
                    .rem_euclid(std::f64::consts::PI),
            );
        }

        for theta in candidates {
            let w = Array1::from_vec(vec![theta.cos(), theta.sin()]);
            if let Some(w) = consider(w, &mut best_block) {
                return DirectionSearch::Witness(w);
            }
        }
        let ((a, b), _) = best_block.expect("every tested direction overlapped");
        return DirectionSearch::Blocked(a, b);
    }

    // d >= 3: randomized search, sound but incomplete — a miss means "not
    // found", not "impossible".
    for _ in 0..n_directions.max(1) {
        let mut w = Array1::<f64>::zeros(d);
        let mut norm = 0.0;
        while norm < 1e-12 {
            for v in w.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            norm = w.dot(&w).sqrt();
        }
        w.mapv_inplace(|v| v / norm);
        if let Some(w) = consider(w, &mut best_block) {
            return DirectionSearch::Witness(w);
        }
    }
    let ((a, b), _) = best_block.expect("overlap recorded for every miss");
    DirectionSearch::Blocked(a, b)
}

/// Searches for a unit direction along which all nonempty subsets project
/// to pairwise-disjoint intervals — the witness that `M − 1` parallel
/// hyperplanes separate the subsets.
///
/// In the plane the search is an exact angular sweep (a returned `None`
/// proves no direction exists); in higher dimensions it samples
/// `n_directions` random unit vectors and is only one-sided: a witness is
/// sound, a miss is inconclusive.
pub fn check_parallel_separable(
    ds: &StructuredDataset,
    n_directions: usize,
    rng: &mut impl Rng,
) -> Result<Option<Array1<f64>>> {
    let members = ds.subset_members();
    let subsets: Vec<(usize, &[usize])> = members
        .iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(id, m)| (id, m.as_slice()))
        .collect();
    if subsets.iter().map(|(_, m)| m.len()).sum::<usize>() == 0 {
        return Err(Error::TooFewPoints { need: 1, got: 0 });
    }
    match search_direction(&ds.coords(), &subsets, n_directions, rng) {
        DirectionSearch::Witness(w) => Ok(Some(w)),
        DirectionSearch::Blocked(..) => Ok(None),
    }
}

/// One ReLU unit of a flow piece: contributes `lambda * max(w*·x + bias, 0)`
/// to the speed along the shared drift direction.
#[derive(Debug, Clone, Copy)]
pub struct FlowNeuron {
    pub lambda: f64,
    pub bias: f64,
}

/// One time slice of the schedule with its active units.
#[derive(Debug, Clone)]
pub struct FlowPiece {
    pub t_start: f64,
    pub t_end: f64,
    pub neurons: Vec<FlowNeuron>,
}

/// Where the flow is asked to land the first coordinates.
#[derive(Debug, Clone, Copy)]
pub enum FlowTargets {
    /// Every class-0 point lands exactly at `c_low`, every class-1 point at
    /// `c_high`.
    Points { c_low: f64, c_high: f64 },
    /// Each subset lands inside its class's interval; the intervals are
    /// disjoint and wide enough to hold a whole subset each.
    Intervals { low: (f64, f64), high: (f64, f64) },
}

/// A piecewise-constant drift schedule `x'(t) = Σ_q λ_q σ(w*·x + b_q) β*`.
///
/// The drift direction `β*` is orthogonal to the gating direction `w*` and
/// has first component exactly 1, so projections onto `w*` are invariants
/// of the flow while first coordinates move by computable amounts. That
/// orthogonality is what makes [`apply_flow`] exact: within a piece every
/// point's velocity is constant.
#[derive(Debug, Clone)]
pub struct FlowSchedule {
    w_star: Array1<f64>,
    beta_star: Array1<f64>,
    pieces: Vec<FlowPiece>,
    targets: FlowTargets,
}

impl FlowSchedule {
    pub fn new(
        w_star: Array1<f64>,
        beta_star: Array1<f64>,
        pieces: Vec<FlowPiece>,
        targets: FlowTargets,
    ) -> Result<Self> {
        if w_star.len() != beta_star.len() {
            return Err(Error::DimensionMismatch(format!(
                "gating direction has {} components, drift direction {}",
                w_star.len(),
                beta_star.len()
            )));
        }
        if beta_star.is_empty() || beta_star[0] != 1.0 {
            return Err(Error::InvalidParameter(
                "drift direction must have first component exactly 1".into(),
            ));
        }
        let wn = w_star.dot(&w_star).sqrt();
        let bn = beta_star.dot(&beta_star).sqrt();
        let dot = w_star.dot(&beta_star).abs();
        if dot > 1e-12 * wn.max(1.0) * bn.max(1.0) {
            return Err(Error::InvalidParameter(format!(
                "drift direction is not orthogonal to the gating direction (dot {dot:e})"
            )));
        }
        let mut t = 0.0;
        for piece in &pieces {
            if (piece.t_start - t).abs() > 1e-12 || piece.t_end <= piece.t_start {
                return Err(Error::InvalidParameter(
                    "flow pieces must partition [0, 1] in order".into(),
                ));
            }
            t = piece.t_end;
        }
        if !pieces.is_empty() && (t - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(
                "flow pieces must end at t = 1".into(),
            ));
        }
        Ok(FlowSchedule {
            w_star,
            beta_star,
            pieces,
            targets,
        })
    }

    pub fn w_star(&self) -> ArrayView1<'_, f64> {
        self.w_star.view()
    }

    pub fn beta_star(&self) -> ArrayView1<'_, f64> {
        self.beta_star.view()
    }

    pub fn pieces(&self) -> &[FlowPiece] {
        &self.pieces
    }

    pub fn targets(&self) -> FlowTargets {
        self.targets
    }

    /// Number of time slices ("layers" of the realizing network).
    pub fn n_pieces(&self) -> usize {
        self.pieces.len()
    }
}

/// Knobs for [`construct_separating_flow`] and [`construct_region_flow`].
#[derive(Debug, Clone, Copy)]
pub struct FlowConfig {
    /// Units per piece. The point flow steers `width` points per slice, so
    /// the schedule has `ceil(N / width)` pieces; the region flow spends a
    /// push–pull *pair* of units per subset, so a slice holds
    /// `max(width / 2, 1)` subsets.
    pub width: usize,
    /// Target first coordinate for class 0.
    pub c_low: f64,
    /// Target first coordinate for class 1.
    pub c_high: f64,
    /// Gating-direction draws before giving up on distinct projections.
    pub max_retries: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            width: 1,
            c_low: 0.0,
            c_high: 1.0,
            max_retries: 100,
        }
    }
}

/// One entity the flow builder steers: a point or a whole subset, with its
/// projection interval along `w*` and its landing target.
struct FlowEntity {
    rows: Vec<usize>,
    lo: f64,
    hi: f64,
    mean_proj: f64,
    target: f64,
}

/// Drift direction with first component 1, orthogonal to `w`, built by
/// adjusting the pivot coordinate (the largest-magnitude component after
/// the first). Fails if `w` is (numerically) aligned with the first axis.
fn drift_direction(w: &ArrayView1<f64>) -> Result<Array1<f64>> {
    let d = w.len();
    if d < 2 {
        return Err(Error::FlowDimension(d));
    }
    let mut pivot = 1;
    for i in 2..d {
        if w[i].abs() > w[pivot].abs() {
            pivot = i;
        }
    }
    let wn = w.dot(w).sqrt();
    if w[pivot].abs() < 1e-9 * wn.max(1e-300) {
        return Err(Error::InvalidParameter(
            "gating direction is aligned with the first axis; no unit-first drift exists".into(),
        ));
    }
    let mut beta = Array1::ones(d);
    let rest: f64 = (0..d).filter(|&i| i != pivot).map(|i| w[i]).sum();
    beta[pivot] = -rest / w[pivot];
    Ok(beta)
}

/// Tilts an axis-degenerate gating direction until a usable pivot exists,
/// re-verifying that the subset projection intervals stay disjoint.
fn fix_degenerate_pivot(
    w: Array1<f64>,
    coords: &ArrayView2<f64>,
    subsets: &[(usize, &[usize])],
) -> Result<Array1<f64>> {
    if drift_direction(&w.view()).is_ok() {
        return Ok(w);
    }
    let d = w.len();
    for &delta in &[1e-6, 1e-4, 1e-2] {
        for axis in 1..d {
            for sign in [1.0, -1.0] {
                let mut tilted = w.clone();
                tilted[axis] += sign * delta;
                let norm = tilted.dot(&tilted).sqrt();
                tilted.mapv_inplace(|v| v / norm);
                if drift_direction(&tilted.view()).is_err() {
                    continue;
                }
                let mut intervals = projection_intervals(coords, subsets, &tilted.view());
                if interval_overlaps(&mut intervals).is_none() {
                    return Ok(tilted);
                }
            }
        }
    }
    Err(Error::InvalidParameter(
        "could not tilt the gating direction away from the first axis without losing separation"
            .into(),
    ))
}

fn apply_piece(
    x: &mut Array2<f64>,
    w_star: &ArrayView1<f64>,
    beta_star: &ArrayView1<f64>,
    piece: &FlowPiece,
) {
    let duration = piece.t_end - piece.t_start;
    for mut row in x.rows_mut() {
        let proj = row.dot(w_star);
        let mut speed = 0.0;
        for neuron in &piece.neurons {
            speed += neuron.lambda * (proj + neuron.bias).max(0.0);
        }
        let step = duration * speed;
        if step != 0.0 {
            row.scaled_add(step, beta_star);
        }
    }
}

fn piece_bounds(p: usize, n_pieces: usize) -> (f64, f64) {
    let duration = 1.0 / n_pieces as f64;
    (
        p as f64 * duration,
        if p + 1 == n_pieces {
            1.0
        } else {
            (p + 1) as f64 * duration
        },
    )
}

/// Builds a drift schedule that lands every class-0 point's first
/// coordinate exactly on `c_low` and every class-1 point's on `c_high`,
/// leaving the cloud linearly separable by the hyperplane halfway between.
///
/// A random gating direction is redrawn (up to `max_retries` times) until
/// all point projections are pairwise distinct and the drift pivot is
/// well-conditioned; duplicated points make this impossible and surface as
/// [`Error::DegenerateProjection`]. Gates interleave the sorted
/// projections, so the unit for a point is silent on everything before it;
/// within each piece that turns the landing conditions into a lower
/// triangular system in the unit strengths, solved by forward substitution
/// against the running first coordinates. With `width = w`, the schedule
/// has `ceil(N/w)` pieces of up to `w` units each.
pub fn construct_separating_flow(
    points: &ArrayView2<f64>,
    labels: &[usize],
    cfg: &FlowConfig,
    rng: &mut impl Rng,
) -> Result<FlowSchedule> {
    let n = points.nrows();
    let d = points.ncols();
    if n == 0 {
        return Err(Error::TooFewPoints { need: 1, got: 0 });
    }
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} points but {} labels",
            labels.len()
        )));
    }
    if d < 2 {
        return Err(Error::FlowDimension(d));
    }
    for (row, &label) in labels.iter().enumerate() {
        if label > 1 {
            return Err(Error::NonBinaryLabel { row, label });
        }
    }

    // Draw a gating direction with pairwise-distinct projections and a
    // usable drift pivot. Distinctness fails only on a measure-zero set,
    // so the hard floor ever mattering means duplicate points. Conditioning
    // matters beyond bare distinctness: unit strengths scale like
    // 1 / (projection gap), and rounding in the landing solve is amplified
    // by the largest strength — so prefer a comfortably spread draw and
    // settle for the best cramped one only after exhausting the retries.
    let mut chosen: Option<(Array1<f64>, Vec<f64>)> = None;
    let mut fallback: Option<(Array1<f64>, Vec<f64>, f64)> = None;
    for _ in 0..cfg.max_retries.max(1) {
        let mut w = Array1::<f64>::zeros(d);
        for v in w.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let norm = w.dot(&w).sqrt();
        if norm < 1e-12 {
            continue;
        }
        w.mapv_inplace(|v| v / norm);
        if drift_direction(&w.view()).is_err() {
            continue;
        }
        let projections: Vec<f64> = (0..n).map(|i| points.row(i).dot(&w)).collect();
        let mut sorted = projections.clone();
        sorted.sort_by(f64::total_cmp);
        let spread = sorted[n - 1] - sorted[0];
        let min_gap = sorted
            .windows(2)
            .map(|p| p[1] - p[0])
            .fold(f64::INFINITY, f64::min);
        if n > 1 && min_gap <= 1e-9 * spread.max(1.0) {
            continue;
        }
        // Typical minimum spacing of n random projections is spread / n²;
        // an order below that still keeps strengths (and hence rounding
        // amplification) small enough for 1e-10-level landings.
        if min_gap >= spread.max(1.0) / (10.0 * (n * n) as f64) {
            chosen = Some((w, projections));
            break;
        }
        if fallback.as_ref().is_none_or(|f| min_gap > f.2) {
            fallback = Some((w, projections, min_gap));
        }
    }
    let (w_star, projections) = chosen
        .or_else(|| fallback.map(|(w, p, _)| (w, p)))
        .ok_or(Error::DegenerateProjection {
            retries: cfg.max_retries.max(1),
        })?;
    let beta_star = drift_direction(&w_star.view())?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| projections[a].total_cmp(&projections[b]));
    let entities: Vec<FlowEntity> = order
        .iter()
        .map(|&i| FlowEntity {
            rows: vec![i],
            lo: projections[i],
            hi: projections[i],
            mean_proj: projections[i],
            target: if labels[i] == 0 { cfg.c_low } else { cfg.c_high },
        })
        .collect();

    // Gate values: B_i sits strictly between consecutive projections. The
    // opening gate only has to clear the lowest point from below; back off
    // by a spread-scaled margin.
    let spread = entities[n - 1].hi - entities[0].lo;
    let margin = if spread > 0.0 {
        spread / (2.0 * n as f64)
    } else {
        1.0
    };
    let mut gates = Vec::with_capacity(n);
    gates.push(entities[0].lo - margin);
    for i in 1..n {
        gates.push(0.5 * (entities[i - 1].hi + entities[i].lo));
    }

    let width = cfg.width.max(1);
    let n_pieces = n.div_ceil(width);
    let mut work = points.to_owned();
    let mut pieces = Vec::with_capacity(n_pieces);
    for p in 0..n_pieces {
        let lo = p * width;
        let hi = (lo + width).min(n);
        let (t_start, t_end) = piece_bounds(p, n_pieces);
        let duration = t_end - t_start;

        // Forward substitution: point q of the block lands on target after
        // this piece, moved by units 0..=q (later units are gated above
        // its projection).
        let mut lambdas: Vec<f64> = Vec::with_capacity(hi - lo);
        for (q, ent) in entities[lo..hi].iter().enumerate() {
            let row = ent.rows[0];
            let current = work[[row, 0]];
            let mut moved = 0.0;
            for (k, lam) in lambdas.iter().enumerate() {
                moved += lam * (ent.mean_proj - gates[lo + k]);
            }
            let slope = ent.mean_proj - gates[lo + q];
            debug_assert!(slope > 0.0, "gate must sit below its point");
            lambdas.push(((ent.target - current) / duration - moved) / slope);
        }

        let neurons: Vec<FlowNeuron> = lambdas
            .iter()
            .zip(&gates[lo..hi])
            .map(|(&lambda, &gate)| FlowNeuron {
                lambda,
                bias: -gate,
            })
            .collect();
        let piece = FlowPiece {
            t_start,
            t_end,
            neurons,
        };
        apply_piece(&mut work, &w_star.view(), &beta_star.view(), &piece);
        pieces.push(piece);
    }

    FlowSchedule::new(
        w_star,
        beta_star,
        pieces,
        FlowTargets::Points {
            c_low: cfg.c_low,
            c_high: cfg.c_high,
        },
    )
}

/// Variant of [`construct_separating_flow`] that steers whole subsets of a
/// two-class [`StructuredDataset`] instead of single points.
///
/// Each subset is moved by a push–pull pair of units whose strengths
/// cancel: above the pair's gates the induced displacement is constant, so
/// the subset (and everything past it) translates rigidly and lands in its
/// class's target interval without distortion. The intervals have width
/// `2D` (with `D` the largest subset diameter) separated by a gap of at
/// least `D`, so containment is guaranteed. Requires the subsets to be
/// separable by parallel hyperplanes; the gating-direction search is exact
/// in the plane and randomized (`n_directions` draws) above it. With `M`
/// subsets the schedule has `ceil(M / max(width/2, 1))` pieces.
pub fn construct_region_flow(
    ds: &StructuredDataset,
    cfg: &FlowConfig,
    n_directions: usize,
    rng: &mut impl Rng,
) -> Result<FlowSchedule> {
    if ds.classes() != 2 {
        return Err(Error::InvalidParameter(format!(
            "region flow separates exactly two classes, got {}",
            ds.classes()
        )));
    }
    if ds.dim() < 2 {
        return Err(Error::FlowDimension(ds.dim()));
    }
    if ds.n() == 0 {
        return Err(Error::TooFewPoints { need: 1, got: 0 });
    }
    let coords = ds.coords();
    let members = ds.subset_members();
    let subsets: Vec<(usize, &[usize])> = members
        .iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(id, m)| (id, m.as_slice()))
        .collect();

    let w_star = match search_direction(&coords, &subsets, n_directions, rng) {
        DirectionSearch::Witness(w) => fix_degenerate_pivot(w, &coords, &subsets)?,
        DirectionSearch::Blocked(a, b) => return Err(Error::NotParallelSeparable { a, b }),
    };
    let beta_star = drift_direction(&w_star.view())?;

    // Largest subset diameter fixes the target geometry: width-2D
    // intervals separated by at least D.
    let mut diameter_sq: f64 = 0.0;
    for &(_, rows) in &subsets {
        for (pos, &a) in rows.iter().enumerate() {
            for &b in &rows[pos + 1..] {
                diameter_sq = diameter_sq.max(sq_dist(coords.row(a), coords.row(b)));
            }
        }
    }
    let diameter = diameter_sq.sqrt();
    let centre_low = cfg.c_low;
    let centre_high = cfg.c_high.max(cfg.c_low + 3.0 * diameter);
    let targets = FlowTargets::Intervals {
        low: (centre_low - diameter, centre_low + diameter),
        high: (centre_high - diameter, centre_high + diameter),
    };

    let mut entities: Vec<FlowEntity> = subsets
        .iter()
        .map(|&(id, rows)| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            let mut proj_sum = 0.0;
            for &r in rows {
                let p = coords.row(r).dot(&w_star);
                lo = lo.min(p);
                hi = hi.max(p);
                proj_sum += p;
            }
            let class = id / ds.subclasses();
            FlowEntity {
                rows: rows.to_vec(),
                lo,
                hi,
                mean_proj: proj_sum / rows.len() as f64,
                target: if class == 0 { centre_low } else { centre_high },
            }
        })
        .collect();
    entities.sort_by(|a, b| a.lo.total_cmp(&b.lo));
    let m = entities.len();

    // Two gates per subset, both strictly inside the empty projection gap
    // below it, splitting that gap in thirds.
    let spread = entities[m - 1].hi - entities[0].lo;
    let base_gap = if spread > 0.0 {
        spread / (2.0 * m as f64)
    } else {
        1.0
    };
    let mut gate_pairs = Vec::with_capacity(m);
    for i in 0..m {
        let floor = if i == 0 {
            entities[0].lo - base_gap
        } else {
            entities[i - 1].hi
        };
        let gap = entities[i].lo - floor;
        debug_assert!(gap > 0.0, "subset projection intervals must be disjoint");
        gate_pairs.push((floor + gap / 3.0, floor + 2.0 * gap / 3.0));
    }

    let per_piece = (cfg.width / 2).max(1);
    let n_pieces = m.div_ceil(per_piece);
    let mut work = coords.to_owned();
    let mut pieces = Vec::with_capacity(n_pieces);
    for p in 0..n_pieces {
        let lo = p * per_piece;
        let hi = (lo + per_piece).min(m);
        let (t_start, t_end) = piece_bounds(p, n_pieces);
        let duration = t_end - t_start;

        let mut neurons = Vec::with_capacity(2 * (hi - lo));
        for i in lo..hi {
            let ent = &entities[i];
            let mean_first: f64 =
                ent.rows.iter().map(|&r| work[[r, 0]]).sum::<f64>() / ent.rows.len() as f64;
            // Earlier pairs of the same piece shift this subset too; their
            // translations are constants we can pre-total.
            let moved: f64 = neurons
                .iter()
                .map(|n: &FlowNeuron| n.lambda * (ent.mean_proj + n.bias).max(0.0))
                .sum::<f64>()
                * duration;
            let shift = ent.target - mean_first - moved;
            let (gate_a, gate_b) = gate_pairs[i];
            // λ_a σ(A − g_a) − λ_a σ(A − g_b) = λ_a (g_b − g_a) for any
            // A above both gates: a rigid translation of strength
            // λ_a (g_b − g_a) per unit time.
            let lambda_a = shift / (duration * (gate_b - gate_a));
            neurons.push(FlowNeuron {
                lambda: lambda_a,
                bias: -gate_a,
            });
            neurons.push(FlowNeuron {
                lambda: -lambda_a,
                bias: -gate_b,
            });
        }
        let piece = FlowPiece {
            t_start,
            t_end,
            neurons,
        };
        apply_piece(&mut work, &w_star.view(), &beta_star.view(), &piece);
        pieces.push(piece);
    }

    FlowSchedule::new(w_star, beta_star, pieces, targets)
}

/// Integrates the drift schedule exactly.
///
/// Because the drift is orthogonal to the gating direction, each point's
/// gate values — hence its velocity — are constant within a piece, and the
/// update is a single closed-form displacement per piece. Projections onto
/// `w*` are preserved to rounding (worth asserting in tests at `1e-12`).
pub fn apply_flow(points: &ArrayView2<f64>, schedule: &FlowSchedule) -> Result<Array2<f64>> {
    if points.ncols() != schedule.w_star.len() {
        return Err(Error::DimensionMismatch(format!(
            "points have {} columns, schedule directions {}",
            points.ncols(),
            schedule.w_star.len()
        )));
    }
    let mut x = points.to_owned();
    for piece in &schedule.pieces {
        apply_piece(
            &mut x,
            &schedule.w_star.view(),
            &schedule.beta_star.view(),
            piece,
        );
    }
    Ok(x)
}

/// Verdict of [`linear_separability`].
#[derive(Debug, Clone)]
pub enum Separability {
    /// A strict separating hyperplane `normal·x + offset = 0` with the
    /// given geometric margin (class 1 on the positive side).
    Separable {
        normal: Array1<f64>,
        offset: f64,
        margin: f64,
    },
    /// The class hulls (numerically) intersect: `witness` is a point in
    /// both, `gap` the measured hull distance.
    Overlapping { witness: Array1<f64>, gap: f64 },
}

impl Separability {
    pub fn is_separable(&self) -> bool {
        matches!(self, Separability::Separable { .. })
    }
}

/// Exact two-class linear separability with a certificate either way.
///
/// A perceptron pass handles the comfortably separable case quickly; if it
/// fails to certify within its update budget, the distance between the two
/// convex hulls decides: the minimum-norm point of the pairwise difference
/// hull is zero exactly when the hulls intersect. A positive hull gap is
/// converted into a verified strict separator; a (numerically) zero gap
/// yields the common point as the impossibility witness.
pub fn linear_separability(points: &ArrayView2<f64>, labels: &[usize]) -> Result<Separability> {
    let n = points.nrows();
    let d = points.ncols();
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} points but {} labels",
            labels.len()
        )));
    }
    let mut class0 = Vec::new();
    let mut class1 = Vec::new();
    for (row, &label) in labels.iter().enumerate() {
        match label {
            0 => class0.push(row),
            1 => class1.push(row),
            _ => return Err(Error::NonBinaryLabel { row, label }),
        }
    }

    // One-sided data is separable by any hyperplane pushed past it.
    if class0.is_empty() || class1.is_empty() {
        let mut normal = Array1::zeros(d.max(1));
        normal[0] = 1.0;
        let projections: Vec<f64> = (0..n).map(|i| points.row(i).dot(&normal)).collect();
        let max = projections.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = projections.iter().cloned().fold(f64::INFINITY, f64::min);
        let offset = if class0.is_empty() {
            1.0 - min // everything is class 1: the plane sits below
        } else {
            -max - 1.0 // everything is class 0: the plane sits above
        };
        return Ok(Separability::Separable {
            normal,
            offset,
            margin: 1.0,
        });
    }

    if let Some(sep) = perceptron_certificate(points, &class0, &class1) {
        return Ok(sep);
    }

    // Hull-distance decision on the Minkowski difference generators.
    let mut generators = Vec::with_capacity(class0.len() * class1.len());
    for &i in &class1 {
        for &j in &class0 {
            let gen: Array1<f64> = &points.row(i) - &points.row(j);
            generators.push(gen);
        }
    }
    let scale = generators
        .iter()
        .map(|g| g.dot(g).sqrt())
        .fold(0.0f64, f64::max)
        .max(1.0);
    let (z, combo) = min_norm_point(&generators, 1e-12 * scale * scale);
    let gap = z.dot(&z).sqrt();

    if gap > 1e-9 * scale {
        // z points from the class-0 hull towards the class-1 hull. Split
        // the supporting slabs in the middle and verify strictness.
        let p1 = class1
            .iter()
            .map(|&i| points.row(i).dot(&z))
            .fold(f64::INFINITY, f64::min);
        let p0 = class0
            .iter()
            .map(|&i| points.row(i).dot(&z))
            .fold(f64::NEG_INFINITY, f64::max);
        if p1 > p0 {
            let offset = -0.5 * (p0 + p1);
            let margin = 0.5 * (p1 - p0) / gap;
            return Ok(Separability::Separable {
                normal: z,
                offset,
                margin,
            });
        }
        // Fall through: an unverifiable gap is treated as overlap evidence.
    }

    // Rebuild the common point from the convex combination: the minimum-
    // norm point is u − v with u in hull(class 1) and v in hull(class 0);
    // u is the witness (u ≈ v when the gap vanishes).
    let mut witness = Array1::zeros(d);
    for &(g, weight) in &combo {
        let i = class1[g / class0.len()];
        witness.scaled_add(weight, &points.row(i));
    }
    Ok(Separability::Overlapping { witness, gap })
}

/// Perceptron fast path: returns a verified strict separator or gives up
/// after its update budget.
fn perceptron_certificate(
    points: &ArrayView2<f64>,
    class0: &[usize],
    class1: &[usize],
) -> Option<Separability> {
    let d = points.ncols();
    let examples: Vec<(usize, f64)> = class1
        .iter()
        .map(|&r| (r, 1.0))
        .chain(class0.iter().map(|&r| (r, -1.0)))
        .collect();
    let mut w = Array1::<f64>::zeros(d);
    let mut b = 0.0;
    let mut updates = 0usize;
    let budget = 100_000usize;
    loop {
        let mut clean = true;
        for &(row, sign) in &examples {
            let value = sign * (points.row(row).dot(&w) + b);
            if value <= 0.0 {
                w.scaled_add(sign, &points.row(row));
                b += sign;
                updates += 1;
                clean = false;
                if updates >= budget {
                    return None;
                }
            }
        }
        if clean {
            break;
        }
    }
    let norm = w.dot(&w).sqrt();
    if norm == 0.0 {
        return None;
    }
    let margin = examples
        .iter()
        .map(|&(row, sign)| sign * (points.row(row).dot(&w) + b))
        .fold(f64::INFINITY, f64::min)
        / norm;
    Some(Separability::Separable {
        normal: w,
        offset: b,
        margin,
    })
}

/// Minimum-norm point of the convex hull of `generators` (Wolfe's method).
///
/// Returns the point and its convex combination as (generator index,
/// weight) pairs. The corral stays small, so the inner affine minimization
/// is a dense solve on a handful of rows.
fn min_norm_point(generators: &[Array1<f64>], tol: f64) -> (Array1<f64>, Vec<(usize, f64)>) {
    let start = generators
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.dot(*a).total_cmp(&b.dot(*b)))
        .map(|(i, _)| i)
        .expect("at least one generator");
    let mut corral = vec![start];
    let mut weights = vec![1.0];
    let mut x = generators[start].clone();

    for _ in 0..10_000 {
        // Most-violating generator for the current point.
        let (j, best) = generators
            .iter()
            .enumerate()
            .map(|(i, g)| (i, x.dot(g)))
            .min_by(|(_, a), (_, b)| a.total_cmp(b))
            .expect("at least one generator");
        let xx = x.dot(&x);
        if best >= xx - tol.max(1e-15 * (1.0 + xx)) {
            break;
        }
        if corral.contains(&j) {
            break; // numerically stalled
        }
        corral.push(j);
        weights.push(0.0);

        // Minor cycle: pull the point to the minimum-norm point of the
        // corral's affine hull, dropping vertices whose weight collapses.
        loop {
            match affine_min_norm(generators, &corral) {
                Some(alpha) if alpha.iter().all(|&a| a > 1e-12) => {
                    weights = alpha;
                    break;
                }
                Some(alpha) => {
                    // Step from `weights` towards `alpha` until the first
                    // coefficient hits zero, then drop it.
                    let mut theta = 1.0f64;
                    for (w, a) in weights.iter().zip(alpha.iter()) {
                        if a < w {
                            theta = theta.min(w / (w - a));
                        }
                    }
                    for (w, a) in weights.iter_mut().zip(alpha.iter()) {
                        *w = (1.0 - theta) * *w + theta * a;
                    }
                    let keep: Vec<usize> = (0..corral.len())
                        .filter(|&i| weights[i] > 1e-12)
                        .collect();
                    if keep.len() == corral.len() {
                        // No vertex freed despite an infeasible target;
                        // drop the smallest weight to guarantee progress.
                        let drop = (0..corral.len())
                            .min_by(|&a, &b| weights[a].total_cmp(&weights[b]))
                            .expect("nonempty corral");
                        corral.remove(drop);
                        weights.remove(drop);
                    } else {
                        corral = keep.iter().map(|&i| corral[i]).collect();
                        weights = keep.iter().map(|&i| weights[i]).collect();
                    }
                    let total: f64 = weights.iter().sum();
                    for w in weights.iter_mut() {
                        *w /= total;
                    }
                }
                None => {
                    // Singular KKT system (affinely dependent corral):
                    // back out the newest vertex and stop refining.
                    corral.pop();
                    weights.pop();
                    let total: f64 = weights.iter().sum();
                    for w in weights.iter_mut() {
                        *w /= total;
                    }
                    break;
                }
            }
        }

        x.fill(0.0);
        for (&g, &w) in corral.iter().zip(weights.iter()) {
            x.scaled_add(w, &generators[g]);
        }
    }

    let combo = corral.into_iter().zip(weights).collect();
    (x, combo)
}

/// Minimum-norm point of the affine hull of the chosen generators, as
/// affine coordinates; `None` when the KKT system is singular.
fn affine_min_norm(generators: &[Array1<f64>], corral: &[usize]) -> Option<Vec<f64>> {
    let m = corral.len();
    // KKT system of  min αᵀGα  s.t. Σα = 1:  [0 1ᵀ; 1 G][λ; α] = [1; 0].
    let mut a = vec![vec![0.0; m + 1]; m + 1];
    let mut rhs = vec![0.0; m + 1];
    rhs[0] = 1.0;
    for i in 0..m {
        a[0][i + 1] = 1.0;
        a[i + 1][0] = 1.0;
        for j in 0..m {
            a[i + 1][j + 1] = generators[corral[i]].dot(&generators[corral[j]]);
        }
    }
    solve_dense(&mut a, &mut rhs).map(|sol| sol[1..].to_vec())
}

/// Gaussian elimination with partial pivoting on a small dense system.
fn solve_dense(a: &mut [Vec<f64>], b: &mut [f64]) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("nonempty column");
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for col in row + 1..n {
            acc -= a[row][col] * x[col];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

/// One sampled step of a diameter/gap trace.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RatioPoint {
    pub step: usize,
    pub diameter: f64,
    pub distance: f64,
    /// `distance / diameter`; infinite once the diameter hits zero.
    pub ratio: f64,
}

/// Step-by-step evolution of the subset diameter bound `D(t)`, the
/// between-subset gap `L(t)`, and their ratio under diffusion.
#[derive(Debug, Clone)]
pub struct RatioTrace {
    pub points: Vec<RatioPoint>,
    /// Whether the dataset's nonempty subsets coincide with the connected
    /// components of the weight matrix — the regime in which the diameter
    /// decays exponentially while the gap never shrinks. The trace is
    /// still recorded when they do not; treat it as observational then.
    pub subsets_are_components: bool,
}

impl RatioTrace {
    /// CSV export with columns `step,diameter,distance,ratio`.
    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let mut writer = csv::Writer::from_path(path).map_err(|e| Error::csv(&display, e))?;
        writer
            .write_record(["step", "diameter", "distance", "ratio"])
            .map_err(|e| Error::csv(&display, e))?;
        for p in &self.points {
            writer
                .write_record([
                    p.step.to_string(),
                    p.diameter.to_string(),
                    p.distance.to_string(),
                    p.ratio.to_string(),
                ])
                .map_err(|e| Error::csv(&display, e))?;
        }
        writer.flush().map_err(|e| Error::io(&display, e))?;
        Ok(())
    }
}

/// Runs `cfg.steps` diffusion steps over the dataset's coordinates,
/// recording the structured statistics after every step (step 0 is the
/// input).
///
/// The exponential-decay story assumes each subset is a connected component
/// of `w`; the returned flag reports whether that holds, and the trace is
/// recorded either way.
pub fn ratio_trace(
    ds: &StructuredDataset,
    w: &SparseWeights,
    cfg: &DiffusionConfig,
    convention: NormConvention,
) -> Result<RatioTrace> {
    if w.n() != ds.n() {
        return Err(Error::DimensionMismatch(format!(
            "weights are over {} vertices but the dataset has {} points",
            w.n(),
            ds.n()
        )));
    }

    let members = ds.subset_members();
    let component_of = graph::connected_components(w);
    let n_components = component_of.iter().copied().max().map_or(0, |m| m + 1);
    let mut subsets_are_components = true;
    let mut seen = vec![false; n_components];
    let mut nonempty = 0;
    for rows in members.iter().filter(|m| !m.is_empty()) {
        nonempty += 1;
        let c = component_of[rows[0]];
        if rows.iter().any(|&r| component_of[r] != c) || seen[c] {
            subsets_are_components = false;
        }
        seen[c] = true;
    }
    if nonempty != n_components {
        subsets_are_components = false;
    }

    let step_cfg = DiffusionConfig {
        gamma: cfg.gamma,
        steps: 1,
        guard: cfg.guard,
    };
    let mut coords = ds.coords().to_owned();
    let mut points = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        if step > 0 {
            coords = diffusion::diffuse(&coords.view(), w, &step_cfg)?;
        }
        let snapshot = ds.with_coords(coords.clone())?;
        let (diameter, distance) = structured_stats(&snapshot, convention)?;
        points.push(RatioPoint {
            step,
            diameter,
            distance,
            ratio: distance / diameter,
        });
    }
    Ok(RatioTrace {
        points,
        subsets_are_components,
    })
}

/// Stability verdict for one (weights, step size) pair.
///
/// The iteration `x ← x − γ(Λ − W)x` is non-expansive exactly when the
/// spectral radius of `I − γ(Λ − W)` stays within 1; the report includes
/// the Gershgorin disc bounds on that matrix's spectrum (every eigenvalue
/// lies in `[low, high]`), which is the cheap certificate behind the
/// `1/max-degree` step rule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityReport {
    pub n: usize,
    pub gamma: f64,
    pub spectral_radius: f64,
    pub max_degree: f64,
    /// Largest step passing the degree rule, `1 / max_degree`.
    pub degree_bound: f64,
    pub gershgorin_low: f64,
    pub gershgorin_high: f64,
    /// `spectral_radius <= 1 + 1e-9`.
    pub passed: bool,
}

/// Measures the spectral radius of the diffusion iteration matrix
/// `I − γ(Λ − W)` and checks it against 1 (tolerance `1e-9`).
pub fn verify_stability(w: &SparseWeights, gamma: f64) -> Result<StabilityReport> {
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "step size must be finite and nonnegative, got {gamma}"
        )));
    }
    w.check_symmetric(1e-12)?;
    let n = w.n();
    let laplacian = graph::graph_laplacian(w)?;
    let iteration = Array2::<f64>::eye(n) - gamma * &laplacian;
    // Gershgorin discs of the iteration matrix: centre on the diagonal,
    // radius the absolute off-diagonal row sum.
    let mut low = f64::INFINITY;
    let mut high = f64::NEG_INFINITY;
    for i in 0..n {
        let centre = iteration[[i, i]];
        let radius: f64 = (0..n)
            .filter(|&j| j != i)
            .map(|j| iteration[[i, j]].abs())
            .sum();
        low = low.min(centre - radius);
        high = high.max(centre + radius);
    }
    if n == 0 {
        low = 1.0;
        high = 1.0;
    }
    let decomposition =
        eigen::symmetric_eigendecomposition(&iteration.view(), eigen::DEFAULT_EIGEN_LIMIT)?;
    let rho = decomposition.spectral_radius();
    Ok(StabilityReport {
        n,
        gamma,
        spectral_radius: rho,
        max_degree: w.max_degree(),
        degree_bound: diffusion::stability_max_step(w),
        gershgorin_low: low,
        gershgorin_high: high,
        passed: rho <= 1.0 + 1e-9,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::StabilityGuard;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_singletons() -> StructuredDataset {
        StructuredDataset::new(2, 1, array![[0.0, 0.0], [1.0, 0.0]], vec![(0, 0), (1, 0)])
            .unwrap()
    }

    /// Four two-or-three-point subsets on the corner grid realizing the
    /// extreme diameter (1.5) and gap (0.5) of radius-0.75 disks centred on
    /// the unit-2 grid.
    fn corner_grid_extremes() -> StructuredDataset {
        let coords = array![
            // subset (0,0) around (0,0): horizontal diameter + top point
            [-0.75, 0.0],
            [0.75, 0.0],
            [0.0, 0.75],
            // subset (0,1) around (2,2)
            [1.25, 2.0],
            [2.75, 2.0],
            // subset (1,0) around (0,2): bottom point faces (0,0)'s top
            [0.0, 1.25],
            [0.0, 2.75],
            // subset (1,1) around (2,0)
            [2.0, -0.75],
            [2.0, 0.75],
        ];
        let tags = vec![
            (0, 0),
            (0, 0),
            (0, 0),
            (0, 1),
            (0, 1),
            (1, 0),
            (1, 0),
            (1, 1),
            (1, 1),
        ];
        StructuredDataset::new(2, 2, coords, tags).unwrap()
    }

    #[test]
    fn stats_of_two_singletons() {
        let ds = two_singletons();
        let (d, l) = structured_stats(&ds, NormConvention::Unsquared).unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(l, 1.0);
    }

    #[test]
    fn corner_grid_stats_match_both_conventions() {
        let ds = corner_grid_extremes();
        let (d, l) = structured_stats(&ds, NormConvention::Unsquared).unwrap();
        assert!((d - 1.5).abs() < 1e-12, "diameter {d}");
        assert!((l - 0.5).abs() < 1e-12, "gap {l}");
        let (d2, l2) = structured_stats(&ds, NormConvention::Squared).unwrap();
        assert!((d2 - 2.25).abs() < 1e-12);
        assert!((l2 - 0.25).abs() < 1e-12);
    }

    #[test]
    fn single_subset_has_no_gap() {
        let ds =
            StructuredDataset::new(1, 1, array![[0.0], [1.0]], vec![(0, 0), (0, 0)]).unwrap();
        assert!(matches!(
            structured_stats(&ds, NormConvention::Unsquared),
            Err(Error::SingleSubset)
        ));
    }

    #[test]
    fn threshold_values_and_monotonicity() {
        assert!((separation_threshold(2, 1) - 0.886_226_925_452_758_0).abs() < 1e-15);
        assert!((separation_threshold(4, 2) - 10.634_723_105_433_096).abs() < 1e-14);
        for m in 2..6 {
            for d in 1..6 {
                assert!(separation_threshold(m + 1, d) > separation_threshold(m, d));
                assert!(separation_threshold(m, d + 1) > separation_threshold(m, d));
            }
        }
    }

    #[test]
    fn axis_split_is_found_by_the_sweep() {
        let coords = array![[-2.0, 0.3], [-1.0, -0.4], [1.0, 0.2], [2.0, -0.1]];
        let ds =
            StructuredDataset::new(2, 1, coords, vec![(0, 0), (0, 0), (1, 0), (1, 0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = check_parallel_separable(&ds, 100, &mut rng)
            .unwrap()
            .expect("axis-separated subsets have a witness");
        // The witness must actually separate the projections.
        let p: Vec<f64> = (0..4).map(|i| ds.coords().row(i).dot(&w)).collect();
        let c0_min = p[0].min(p[1]);
        let c0_max = p[0].max(p[1]);
        let c1_min = p[2].min(p[3]);
        let c1_max = p[2].max(p[3]);
        assert!(c0_max < c1_min || c1_max < c0_min);
    }

    #[test]
    fn concentric_rings_are_proven_inseparable() {
        // Eight points per ring; any direction projects the outer ring onto
        // an interval containing the inner one.
        let mut coords = Vec::new();
        let mut tags = Vec::new();
        for i in 0..8 {
            let t = std::f64::consts::TAU * i as f64 / 8.0;
            coords.push([t.cos(), t.sin()]);
            tags.push((0, 0));
        }
        for i in 0..8 {
            let t = std::f64::consts::TAU * (i as f64 + 0.5) / 8.0;
            coords.push([2.0 * t.cos(), 2.0 * t.sin()]);
            tags.push((1, 0));
        }
        let flat: Vec<f64> = coords.iter().flatten().copied().collect();
        let coords = Array2::from_shape_vec((16, 2), flat).unwrap();
        let ds = StructuredDataset::new(2, 1, coords, tags).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        assert!(check_parallel_separable(&ds, 10, &mut rng)
            .unwrap()
            .is_none());
    }

    #[test]
    fn randomized_search_works_above_the_plane() {
        let coords = array![
            [0.0, 0.0, 0.0],
            [0.1, 0.1, -0.1],
            [5.0, 5.0, 5.0],
            [5.1, 4.9, 5.0]
        ];
        let ds =
            StructuredDataset::new(2, 1, coords, vec![(0, 0), (0, 0), (1, 0), (1, 0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(check_parallel_separable(&ds, 1000, &mut rng)
            .unwrap()
            .is_some());
    }

    #[test]
    fn single_point_flow_lands_exactly() {
        let points = array![[3.0, -2.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let schedule =
            construct_separating_flow(&points.view(), &[1], &FlowConfig::default(), &mut rng)
                .unwrap();
        assert_eq!(schedule.n_pieces(), 1);
        let out = apply_flow(&points.view(), &schedule).unwrap();
        assert!((out[[0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn corner_points_reach_their_targets_and_separate() {
        let points = array![[0.0, 0.0], [0.0, 2.0], [2.0, 0.0], [2.0, 2.0]];
        let labels = [0usize, 1, 1, 0];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let schedule =
            construct_separating_flow(&points.view(), &labels, &FlowConfig::default(), &mut rng)
                .unwrap();
        assert_eq!(schedule.n_pieces(), 4);
        let out = apply_flow(&points.view(), &schedule).unwrap();
        for (i, &label) in labels.iter().enumerate() {
            let target = if label == 0 { 0.0 } else { 1.0 };
            assert!(
                (out[[i, 0]] - target).abs() < 1e-10,
                "point {i} landed at {}",
                out[[i, 0]]
            );
        }
        // Projections onto the gating direction are flow invariants.
        let w = schedule.w_star();
        for i in 0..4 {
            let before = points.row(i).dot(&w);
            let after = out.row(i).dot(&w);
            assert!((before - after).abs() < 1e-12);
        }
        assert!(linear_separability(&out.view(), &labels)
            .unwrap()
            .is_separable());
    }

    #[test]
    fn width_two_halves_the_pieces() {
        let points = array![[0.0, 0.0], [0.0, 2.0], [2.0, 0.0], [2.0, 2.0]];
        let labels = [0usize, 1, 1, 0];
        let cfg = FlowConfig {
            width: 2,
            ..FlowConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let schedule = construct_separating_flow(&points.view(), &labels, &cfg, &mut rng).unwrap();
        assert_eq!(schedule.n_pieces(), 2);
        let out = apply_flow(&points.view(), &schedule).unwrap();
        for (i, &label) in labels.iter().enumerate() {
            let target = if label == 0 { 0.0 } else { 1.0 };
            assert!((out[[i, 0]] - target).abs() < 1e-10);
        }
    }

    #[test]
    fn duplicate_points_cannot_be_projected_apart() {
        let points = array![[1.0, 1.0], [1.0, 1.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = FlowConfig {
            max_retries: 10,
            ..FlowConfig::default()
        };
        assert!(matches!(
            construct_separating_flow(&points.view(), &[0, 1], &cfg, &mut rng),
            Err(Error::DegenerateProjection { retries: 10 })
        ));
    }

    #[test]
    fn flow_needs_two_dimensions() {
        let points = array![[0.0], [1.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            construct_separating_flow(&points.view(), &[0, 1], &FlowConfig::default(), &mut rng),
            Err(Error::FlowDimension(1))
        ));
    }

    #[test]
    fn zero_strength_schedule_is_the_identity() {
        let w = Array1::from_vec(vec![0.0, 1.0]);
        let beta = drift_direction(&w.view()).unwrap();
        let schedule = FlowSchedule::new(
            w,
            beta,
            vec![FlowPiece {
                t_start: 0.0,
                t_end: 1.0,
                neurons: vec![FlowNeuron {
                    lambda: 0.0,
                    bias: 0.3,
                }],
            }],
            FlowTargets::Points {
                c_low: 0.0,
                c_high: 1.0,
            },
        )
        .unwrap();
        let points = array![[0.4, -1.0], [2.0, 3.0]];
        let out = apply_flow(&points.view(), &schedule).unwrap();
        assert_eq!(out, points);
    }

    #[test]
    fn region_flow_translates_subsets_into_their_slabs() {
        // Four tight clusters on the corner grid.
        let mut coords = Vec::new();
        let mut tags = Vec::new();
        let centres = [
            ((0.0f64, 0.0f64), (0usize, 0usize)),
            ((2.0, 2.0), (0, 1)),
            ((0.0, 2.0), (1, 0)),
            ((2.0, 0.0), (1, 1)),
        ];
        for &((cx, cy), tag) in &centres {
            for (dx, dy) in [(-0.05, 0.0), (0.05, 0.0), (0.0, 0.05)] {
                coords.push([cx + dx, cy + dy]);
                tags.push(tag);
            }
        }
        let flat: Vec<f64> = coords.iter().flatten().copied().collect();
        let coords = Array2::from_shape_vec((12, 2), flat).unwrap();
        let ds = StructuredDataset::new(2, 2, coords.clone(), tags.clone()).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let schedule = construct_region_flow(&ds, &FlowConfig::default(), 1000, &mut rng).unwrap();
        assert_eq!(schedule.n_pieces(), 4);
        let out = apply_flow(&coords.view(), &schedule).unwrap();
        let FlowTargets::Intervals { low, high } = schedule.targets() else {
            panic!("region mode must produce interval targets");
        };
        assert!(low.1 < high.0, "class intervals must be disjoint");
        for (i, &(class, _)) in tags.iter().enumerate() {
            let (a, b) = if class == 0 { low } else { high };
            let v = out[[i, 0]];
            assert!(
                v >= a - 1e-9 && v <= b + 1e-9,
                "point {i} of class {class} landed at {v}, outside [{a}, {b}]"
            );
        }
        // Rigid translation: within-subset geometry is untouched.
        for (i, &ta) in tags.iter().enumerate() {
            for (j, &tb) in tags.iter().enumerate().skip(i + 1) {
                if ta == tb {
                    let before = sq_dist(coords.row(i), coords.row(j)).sqrt();
                    let after = sq_dist(out.row(i), out.row(j)).sqrt();
                    assert!((before - after).abs() < 1e-9);
                }
            }
        }
        let labels: Vec<usize> = tags.iter().map(|&(c, _)| c).collect();
        assert!(linear_separability(&out.view(), &labels)
            .unwrap()
            .is_separable());
    }

    #[test]
    fn wider_region_flow_uses_fewer_pieces() {
        let mut coords = Vec::new();
        let mut tags = Vec::new();
        let centres = [
            ((0.0f64, 0.0f64), (0usize, 0usize)),
            ((2.0, 2.0), (0, 1)),
            ((0.0, 2.0), (1, 0)),
            ((2.0, 0.0), (1, 1)),
        ];
        for &((cx, cy), tag) in &centres {
            for dx in [-0.05, 0.05] {
                coords.push([cx + dx, cy]);
                tags.push(tag);
            }
        }
        let flat: Vec<f64> = coords.iter().flatten().copied().collect();
        let coords = Array2::from_shape_vec((8, 2), flat).unwrap();
        let ds = StructuredDataset::new(2, 2, coords.clone(), tags.clone()).unwrap();
        let cfg = FlowConfig {
            width: 4, // two push–pull pairs per piece
            ..FlowConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let schedule = construct_region_flow(&ds, &cfg, 1000, &mut rng).unwrap();
        assert_eq!(schedule.n_pieces(), 2);
        let out = apply_flow(&coords.view(), &schedule).unwrap();
        let FlowTargets::Intervals { low, high } = schedule.targets() else {
            panic!("region mode must produce interval targets");
        };
        for (i, &(class, _)) in tags.iter().enumerate() {
            let (a, b) = if class == 0 { low } else { high };
            let v = out[[i, 0]];
            assert!(v >= a - 1e-9 && v <= b + 1e-9);
        }
    }

    #[test]
    fn region_flow_rejects_inseparable_subsets() {
        // Inner and outer ring again: no parallel-hyperplane witness.
        let mut coords = Vec::new();
        let mut tags = Vec::new();
        for i in 0..6 {
            let t = std::f64::consts::TAU * i as f64 / 6.0;
            coords.push([t.cos(), t.sin()]);
            tags.push((0, 0));
            coords.push([3.0 * t.cos(), 3.0 * t.sin()]);
            tags.push((1, 0));
        }
        let flat: Vec<f64> = coords.iter().flatten().copied().collect();
        let coords = Array2::from_shape_vec((12, 2), flat).unwrap();
        let ds = StructuredDataset::new(2, 1, coords, tags).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            construct_region_flow(&ds, &FlowConfig::default(), 50, &mut rng),
            Err(Error::NotParallelSeparable { .. })
        ));
    }

    #[test]
    fn first_axis_split_is_separable_with_witness() {
        let points = array![[-2.0, 1.0], [-1.0, -1.0], [1.0, 0.5], [2.0, -0.5]];
        let labels = [0usize, 0, 1, 1];
        match linear_separability(&points.view(), &labels).unwrap() {
            Separability::Separable {
                normal,
                offset,
                margin,
            } => {
                assert!(margin > 0.0);
                for (i, &label) in labels.iter().enumerate() {
                    let side = points.row(i).dot(&normal) + offset;
                    assert!(if label == 1 { side > 0.0 } else { side < 0.0 });
                }
            }
            Separability::Overlapping { .. } => panic!("split data misclassified as overlapping"),
        }
    }

    #[test]
    fn diagonal_corners_are_not_separable() {
        let points = array![[0.0, 0.0], [2.0, 2.0], [0.0, 2.0], [2.0, 0.0]];
        let labels = [0usize, 0, 1, 1];
        match linear_separability(&points.view(), &labels).unwrap() {
            Separability::Overlapping { witness, gap } => {
                assert!(gap < 1e-9, "hull gap should vanish, got {gap}");
                // The witness sits in both hulls; for this symmetric
                // configuration the grid centre is forced.
                assert!((witness[0] - 1.0).abs() < 1e-6);
                assert!((witness[1] - 1.0).abs() < 1e-6);
            }
            Separability::Separable { .. } => panic!("diagonal corners are famously inseparable"),
        }
    }

    #[test]
    fn one_sided_data_is_trivially_separable() {
        let points = array![[0.0, 0.0], [1.0, 1.0]];
        let verdict = linear_separability(&points.view(), &[1, 1]).unwrap();
        assert!(verdict.is_separable());
    }

    #[test]
    fn ratio_trace_is_constant_at_zero_strength() {
        let ds = two_singletons();
        let w = SparseWeights::from_triples(2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let cfg = DiffusionConfig::new(0.0, 5);
        let trace = ratio_trace(&ds, &w, &cfg, NormConvention::Unsquared).unwrap();
        assert_eq!(trace.points.len(), 6);
        for p in &trace.points {
            assert_eq!(p.distance, 1.0);
        }
    }

    #[test]
    fn paired_components_shrink_at_the_spectral_gap_rate() {
        // Two 2-point components; within a component the difference decays
        // by the factor 1 − γλ₂ per step with λ₂ = 2.
        let coords = array![[0.0, 0.0], [0.5, 0.0], [2.0, 0.0], [2.5, 0.0]];
        let tags = vec![(0, 0), (0, 0), (1, 0), (1, 0)];
        let ds = StructuredDataset::new(2, 1, coords, tags).unwrap();
        let w =
            SparseWeights::from_triples(4, &[(0, 1, 1.0), (1, 0, 1.0), (2, 3, 1.0), (3, 2, 1.0)])
                .unwrap();
        let gamma = 0.25;
        let cfg = DiffusionConfig::new(gamma, 8);
        let trace = ratio_trace(&ds, &w, &cfg, NormConvention::Unsquared).unwrap();
        assert!(trace.subsets_are_components);
        let factor = 1.0 - gamma * 2.0;
        for pair in trace.points.windows(2) {
            assert!(
                (pair[1].diameter - factor * pair[0].diameter).abs() < 1e-12,
                "diameter should contract by {factor} per step"
            );
            assert!(pair[1].distance >= pair[0].distance - 1e-12);
            assert!(pair[1].ratio > pair[0].ratio);
        }
    }

    #[test]
    fn trace_flags_subsets_that_span_components() {
        let coords = array![[0.0, 0.0], [1.0, 0.0]];
        let ds = StructuredDataset::new(2, 1, coords, vec![(0, 0), (1, 0)]).unwrap();
        // Two singleton components align with the two singleton subsets.
        let w = SparseWeights::from_triples(2, &[]).unwrap();
        let cfg = DiffusionConfig::new(0.1, 1);
        let trace = ratio_trace(&ds, &w, &cfg, NormConvention::Unsquared).unwrap();
        assert!(trace.subsets_are_components);

        // Bridging the subsets with one edge makes a single component.
        let w = SparseWeights::from_triples(2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let trace = ratio_trace(&ds, &w, &cfg, NormConvention::Unsquared).unwrap();
        assert!(!trace.subsets_are_components);
    }

    #[test]
    fn stability_report_at_the_degree_bound() {
        let w =
            SparseWeights::from_triples(3, &[(0, 1, 1.0), (1, 0, 1.0), (1, 2, 1.0), (2, 1, 1.0)])
                .unwrap();
        let gamma = diffusion::stability_max_step(&w); // 1 / 2
        let report = verify_stability(&w, gamma).unwrap();
        assert!((report.spectral_radius - 1.0).abs() < 1e-9);
        assert!(report.passed);
        assert_eq!(report.degree_bound, 0.5);
        assert!(report.gershgorin_low <= -1.0 + 1e-12);
        assert!(report.gershgorin_high >= 1.0 - 1e-12);
    }

    #[test]
    fn doubled_step_on_an_edge_fails() {
        let w = SparseWeights::from_triples(2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let report = verify_stability(&w, 2.0).unwrap();
        // Eigenvalue 1 − 2γ·d = −3 on the alternating mode.
        assert!((report.spectral_radius - 3.0).abs() < 1e-9);
        assert!(!report.passed);
    }

    #[test]
    fn vanishing_step_passes() {
        let w = SparseWeights::from_triples(2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let report = verify_stability(&w, 1e-6).unwrap();
        assert!(report.passed);
        assert!(report.spectral_radius <= 1.0 + 1e-12);
    }

    #[test]
    fn trace_csv_has_one_row_per_step() {
        let ds = two_singletons();
        let w = SparseWeights::from_triples(2, &[]).unwrap();
        let cfg = DiffusionConfig::new(0.0, 2).with_guard(StabilityGuard::Off);
        let trace = ratio_trace(&ds, &w, &cfg, NormConvention::Unsquared).unwrap();
        let path = std::env::temp_dir().join(format!(
            "diffres-trace-{}-{}.csv",
            std::process::id(),
            line!()
        ));
        trace.write_csv(&path).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        std::fs::remove_file(&path).ok();
        let mut lines = body.lines();
        assert_eq!(lines.next(), Some("step,diameter,distance,ratio"));
        assert_eq!(lines.count(), 3);
    }
}
