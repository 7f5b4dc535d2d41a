//! Weighted graphs over point clouds.
//!
//! The pipeline that turns raw coordinates into diffusion weights:
//!
//! ```text
//! gaussian_kernel -> zero diagonal -> sparsify_topk -> symmetrize -> normalize_symmetric
//! ```
//!
//! [`build_weight_matrix`] runs the whole chain. Every stage is exposed
//! because the theory checks poke at intermediate objects (e.g. spectral
//! bounds want the normalized matrix, separation experiments want the raw
//! kernel).
//!
//! What can go wrong, and how it surfaces:
//! - duplicate points with an adaptive bandwidth -> [`Error::DegenerateBandwidth`],
//! - a vertex that lost every edge in sparsification -> [`Error::IsolatedVertex`]
//!   at the normalization stage,
//! - hand-built weights that are not symmetric -> [`Error::Asymmetric`] from
//!   any operation that requires symmetry (Laplacian, normalization).
//!
//! Determinism: ties in the per-row top-k cut resolve toward the lower column
//! index, so the same input always yields bit-identical weights.

use ndarray::{Array2, ArrayView2};
use std::collections::BTreeMap;
use std::path::Path;

use crate::eigen;
use crate::error::{Error, Result};

/// Bandwidth rule for the Gaussian kernel `exp(-||x - y||^2 / sigma^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaRule {
    /// One global bandwidth.
    Fixed(f64),
    /// Per-point bandwidth: the distance to the point's k-th nearest
    /// neighbour. Makes the raw kernel row-dependent (asymmetric).
    Adaptive(usize),
}

/// Symmetric nonnegative weights stored as sorted per-row `(column, weight)`
/// pairs. The diagonal is zero unless self-loops are explicitly added.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseWeights {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
    degrees: Vec<f64>,
}

impl SparseWeights {
    pub fn from_rows(n: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if rows.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} rows for n = {n}",
                rows.len()
            )));
        }
        for (i, row) in rows.iter().enumerate() {
            let mut last: Option<usize> = None;
            for &(j, w) in row {
                if j >= n {
                    return Err(Error::DimensionMismatch(format!(
                        "column {j} out of range in row {i}"
                    )));
                }
                if let Some(prev) = last {
                    if j <= prev {
                        return Err(Error::DimensionMismatch(format!(
                            "row {i} columns not strictly ascending at {j}"
                        )));
                    }
                }
                last = Some(j);
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::BadWeight { i, j, value: w });
                }
            }
        }
        let degrees = rows
            .iter()
            .map(|row| row.iter().map(|&(_, w)| w).sum())
            .collect();
        Ok(SparseWeights { n, rows, degrees })
    }

    pub fn from_triples(n: usize, triples: &[(usize, usize, f64)]) -> Result<Self> {
        let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for &(i, j, w) in triples {
            if i >= n || j >= n {
                return Err(Error::EdgeOutOfRange { u: i, v: j, n });
            }
            maps[i].insert(j, w);
        }
        let rows = maps
            .into_iter()
            .map(|m| m.into_iter().collect())
            .collect();
        SparseWeights::from_rows(n, rows)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// Row sums, including any diagonal entries.
    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn max_degree(&self) -> f64 {
        self.degrees.iter().fold(0.0_f64, |acc, &d| acc.max(d))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self.rows[i].binary_search_by_key(&j, |&(c, _)| c) {
            Ok(pos) => self.rows[i][pos].1,
            Err(_) => 0.0,
        }
    }

    /// Errors on the first entry where `|w_ij - w_ji|` exceeds `tol`.
    pub fn check_symmetric(&self, tol: f64) -> Result<()> {
        for i in 0..self.n {
            for &(j, w) in &self.rows[i] {
                let back = self.get(j, i);
                if (w - back).abs() > tol {
                    return Err(Error::Asymmetric {
                        i,
                        j,
                        a: w,
                        b: back,
                    });
                }
            }
        }
        Ok(())
    }

    /// `W x` for a stack of column signals (`x` is n-by-d).
    pub fn matmul(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "signal has {} rows, graph has {} vertices",
                x.nrows(),
                self.n
            )));
        }
        let d = x.ncols();
        let mut out = Array2::<f64>::zeros((self.n, d));
        for i in 0..self.n {
            for &(j, w) in &self.rows[i] {
                for c in 0..d {
                    out[[i, c]] += w * x[[j, c]];
                }
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((self.n, self.n));
        for i in 0..self.n {
            for &(j, w) in &self.rows[i] {
                out[[i, j]] = w;
            }
        }
        out
    }

    /// Adds `value` to every diagonal entry (used for self-loops).
    pub fn add_self_loops(&self, value: f64) -> Result<SparseWeights> {
        let mut rows = self.rows.clone();
        for (i, row) in rows.iter_mut().enumerate() {
            match row.binary_search_by_key(&i, |&(c, _)| c) {
                Ok(pos) => row[pos].1 += value,
                Err(pos) => row.insert(pos, (i, value)),
            }
        }
        SparseWeights::from_rows(self.n, rows)
    }

    /// Restriction to `indices`, which must be strictly increasing. Weights
    /// are copied as-is; batch pipelines re-normalize the result.
    pub fn submatrix(&self, indices: &[usize]) -> Result<SparseWeights> {
        let mut pos = vec![usize::MAX; self.n];
        let mut last: Option<usize> = None;
        for (k, &i) in indices.iter().enumerate() {
            if i >= self.n {
                return Err(Error::DimensionMismatch(format!(
                    "index {i} out of range for {} vertices",
                    self.n
                )));
            }
            if let Some(prev) = last {
                if i <= prev {
                    return Err(Error::DimensionMismatch(
                        "submatrix indices must be strictly increasing".into(),
                    ));
                }
            }
            last = Some(i);
            pos[i] = k;
        }
        let rows = indices
            .iter()
            .map(|&i| {
                self.rows[i]
                    .iter()
                    .filter(|&&(j, _)| pos[j] != usize::MAX)
                    .map(|&(j, w)| (pos[j], w))
                    .collect()
            })
            .collect();
        SparseWeights::from_rows(indices.len(), rows)
    }

    pub fn triples(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.nnz());
        for i in 0..self.n {
            for &(j, w) in &self.rows[i] {
                out.push((i, j, w));
            }
        }
        out
    }

    /// CSV export: header `i,j,w`, one stored entry per line, row-major.
    pub fn write_triples_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::csv(&display, e))?;
        wtr.write_record(["i", "j", "w"])
            .map_err(|e| Error::csv(&display, e))?;
        for (i, j, w) in self.triples() {
            wtr.write_record([i.to_string(), j.to_string(), w.to_string()])
                .map_err(|e| Error::csv(&display, e))?;
        }
        wtr.flush().map_err(|e| Error::io(&display, e))?;
        Ok(())
    }
}

fn check_finite_coords(points: &ArrayView2<f64>) -> Result<()> {
    for (i, row) in points.outer_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite coordinate at row {i}"
            )));
        }
    }
    Ok(())
}

fn squared_distances(points: &ArrayView2<f64>) -> Array2<f64> {
    let n = points.nrows();
    let mut d2 = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for c in 0..points.ncols() {
                let diff = points[[i, c]] - points[[j, c]];
                s += diff * diff;
            }
            d2[[i, j]] = s;
            d2[[j, i]] = s;
        }
    }
    d2
}

/// Dense Gaussian kernel matrix. With [`SigmaRule::Adaptive`] the bandwidth
/// of row `i` is the distance from point `i` to its k-th nearest neighbour,
/// so the result is generally asymmetric; the unit diagonal is kept and
/// callers zero it before sparsification.
pub fn gaussian_kernel(points: &ArrayView2<f64>, sigma: &SigmaRule) -> Result<Array2<f64>> {
    let n = points.nrows();
    if n < 2 {
        return Err(Error::TooFewPoints { need: 2, got: n });
    }
    check_finite_coords(points)?;
    let d2 = squared_distances(points);
    let sigma_sq: Vec<f64> = match *sigma {
        SigmaRule::Fixed(s) => {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::BadBandwidth(s));
            }
            vec![s * s; n]
        }
        SigmaRule::Adaptive(k) => {
            if k == 0 || k >= n {
                return Err(Error::BadBandwidthRank { k, n });
            }
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let mut others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d2[[i, j]]).collect();
                others.select_nth_unstable_by(k - 1, f64::total_cmp);
                let kth = others[k - 1];
                if kth == 0.0 {
                    return Err(Error::DegenerateBandwidth { point: i, k });
                }
                out.push(kth);
            }
            out
        }
    };
    let mut w = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            w[[i, j]] = (-d2[[i, j]] / sigma_sq[i]).exp();
        }
    }
    Ok(w)
}

/// Keeps the `n_top` largest off-diagonal entries of each row, zeroing the
/// rest. A tie at the cut keeps the lower column index. Exact zeros are not
/// stored: a weight of zero is no edge.
pub fn sparsify_topk(w: &ArrayView2<f64>, n_top: usize) -> Result<SparseWeights> {
    let n = eigen::check_square(w)?;
    if n_top == 0 || n_top >= n {
        return Err(Error::BadTopK { n_top, n });
    }
    for ((i, j), &v) in w.indexed_iter() {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::BadWeight { i, j, value: v });
        }
    }
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut cand: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, w[[i, j]]))
            .collect();
        cand.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        cand.truncate(n_top);
        cand.retain(|&(_, v)| v > 0.0);
        cand.sort_unstable_by_key(|&(j, _)| j);
        rows.push(cand);
    }
    SparseWeights::from_rows(n, rows)
}

/// `w_ij <- max(w_ij, w_ji)`. The result is exactly symmetric (both sides
/// are written from the same value).
pub fn symmetrize(w: &SparseWeights) -> SparseWeights {
    let n = w.n();
    let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
    for (i, j, v) in w.triples() {
        let a = maps[i].entry(j).or_insert(f64::NEG_INFINITY);
        *a = a.max(v);
        let b = maps[j].entry(i).or_insert(f64::NEG_INFINITY);
        *b = b.max(v);
    }
    let rows = maps
        .into_iter()
        .map(|m| m.into_iter().collect())
        .collect();
    SparseWeights::from_rows(n, rows).expect("max of valid weights stays valid")
}

/// `W' = D^(-1/2) W D^(-1/2)` with `D = diag(row sums of the input)`.
/// Requires symmetry and strictly positive degrees; preserves both the
/// sparsity pattern and symmetry.
pub fn normalize_symmetric(w: &SparseWeights) -> Result<SparseWeights> {
    w.check_symmetric(1e-12)?;
    let inv_sqrt: Vec<f64> = w
        .degrees()
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            if d > 0.0 {
                Ok(1.0 / d.sqrt())
            } else {
                Err(Error::IsolatedVertex(i))
            }
        })
        .collect::<Result<_>>()?;
    let rows = (0..w.n())
        .map(|i| {
            w.row(i)
                .iter()
                // The scale product is formed first so w'_ij and w'_ji round
                // identically: the result is bitwise symmetric.
                .map(|&(j, v)| (j, v * (inv_sqrt[i] * inv_sqrt[j])))
                .collect()
        })
        .collect();
    SparseWeights::from_rows(w.n(), rows)
}

/// The full pipeline: Gaussian kernel, zeroed diagonal, per-row top-k cut,
/// max-symmetrization, symmetric normalization.
pub fn build_weight_matrix(
    points: &ArrayView2<f64>,
    n_top: usize,
    sigma: &SigmaRule,
) -> Result<SparseWeights> {
    let mut kernel = gaussian_kernel(points, sigma)?;
    for i in 0..kernel.nrows() {
        kernel[[i, i]] = 0.0;
    }
    let sparse = sparsify_topk(&kernel.view(), n_top)?;
    normalize_symmetric(&symmetrize(&sparse))
}

/// Dense `L = Lambda - W` with `Lambda = diag(row sums)`. Rows sum to zero
/// and the matrix is positive semidefinite for symmetric nonnegative `W`.
pub fn graph_laplacian(w: &SparseWeights) -> Result<Array2<f64>> {
    w.check_symmetric(1e-12)?;
    let n = w.n();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        l[[i, i]] = w.degrees()[i];
        for &(j, v) in w.row(i) {
            l[[i, j]] -= v;
        }
    }
    Ok(l)
}

/// Component id per vertex; ids are assigned in order of first discovery, so
/// vertex 0 is always in component 0. Stored zero-weight entries do not
/// connect.
pub fn connected_components(w: &SparseWeights) -> Vec<usize> {
    let n = w.n();
    let mut comp = vec![usize::MAX; n];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            for &(j, v) in w.row(i) {
                if v > 0.0 && comp[j] == usize::MAX {
                    comp[j] = next;
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    comp
}

/// Number of connected components.
pub fn component_count(w: &SparseWeights) -> usize {
    connected_components(w).iter().max().map_or(0, |m| m + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eigen::symmetric_eigendecomposition;
    use ndarray::array;
    use proptest::prelude::*;

    fn line_points() -> Array2<f64> {
        array![[0.0], [1.0], [3.0]]
    }

    #[test]
    fn kernel_fixed_hand_values() {
        let w = gaussian_kernel(&line_points().view(), &SigmaRule::Fixed(1.0)).unwrap();
        assert_eq!(w[[0, 0]], 1.0);
        assert!((w[[0, 1]] - (-1.0_f64).exp()).abs() < 1e-15);
        assert!((w[[0, 2]] - (-9.0_f64).exp()).abs() < 1e-15);
        assert!((w[[1, 2]] - (-4.0_f64).exp()).abs() < 1e-15);
        assert_eq!(w[[1, 2]], w[[2, 1]]);
    }

    #[test]
    fn kernel_adaptive_bandwidth_is_per_row() {
        // Nearest-neighbour distances: sigma_0 = 1, sigma_1 = 1, sigma_2 = 2.
        let w = gaussian_kernel(&line_points().view(), &SigmaRule::Adaptive(1)).unwrap();
        assert!((w[[1, 2]] - (-4.0_f64).exp()).abs() < 1e-15);
        assert!((w[[2, 1]] - (-1.0_f64).exp()).abs() < 1e-15);
        assert!((w[[2, 0]] - (-9.0_f64 / 4.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn kernel_adaptive_duplicate_points_error() {
        let pts = array![[1.0, 2.0], [1.0, 2.0], [5.0, 5.0]];
        let err = gaussian_kernel(&pts.view(), &SigmaRule::Adaptive(1)).unwrap_err();
        assert!(matches!(err, Error::DegenerateBandwidth { .. }));
    }

    #[test]
    fn kernel_parameter_validation() {
        let pts = line_points();
        assert!(matches!(
            gaussian_kernel(&pts.view(), &SigmaRule::Fixed(0.0)),
            Err(Error::BadBandwidth(_))
        ));
        assert!(matches!(
            gaussian_kernel(&pts.view(), &SigmaRule::Adaptive(0)),
            Err(Error::BadBandwidthRank { .. })
        ));
        assert!(matches!(
            gaussian_kernel(&pts.view(), &SigmaRule::Adaptive(3)),
            Err(Error::BadBandwidthRank { .. })
        ));
        let single = array![[0.0]];
        assert!(matches!(
            gaussian_kernel(&single.view(), &SigmaRule::Fixed(1.0)),
            Err(Error::TooFewPoints { .. })
        ));
    }

    #[test]
    fn topk_keeps_largest_and_breaks_ties_low() {
        let w = array![
            [0.0, 0.5, 0.5, 0.9],
            [0.5, 0.0, 0.1, 0.2],
            [0.5, 0.1, 0.0, 0.3],
            [0.9, 0.2, 0.3, 0.0]
        ];
        let s = sparsify_topk(&w.view(), 2).unwrap();
        // Row 0: 0.9 at column 3, then the 0.5 tie resolves to column 1.
        assert_eq!(s.row(0), &[(1, 0.5), (3, 0.9)]);
        assert_eq!(s.row(1), &[(0, 0.5), (3, 0.2)]);
    }

    #[test]
    fn topk_full_width_matches_dense_pattern() {
        let pts = array![[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [3.0, 1.0]];
        let k = gaussian_kernel(&pts.view(), &SigmaRule::Fixed(1.0)).unwrap();
        let mut k0 = k.clone();
        for i in 0..4 {
            k0[[i, i]] = 0.0;
        }
        let s = sparsify_topk(&k0.view(), 3).unwrap();
        for i in 0..4 {
            assert_eq!(s.row(i).len(), 3);
            for &(j, v) in s.row(i) {
                assert_eq!(v, k0[[i, j]]);
            }
        }
    }

    #[test]
    fn topk_drops_exact_zeros() {
        let w = array![[0.0, 0.0, 0.7], [0.0, 0.0, 0.0], [0.7, 0.0, 0.0]];
        let s = sparsify_topk(&w.view(), 2).unwrap();
        assert_eq!(s.row(0), &[(2, 0.7)]);
        assert!(s.row(1).is_empty());
    }

    #[test]
    fn topk_rejects_bad_input() {
        let w = array![[0.0, -0.1], [0.3, 0.0]];
        assert!(matches!(
            sparsify_topk(&w.view(), 1),
            Err(Error::BadWeight { .. })
        ));
        let ok = array![[0.0, 0.1], [0.3, 0.0]];
        assert!(matches!(
            sparsify_topk(&ok.view(), 2),
            Err(Error::BadTopK { .. })
        ));
    }

    #[test]
    fn symmetrize_takes_elementwise_max() {
        let w = SparseWeights::from_triples(3, &[(0, 1, 0.2), (1, 0, 0.7), (2, 0, 0.4)]).unwrap();
        let s = symmetrize(&w);
        assert_eq!(s.get(0, 1), 0.7);
        assert_eq!(s.get(1, 0), 0.7);
        assert_eq!(s.get(0, 2), 0.4);
        assert_eq!(s.get(2, 0), 0.4);
        s.check_symmetric(0.0).unwrap();
    }

    #[test]
    fn normalize_triangle_gives_half_weights() {
        let w = SparseWeights::from_triples(
            3,
            &[
                (0, 1, 1.0),
                (1, 0, 1.0),
                (0, 2, 1.0),
                (2, 0, 1.0),
                (1, 2, 1.0),
                (2, 1, 1.0),
            ],
        )
        .unwrap();
        let n = normalize_symmetric(&w).unwrap();
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            assert!((n.get(i, j) - 0.5).abs() < 1e-15);
        }
        for &d in n.degrees() {
            assert!((d - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_errors_on_isolated_vertex() {
        let w = SparseWeights::from_triples(3, &[(0, 1, 0.5), (1, 0, 0.5)]).unwrap();
        assert!(matches!(
            normalize_symmetric(&w),
            Err(Error::IsolatedVertex(2))
        ));
    }

    #[test]
    fn normalize_requires_symmetry() {
        let w = SparseWeights::from_triples(2, &[(0, 1, 0.5)]).unwrap();
        assert!(matches!(
            normalize_symmetric(&w),
            Err(Error::Asymmetric { .. })
        ));
    }

    #[test]
    fn build_two_points_is_unit_exchange() {
        let pts = array![[0.0, 0.0], [1.5, 0.0]];
        let w = build_weight_matrix(&pts.view(), 1, &SigmaRule::Fixed(1.0)).unwrap();
        assert!((w.get(0, 1) - 1.0).abs() < 1e-15);
        assert_eq!(w.get(0, 1), w.get(1, 0));
        assert_eq!(w.get(0, 0), 0.0);
        assert_eq!(w.nnz(), 2);
    }

    #[test]
    fn two_point_laplacian_spectrum() {
        let pts = array![[0.0], [2.0]];
        let w = build_weight_matrix(&pts.view(), 1, &SigmaRule::Fixed(1.0)).unwrap();
        let l = graph_laplacian(&w).unwrap();
        let want = array![[1.0, -1.0], [-1.0, 1.0]];
        for (a, b) in l.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        let dec = symmetric_eigendecomposition(&l.view(), 10).unwrap();
        assert!(dec.eigenvalues[0].abs() < 1e-14);
        assert!((dec.eigenvalues[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn laplacian_rows_sum_to_zero_and_psd() {
        let pts = array![
            [0.0, 0.0],
            [0.3, 0.1],
            [1.1, -0.4],
            [2.0, 2.0],
            [2.2, 1.8],
            [-1.0, 0.5]
        ];
        let w = build_weight_matrix(&pts.view(), 2, &SigmaRule::Fixed(0.8)).unwrap();
        let l = graph_laplacian(&w).unwrap();
        for i in 0..l.nrows() {
            let s: f64 = l.row(i).sum();
            assert!(s.abs() <= 1e-12, "row {i} sums to {s}");
        }
        let dec = symmetric_eigendecomposition(&l.view(), 10).unwrap();
        assert!(dec.eigenvalues[0] > -1e-10);
    }

    #[test]
    fn components_first_seen_order() {
        let w = SparseWeights::from_triples(
            5,
            &[(0, 2, 1.0), (2, 0, 1.0), (3, 4, 0.5), (4, 3, 0.5)],
        )
        .unwrap();
        assert_eq!(connected_components(&w), vec![0, 1, 0, 2, 2]);
        assert_eq!(component_count(&w), 3);
    }

    #[test]
    fn zero_eigenvalue_multiplicity_counts_components() {
        // Two triangles, no cross edges.
        let mut triples = Vec::new();
        for base in [0usize, 3] {
            for (a, b) in [(0, 1), (0, 2), (1, 2)] {
                triples.push((base + a, base + b, 1.0));
                triples.push((base + b, base + a, 1.0));
            }
        }
        let w = SparseWeights::from_triples(6, &triples).unwrap();
        let l = graph_laplacian(&w).unwrap();
        let dec = symmetric_eigendecomposition(&l.view(), 10).unwrap();
        assert_eq!(dec.zero_multiplicity(1e-9), component_count(&w));
    }

    #[test]
    fn submatrix_restricts_and_reindexes() {
        let w = SparseWeights::from_triples(
            4,
            &[
                (0, 1, 0.3),
                (1, 0, 0.3),
                (1, 3, 0.2),
                (3, 1, 0.2),
                (2, 3, 0.9),
                (3, 2, 0.9),
            ],
        )
        .unwrap();
        let sub = w.submatrix(&[1, 3]).unwrap();
        assert_eq!(sub.n(), 2);
        assert_eq!(sub.get(0, 1), 0.2);
        assert_eq!(sub.get(1, 0), 0.2);
        assert!(w.submatrix(&[3, 1]).is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let pts = array![
            [0.0, 0.0],
            [0.1, 0.9],
            [1.3, 0.2],
            [0.7, 0.7],
            [2.0, 1.0]
        ];
        let a = build_weight_matrix(&pts.view(), 2, &SigmaRule::Fixed(0.7)).unwrap();
        let b = build_weight_matrix(&pts.view(), 2, &SigmaRule::Fixed(0.7)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn built_weights_are_symmetric_normalized(
            seed in 0u64..200,
            n in 4usize..24,
            n_top in 1usize..3,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut pts = Array2::<f64>::zeros((n, 2));
            for i in 0..n {
                pts[[i, 0]] = rng.random_range(-5.0..5.0);
                pts[[i, 1]] = rng.random_range(-5.0..5.0);
            }
            let w = match build_weight_matrix(&pts.view(), n_top, &SigmaRule::Fixed(1.0)) {
                Ok(w) => w,
                // Extremely distant pairs can underflow the kernel to zero and
                // isolate a vertex; that is a legitimate error, not a failure.
                Err(Error::IsolatedVertex(_)) => return Ok(()),
                Err(e) => return Err(TestCaseError::fail(format!("{e}"))),
            };
            w.check_symmetric(0.0).unwrap();
            for i in 0..n {
                prop_assert_eq!(w.get(i, i), 0.0);
                let sum: f64 = w.row(i).iter().map(|&(_, v)| v).sum();
                prop_assert!((sum - w.degrees()[i]).abs() < 1e-12);
                for &(_, v) in w.row(i) {
                    prop_assert!(v > 0.0);
                }
            }
        }

        #[test]
        fn topk_row_width_is_bounded(
            seed in 0u64..100,
            n in 4usize..16,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut w = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        w[[i, j]] = rng.random_range(0.0..1.0);
                    }
                }
            }
            let n_top = 1 + (seed as usize) % (n - 1);
            let s = sparsify_topk(&w.view(), n_top).unwrap();
            for i in 0..n {
                prop_assert!(s.row(i).len() <= n_top);
            }
        }
    }
}
