//! Dense symmetric eigendecomposition via cyclic Jacobi rotations.
//!
//! This is the workhorse behind spectral radii, closed-form diffusion, and
//! stability reports. Jacobi is quadratically convergent once the off-diagonal
//! mass is small and needs no pivoting or deflation logic, which makes it easy
//! to audit; the price is O(n^3) per sweep, so the entry point refuses
//! matrices above a configurable size. Larger graphs should use the
//! power-iteration bound in the diffusion module instead.
//!
//! Invariants delivered on success:
//! - eigenvalues ascending,
//! - eigenvector columns orthonormal and paired with their eigenvalue,
//! - `A ~= V diag(lambda) V^T` to a few hundred ulps of the input scale.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Largest matrix the dense path accepts unless the caller raises it.
pub const DEFAULT_EIGEN_LIMIT: usize = 500;

const MAX_SWEEPS: usize = 64;

#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// Column `i` is the unit eigenvector for `eigenvalues[i]`.
    pub eigenvectors: Array2<f64>,
}

impl SpectralDecomposition {
    /// Largest absolute eigenvalue.
    pub fn spectral_radius(&self) -> f64 {
        self.eigenvalues
            .iter()
            .fold(0.0_f64, |acc, &l| acc.max(l.abs()))
    }

    /// Count of eigenvalues with |lambda| <= tol.
    pub fn zero_multiplicity(&self, tol: f64) -> usize {
        self.eigenvalues.iter().filter(|l| l.abs() <= tol).count()
    }
}

pub fn check_square(a: &ArrayView2<f64>) -> Result<usize> {
    if a.nrows() != a.ncols() {
        return Err(Error::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    Ok(a.nrows())
}

/// Verifies `|a_ij - a_ji| <= 1e-12 * max(1, max|a|)` everywhere.
pub fn check_symmetric(a: &ArrayView2<f64>) -> Result<()> {
    let n = check_square(a)?;
    let scale = a.iter().fold(1.0_f64, |acc, &x| acc.max(x.abs()));
    let tol = 1e-12 * scale;
    for i in 0..n {
        for j in (i + 1)..n {
            let (x, y) = (a[[i, j]], a[[j, i]]);
            if (x - y).abs() > tol {
                return Err(Error::Asymmetric { i, j, a: x, b: y });
            }
        }
    }
    Ok(())
}

/// Full eigendecomposition of a symmetric matrix, dense cyclic Jacobi.
///
/// `limit` rejects matrices that would make O(n^3) sweeps unpleasant;
/// [`DEFAULT_EIGEN_LIMIT`] is the usual choice.
pub fn symmetric_eigendecomposition(
    a: &ArrayView2<f64>,
    limit: usize,
) -> Result<SpectralDecomposition> {
    let n = check_square(a)?;
    if n > limit {
        return Err(Error::EigenSizeLimit { n, limit });
    }
    check_symmetric(a)?;
    if n == 0 {
        return Ok(SpectralDecomposition {
            eigenvalues: vec![],
            eigenvectors: Array2::zeros((0, 0)),
        });
    }

    let mut a = a.to_owned();
    let mut v = Array2::<f64>::eye(n);
    let mut d: Vec<f64> = (0..n).map(|i| a[[i, i]]).collect();
    let mut b = d.clone();
    let mut z = vec![0.0_f64; n];

    let mut converged = false;
    let mut last_off = f64::INFINITY;
    for sweep in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[[p, q]].abs();
            }
        }
        last_off = off;
        if off == 0.0 {
            converged = true;
            break;
        }
        // First sweeps only rotate the dominant entries; afterwards take all.
        let thresh = if sweep < 3 {
            0.2 * off / (n * n) as f64
        } else {
            0.0
        };
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let g = 100.0 * a[[p, q]].abs();
                // Entry is negligible at working precision: zero it outright.
                if sweep > 3 && d[p].abs() + g == d[p].abs() && d[q].abs() + g == d[q].abs() {
                    a[[p, q]] = 0.0;
                } else if a[[p, q]].abs() > thresh {
                    let h = d[q] - d[p];
                    let t = if h.abs() + g == h.abs() {
                        a[[p, q]] / h
                    } else {
                        let theta = 0.5 * h / a[[p, q]];
                        let mut t = 1.0 / (theta.abs() + (1.0 + theta * theta).sqrt());
                        if theta < 0.0 {
                            t = -t;
                        }
                        t
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    let tau = s / (1.0 + c);
                    let h = t * a[[p, q]];
                    z[p] -= h;
                    z[q] += h;
                    d[p] -= h;
                    d[q] += h;
                    a[[p, q]] = 0.0;
                    let rot = |a: &mut Array2<f64>, i: usize, j: usize, k: usize, l: usize| {
                        let g = a[[i, j]];
                        let h = a[[k, l]];
                        a[[i, j]] = g - s * (h + g * tau);
                        a[[k, l]] = h + s * (g - h * tau);
                    };
                    for j in 0..p {
                        rot(&mut a, j, p, j, q);
                    }
                    for j in (p + 1)..q {
                        rot(&mut a, p, j, j, q);
                    }
                    for j in (q + 1)..n {
                        rot(&mut a, p, j, q, j);
                    }
                    for j in 0..n {
                        rot(&mut v, j, p, j, q);
                    }
                }
            }
        }
        for i in 0..n {
            b[i] += z[i];
            d[i] = b[i];
            z[i] = 0.0;
        }
    }
    if !converged {
        return Err(Error::EigenNoConvergence {
            sweeps: MAX_SWEEPS,
            off: last_off,
        });
    }

    // Ascending eigenvalues; ties keep the order the sweep produced.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].total_cmp(&d[j]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| d[i]).collect();
    let mut eigenvectors = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            eigenvectors[[r, dst]] = v[[r, src]];
        }
    }
    Ok(SpectralDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reconstruct(dec: &SpectralDecomposition) -> Array2<f64> {
        let n = dec.eigenvalues.len();
        let v = &dec.eigenvectors;
        let mut lam = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            lam[[i, i]] = dec.eigenvalues[i];
        }
        v.dot(&lam).dot(&v.t())
    }

    #[test]
    fn diagonal_matrix_is_already_solved() {
        let a = array![[3.0, 0.0], [0.0, -1.0]];
        let dec = symmetric_eigendecomposition(&a.view(), 10).unwrap();
        assert_eq!(dec.eigenvalues, vec![-1.0, 3.0]);
    }

    #[test]
    fn two_by_two_hand_values() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3.
        let a = array![[2.0, 1.0], [1.0, 2.0]];
        let dec = symmetric_eigendecomposition(&a.view(), 10).unwrap();
        assert!((dec.eigenvalues[0] - 1.0).abs() < 1e-12);
        assert!((dec.eigenvalues[1] - 3.0).abs() < 1e-12);
        // Eigenvector for 1 is (1,-1)/sqrt(2) up to sign.
        let v0 = (dec.eigenvectors[[0, 0]], dec.eigenvectors[[1, 0]]);
        assert!((v0.0 + v0.1).abs() < 1e-12);
        assert!((v0.0.abs() - 1.0 / 2.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn path_laplacian_spectrum_matches_closed_form() {
        // Path graph on 4 nodes, unit weights: Laplacian eigenvalues are
        // 2 - 2 cos(k pi / n) for k = 0..n-1, here 0, 2 - sqrt(2), 2, 2 + sqrt(2).
        let a = array![
            [1.0, -1.0, 0.0, 0.0],
            [-1.0, 2.0, -1.0, 0.0],
            [0.0, -1.0, 2.0, -1.0],
            [0.0, 0.0, -1.0, 1.0]
        ];
        let dec = symmetric_eigendecomposition(&a.view(), 10).unwrap();
        let expect = [0.0, 2.0 - 2.0_f64.sqrt(), 2.0, 2.0 + 2.0_f64.sqrt()];
        for (got, want) in dec.eigenvalues.iter().zip(expect) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn random_symmetric_reconstructs_and_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [1usize, 2, 5, 12, 40] {
            let mut a = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                for j in i..n {
                    let x: f64 = rng.random_range(-2.0..2.0);
                    a[[i, j]] = x;
                    a[[j, i]] = x;
                }
            }
            let dec = symmetric_eigendecomposition(&a.view(), 100).unwrap();
            let recon = reconstruct(&dec);
            let num: f64 = (&recon - &a).iter().map(|x| x * x).sum::<f64>().sqrt();
            let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-30);
            assert!(num / den < 1e-7, "n={n}: relative residual {}", num / den);
            let gram = dec.eigenvectors.t().dot(&dec.eigenvectors);
            for i in 0..n {
                for j in 0..n {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((gram[[i, j]] - want).abs() < 1e-10);
                }
            }
            for k in 1..n {
                assert!(dec.eigenvalues[k] >= dec.eigenvalues[k - 1]);
            }
        }
    }

    #[test]
    fn asymmetric_input_rejected() {
        let a = array![[0.0, 1.0], [0.5, 0.0]];
        let err = symmetric_eigendecomposition(&a.view(), 10).unwrap_err();
        assert!(matches!(err, Error::Asymmetric { .. }));
    }

    #[test]
    fn size_limit_enforced() {
        let a = Array2::<f64>::eye(11);
        let err = symmetric_eigendecomposition(&a.view(), 10).unwrap_err();
        match err {
            Error::EigenSizeLimit { n, limit } => {
                assert_eq!((n, limit), (11, 10));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
