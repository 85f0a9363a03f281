//! Exact and randomized truncated SVD.
//!
//! Exact mode is a full Golub-Kahan-style decomposition (backed by
//! `nalgebra`) truncated to the requested rank; it doubles as the oracle
//! for the randomized path. Randomized mode is a Gaussian range finder
//! with power iterations followed by an exact SVD of the small projected
//! matrix, the production path for adapter factorization.

use super::{matmul, DenseMatrix};
use crate::error::{Result, SliceError};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvdMode {
    Exact,
    Randomized,
}

/// Truncated-SVD request.
///
/// In randomized mode the Gaussian sketch has width
/// `oversampling_multiplier * rank_requested` and is drawn from `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvdConfig {
    pub rank_requested: usize,
    pub oversampling_multiplier: usize,
    pub power_iterations: usize,
    pub mode: SvdMode,
    pub seed: u64,
}

impl SvdConfig {
    pub fn exact(rank_requested: usize) -> Self {
        SvdConfig {
            rank_requested,
            oversampling_multiplier: 4,
            power_iterations: 4,
            mode: SvdMode::Exact,
            seed: 0,
        }
    }

    pub fn randomized(rank_requested: usize, seed: u64) -> Self {
        SvdConfig {
            rank_requested,
            oversampling_multiplier: 4,
            power_iterations: 4,
            mode: SvdMode::Randomized,
            seed,
        }
    }

    pub fn with_rank(mut self, rank_requested: usize) -> Self {
        self.rank_requested = rank_requested;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Top-k factorization `m ≈ U diag(σ) Vᵀ`.
///
/// `u` is `rows x k`, `v` is `cols x k`, both with orthonormal columns;
/// `singular_values` is non-increasing. Column signs are not canonical:
/// compare factors through column-span projectors, never entrywise.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub singular_values: Vec<f64>,
    pub v: DenseMatrix,
}

impl SvdResult {
    /// Check the structural invariants: orthonormal columns within `tol`,
    /// non-increasing non-negative singular values.
    pub fn validate(&self, tol: f64) -> Result<()> {
        for (name, m) in [("u", &self.u), ("v", &self.v)] {
            let gram = matmul(&m.transpose(), m)?;
            for i in 0..gram.rows() {
                for j in 0..gram.cols() {
                    let expected = if i == j { 1.0 } else { 0.0 };
                    if (gram.get(i, j) - expected).abs() > tol {
                        return Err(SliceError::Degenerate(format!(
                            "{name} columns not orthonormal: gram[{i}][{j}] = {}",
                            gram.get(i, j)
                        )));
                    }
                }
            }
        }
        for w in self.singular_values.windows(2) {
            if w[1] > w[0] {
                return Err(SliceError::Degenerate(
                    "singular values not sorted non-increasing".into(),
                ));
            }
        }
        if self.singular_values.iter().any(|&s| s < 0.0 || !s.is_finite()) {
            return Err(SliceError::Degenerate(
                "singular values must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn to_nalgebra(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.entries())
}

fn from_nalgebra(m: &DMatrix<f64>) -> DenseMatrix {
    DenseMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Truncated SVD of `m` under `cfg`.
pub fn svd(m: &DenseMatrix, cfg: &SvdConfig) -> Result<SvdResult> {
    m.check_finite()?;
    let min_dim = m.rows().min(m.cols());
    let k = cfg.rank_requested;
    if k == 0 || k > min_dim {
        return Err(SliceError::RankTooLarge {
            requested: k,
            max: min_dim,
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    match cfg.mode {
        SvdMode::Exact => exact_truncated(m, k),
        SvdMode::Randomized => {
            let width = cfg.oversampling_multiplier * k;
            if width > min_dim {
                return Err(SliceError::SketchTooWide {
                    sketch_width: width,
                    min_dim,
                });
            }
            randomized_truncated(m, k, width, cfg.power_iterations, cfg.seed)
        }
    }
}

fn exact_truncated(m: &DenseMatrix, k: usize) -> Result<SvdResult> {
    let na = to_nalgebra(m);
    let decomp = na.svd(true, true);
    let u_full = decomp.u.expect("u requested");
    let v_t_full = decomp.v_t.expect("v_t requested");
    let sigmas = decomp.singular_values;

    // Sort descending ourselves rather than relying on backend ordering.
    let mut order: Vec<usize> = (0..sigmas.len()).collect();
    order.sort_by(|&a, &b| sigmas[b].total_cmp(&sigmas[a]));
    let order = &order[..k];

    let u = DenseMatrix::from_fn(m.rows(), k, |i, j| u_full[(i, order[j])]);
    let v = DenseMatrix::from_fn(m.cols(), k, |i, j| v_t_full[(order[j], i)]);
    let singular_values = order.iter().map(|&idx| sigmas[idx].max(0.0)).collect();
    Ok(SvdResult {
        u,
        singular_values,
        v,
    })
}

fn thin_q(m: DMatrix<f64>) -> DMatrix<f64> {
    m.qr().q()
}

fn randomized_truncated(
    m: &DenseMatrix,
    k: usize,
    width: usize,
    power_iterations: usize,
    seed: u64,
) -> Result<SvdResult> {
    let a = to_nalgebra(m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = DMatrix::from_fn(m.cols(), width, |_, _| rng.sample::<f64, _>(StandardNormal));

    // Range finder with per-step re-orthonormalization.
    let mut q = thin_q(&a * omega);
    for _ in 0..power_iterations {
        let z = thin_q(a.transpose() * &q);
        q = thin_q(&a * z);
    }

    // Exact SVD of the small projected matrix, mapped back through Q.
    let b = from_nalgebra(&(q.transpose() * &a));
    let small = exact_truncated(&b, k)?;
    let u = from_nalgebra(&(q * to_nalgebra(&small.u)));
    Ok(SvdResult {
        u,
        singular_values: small.singular_values,
        v: small.v,
    })
}

/// Sines of the principal angles between the column spans of two
/// orthonormal column blocks: the singular values of `(I - U₁U₁ᵀ)U₂`.
pub fn principal_angle_sines(u1: &DenseMatrix, u2: &DenseMatrix) -> Result<Vec<f64>> {
    if u1.rows() != u2.rows() {
        return Err(SliceError::DimensionMismatch {
            left_rows: u1.rows(),
            left_cols: u1.cols(),
            right_rows: u2.rows(),
            right_cols: u2.cols(),
        });
    }
    let overlap = matmul(&u1.transpose(), u2)?;
    let residual = u2.sub(&matmul(u1, &overlap)?)?;
    let k = residual.rows().min(residual.cols());
    let decomp = exact_truncated(&residual, k)?;
    Ok(decomp
        .singular_values
        .iter()
        .map(|&s| s.clamp(0.0, 1.0))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{frobenius_norm, matmul};
    use approx::assert_relative_eq;

    fn diag(values: &[f64]) -> DenseMatrix {
        let n = values.len();
        DenseMatrix::from_fn(n, n, |i, j| if i == j { values[i] } else { 0.0 })
    }

    fn reconstruct(r: &SvdResult) -> DenseMatrix {
        let k = r.singular_values.len();
        let sigma = DenseMatrix::from_fn(k, k, |i, j| {
            if i == j {
                r.singular_values[i]
            } else {
                0.0
            }
        });
        matmul(&matmul(&r.u, &sigma).unwrap(), &r.v.transpose()).unwrap()
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn exact_on_diagonal_matrix() {
        let m = diag(&[3.0, 2.0, 1.0]);
        let r = svd(&m, &SvdConfig::exact(2)).unwrap();
        r.validate(1e-8).unwrap();
        assert_relative_eq!(r.singular_values[0], 3.0, epsilon = 1e-12);
        assert_relative_eq!(r.singular_values[1], 2.0, epsilon = 1e-12);
        // Columns must span e1, e2 up to sign.
        for j in 0..2 {
            assert_relative_eq!(r.u.get(j, j).abs(), 1.0, epsilon = 1e-10);
            assert_relative_eq!(r.v.get(j, j).abs(), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn exact_on_rank_one_matrix() {
        // uvᵀ with ‖u‖ = ‖v‖ = 1.
        let u = [0.6, 0.8];
        let v = [1.0 / 2.0f64.sqrt(), -1.0 / 2.0f64.sqrt()];
        let m = DenseMatrix::from_fn(2, 2, |i, j| u[i] * v[j]);
        let r = svd(&m, &SvdConfig::exact(1)).unwrap();
        assert_relative_eq!(r.singular_values[0], 1.0, epsilon = 1e-12);
        // Factor spans {u} and {v}: |cos| of the angle must be 1.
        let cu = r.u.get(0, 0) * u[0] + r.u.get(1, 0) * u[1];
        let cv = r.v.get(0, 0) * v[0] + r.v.get(1, 0) * v[1];
        assert_relative_eq!(cu.abs(), 1.0, epsilon = 1e-10);
        assert_relative_eq!(cv.abs(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn exact_full_rank_reconstruction() {
        let m = random_matrix(12, 9, 5);
        let r = svd(&m, &SvdConfig::exact(9)).unwrap();
        r.validate(1e-8).unwrap();
        let rel = frobenius_norm(&m.sub(&reconstruct(&r)).unwrap()) / frobenius_norm(&m);
        assert!(rel <= 1e-10, "relative reconstruction error {rel}");
    }

    #[test]
    fn randomized_matches_exact_subspace() {
        // Randomized vs exact top-8 factorization of a random 50x30 matrix.
        // Generic Gaussian spectra have a near-unit gap at the cut, so the
        // k-th subspace direction is ill-conditioned; the sharp comparisons
        // are near-optimal reconstruction error and singular values, with
        // the projector distance as a sanity bound.
        let m = random_matrix(50, 30, 42);
        let exact = svd(&m, &SvdConfig::exact(8)).unwrap();
        let mut cfg = SvdConfig::randomized(8, 7);
        cfg.oversampling_multiplier = 2;
        let approx = svd(&m, &cfg).unwrap();
        approx.validate(1e-8).unwrap();
        let err_exact = frobenius_norm(&m.sub(&reconstruct(&exact)).unwrap());
        let err_approx = frobenius_norm(&m.sub(&reconstruct(&approx)).unwrap());
        assert!(
            err_approx <= err_exact * (1.0 + 1e-3),
            "randomized reconstruction {err_approx} vs optimal {err_exact}"
        );
        for (a, b) in exact.singular_values.iter().zip(&approx.singular_values) {
            assert_relative_eq!(a, b, max_relative = 1e-3);
        }
        let sines = principal_angle_sines(&exact.u, &approx.u).unwrap();
        let max_sine = sines.iter().cloned().fold(0.0, f64::max);
        assert!(max_sine < 0.25, "max principal-angle sine {max_sine}");
    }

    #[test]
    fn randomized_recovers_low_rank_exactly() {
        // When sigma_{k+1} <= 1e-12 * sigma_1 the randomized subspace must
        // match exact mode to principal-angle sines <= 1e-6.
        let k = 4;
        let left = svd(&random_matrix(30, 30, 1), &SvdConfig::exact(k)).unwrap().u;
        let right = svd(&random_matrix(20, 20, 2), &SvdConfig::exact(k)).unwrap().u;
        let sigma = DenseMatrix::from_fn(k, k, |i, j| {
            if i == j {
                4.0 - i as f64
            } else {
                0.0
            }
        });
        let m = matmul(&matmul(&left, &sigma).unwrap(), &right.transpose()).unwrap();
        let exact = svd(&m, &SvdConfig::exact(k)).unwrap();
        let approx = svd(&m, &SvdConfig::randomized(k, 99)).unwrap();
        let sines = principal_angle_sines(&exact.u, &approx.u).unwrap();
        assert!(sines.iter().all(|&s| s <= 1e-6), "sines {sines:?}");
        let sines_v = principal_angle_sines(&exact.v, &approx.v).unwrap();
        assert!(sines_v.iter().all(|&s| s <= 1e-6), "v sines {sines_v:?}");
    }

    #[test]
    fn randomized_is_deterministic_in_seed() {
        let m = random_matrix(20, 16, 3);
        let a = svd(&m, &SvdConfig::randomized(4, 11)).unwrap();
        let b = svd(&m, &SvdConfig::randomized(4, 11)).unwrap();
        assert_eq!(a.u, b.u);
        assert_eq!(a.v, b.v);
        assert_eq!(a.singular_values, b.singular_values);
    }

    #[test]
    fn rank_too_large_is_rejected() {
        let m = random_matrix(4, 6, 0);
        assert!(matches!(
            svd(&m, &SvdConfig::exact(5)),
            Err(SliceError::RankTooLarge { requested: 5, max: 4, .. })
        ));
    }

    #[test]
    fn oversized_sketch_is_rejected() {
        let m = random_matrix(8, 8, 0);
        // width = 4 * 4 = 16 > 8
        assert!(matches!(
            svd(&m, &SvdConfig::randomized(4, 0)),
            Err(SliceError::SketchTooWide { .. })
        ));
    }

    #[test]
    fn principal_angles_of_identical_spans_are_zero() {
        let m = random_matrix(10, 10, 8);
        let r = svd(&m, &SvdConfig::exact(3)).unwrap();
        let sines = principal_angle_sines(&r.u, &r.u).unwrap();
        assert!(sines.iter().all(|&s| s < 1e-10));
    }
}
