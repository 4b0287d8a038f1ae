//! Dense linear-algebra helpers shared by the GP modules.
//!
//! All symmetric positive-definite systems go through [`Chol`]; explicit
//! inverses are never formed.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{GpError, Result};

/// Relative diagonal jitter, scaled by the kernel variance at each point.
pub const JITTER: f64 = 1e-8;

/// Number of escalation rounds (x10 each) tried before giving up.
const JITTER_ROUNDS: usize = 5;

/// Lower-triangular Cholesky factor `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Chol {
    l: DMatrix<f64>,
    jitter: f64,
}

impl Chol {
    /// Factor `a`. If the plain factorization fails, `JITTER * scale[i]` is
    /// added to the diagonal and escalated until it succeeds.
    pub fn factor(a: &DMatrix<f64>, scale: &[f64], context: &'static str) -> Result<Self> {
        debug_assert_eq!(a.nrows(), a.ncols());
        debug_assert_eq!(scale.len(), a.nrows());
        if a.nrows() == 0 {
            return Ok(Chol {
                l: DMatrix::zeros(0, 0),
                jitter: 0.0,
            });
        }
        if let Some(c) = a.clone().cholesky() {
            return Ok(Chol { l: c.l(), jitter: 0.0 });
        }
        let mut rel = JITTER;
        for _ in 0..JITTER_ROUNDS {
            let mut b = a.clone();
            for (i, s) in scale.iter().enumerate() {
                b[(i, i)] += rel * s.abs().max(f64::MIN_POSITIVE);
            }
            if let Some(c) = b.cholesky() {
                return Ok(Chol { l: c.l(), jitter: rel });
            }
            rel *= 10.0;
        }
        Err(GpError::Factorization {
            context,
            min_eigenvalue: min_eigenvalue(a),
        })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Relative jitter that had to be added (0 when none).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `L⁻¹ b`
    pub fn half_solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        if self.dim() == 0 {
            return DMatrix::zeros(0, b.ncols());
        }
        self.l
            .solve_lower_triangular(b)
            .expect("cholesky factor has a nonzero diagonal")
    }

    pub fn half_solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        if self.dim() == 0 {
            return DVector::zeros(0);
        }
        self.l
            .solve_lower_triangular(b)
            .expect("cholesky factor has a nonzero diagonal")
    }

    /// `A⁻¹ b`
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        if self.dim() == 0 {
            return DMatrix::zeros(0, b.ncols());
        }
        let y = self.half_solve(b);
        self.l
            .tr_solve_lower_triangular(&y)
            .expect("cholesky factor has a nonzero diagonal")
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        if self.dim() == 0 {
            return DVector::zeros(0);
        }
        let y = self.half_solve_vec(b);
        self.l
            .tr_solve_lower_triangular(&y)
            .expect("cholesky factor has a nonzero diagonal")
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `L Lᵀ`
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }
}

/// Replace `m` by `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix (`+inf` for an empty one).
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let mut s = m.clone();
    symmetrize(&mut s);
    SymmetricEigen::new(s).eigenvalues.min()
}

/// Largest eigenvalue of a symmetric matrix (`-inf` for an empty one).
pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    let mut s = m.clone();
    symmetrize(&mut s);
    SymmetricEigen::new(s).eigenvalues.max()
}

/// Draws from `N(mean, cov)` through a clipped eigendecomposition, so that
/// singular and numerically-zero covariances are handled exactly.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mean: DVector<f64>,
    /// `Q diag(sqrt(λ⁺))`, with eigen-directions of negligible variance dropped.
    factor: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Self {
        let n = mean.len();
        assert_eq!(cov.nrows(), n, "covariance shape must match the mean");
        if n == 0 {
            return GaussianSampler {
                mean,
                factor: DMatrix::zeros(0, 0),
            };
        }
        let mut s = cov.clone();
        symmetrize(&mut s);
        let eig = SymmetricEigen::new(s);
        let top = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        let cutoff = 1e-12 * top + 1e-300;
        let keep: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > cutoff).collect();
        let mut factor = DMatrix::zeros(n, keep.len());
        for (c, &i) in keep.iter().enumerate() {
            let scale = eig.eigenvalues[i].sqrt();
            for r in 0..n {
                factor[(r, c)] = eig.eigenvectors[(r, i)] * scale;
            }
        }
        GaussianSampler { mean, factor }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.factor.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.factor * z
    }

    /// `draws × dim` matrix, one draw per row.
    pub fn sample_matrix<R: Rng + ?Sized>(&self, draws: usize, rng: &mut R) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(draws, self.dim());
        for b in 0..draws {
            let x = self.sample(rng);
            out.row_mut(b).copy_from(&x.transpose());
        }
        out
    }
}
