//! Positive-definite kernels on (enrollment time, covariates) inputs.
//!
//! Stationary kernels (squared exponential, Matérn) act on the enrollment
//! time; `Linear` and `ArdSe` act on the (standardized) covariate vector.
//! Summing them gives the additive time + covariate kernels.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};

/// One model input: enrollment time plus an optional covariate vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Input {
    pub time: f64,
    #[serde(default)]
    pub x: Vec<f64>,
}

impl Input {
    pub fn at(time: f64) -> Self {
        Input { time, x: Vec::new() }
    }

    pub fn new(time: f64, x: Vec<f64>) -> Self {
        Input { time, x }
    }
}

/// Time-only inputs.
pub fn inputs_from_times(times: &[f64]) -> Vec<Input> {
    times.iter().map(|&t| Input::at(t)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `alpha2 * exp(-|e - e'|² / (2 h²))`
    SquaredExponential {
        alpha2: f64,
        h: f64,
    },
    /// Half-integer Matérn in closed form, `nu ∈ {0.5, 1.5, 2.5}`.
    Matern {
        alpha2: f64,
        nu: f64,
        h: f64,
    },
    /// `tau_beta2 * xᵀx'`: a linear covariate mean with an `N(0, tau_beta2 I)`
    /// coefficient prior, marginalized.
    Linear {
        tau_beta2: f64,
    },
    /// Squared exponential over covariates with one length-scale per dimension.
    ArdSe {
        alpha2: f64,
        h: Vec<f64>,
    },
    /// `variance` everywhere: an `N(0, variance)` constant offset, marginalized.
    Constant {
        variance: f64,
    },
    Sum {
        terms: Vec<KernelSpec>,
    },
}

impl KernelSpec {
    pub fn se(alpha2: f64, h: f64) -> Self {
        KernelSpec::SquaredExponential { alpha2, h }
    }

    pub fn matern(alpha2: f64, nu: f64, h: f64) -> Self {
        KernelSpec::Matern { alpha2, nu, h }
    }

    /// Check the hyperparameter invariants.
    ///
    /// Variances may be exactly zero (a degenerate, identically-zero kernel).
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(GpError::InvalidKernel(format!("{name} must be > 0, got {v}")))
            }
        };
        let nonneg = |name: &str, v: f64| -> Result<()> {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(GpError::InvalidKernel(format!("{name} must be >= 0, got {v}")))
            }
        };
        match self {
            KernelSpec::SquaredExponential { alpha2, h } => {
                nonneg("alpha2", *alpha2)?;
                positive("h", *h)
            }
            KernelSpec::Matern { alpha2, nu, h } => {
                nonneg("alpha2", *alpha2)?;
                positive("h", *h)?;
                if [0.5, 1.5, 2.5].contains(nu) {
                    Ok(())
                } else {
                    Err(GpError::InvalidKernel(format!(
                        "Matérn smoothness must be 0.5, 1.5 or 2.5, got {nu}"
                    )))
                }
            }
            KernelSpec::Linear { tau_beta2 } => nonneg("tau_beta2", *tau_beta2),
            KernelSpec::Constant { variance } => nonneg("variance", *variance),
            KernelSpec::ArdSe { alpha2, h } => {
                nonneg("alpha2", *alpha2)?;
                if h.is_empty() {
                    return Err(GpError::InvalidKernel("ArdSe needs at least one length-scale".into()));
                }
                h.iter().try_for_each(|&v| positive("h", v))
            }
            KernelSpec::Sum { terms } => {
                if terms.is_empty() {
                    return Err(GpError::InvalidKernel("Sum kernel is empty".into()));
                }
                terms.iter().try_for_each(KernelSpec::validate)
            }
        }
    }

    /// Whether any component reads the covariate vector.
    pub fn uses_covariates(&self) -> bool {
        match self {
            KernelSpec::SquaredExponential { .. } | KernelSpec::Matern { .. } | KernelSpec::Constant { .. } => false,
            KernelSpec::Linear { .. } | KernelSpec::ArdSe { .. } => true,
            KernelSpec::Sum { terms } => terms.iter().any(KernelSpec::uses_covariates),
        }
    }

    /// Kernel value `k(u, v)`.
    pub fn eval(&self, u: &Input, v: &Input) -> Result<f64> {
        match self {
            KernelSpec::SquaredExponential { alpha2, h } => {
                let d = (u.time - v.time) / h;
                Ok(alpha2 * (-0.5 * d * d).exp())
            }
            KernelSpec::Matern { alpha2, nu, h } => {
                let r = (u.time - v.time).abs() / h;
                Ok(alpha2 * matern_correlation(*nu, r)?)
            }
            KernelSpec::Linear { tau_beta2 } => {
                if u.x.len() != v.x.len() {
                    return Err(GpError::DimensionMismatch {
                        context: "linear kernel covariates",
                        expected: u.x.len(),
                        got: v.x.len(),
                    });
                }
                let dot: f64 = u.x.iter().zip(&v.x).map(|(a, b)| a * b).sum();
                Ok(tau_beta2 * dot)
            }
            KernelSpec::ArdSe { alpha2, h } => {
                for p in [u, v] {
                    if p.x.len() != h.len() {
                        return Err(GpError::DimensionMismatch {
                            context: "ARD kernel covariates",
                            expected: h.len(),
                            got: p.x.len(),
                        });
                    }
                }
                let q: f64 =
                    u.x.iter()
                        .zip(&v.x)
                        .zip(h)
                        .map(|((a, b), l)| {
                            let d = (a - b) / l;
                            d * d
                        })
                        .sum();
                Ok(alpha2 * (-0.5 * q).exp())
            }
            KernelSpec::Constant { variance } => Ok(*variance),
            KernelSpec::Sum { terms } => {
                let mut total = 0.0;
                for t in terms {
                    total += t.eval(u, v)?;
                }
                Ok(total)
            }
        }
    }

    /// Total prior variance `k(u, u)`.
    pub fn variance(&self, u: &Input) -> Result<f64> {
        self.eval(u, u)
    }

    /// `[k(u_r, v_s)]_{r,s}`
    pub fn gram(&self, u: &[Input], v: &[Input]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(u.len(), v.len());
        for (r, ur) in u.iter().enumerate() {
            for (s, vs) in v.iter().enumerate() {
                m[(r, s)] = self.eval(ur, vs)?;
            }
        }
        Ok(m)
    }

    /// `k(u, u)`, evaluated on one triangle and mirrored so it is exactly symmetric.
    pub fn gram_sym(&self, u: &[Input]) -> Result<DMatrix<f64>> {
        let n = u.len();
        let mut m = DMatrix::zeros(n, n);
        for r in 0..n {
            for s in 0..=r {
                let v = self.eval(&u[r], &u[s])?;
                m[(r, s)] = v;
                m[(s, r)] = v;
            }
        }
        Ok(m)
    }

    /// Per-point prior variances, used to scale diagonal jitter.
    pub fn diag(&self, u: &[Input]) -> Result<Vec<f64>> {
        u.iter().map(|p| self.variance(p)).collect()
    }
}

fn matern_correlation(nu: f64, r: f64) -> Result<f64> {
    if nu == 0.5 {
        Ok((-r).exp())
    } else if nu == 1.5 {
        let s = 3f64.sqrt() * r;
        Ok((1.0 + s) * (-s).exp())
    } else if nu == 2.5 {
        let s = 5f64.sqrt() * r;
        Ok((1.0 + s + s * s / 3.0) * (-s).exp())
    } else {
        Err(GpError::InvalidKernel(format!(
            "Matérn smoothness must be 0.5, 1.5 or 2.5, got {nu}"
        )))
    }
}

/// Shared-baseline plus treatment-effect kernel of the two-arm model:
/// `k_u((e,a),(e',a')) = k_f(e,e') + 1{a = a' = j} k_Δ(e,e')`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskKernelSpec {
    pub k_f: KernelSpec,
    pub k_delta: KernelSpec,
}

/// Which arm of a (treatment `j`, control `k`) pair an input belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Treatment,
    Control,
}

impl MultiTaskKernelSpec {
    pub fn validate(&self) -> Result<()> {
        self.k_f.validate()?;
        self.k_delta.validate()
    }

    /// Composite kernel over (input, task) pairs.
    pub fn eval(&self, u: (&Input, Task), v: (&Input, Task)) -> Result<f64> {
        let mut k = self.k_f.eval(u.0, v.0)?;
        if u.1 == Task::Treatment && v.1 == Task::Treatment {
            k += self.k_delta.eval(u.0, v.0)?;
        }
        Ok(k)
    }

    pub fn blocks(&self, e_j: &[Input], e_k: &[Input]) -> Result<MultiTaskBlocks> {
        Ok(MultiTaskBlocks {
            f_jj: self.k_f.gram_sym(e_j)?,
            f_jk: self.k_f.gram(e_j, e_k)?,
            f_kk: self.k_f.gram_sym(e_k)?,
            delta_jj: self.k_delta.gram_sym(e_j)?,
        })
    }
}

/// Gram blocks entering the treatment-effect posterior.
#[derive(Debug, Clone)]
pub struct MultiTaskBlocks {
    pub f_jj: DMatrix<f64>,
    pub f_jk: DMatrix<f64>,
    pub f_kk: DMatrix<f64>,
    pub delta_jj: DMatrix<f64>,
}

/// Free-function form of [`MultiTaskKernelSpec::blocks`].
pub fn multitask_blocks(mk: &MultiTaskKernelSpec, e_j: &[Input], e_k: &[Input]) -> Result<MultiTaskBlocks> {
    mk.blocks(e_j, e_k)
}

/// Per-column standardization of covariates (zero mean, unit variance over
/// the fitting set). Columns with zero spread are only centered.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit(inputs: &[Input]) -> Result<Self> {
        let p = inputs.first().map_or(0, |u| u.x.len());
        if let Some(bad) = inputs.iter().find(|u| u.x.len() != p) {
            return Err(GpError::DimensionMismatch {
                context: "covariate vectors in fitting set",
                expected: p,
                got: bad.x.len(),
            });
        }
        let n = inputs.len() as f64;
        let mut mean = vec![0.0; p];
        let mut sd = vec![1.0; p];
        if p == 0 || inputs.is_empty() {
            return Ok(Standardizer { mean, sd });
        }
        for d in 0..p {
            let m = inputs.iter().map(|u| u.x[d]).sum::<f64>() / n;
            let var = inputs.iter().map(|u| (u.x[d] - m).powi(2)).sum::<f64>() / n;
            mean[d] = m;
            sd[d] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(Standardizer { mean, sd })
    }

    pub fn is_identity(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn apply(&self, u: &Input) -> Result<Input> {
        if self.is_identity() {
            return Ok(u.clone());
        }
        if u.x.len() != self.mean.len() {
            return Err(GpError::DimensionMismatch {
                context: "covariates to standardize",
                expected: self.mean.len(),
                got: u.x.len(),
            });
        }
        let x =
            u.x.iter()
                .zip(self.mean.iter().zip(&self.sd))
                .map(|(v, (m, s))| (v - m) / s)
                .collect();
        Ok(Input { time: u.time, x })
    }

    pub fn apply_all(&self, us: &[Input]) -> Result<Vec<Input>> {
        us.iter().map(|u| self.apply(u)).collect()
    }
}
