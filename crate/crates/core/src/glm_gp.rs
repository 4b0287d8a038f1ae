//! Latent GP with a non-Gaussian likelihood, fitted by the Laplace
//! approximation (Newton iteration to the posterior mode).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{GpError, Result};
use crate::estimator::{bootstrap, EceSet, EstimateResult};
use crate::gp_single::{ArmData, PosteriorSummary};
use crate::kernels::{Input, KernelSpec, Standardizer};
use crate::linalg::{symmetrize, Chol, GaussianSampler};
use crate::rng::{arm_index, domain, substream};

pub const MAX_NEWTON_ITER: usize = 100;
pub const GRAD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LikelihoodSpec {
    BernoulliLogit,
    PoissonLog,
    /// Identity link with known noise variance; mostly a consistency check
    /// against the exact conjugate posterior.
    Gaussian {
        noise_var: f64,
    },
}

pub fn expit(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LikelihoodSpec {
    pub fn tag(&self) -> &'static str {
        match self {
            LikelihoodSpec::BernoulliLogit => "bernoulli_logit",
            LikelihoodSpec::PoissonLog => "poisson_log",
            LikelihoodSpec::Gaussian { .. } => "gaussian",
        }
    }

    pub fn check_outcomes(&self, y: &[f64]) -> Result<()> {
        for (i, &v) in y.iter().enumerate() {
            let ok = match self {
                LikelihoodSpec::BernoulliLogit => v == 0.0 || v == 1.0,
                LikelihoodSpec::PoissonLog => v >= 0.0 && v.fract() == 0.0 && v.is_finite(),
                LikelihoodSpec::Gaussian { .. } => v.is_finite(),
            };
            if !ok {
                return Err(GpError::InvalidOutcome(format!(
                    "outcome {v} at position {i} is not valid for {}",
                    self.tag()
                )));
            }
        }
        if let LikelihoodSpec::Gaussian { noise_var } = self {
            if !(noise_var.is_finite() && *noise_var > 0.0) {
                return Err(GpError::InvalidParameter(format!(
                    "gaussian noise variance must be > 0, got {noise_var}"
                )));
            }
        }
        Ok(())
    }

    pub fn log_lik(&self, y: f64, f: f64) -> f64 {
        match self {
            // y f - log(1 + e^f), written stably
            LikelihoodSpec::BernoulliLogit => y * f - softplus(f),
            LikelihoodSpec::PoissonLog => y * f - f.exp() - ln_gamma(y + 1.0),
            LikelihoodSpec::Gaussian { noise_var } => {
                -0.5 * (y - f).powi(2) / noise_var - 0.5 * (2.0 * std::f64::consts::PI * noise_var).ln()
            }
        }
    }

    /// First derivative and negative second derivative in `f`.
    pub fn grad_w(&self, y: f64, f: f64) -> (f64, f64) {
        match self {
            LikelihoodSpec::BernoulliLogit => {
                let p = expit(f);
                (y - p, p * (1.0 - p))
            }
            LikelihoodSpec::PoissonLog => {
                let mu = f.exp();
                (y - mu, mu)
            }
            LikelihoodSpec::Gaussian { noise_var } => ((y - f) / noise_var, 1.0 / noise_var),
        }
    }

    pub fn inverse_link(&self, f: f64) -> f64 {
        match self {
            LikelihoodSpec::BernoulliLogit => expit(f),
            LikelihoodSpec::PoissonLog => f.exp(),
            LikelihoodSpec::Gaussian { .. } => f,
        }
    }
}

fn softplus(f: f64) -> f64 {
    if f > 0.0 {
        f + (-f).exp().ln_1p()
    } else {
        f.exp().ln_1p()
    }
}

#[derive(Debug, Clone)]
pub struct LaplaceFit {
    pub arm: usize,
    inputs: Vec<Input>,
    y: Vec<f64>,
    kernel: KernelSpec,
    mean_const: f64,
    likelihood: LikelihoodSpec,
    standardizer: Standardizer,
    k: DMatrix<f64>,
    f_hat: DVector<f64>,
    /// `K⁻¹ (f̂ - m)`, equal to the likelihood gradient at the mode.
    a: DVector<f64>,
    w: DVector<f64>,
    /// Factor of `I + W½ K W½`.
    b_chol: Chol,
    pub iterations: usize,
    pub grad_norm: f64,
}

fn objective(lik: &LikelihoodSpec, y: &[f64], f: &DVector<f64>, a: &DVector<f64>, m: f64) -> f64 {
    let ll: f64 = y.iter().zip(f.iter()).map(|(&yi, &fi)| lik.log_lik(yi, fi)).sum();
    ll - 0.5 * a.dot(&f.map(|v| v - m))
}

pub fn fit_laplace(
    arm: usize,
    data: &ArmData,
    kernel: &KernelSpec,
    mean_const: f64,
    likelihood: LikelihoodSpec,
) -> Result<LaplaceFit> {
    data.check()?;
    kernel.validate()?;
    likelihood.check_outcomes(&data.y)?;
    if !mean_const.is_finite() {
        return Err(GpError::InvalidParameter("prior mean must be finite".into()));
    }
    let standardizer = if kernel.uses_covariates() {
        Standardizer::fit(&data.inputs)?
    } else {
        Standardizer::default()
    };
    let inputs = standardizer.apply_all(&data.inputs)?;
    let n = inputs.len();
    let k = kernel.gram_sym(&inputs)?;
    let y = data.y.clone();

    let mut f = DVector::from_element(n, mean_const);
    let mut a = DVector::zeros(n);
    let mut psi = objective(&likelihood, &y, &f, &a, mean_const);
    let mut iterations = 0;
    loop {
        let (grad, w) = grad_and_w(&likelihood, &y, &f);
        let grad_norm = (&grad - &a).amax();
        if grad_norm < GRAD_TOL || n == 0 {
            let b_chol = factor_b(&k, &w)?;
            return Ok(LaplaceFit {
                arm,
                inputs,
                y,
                kernel: kernel.clone(),
                mean_const,
                likelihood,
                standardizer,
                k,
                f_hat: f,
                a,
                w,
                b_chol,
                iterations,
                grad_norm,
            });
        }
        if iterations >= MAX_NEWTON_ITER {
            return Err(GpError::NonConvergence(format!(
                "Laplace mode search stopped after {iterations} iterations, gradient {grad_norm:.3e}"
            )));
        }
        iterations += 1;
        let sw = w.map(f64::sqrt);
        let b_chol = factor_b(&k, &w)?;
        let b = w.component_mul(&f.map(|v| v - mean_const)) + &grad;
        let kb = &k * &b;
        let inner = b_chol.solve_vec(&sw.component_mul(&kb));
        let a_new = &b - sw.component_mul(&inner);
        let mut step_a = a_new;
        let mut f_new = &k * &step_a + DVector::from_element(n, mean_const);
        let mut psi_new = objective(&likelihood, &y, &f_new, &step_a, mean_const);
        let mut halvings = 0;
        while !(psi_new >= psi) && halvings < 30 {
            step_a = (&a + &step_a) * 0.5;
            f_new = &k * &step_a + DVector::from_element(n, mean_const);
            psi_new = objective(&likelihood, &y, &f_new, &step_a, mean_const);
            halvings += 1;
        }
        a = step_a;
        f = f_new;
        psi = psi_new;
    }
}

fn grad_and_w(lik: &LikelihoodSpec, y: &[f64], f: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = y.len();
    let mut g = DVector::zeros(n);
    let mut w = DVector::zeros(n);
    for i in 0..n {
        let (gi, wi) = lik.grad_w(y[i], f[i]);
        g[i] = gi;
        w[i] = wi;
    }
    (g, w)
}

fn factor_b(k: &DMatrix<f64>, w: &DVector<f64>) -> Result<Chol> {
    let n = w.len();
    let sw = w.map(f64::sqrt);
    let mut b = DMatrix::from_fn(n, n, |r, s| sw[r] * k[(r, s)] * sw[s]);
    for i in 0..n {
        b[(i, i)] += 1.0;
    }
    symmetrize(&mut b);
    Chol::factor(&b, &vec![1.0; n], "Laplace B")
}

impl LaplaceFit {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn mode(&self) -> &DVector<f64> {
        &self.f_hat
    }

    pub fn neg_hessian(&self) -> &DVector<f64> {
        &self.w
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn mean_const(&self) -> f64 {
        self.mean_const
    }

    pub fn likelihood(&self) -> LikelihoodSpec {
        self.likelihood
    }

    /// Gradient of the log joint at the mode, `∇ log p(y|f̂) - K⁻¹(f̂ - m)`.
    pub fn mode_gradient(&self) -> DVector<f64> {
        let (g, _) = grad_and_w(&self.likelihood, &self.y, &self.f_hat);
        g - &self.a
    }

    /// Approximate log marginal likelihood at the mode.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let half_logdet = 0.5 * self.b_chol.log_det();
        objective(&self.likelihood, &self.y, &self.f_hat, &self.a, self.mean_const) - half_logdet
    }

    /// Gaussian approximation to the latent posterior at `e`.
    pub fn latent_posterior(&self, e: &[Input]) -> Result<PosteriorSummary> {
        let q = self.standardizer.apply_all(e)?;
        let k_qq = self.kernel.gram_sym(&q)?;
        let k_eq = self.kernel.gram(&self.inputs, &q)?;
        let mean = k_eq.tr_mul(&self.a) + DVector::from_element(q.len(), self.mean_const);
        let sw = self.w.map(f64::sqrt);
        let mut scaled = k_eq;
        for (r, s) in sw.iter().enumerate() {
            scaled.row_mut(r).scale_mut(*s);
        }
        let v = self.b_chol.half_solve(&scaled);
        let mut cov = k_qq - v.tr_mul(&v);
        symmetrize(&mut cov);
        Ok(PosteriorSummary { mean, cov })
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.k
    }
}

pub fn latent_posterior(fit: &LaplaceFit, e: &[Input]) -> Result<PosteriorSummary> {
    fit.latent_posterior(e)
}

/// Bayesian-bootstrap contrast on the mean scale: latent draws are mapped
/// through the inverse link before averaging.
pub fn estimate_contrast_glm(
    fit_j: &LaplaceFit,
    fit_k: &LaplaceFit,
    ece: &EceSet,
    b: usize,
    seed: u64,
) -> Result<EstimateResult> {
    if ece.inputs.is_empty() {
        return Err(GpError::EmptyEce { j: ece.j, k: ece.k });
    }
    let pj = fit_j.latent_posterior(&ece.inputs)?;
    let pk = fit_k.latent_posterior(&ece.inputs)?;
    let sj = GaussianSampler::new(pj.mean, &pj.cov);
    let sk = GaussianSampler::new(pk.mean, &pk.cov);
    let (lj, lk) = (fit_j.likelihood, fit_k.likelihood);
    let (aj, ak) = (fit_j.arm, fit_k.arm);
    let tag = format!("glm_{}", lj.tag());
    bootstrap(ece.n(), b, seed, &tag, |r| {
        let fj = sj.sample(&mut substream(seed, domain::POSTERIOR, arm_index(aj, r)));
        let fk = sk.sample(&mut substream(seed, domain::POSTERIOR, arm_index(ak, r)));
        fj.map(|v| lj.inverse_link(v)) - fk.map(|v| lk.inverse_link(v))
    })
}
