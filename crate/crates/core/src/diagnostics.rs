//! Diagnostics: explicit estimator weights and effective sample size,
//! kernel ridge solvers, variance-reduction certificates, and bias bounds
//! against synthetic truths.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::estimator::EceSet;
use crate::gp_multi::{fit_multi_with, ArmNoise, MultiTaskFit, MultiTaskMeans};
use crate::gp_single::{fit_single_with, ArmData, SingleTaskFit};
use crate::kernels::{Input, KernelSpec, MultiTaskKernelSpec, Standardizer, Task};
use crate::linalg::{min_eigenvalue, symmetrize};

/// Certificates pass when the smallest eigenvalue is at least this.
pub const CERTIFICATE_TOL: f64 = -1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightReport {
    /// `n_jk × (n_j + n_k)`; row `i` holds the outcome weights of the
    /// posterior-mean contrast at ECE point `i`.
    pub w_cc: DMatrix<f64>,
    pub constant_offset: f64,
    /// Prior-mean-centred outcomes, treatment arm first.
    pub transformed_outcomes: DVector<f64>,
    pub n_j: usize,
    /// Weight of each control outcome in the control side of the estimate
    /// (negated column means of the control block).
    pub control_weights: Vec<f64>,
    pub ess_control: Option<EssReport>,
}

impl WeightReport {
    /// `1ᵀ W y / n_jk + c`
    pub fn estimate(&self) -> f64 {
        let n = self.w_cc.nrows() as f64;
        (&self.w_cc * &self.transformed_outcomes).sum() / n + self.constant_offset
    }

    fn finish(w_cc: DMatrix<f64>, c: f64, y: DVector<f64>, n_j: usize) -> Self {
        let n_k = w_cc.ncols() - n_j;
        let n = w_cc.nrows() as f64;
        let control_weights: Vec<f64> = (0..n_k).map(|c| -w_cc.column(n_j + c).sum() / n).collect();
        let ess_control = ess(&control_weights).ok();
        WeightReport {
            w_cc,
            constant_offset: c,
            transformed_outcomes: y,
            n_j,
            control_weights,
            ess_control,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EssReport {
    pub ess: f64,
    /// Some weight is negative, so the ESS is only an approximate diagnostic.
    pub negative_weights: bool,
}

/// Kish effective sample size `(Σw)² / Σw²`.
pub fn ess(weights: &[f64]) -> Result<EssReport> {
    if weights.is_empty() {
        return Err(GpError::InvalidParameter("ESS of an empty weight vector".into()));
    }
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 == 0.0 {
        return Err(GpError::InvalidParameter("ESS undefined for all-zero weights".into()));
    }
    let s: f64 = weights.iter().sum();
    Ok(EssReport {
        ess: s * s / s2,
        negative_weights: weights.iter().any(|&w| w < 0.0),
    })
}

pub fn weight_matrix_single(fit_j: &SingleTaskFit, fit_k: &SingleTaskFit, ece: &EceSet) -> Result<WeightReport> {
    let wj = fit_j.weights(&ece.inputs)?;
    let wk = fit_k.weights(&ece.inputs)?;
    let (nj, nk, n) = (fit_j.n(), fit_k.n(), ece.n());
    let mut w = DMatrix::zeros(n, nj + nk);
    w.columns_mut(0, nj).copy_from(&wj.transpose());
    w.columns_mut(nj, nk).copy_from(&(-wk.transpose()));
    let mut y = DVector::zeros(nj + nk);
    for r in 0..nj {
        y[r] = fit_j.outcomes()[r] - fit_j.mean_const();
    }
    for r in 0..nk {
        y[nj + r] = fit_k.outcomes()[r] - fit_k.mean_const();
    }
    Ok(WeightReport::finish(w, fit_j.mean_const() - fit_k.mean_const(), y, nj))
}

pub fn weight_matrix_multi(fit: &MultiTaskFit, ece: &EceSet) -> Result<WeightReport> {
    let w = fit.delta_weights(&ece.inputs)?.transpose();
    let m = fit.means();
    let (nj, nk) = (fit.n_j(), fit.n_k());
    let mut y = DVector::zeros(nj + nk);
    for r in 0..nj {
        y[r] = fit.y_j()[r] - m.base - m.delta;
    }
    for r in 0..nk {
        y[nj + r] = fit.y_k()[r] - m.base;
    }
    Ok(WeightReport::finish(w, m.delta, y, nj))
}

/// Kernel ridge regression `k(e, E) {k(E, E) + n λ I}⁻¹ Y`, solved by LU
/// so it is independent of the Cholesky path used for GP posteriors.
#[derive(Debug, Clone)]
pub struct KrrModel {
    kernel: KernelSpec,
    inputs: Vec<Input>,
    coef: DVector<f64>,
}

impl KrrModel {
    pub fn predict(&self, e: &[Input]) -> Result<DVector<f64>> {
        Ok(self.kernel.gram(e, &self.inputs)? * &self.coef)
    }
}

fn lu_solve(a: DMatrix<f64>, b: &DVector<f64>, context: &'static str) -> Result<DVector<f64>> {
    if a.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    a.lu().solve(b).ok_or(GpError::Factorization {
        context,
        min_eigenvalue: f64::NAN,
    })
}

pub fn krr_solve(kernel: &KernelSpec, inputs: &[Input], y: &[f64], lambda: f64) -> Result<KrrModel> {
    if !(lambda > 0.0) {
        return Err(GpError::InvalidParameter(format!(
            "ridge penalty must be > 0, got {lambda}"
        )));
    }
    if inputs.len() != y.len() {
        return Err(GpError::LengthMismatch(format!(
            "{} inputs but {} outcomes",
            inputs.len(),
            y.len()
        )));
    }
    let n = inputs.len();
    let mut a = kernel.gram(inputs, inputs)?;
    for i in 0..n {
        a[(i, i)] += n as f64 * lambda;
    }
    let coef = lu_solve(a, &DVector::from_column_slice(y), "kernel ridge system")?;
    Ok(KrrModel {
        kernel: kernel.clone(),
        inputs: inputs.to_vec(),
        coef,
    })
}

/// Ridge regression with the composite two-task kernel
/// `k_u = k_f + 1{a = a' = j} k_Δ` and per-arm noise weights.
#[derive(Debug, Clone)]
pub struct MultiKrrModel {
    mk: MultiTaskKernelSpec,
    points: Vec<(Input, Task)>,
    coef: DVector<f64>,
    delta: f64,
}

impl MultiKrrModel {
    /// `û(e, a)`
    pub fn predict(&self, e: &[Input], task: Task) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(e.len());
        for (r, u) in e.iter().enumerate() {
            let mut s = if task == Task::Treatment { self.delta } else { 0.0 };
            for (c, (v, t)) in self.points.iter().enumerate() {
                s += self.mk.eval((u, task), (v, *t))? * self.coef[c];
            }
            out[r] = s;
        }
        Ok(out)
    }
}

pub fn krr_solve_multi(
    mk: &MultiTaskKernelSpec,
    data_j: &ArmData,
    data_k: &ArmData,
    delta: f64,
    lambda: f64,
    noise: ArmNoise,
) -> Result<MultiKrrModel> {
    if !(lambda > 0.0) {
        return Err(GpError::InvalidParameter(format!(
            "ridge penalty must be > 0, got {lambda}"
        )));
    }
    data_j.check()?;
    data_k.check()?;
    let points: Vec<(Input, Task)> = data_j
        .inputs
        .iter()
        .map(|u| (u.clone(), Task::Treatment))
        .chain(data_k.inputs.iter().map(|u| (u.clone(), Task::Control)))
        .collect();
    let n = points.len();
    let scale = n as f64 * lambda;
    let mut a = DMatrix::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            a[(r, c)] = mk.eval((&points[r].0, points[r].1), (&points[c].0, points[c].1))?;
        }
        let s2 = if points[r].1 == Task::Treatment {
            noise.treatment
        } else {
            noise.control
        };
        a[(r, r)] += scale * s2;
    }
    let rhs = DVector::from_iterator(n, data_j.y.iter().map(|v| v - delta).chain(data_k.y.iter().cloned()));
    let coef = lu_solve(a, &rhs, "composite kernel ridge system")?;
    Ok(MultiKrrModel {
        mk: mk.clone(),
        points,
        coef,
        delta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    /// Smallest eigenvalue of `k̄_cc(e, e) - k̄(e, e)`.
    pub min_eigenvalue: f64,
    pub passes: bool,
}

impl Certificate {
    fn from_difference(d: DMatrix<f64>) -> Self {
        let mut d = d;
        symmetrize(&mut d);
        let min_eigenvalue = if d.iter().all(|&v| v == 0.0) {
            0.0
        } else {
            min_eigenvalue(&d)
        };
        Certificate {
            min_eigenvalue,
            passes: min_eigenvalue >= CERTIFICATE_TOL,
        }
    }
}

fn check_subset(cc: &[Input], full: &[Input]) -> Result<()> {
    let mut used = vec![false; full.len()];
    for u in cc {
        match (0..full.len()).find(|&i| !used[i] && full[i] == *u) {
            Some(i) => used[i] = true,
            None => {
                return Err(GpError::NotNested(format!(
                    "concurrent input at time {} is missing from the full data",
                    u.time
                )))
            }
        }
    }
    Ok(())
}

fn zero_outcomes(inputs: &[Input]) -> ArmData {
    ArmData {
        inputs: inputs.to_vec(),
        y: vec![0.0; inputs.len()],
    }
}

/// Single-task posterior covariance shrinkage when extra rows are added.
/// Both fits share the full data's covariate standardization.
pub fn variance_reduction_single(
    kernel: &KernelSpec,
    noise_var: f64,
    cc: &[Input],
    full: &[Input],
    grid: &[Input],
) -> Result<Certificate> {
    check_subset(cc, full)?;
    let st = Standardizer::fit(full)?;
    let a = fit_single_with(0, &zero_outcomes(cc), kernel, noise_var, 0.0, Some(st.clone()))?.posterior(grid)?;
    let b = fit_single_with(0, &zero_outcomes(full), kernel, noise_var, 0.0, Some(st))?.posterior(grid)?;
    Ok(Certificate::from_difference(a.cov - b.cov))
}

/// Treatment-effect posterior covariance shrinkage when controls are added.
pub fn variance_reduction_multi(
    mk: &MultiTaskKernelSpec,
    noise: ArmNoise,
    treatment: &[Input],
    control_cc: &[Input],
    control_full: &[Input],
    grid: &[Input],
) -> Result<Certificate> {
    check_subset(control_cc, control_full)?;
    let means = MultiTaskMeans { base: 0.0, delta: 0.0 };
    let dj = zero_outcomes(treatment);
    let all: Vec<Input> = treatment.iter().chain(control_full).cloned().collect();
    let st = Standardizer::fit(&all)?;
    let a =
        fit_multi_with(&dj, &zero_outcomes(control_cc), mk, noise, means, Some(st.clone()))?.delta_posterior(grid)?;
    let b = fit_multi_with(&dj, &zero_outcomes(control_full), mk, noise, means, Some(st))?.delta_posterior(grid)?;
    Ok(Certificate::from_difference(a.cov - b.cov))
}

/// `Δ₀ = δ + Σ c_r k_Δ(·, t_r)` and `f₀ = m + Σ d_s k_f(·, s_s)`, with `δ`,
/// `m` and the kernels taken from the fit. Centers live in the fit's
/// (standardized) input space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub delta_centers: Vec<Input>,
    pub delta_coef: Vec<f64>,
    pub f_centers: Vec<Input>,
    pub f_coef: Vec<f64>,
}

impl SyntheticTruth {
    fn check(&self) -> Result<()> {
        if self.delta_centers.len() != self.delta_coef.len() || self.f_centers.len() != self.f_coef.len() {
            return Err(GpError::LengthMismatch(
                "kernel expansion centers and coefficients differ in length".into(),
            ));
        }
        Ok(())
    }

    fn expansion(k: &KernelSpec, centers: &[Input], coef: &[f64], at: &[Input]) -> Result<DVector<f64>> {
        Ok(k.gram(at, centers)? * DVector::from_column_slice(coef))
    }

    fn rkhs_norm(k: &KernelSpec, centers: &[Input], coef: &[f64]) -> Result<f64> {
        let c = DVector::from_column_slice(coef);
        let q = c.dot(&(k.gram_sym(centers)? * &c));
        Ok(q.max(0.0).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasBoundReport {
    pub rkhs_norm_delta: f64,
    pub rkhs_norm_f: f64,
    pub avg_post_var: f64,
    pub mu_n_term: f64,
    pub bound_thm2: f64,
    pub bound_cor1: f64,
    pub exact_bias: f64,
    /// Smallest eigenvalue of `G_f`.
    pub g_f_min_eigenvalue: f64,
    /// Smallest eigenvalue of `F_Sch - G_f`.
    pub schur_gap_min_eigenvalue: f64,
}

/// `G_f = F_Sch - σ_k² k_f,jk (k_f,kk + σ_k² I)⁻² k_f,kj`
pub fn gram_g_f(fit: &MultiTaskFit) -> DMatrix<f64> {
    let p_kj = fit.ctrl_chol().solve(&fit.blocks().f_jk.transpose());
    let mut g = fit.schur_f() - p_kj.tr_mul(&p_kj) * fit.noise().control;
    symmetrize(&mut g);
    g
}

pub fn bias_bound(fit: &MultiTaskFit, ece: &EceSet, truth: &SyntheticTruth) -> Result<BiasBoundReport> {
    truth.check()?;
    let mk = fit.kernel();
    let means = fit.means();
    let grid = fit.query(&ece.inputs)?;
    let n = grid.len() as f64;

    let post = fit.delta_posterior(&ece.inputs)?;
    let avg_post_var = (post.cov.diagonal().sum() / n).max(0.0);

    // μ_n(E_j) = n⁻¹ Σ_i k_Δ(e_i, E_j)
    let k_qj = mk.k_delta.gram(&grid, fit.inputs_j())?;
    let mu = DVector::from_iterator(fit.n_j(), k_qj.column_iter().map(|c| c.sum() / n));
    let b1_mu = fit.b1_chol().solve_vec(&mu);
    let g_f = gram_g_f(fit);
    let mu_n_term = b1_mu.dot(&(&g_f * &b1_mu)).max(0.0);

    let norm_d = SyntheticTruth::rkhs_norm(&mk.k_delta, &truth.delta_centers, &truth.delta_coef)?;
    let norm_f = SyntheticTruth::rkhs_norm(&mk.k_f, &truth.f_centers, &truth.f_coef)?;

    // Expected outcomes without noise, pushed through the (linear) posterior mean.
    let h_j = SyntheticTruth::expansion(&mk.k_delta, &truth.delta_centers, &truth.delta_coef, fit.inputs_j())?;
    let g_j = SyntheticTruth::expansion(&mk.k_f, &truth.f_centers, &truth.f_coef, fit.inputs_j())?;
    let g_k = SyntheticTruth::expansion(&mk.k_f, &truth.f_centers, &truth.f_coef, fit.inputs_k())?;
    let ey_j: Vec<f64> = (0..fit.n_j())
        .map(|r| means.base + g_j[r] + means.delta + h_j[r])
        .collect();
    let ey_k: Vec<f64> = (0..fit.n_k()).map(|r| means.base + g_k[r]).collect();
    let expected = fit.with_outcomes(&ey_j, &ey_k)?.delta_mean(&ece.inputs)?.mean();
    let h_grid = SyntheticTruth::expansion(&mk.k_delta, &truth.delta_centers, &truth.delta_coef, &grid)?;
    let target = means.delta + h_grid.mean();

    let mut gap = fit.schur_f() - &g_f;
    symmetrize(&mut gap);
    Ok(BiasBoundReport {
        rkhs_norm_delta: norm_d,
        rkhs_norm_f: norm_f,
        avg_post_var,
        mu_n_term,
        bound_thm2: norm_d * avg_post_var.sqrt() + norm_f * mu_n_term.sqrt(),
        bound_cor1: (norm_d + norm_f) * avg_post_var.sqrt(),
        exact_bias: expected - target,
        g_f_min_eigenvalue: min_eigenvalue(&g_f),
        schur_gap_min_eigenvalue: min_eigenvalue(&gap),
    })
}
