//! Exact single-task GP regression for one arm.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::kernels::{Input, KernelSpec, Standardizer};
use crate::linalg::{symmetrize, Chol, GaussianSampler};

/// Training data of one arm.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmData {
    pub inputs: Vec<Input>,
    pub y: Vec<f64>,
}

impl ArmData {
    pub fn new(inputs: Vec<Input>, y: Vec<f64>) -> Result<Self> {
        let d = ArmData { inputs, y };
        d.check()?;
        Ok(d)
    }

    /// Time-only data.
    pub fn from_times(times: &[f64], y: &[f64]) -> Result<Self> {
        ArmData::new(crate::kernels::inputs_from_times(times), y.to_vec())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        if self.inputs.len() != self.y.len() {
            return Err(GpError::LengthMismatch(format!(
                "{} inputs but {} outcomes",
                self.inputs.len(),
                self.y.len()
            )));
        }
        Ok(())
    }

    /// Append the rows of `other`.
    pub fn extended(&self, other: &ArmData) -> ArmData {
        let mut out = self.clone();
        out.inputs.extend(other.inputs.iter().cloned());
        out.y.extend(other.y.iter().cloned());
        out
    }
}

/// Gaussian summary of a posterior over a finite set of query points.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl PosteriorSummary {
    pub fn variances(&self) -> DVector<f64> {
        self.cov.diagonal()
    }
}

/// Fitted posterior of `f_a ~ GP(m_a, k_a)` given one arm's outcomes.
#[derive(Debug, Clone)]
pub struct SingleTaskFit {
    pub arm: usize,
    /// Training inputs after covariate standardization.
    inputs: Vec<Input>,
    y: DVector<f64>,
    kernel: KernelSpec,
    noise_var: f64,
    mean_const: f64,
    standardizer: Standardizer,
    /// Factor of `k(E,E) + σ² I`.
    chol: Chol,
    /// `{k(E,E) + σ² I}⁻¹ (Y - m)`
    alpha: DVector<f64>,
}

/// Condition a single-task GP on one arm's data.
pub fn fit_single(
    arm: usize,
    data: &ArmData,
    kernel: &KernelSpec,
    noise_var: f64,
    mean_const: f64,
) -> Result<SingleTaskFit> {
    fit_single_with(arm, data, kernel, noise_var, mean_const, None)
}

/// As [`fit_single`], with covariates standardized by `standardizer`
/// instead of by the arm's own moments.
pub fn fit_single_with(
    arm: usize,
    data: &ArmData,
    kernel: &KernelSpec,
    noise_var: f64,
    mean_const: f64,
    standardizer: Option<Standardizer>,
) -> Result<SingleTaskFit> {
    data.check()?;
    kernel.validate()?;
    if !(noise_var.is_finite() && noise_var > 0.0) {
        return Err(GpError::InvalidParameter(format!(
            "noise variance must be > 0, got {noise_var}"
        )));
    }
    if !mean_const.is_finite() {
        return Err(GpError::InvalidParameter("prior mean must be finite".into()));
    }
    let standardizer = match standardizer {
        _ if !kernel.uses_covariates() => Standardizer::default(),
        Some(s) => s,
        None => Standardizer::fit(&data.inputs)?,
    };
    let inputs = standardizer.apply_all(&data.inputs)?;
    let mut sys = kernel.gram_sym(&inputs)?;
    let scale = kernel.diag(&inputs)?;
    for i in 0..inputs.len() {
        sys[(i, i)] += noise_var;
    }
    let chol = Chol::factor(&sys, &scale, "single-task system matrix")?;
    let y = DVector::from_column_slice(&data.y);
    let resid = y.map(|v| v - mean_const);
    let alpha = chol.solve_vec(&resid);
    Ok(SingleTaskFit {
        arm,
        inputs,
        y,
        kernel: kernel.clone(),
        noise_var,
        mean_const,
        standardizer,
        chol,
        alpha,
    })
}

impl SingleTaskFit {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn mean_const(&self) -> f64 {
        self.mean_const
    }

    pub fn inputs(&self) -> &[Input] {
        &self.inputs
    }

    pub fn outcomes(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn chol(&self) -> &Chol {
        &self.chol
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// `k(E,E) + σ² I` as factored (jitter included if it was needed).
    pub fn system_matrix(&self) -> DMatrix<f64> {
        self.chol.reconstruct()
    }

    fn query(&self, e: &[Input]) -> Result<Vec<Input>> {
        self.standardizer.apply_all(e)
    }

    /// `{k(E,E) + σ² I}⁻¹ k(E, e)`: column `i` holds the outcome weights of
    /// the posterior mean at `e_i`.
    pub fn weights(&self, e: &[Input]) -> Result<DMatrix<f64>> {
        let q = self.query(e)?;
        let k_eq = self.kernel.gram(&self.inputs, &q)?;
        Ok(self.chol.solve(&k_eq))
    }

    pub fn posterior_mean(&self, e: &[Input]) -> Result<DVector<f64>> {
        let q = self.query(e)?;
        let k_qe = self.kernel.gram(&q, &self.inputs)?;
        Ok(k_qe * &self.alpha + DVector::from_element(q.len(), self.mean_const))
    }

    pub fn posterior(&self, e: &[Input]) -> Result<PosteriorSummary> {
        let q = self.query(e)?;
        let k_qq = self.kernel.gram_sym(&q)?;
        let k_eq = self.kernel.gram(&self.inputs, &q)?;
        let mean = k_eq.tr_mul(&self.alpha) + DVector::from_element(q.len(), self.mean_const);
        let v = self.chol.half_solve(&k_eq);
        let mut cov = k_qq - v.tr_mul(&v);
        symmetrize(&mut cov);
        Ok(PosteriorSummary { mean, cov })
    }

    /// `draws × |e|` matrix of joint posterior draws.
    pub fn sample_posterior<R: Rng + ?Sized>(&self, e: &[Input], draws: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        if draws == 0 {
            return Err(GpError::InvalidParameter("draw count must be >= 1".into()));
        }
        let post = self.posterior(e)?;
        Ok(GaussianSampler::new(post.mean, &post.cov).sample_matrix(draws, rng))
    }

    /// `log N(Y | m 1, k(E,E) + σ² I)`
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.n() as f64;
        let resid = self.y.map(|v| v - self.mean_const);
        -0.5 * resid.dot(&self.alpha) - 0.5 * self.chol.log_det() - 0.5 * n * (2.0 * PI).ln()
    }
}

/// Free-function form of [`SingleTaskFit::posterior`].
pub fn posterior(fit: &SingleTaskFit, e: &[Input]) -> Result<PosteriorSummary> {
    fit.posterior(e)
}

/// Free-function form of [`SingleTaskFit::log_marginal_likelihood`].
pub fn log_marginal_likelihood(fit: &SingleTaskFit) -> f64 {
    fit.log_marginal_likelihood()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::inputs_from_times;
    use crate::linalg::min_eigenvalue;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn se11() -> KernelSpec {
        KernelSpec::se(1.0, 1.0)
    }

    #[test]
    fn empty_data_gives_prior() {
        let fit = fit_single(1, &ArmData::default(), &se11(), 1.0, 0.7).unwrap();
        assert_eq!(fit.n(), 0);
        let q = inputs_from_times(&[0.0, 0.5, 3.0]);
        let post = fit.posterior(&q).unwrap();
        assert!(post.mean.iter().all(|&m| m == 0.7));
        assert_eq!(post.cov, se11().gram(&q, &q).unwrap());
    }

    #[test]
    fn one_observation() {
        let data = ArmData::from_times(&[0.0], &[2.0]).unwrap();
        let fit = fit_single(1, &data, &se11(), 1.0, 0.0).unwrap();
        assert!((fit.alpha()[0] - 1.0).abs() < 1e-15);
        let post = fit.posterior(&[Input::at(0.0)]).unwrap();
        assert!((post.mean[0] - 1.0).abs() < 1e-15);
        assert!((post.cov[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn duplicated_times_factorize() {
        let data = ArmData::from_times(&[0.0, 0.0], &[1.0, 1.2]).unwrap();
        assert!(fit_single(1, &data, &se11(), 1e-3, 0.0).is_ok());
    }

    #[test]
    fn rejects_bad_input() {
        let bad = ArmData {
            inputs: inputs_from_times(&[0.0, 1.0]),
            y: vec![1.0],
        };
        assert!(matches!(
            fit_single(1, &bad, &se11(), 1.0, 0.0),
            Err(GpError::LengthMismatch(_))
        ));
        let ok = ArmData::from_times(&[0.0], &[1.0]).unwrap();
        assert!(fit_single(1, &ok, &se11(), 0.0, 0.0).is_err());
    }

    #[test]
    fn far_query_reverts_to_prior() {
        let data = ArmData::from_times(&[0.0, 0.3, 1.0], &[3.0, 2.0, 2.5]).unwrap();
        let k = KernelSpec::se(1.7, 1.0);
        let fit = fit_single(1, &data, &k, 0.5, 0.4).unwrap();
        let post = fit.posterior(&[Input::at(11.0)]).unwrap();
        assert!((post.mean[0] - 0.4).abs() < 1e-6);
        assert!((post.cov[(0, 0)] - 1.7).abs() < 1e-6);
    }

    #[test]
    fn cholesky_reproduces_system_matrix() {
        let times = [0.0, 0.5, 1.1, 4.0, 4.2];
        let data = ArmData::from_times(&times, &[1.0, 2.0, 0.0, -1.0, 3.0]).unwrap();
        let k = KernelSpec::matern(2.0, 2.5, 1.5);
        let fit = fit_single(1, &data, &k, 0.3, 0.0).unwrap();
        let mut want = k.gram(data.inputs.as_slice(), data.inputs.as_slice()).unwrap();
        for i in 0..times.len() {
            want[(i, i)] += 0.3;
        }
        let rel = (fit.system_matrix() - &want).amax() / want.amax();
        assert!(rel < 1e-8);
    }

    #[test]
    fn interpolates_with_negligible_noise() {
        let times = [0.0, 1.0, 2.5, 4.0, 6.0];
        let y = [0.3, -0.2, 1.1, 0.7, -0.4];
        let data = ArmData::from_times(&times, &y).unwrap();
        let fit = fit_single(1, &data, &KernelSpec::se(1.0, 1.0), 1e-10, 0.0).unwrap();
        let m = fit.posterior_mean(&data.inputs).unwrap();
        for (a, b) in m.iter().zip(&y) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_covariance_draws_equal_mean() {
        // Prior kernel identically zero: posterior covariance is exactly zero.
        let data = ArmData::from_times(&[0.0, 1.0], &[1.0, 2.0]).unwrap();
        let fit = fit_single(1, &data, &KernelSpec::se(0.0, 1.0), 1.0, 3.0).unwrap();
        let q = inputs_from_times(&[0.2, 0.9]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = fit.sample_posterior(&q, 10, &mut rng).unwrap();
        assert!(d.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn sampling_is_seeded_and_centered() {
        let data = ArmData::from_times(&[0.0, 1.0, 2.0, 5.0], &[1.0, 1.5, 0.5, 2.0]).unwrap();
        let fit = fit_single(1, &data, &KernelSpec::se(1.0, 1.5), 0.25, 0.0).unwrap();
        let q = inputs_from_times(&[0.5, 2.5, 4.0, 8.0]);
        let b = 10_000;
        let a = fit.sample_posterior(&q, b, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let a2 = fit.sample_posterior(&q, b, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, a2);
        let post = fit.posterior(&q).unwrap();
        for c in 0..q.len() {
            let mean = a.column(c).sum() / b as f64;
            let tol = 4.0 * (post.cov[(c, c)] / b as f64).sqrt();
            assert!((mean - post.mean[c]).abs() < tol, "coordinate {c}");
        }
    }

    #[test]
    fn lml_single_point() {
        let data = ArmData::from_times(&[0.0], &[0.0]).unwrap();
        let fit = fit_single(1, &data, &se11(), 1.0, 0.0).unwrap();
        let want = -0.5 * (2.0 * PI * 2.0).ln();
        assert!((fit.log_marginal_likelihood() - want).abs() < 1e-14);
    }

    #[test]
    fn lml_permutation_invariant() {
        let t = [0.0, 1.3, 2.0, 2.2, 7.0];
        let y = [0.1, 0.4, -1.0, 2.0, 0.0];
        let k = KernelSpec::se(1.4, 2.0);
        let a = fit_single(1, &ArmData::from_times(&t, &y).unwrap(), &k, 0.4, 0.2).unwrap();
        let perm = [3, 0, 4, 2, 1];
        let tp: Vec<f64> = perm.iter().map(|&i| t[i]).collect();
        let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let b = fit_single(1, &ArmData::from_times(&tp, &yp).unwrap(), &k, 0.4, 0.2).unwrap();
        assert!((a.log_marginal_likelihood() - b.log_marginal_likelihood()).abs() < 1e-10);
    }

    #[test]
    fn lml_far_points_factorize() {
        let k = se11();
        let one = |t: f64, y: f64| {
            fit_single(1, &ArmData::from_times(&[t], &[y]).unwrap(), &k, 0.5, 0.0)
                .unwrap()
                .log_marginal_likelihood()
        };
        let both = fit_single(
            1,
            &ArmData::from_times(&[0.0, 50.0], &[0.7, -1.1]).unwrap(),
            &k,
            0.5,
            0.0,
        )
        .unwrap()
        .log_marginal_likelihood();
        assert!((both - one(0.0, 0.7) - one(50.0, -1.1)).abs() < 1e-6);
    }

    #[test]
    fn posterior_covariance_psd() {
        let times: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin() * 10.0 + 10.0).collect();
        let y: Vec<f64> = times.iter().map(|t| (t / 3.0).cos()).collect();
        let fit = fit_single(
            1,
            &ArmData::from_times(&times, &y).unwrap(),
            &KernelSpec::se(1.0, 2.0),
            0.1,
            0.0,
        )
        .unwrap();
        let q = inputs_from_times(&(0..40).map(|i| i as f64 * 0.5).collect::<Vec<_>>());
        let post = fit.posterior(&q).unwrap();
        assert!(min_eigenvalue(&post.cov) > -1e-8);
        assert!(post.cov.diagonal().iter().all(|&v| v >= -1e-10));
    }

    #[test]
    fn covariates_are_standardized() {
        let inputs = vec![
            Input::new(0.0, vec![10.0]),
            Input::new(1.0, vec![20.0]),
            Input::new(2.0, vec![30.0]),
        ];
        let data = ArmData::new(inputs.clone(), vec![1.0, 2.0, 3.0]).unwrap();
        let k = KernelSpec::Sum {
            terms: vec![KernelSpec::se(1.0, 1.0), KernelSpec::Linear { tau_beta2: 1.0 }],
        };
        let fit = fit_single(1, &data, &k, 0.1, 0.0).unwrap();
        let sd = (200.0f64 / 3.0).sqrt();
        assert!((fit.inputs()[2].x[0] - 10.0 / sd).abs() < 1e-12);
        // Query points go through the same transform.
        let m = fit.posterior_mean(&inputs).unwrap();
        assert!((m[2] - 3.0).abs() < 0.5);
    }
}
