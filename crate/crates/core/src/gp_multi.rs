//! Two-arm multi-task GP: `Y_j = f + Δ + ε_j`, `Y_k = f + ε_k`, with the
//! treatment-effect posterior obtained by a Schur complement against the
//! control block.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{GpError, Result};
use crate::gp_single::{ArmData, PosteriorSummary};
use crate::kernels::{Input, MultiTaskBlocks, MultiTaskKernelSpec, Standardizer};
use crate::linalg::{symmetrize, Chol, GaussianSampler};

/// Noise variances of the treatment (`j`) and control (`k`) arms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmNoise {
    pub treatment: f64,
    pub control: f64,
}

/// Constant prior means: `m` for the shared baseline and `δ` for the effect.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiTaskMeans {
    pub base: f64,
    pub delta: f64,
}

#[derive(Debug, Clone)]
pub struct MultiTaskFit {
    inputs_j: Vec<Input>,
    inputs_k: Vec<Input>,
    y_j: DVector<f64>,
    y_k: DVector<f64>,
    mk: MultiTaskKernelSpec,
    noise: ArmNoise,
    means: MultiTaskMeans,
    standardizer: Standardizer,
    blocks: MultiTaskBlocks,
    /// Factor of `k_f,kk + σ_k² I`.
    ctrl_chol: Chol,
    b1_chol: Chol,
    b1: DMatrix<f64>,
    /// `-k_f,jk (k_f,kk + σ_k² I)⁻¹`, `n_j × n_k`.
    b2: DMatrix<f64>,
    /// `B1⁻¹ {(Y_j - m - δ) + B2 (Y_k - m)}`
    resid: DVector<f64>,
}

/// Fit the two-arm model. `data_j` is the treatment arm, `data_k` the control.
pub fn fit_multi(
    data_j: &ArmData,
    data_k: &ArmData,
    mk: &MultiTaskKernelSpec,
    noise: ArmNoise,
    means: MultiTaskMeans,
) -> Result<MultiTaskFit> {
    fit_multi_with(data_j, data_k, mk, noise, means, None)
}

/// As [`fit_multi`], with a given covariate standardizer.
pub fn fit_multi_with(
    data_j: &ArmData,
    data_k: &ArmData,
    mk: &MultiTaskKernelSpec,
    noise: ArmNoise,
    means: MultiTaskMeans,
    standardizer: Option<Standardizer>,
) -> Result<MultiTaskFit> {
    data_j.check()?;
    data_k.check()?;
    mk.validate()?;
    for (name, v) in [("treatment", noise.treatment), ("control", noise.control)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(GpError::InvalidParameter(format!(
                "{name} noise variance must be > 0, got {v}"
            )));
        }
    }
    if !(means.base.is_finite() && means.delta.is_finite()) {
        return Err(GpError::InvalidParameter("prior means must be finite".into()));
    }
    let standardizer = match standardizer {
        _ if !(mk.k_f.uses_covariates() || mk.k_delta.uses_covariates()) => Standardizer::default(),
        Some(s) => s,
        None => {
            let all: Vec<Input> = data_j.inputs.iter().chain(&data_k.inputs).cloned().collect();
            Standardizer::fit(&all)?
        }
    };
    let inputs_j = standardizer.apply_all(&data_j.inputs)?;
    let inputs_k = standardizer.apply_all(&data_k.inputs)?;
    let blocks = mk.blocks(&inputs_j, &inputs_k)?;
    let nj = inputs_j.len();
    let nk = inputs_k.len();

    let mut ctrl = blocks.f_kk.clone();
    for i in 0..nk {
        ctrl[(i, i)] += noise.control;
    }
    let ctrl_chol = Chol::factor(&ctrl, &mk.k_f.diag(&inputs_k)?, "control block")?;

    let f_kj = blocks.f_jk.transpose();
    let b2 = -ctrl_chol.solve(&f_kj).transpose();
    let v = ctrl_chol.half_solve(&f_kj);
    let mut b1 = &blocks.f_jj + &blocks.delta_jj - v.tr_mul(&v);
    for i in 0..nj {
        b1[(i, i)] += noise.treatment;
    }
    symmetrize(&mut b1);
    let scale: Vec<f64> = (0..nj).map(|i| blocks.f_jj[(i, i)] + blocks.delta_jj[(i, i)]).collect();
    let b1_chol = Chol::factor(&b1, &scale, "B1")?;

    let y_j = DVector::from_column_slice(&data_j.y);
    let y_k = DVector::from_column_slice(&data_k.y);
    let mut fit = MultiTaskFit {
        inputs_j,
        inputs_k,
        y_j,
        y_k,
        mk: mk.clone(),
        noise,
        means,
        standardizer,
        blocks,
        ctrl_chol,
        b1_chol,
        b1,
        b2,
        resid: DVector::zeros(nj),
    };
    fit.resid = fit.solve_resid(&fit.y_j, &fit.y_k);
    Ok(fit)
}

impl MultiTaskFit {
    fn solve_resid(&self, y_j: &DVector<f64>, y_k: &DVector<f64>) -> DVector<f64> {
        let shift = self.means.base + self.means.delta;
        let rj = y_j.map(|v| v - shift);
        let rk = y_k.map(|v| v - self.means.base);
        self.b1_chol.solve_vec(&(rj + &self.b2 * rk))
    }

    /// Same hyperparameters and design, different outcome vectors.
    pub fn with_outcomes(&self, y_j: &[f64], y_k: &[f64]) -> Result<MultiTaskFit> {
        if y_j.len() != self.n_j() || y_k.len() != self.n_k() {
            return Err(GpError::LengthMismatch(format!(
                "expected ({}, {}) outcomes, got ({}, {})",
                self.n_j(),
                self.n_k(),
                y_j.len(),
                y_k.len()
            )));
        }
        let mut out = self.clone();
        out.y_j = DVector::from_column_slice(y_j);
        out.y_k = DVector::from_column_slice(y_k);
        out.resid = out.solve_resid(&out.y_j, &out.y_k);
        Ok(out)
    }

    pub fn n_j(&self) -> usize {
        self.y_j.len()
    }

    pub fn n_k(&self) -> usize {
        self.y_k.len()
    }

    pub fn kernel(&self) -> &MultiTaskKernelSpec {
        &self.mk
    }

    pub fn noise(&self) -> ArmNoise {
        self.noise
    }

    pub fn means(&self) -> MultiTaskMeans {
        self.means
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn inputs_j(&self) -> &[Input] {
        &self.inputs_j
    }

    pub fn inputs_k(&self) -> &[Input] {
        &self.inputs_k
    }

    pub fn y_j(&self) -> &DVector<f64> {
        &self.y_j
    }

    pub fn y_k(&self) -> &DVector<f64> {
        &self.y_k
    }

    pub fn blocks(&self) -> &MultiTaskBlocks {
        &self.blocks
    }

    pub fn ctrl_chol(&self) -> &Chol {
        &self.ctrl_chol
    }

    pub fn b1(&self) -> &DMatrix<f64> {
        &self.b1
    }

    pub fn b1_chol(&self) -> &Chol {
        &self.b1_chol
    }

    pub fn b2(&self) -> &DMatrix<f64> {
        &self.b2
    }

    pub fn resid(&self) -> &DVector<f64> {
        &self.resid
    }

    /// `F_Sch = k_f,jj - k_f,jk (k_f,kk + σ_k² I)⁻¹ k_f,kj`
    pub fn schur_f(&self) -> DMatrix<f64> {
        let v = self.ctrl_chol.half_solve(&self.blocks.f_jk.transpose());
        let mut s = &self.blocks.f_jj - v.tr_mul(&v);
        symmetrize(&mut s);
        s
    }

    /// Standardize query inputs with the fit's covariate transform.
    pub fn query(&self, e: &[Input]) -> Result<Vec<Input>> {
        self.standardizer.apply_all(e)
    }

    /// `(I, B2)ᵀ B1⁻¹ k_Δ(E_j, e)`: column `i` weights the transformed
    /// outcomes `(Y_j - m - δ, Y_k - m)` in the posterior mean of `Δ(e_i)`.
    pub fn delta_weights(&self, e: &[Input]) -> Result<DMatrix<f64>> {
        let q = self.query(e)?;
        let k_jq = self.mk.k_delta.gram(&self.inputs_j, &q)?;
        let top = self.b1_chol.solve(&k_jq);
        let bottom = self.b2.tr_mul(&top);
        let mut w = DMatrix::zeros(self.n_j() + self.n_k(), q.len());
        w.rows_mut(0, self.n_j()).copy_from(&top);
        w.rows_mut(self.n_j(), self.n_k()).copy_from(&bottom);
        Ok(w)
    }

    pub fn delta_mean(&self, e: &[Input]) -> Result<DVector<f64>> {
        let q = self.query(e)?;
        let k_qj = self.mk.k_delta.gram(&q, &self.inputs_j)?;
        Ok(k_qj * &self.resid + DVector::from_element(q.len(), self.means.delta))
    }

    pub fn delta_posterior(&self, e: &[Input]) -> Result<PosteriorSummary> {
        let q = self.query(e)?;
        let k_qq = self.mk.k_delta.gram_sym(&q)?;
        let k_jq = self.mk.k_delta.gram(&self.inputs_j, &q)?;
        let mean = k_jq.tr_mul(&self.resid) + DVector::from_element(q.len(), self.means.delta);
        let v = self.b1_chol.half_solve(&k_jq);
        let mut cov = k_qq - v.tr_mul(&v);
        symmetrize(&mut cov);
        Ok(PosteriorSummary { mean, cov })
    }

    pub fn sample_delta<R: Rng + ?Sized>(&self, e: &[Input], draws: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        if draws == 0 {
            return Err(GpError::InvalidParameter("draw count must be >= 1".into()));
        }
        let post = self.delta_posterior(e)?;
        Ok(GaussianSampler::new(post.mean, &post.cov).sample_matrix(draws, rng))
    }

    /// Log density of the stacked outcomes `(Y_j, Y_k)` under the joint model.
    ///
    /// Uses the block factorization: `|Σ| = |k_f,kk + σ_k² I| |B1|` and the
    /// quadratic form splits into a control part and a `B1` part.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = (self.n_j() + self.n_k()) as f64;
        let rk = self.y_k.map(|v| v - self.means.base);
        let ctrl_alpha = self.ctrl_chol.solve_vec(&rk);
        let shift = self.means.base + self.means.delta;
        let rj = self.y_j.map(|v| v - shift);
        let z = rj + &self.b2 * &rk;
        let quad = rk.dot(&ctrl_alpha) + z.dot(&self.resid);
        -0.5 * quad - 0.5 * (self.ctrl_chol.log_det() + self.b1_chol.log_det()) - 0.5 * n * (2.0 * PI).ln()
    }
}

/// Free-function form of [`MultiTaskFit::delta_posterior`].
pub fn delta_posterior(fit: &MultiTaskFit, e: &[Input]) -> Result<PosteriorSummary> {
    fit.delta_posterior(e)
}

/// Free-function form of [`MultiTaskFit::log_marginal_likelihood`].
pub fn log_marginal_likelihood_multi(fit: &MultiTaskFit) -> f64 {
    fit.log_marginal_likelihood()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp_single::fit_single;
    use crate::kernels::{inputs_from_times, KernelSpec, Task};
    use crate::linalg::min_eigenvalue;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_fit(yj: f64, yk: f64) -> MultiTaskFit {
        let mk = MultiTaskKernelSpec {
            k_f: KernelSpec::se(1.0, 1.0),
            k_delta: KernelSpec::se(1.0, 1.0),
        };
        fit_multi(
            &ArmData::from_times(&[0.0], &[yj]).unwrap(),
            &ArmData::from_times(&[0.0], &[yk]).unwrap(),
            &mk,
            ArmNoise {
                treatment: 1.0,
                control: 1.0,
            },
            MultiTaskMeans { base: 0.0, delta: 0.0 },
        )
        .unwrap()
    }

    #[test]
    fn scalar_b1_b2() {
        let fit = scalar_fit(3.0, 1.0);
        assert!((fit.b1()[(0, 0)] - 2.5).abs() < 1e-15);
        assert!((fit.b2()[(0, 0)] + 0.5).abs() < 1e-15);
        assert!((fit.b1_chol().reconstruct()[(0, 0)] - 2.5).abs() < 1e-14);
    }

    #[test]
    fn scalar_delta_posterior() {
        let fit = scalar_fit(3.0, 1.0);
        let post = fit.delta_posterior(&[Input::at(0.0)]).unwrap();
        assert!((post.mean[0] - 1.0).abs() < 1e-14);
        assert!((post.cov[(0, 0)] - 0.6).abs() < 1e-14);
    }

    #[test]
    fn scalar_joint_density() {
        // Σ = [[1+1+1, 1], [1, 1+1]], y = (3, 1).
        let fit = scalar_fit(3.0, 1.0);
        let (a, b, d) = (3.0, 1.0, 2.0);
        let det: f64 = a * d - b * b;
        let (y1, y2) = (3.0, 1.0);
        let quad = (d * y1 * y1 - 2.0 * b * y1 * y2 + a * y2 * y2) / det;
        let want = -0.5 * quad - 0.5 * det.ln() - (2.0 * PI).ln();
        assert!((fit.log_marginal_likelihood() - want).abs() < 1e-13);
    }

    #[test]
    fn empty_control_reduces_to_single_task() {
        let mk = MultiTaskKernelSpec {
            k_f: KernelSpec::se(1.5, 2.0),
            k_delta: KernelSpec::se(0.3, 4.0),
        };
        let dj = ArmData::from_times(&[0.0, 1.0, 2.5, 6.0], &[4.0, 3.5, 5.0, 4.2]).unwrap();
        let fit = fit_multi(
            &dj,
            &ArmData::default(),
            &mk,
            ArmNoise {
                treatment: 0.5,
                control: 0.7,
            },
            MultiTaskMeans { base: 1.0, delta: 2.0 },
        )
        .unwrap();
        assert_eq!(fit.b2().shape(), (4, 0));
        let mut want_b1 =
            mk.k_f.gram(&dj.inputs, &dj.inputs).unwrap() + mk.k_delta.gram(&dj.inputs, &dj.inputs).unwrap();
        for i in 0..4 {
            want_b1[(i, i)] += 0.5;
        }
        assert!((fit.b1() - want_b1).amax() < 1e-14);

        let sum = KernelSpec::Sum {
            terms: vec![mk.k_f.clone(), mk.k_delta.clone()],
        };
        let single = fit_single(3, &dj, &sum, 0.5, 3.0).unwrap();
        assert!((single.log_marginal_likelihood() - fit.log_marginal_likelihood()).abs() < 1e-10);
        // Same B1, so Δ weights and single-task weights agree in their residual solve.
        assert!((single.alpha() - fit.resid()).amax() < 1e-12);
    }

    #[test]
    fn zero_effect_variance() {
        let mk = MultiTaskKernelSpec {
            k_f: KernelSpec::se(1.0, 2.0),
            k_delta: KernelSpec::se(0.0, 2.0),
        };
        let fit = fit_multi(
            &ArmData::from_times(&[0.0, 1.0], &[5.0, 6.0]).unwrap(),
            &ArmData::from_times(&[0.5, 2.0], &[1.0, 1.1]).unwrap(),
            &mk,
            ArmNoise {
                treatment: 1.0,
                control: 1.0,
            },
            MultiTaskMeans { base: 0.0, delta: 2.0 },
        )
        .unwrap();
        let q = inputs_from_times(&[0.0, 0.7, 3.0]);
        let post = fit.delta_posterior(&q).unwrap();
        assert!(post.mean.iter().all(|&m| m == 2.0));
        assert!(post.cov.iter().all(|&c| c == 0.0));
        let draws = fit.sample_delta(&q, 20, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(draws.iter().all(|&d| d == 2.0));
    }

    #[test]
    fn no_treatment_data_gives_prior() {
        let mk = MultiTaskKernelSpec {
            k_f: KernelSpec::se(1.0, 2.0),
            k_delta: KernelSpec::se(0.8, 1.0),
        };
        let fit = fit_multi(
            &ArmData::default(),
            &ArmData::from_times(&[0.5, 2.0], &[1.0, 1.1]).unwrap(),
            &mk,
            ArmNoise {
                treatment: 1.0,
                control: 1.0,
            },
            MultiTaskMeans { base: 0.0, delta: -1.0 },
        )
        .unwrap();
        let q = inputs_from_times(&[0.0, 0.7]);
        let post = fit.delta_posterior(&q).unwrap();
        assert!(post.mean.iter().all(|&m| m == -1.0));
        assert_eq!(post.cov, mk.k_delta.gram(&q, &q).unwrap());
    }

    fn example_fit() -> MultiTaskFit {
        let mk = MultiTaskKernelSpec {
            k_f: KernelSpec::se(1.2, 3.0),
            k_delta: KernelSpec::se(0.4, 5.0),
        };
        let tj = [12.5, 14.0, 15.5, 17.0, 19.5];
        let tk = [1.0, 4.0, 7.5, 10.0, 13.0, 15.0, 18.0];
        let yj: Vec<f64> = tj.iter().map(|t| 4.0 + (t / 10.0 - 1.0f64).powi(2)).collect();
        let yk: Vec<f64> = tk.iter().map(|t| 1.0 + t / 20.0).collect();
        fit_multi(
            &ArmData::from_times(&tj, &yj).unwrap(),
            &ArmData::from_times(&tk, &yk).unwrap(),
            &mk,
            ArmNoise {
                treatment: 0.25,
                control: 0.5,
            },
            MultiTaskMeans { base: 0.5, delta: 3.0 },
        )
        .unwrap()
    }

    #[test]
    fn b1_matches_definition_and_schur_identity() {
        let fit = example_fit();
        let b = fit.blocks();
        let mut ctrl = b.f_kk.clone();
        for i in 0..fit.n_k() {
            ctrl[(i, i)] += fit.noise().control;
        }
        let ctrl_inv = ctrl.clone().try_inverse().unwrap();
        let cross = &b.f_jk * &ctrl_inv * b.f_jk.transpose();
        let mut b1 = &b.f_jj + &b.delta_jj - &cross;
        for i in 0..fit.n_j() {
            b1[(i, i)] += fit.noise().treatment;
        }
        assert!((fit.b1_chol().reconstruct() - &b1).amax() / b1.amax() < 1e-8);
        let f_sch = &b.f_jj - &cross;
        let mut alt = &b.delta_jj + f_sch;
        for i in 0..fit.n_j() {
            alt[(i, i)] += fit.noise().treatment;
        }
        assert!((fit.b1() - alt).amax() < 1e-10);
        assert!((fit.b2() + &b.f_jk * ctrl_inv).amax() < 1e-10);
    }

    #[test]
    fn joint_density_matches_dense_oracle() {
        let fit = example_fit();
        let (nj, nk) = (fit.n_j(), fit.n_k());
        let all: Vec<(Input, Task)> = fit
            .inputs_j()
            .iter()
            .map(|u| (u.clone(), Task::Treatment))
            .chain(fit.inputs_k().iter().map(|u| (u.clone(), Task::Control)))
            .collect();
        let n = nj + nk;
        let mut cov = DMatrix::zeros(n, n);
        for r in 0..n {
            for s in 0..n {
                cov[(r, s)] = fit.kernel().eval((&all[r].0, all[r].1), (&all[s].0, all[s].1)).unwrap();
            }
            cov[(r, r)] += if r < nj {
                fit.noise().treatment
            } else {
                fit.noise().control
            };
        }
        let m = fit.means();
        let mut resid = DVector::zeros(n);
        for r in 0..nj {
            resid[r] = fit.y_j()[r] - m.base - m.delta;
        }
        for r in 0..nk {
            resid[nj + r] = fit.y_k()[r] - m.base;
        }
        let lu = cov.clone().lu();
        let quad = resid.dot(&lu.solve(&resid).unwrap());
        let want = -0.5 * quad - 0.5 * cov.determinant().ln() - 0.5 * n as f64 * (2.0 * PI).ln();
        assert!((fit.log_marginal_likelihood() - want).abs() < 1e-9);
    }

    #[test]
    fn joint_density_permutation_invariant() {
        let fit = example_fit();
        let tj: Vec<f64> = fit.inputs_j().iter().map(|u| u.time).collect();
        let tk: Vec<f64> = fit.inputs_k().iter().map(|u| u.time).collect();
        let rev = |v: &[f64]| v.iter().rev().cloned().collect::<Vec<_>>();
        let yj: Vec<f64> = fit.y_j().iter().cloned().collect();
        let yk: Vec<f64> = fit.y_k().iter().cloned().collect();
        let other = fit_multi(
            &ArmData::from_times(&rev(&tj), &rev(&yj)).unwrap(),
            &ArmData::from_times(&rev(&tk), &rev(&yk)).unwrap(),
            fit.kernel(),
            fit.noise(),
            fit.means(),
        )
        .unwrap();
        assert!((fit.log_marginal_likelihood() - other.log_marginal_likelihood()).abs() < 1e-10);
    }

    #[test]
    fn far_query_reverts_to_prior_effect() {
        let fit = example_fit();
        let post = fit.delta_posterior(&[Input::at(200.0)]).unwrap();
        assert!((post.mean[0] - 3.0).abs() < 1e-6);
        assert!((post.cov[(0, 0)] - 0.4).abs() < 1e-6);
    }

    #[test]
    fn delta_covariance_psd_and_sampling() {
        let fit = example_fit();
        let q = inputs_from_times(&(0..25).map(|i| 12.0 + i as f64 * 0.33).collect::<Vec<_>>());
        let post = fit.delta_posterior(&q).unwrap();
        assert!(min_eigenvalue(&post.cov) > -1e-8);
        let b = 10_000;
        let d = fit.sample_delta(&q, b, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let d2 = fit.sample_delta(&q, b, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(d, d2);
        for c in 0..q.len() {
            let mean = d.column(c).sum() / b as f64;
            assert!((mean - post.mean[c]).abs() < 4.0 * (post.cov[(c, c)] / b as f64).sqrt());
        }
    }

    #[test]
    fn weights_reproduce_mean() {
        let fit = example_fit();
        let q = inputs_from_times(&[12.0, 16.0, 20.0]);
        let w = fit.delta_weights(&q).unwrap();
        let m = fit.means();
        let mut y = DVector::zeros(fit.n_j() + fit.n_k());
        for r in 0..fit.n_j() {
            y[r] = fit.y_j()[r] - m.base - m.delta;
        }
        for r in 0..fit.n_k() {
            y[fit.n_j() + r] = fit.y_k()[r] - m.base;
        }
        let via_w = w.tr_mul(&y).add_scalar(m.delta);
        assert!((via_w - fit.delta_mean(&q).unwrap()).amax() < 1e-10);
    }
}
