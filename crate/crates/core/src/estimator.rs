//! Treatment-effect estimation over the concurrently eligible population by
//! Bayesian bootstrap of posterior draws.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::gp_multi::MultiTaskFit;
use crate::gp_single::SingleTaskFit;
use crate::kernels::Input;
use crate::linalg::GaussianSampler;
use crate::rng::{arm_index, domain, substream};

pub const DEFAULT_BOOTSTRAP: usize = 2000;

/// One trial participant. Arms are numbered from 1; `rand_probs[a - 1]` is
/// the probability of assignment to arm `a` given the design variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub enroll_time: f64,
    pub arm: usize,
    pub outcome: Option<f64>,
    #[serde(default)]
    pub covariates: Vec<f64>,
    pub rand_probs: Vec<f64>,
}

impl Subject {
    pub fn prob(&self, arm: usize) -> f64 {
        if arm == 0 {
            return 0.0;
        }
        self.rand_probs.get(arm - 1).copied().unwrap_or(0.0)
    }

    pub fn eligible(&self, j: usize, k: usize) -> bool {
        self.prob(j) > 0.0 && self.prob(k) > 0.0
    }

    pub fn input(&self) -> Input {
        Input::new(self.enroll_time, self.covariates.clone())
    }
}

/// Subjects with positive assignment probability for both arms, whatever
/// arm they were actually randomized to.
#[derive(Debug, Clone, PartialEq)]
pub struct EceSet {
    pub j: usize,
    pub k: usize,
    pub indices: Vec<usize>,
    pub inputs: Vec<Input>,
}

impl EceSet {
    pub fn n(&self) -> usize {
        self.indices.len()
    }

    pub fn times(&self) -> Vec<f64> {
        self.inputs.iter().map(|u| u.time).collect()
    }

    /// An ECE grid given directly by its inputs (no subject list).
    pub fn from_inputs(j: usize, k: usize, inputs: Vec<Input>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(GpError::EmptyEce { j, k });
        }
        Ok(EceSet {
            j,
            k,
            indices: (0..inputs.len()).collect(),
            inputs,
        })
    }
}

pub fn ece_population(subjects: &[Subject], j: usize, k: usize) -> Result<EceSet> {
    if j == k {
        return Err(GpError::InvalidParameter(format!(
            "contrast arms must differ, got {j} twice"
        )));
    }
    let indices: Vec<usize> = subjects
        .iter()
        .enumerate()
        .filter(|(_, s)| s.eligible(j, k))
        .map(|(i, _)| i)
        .collect();
    if indices.is_empty() {
        return Err(GpError::EmptyEce { j, k });
    }
    let inputs = indices.iter().map(|&i| subjects[i].input()).collect();
    Ok(EceSet { j, k, indices, inputs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub point: f64,
    pub ci: (f64, f64),
    pub se: f64,
    pub draws: Vec<f64>,
    pub seed: u64,
    pub b: usize,
    pub model: String,
}

impl EstimateResult {
    /// Summarize bootstrap replicates: mean, equal-tailed 95% interval and
    /// the interval-width standard error.
    pub fn from_draws(draws: Vec<f64>, seed: u64, model: &str) -> Result<Self> {
        if draws.is_empty() {
            return Err(GpError::InvalidParameter("no bootstrap draws".into()));
        }
        if let Some(bad) = draws.iter().find(|d| !d.is_finite()) {
            return Err(GpError::NonConvergence(format!("non-finite bootstrap draw {bad}")));
        }
        let point = draws.iter().sum::<f64>() / draws.len() as f64;
        let mut sorted = draws.clone();
        sorted.sort_by(f64::total_cmp);
        let lo = quantile_sorted(&sorted, 0.025);
        let hi = quantile_sorted(&sorted, 0.975);
        Ok(EstimateResult {
            point,
            ci: (lo, hi),
            se: (hi - lo) / (2.0 * 1.96),
            b: draws.len(),
            draws,
            seed,
            model: model.to_string(),
        })
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci.0 <= truth && truth <= self.ci.1
    }
}

/// Linear-interpolation sample quantile (type 7) of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty data");
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `Dir(1, …, 1)` weights as normalized unit exponentials.
pub fn dirichlet_weights<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    assert!(n >= 1, "dirichlet weights need n >= 1");
    let mut w = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(Exp1));
    let total = w.sum();
    w /= total;
    w
}

/// Run `b` bootstrap replicates. `contrast(r)` returns the posterior-draw
/// contrast at the ECE points for replicate `r`; replicate weights come
/// from their own substream.
pub fn bootstrap<F>(n: usize, b: usize, seed: u64, model: &str, contrast: F) -> Result<EstimateResult>
where
    F: Fn(usize) -> DVector<f64> + Sync,
{
    if b < 2 {
        return Err(GpError::InvalidParameter(format!(
            "bootstrap size must be >= 2, got {b}"
        )));
    }
    if n == 0 {
        return Err(GpError::InvalidParameter("empty evaluation grid".into()));
    }
    let draws: Vec<f64> = (0..b)
        .into_par_iter()
        .map(|r| {
            let c = contrast(r);
            let p = dirichlet_weights(n, &mut substream(seed, domain::DIRICHLET, r as u64));
            p.dot(&c)
        })
        .collect();
    EstimateResult::from_draws(draws, seed, model)
}

fn check_ece_inputs(ece: &EceSet) -> Result<()> {
    if ece.inputs.is_empty() {
        return Err(GpError::EmptyEce { j: ece.j, k: ece.k });
    }
    Ok(())
}

/// Posterior draws for arm `fit.arm` at replicate `r` use a stream keyed by
/// the arm label, so swapping the contrast direction reuses the same draws.
pub fn estimate_contrast_single(
    fit_j: &SingleTaskFit,
    fit_k: &SingleTaskFit,
    ece: &EceSet,
    b: usize,
    seed: u64,
) -> Result<EstimateResult> {
    check_ece_inputs(ece)?;
    let pj = fit_j.posterior(&ece.inputs)?;
    let pk = fit_k.posterior(&ece.inputs)?;
    let sj = GaussianSampler::new(pj.mean, &pj.cov);
    let sk = GaussianSampler::new(pk.mean, &pk.cov);
    let (aj, ak) = (fit_j.arm, fit_k.arm);
    bootstrap(ece.n(), b, seed, "single_task", |r| {
        let fj = sj.sample(&mut substream(seed, domain::POSTERIOR, arm_index(aj, r)));
        let fk = sk.sample(&mut substream(seed, domain::POSTERIOR, arm_index(ak, r)));
        fj - fk
    })
}

pub fn estimate_contrast_multi(fit: &MultiTaskFit, ece: &EceSet, b: usize, seed: u64) -> Result<EstimateResult> {
    check_ece_inputs(ece)?;
    let post = fit.delta_posterior(&ece.inputs)?;
    let s = GaussianSampler::new(post.mean, &post.cov);
    bootstrap(ece.n(), b, seed, "multi_task", |r| {
        s.sample(&mut substream(seed, domain::DELTA, r as u64))
    })
}

/// Limit of the bootstrap mean as `B → ∞`: the ECE average of the
/// posterior-mean contrast.
pub fn mean_contrast_single(fit_j: &SingleTaskFit, fit_k: &SingleTaskFit, ece: &EceSet) -> Result<f64> {
    let d = fit_j.posterior_mean(&ece.inputs)? - fit_k.posterior_mean(&ece.inputs)?;
    Ok(d.mean())
}

pub fn mean_contrast_multi(fit: &MultiTaskFit, ece: &EceSet) -> Result<f64> {
    Ok(fit.delta_mean(&ece.inputs)?.mean())
}
