//! Hyperparameter priors and estimation: MAP by multi-restart simplex
//! search, plus a random-walk Metropolis sampler for sensitivity checks.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Gamma as GammaDist, Normal as NormalDist};
use statrs::function::gamma::{gamma_ur, ln_gamma};

use crate::error::{GpError, Result};
use crate::estimator::quantile_sorted;
use crate::glm_gp::{fit_laplace, LaplaceFit, LikelihoodSpec};
use crate::gp_multi::{fit_multi, ArmNoise, MultiTaskFit, MultiTaskMeans};
use crate::gp_single::{fit_single, ArmData, SingleTaskFit};
use crate::kernels::{Input, KernelSpec, MultiTaskKernelSpec, Standardizer};
use crate::rng::{domain, substream};
use crate::simplex::{minimize, SimplexSettings};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum PriorSpec {
    /// Normal truncated to the positive half-line.
    HalfNormal {
        location: f64,
        scale: f64,
    },
    Exponential {
        rate: f64,
    },
    InverseGamma {
        shape: f64,
        rate: f64,
    },
    Normal {
        mean: f64,
        sd: f64,
    },
    Fixed {
        value: f64,
    },
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            PriorSpec::HalfNormal { location, scale } => location.is_finite() && scale > 0.0,
            PriorSpec::Exponential { rate } => rate > 0.0 && rate.is_finite(),
            PriorSpec::InverseGamma { shape, rate } => {
                shape > 0.0 && rate > 0.0 && shape.is_finite() && rate.is_finite()
            }
            PriorSpec::Normal { mean, sd } => mean.is_finite() && sd > 0.0 && sd.is_finite(),
            PriorSpec::Fixed { value } => value.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(GpError::InvalidParameter(format!("invalid prior {self:?}")))
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, PriorSpec::Fixed { .. })
    }

    /// Whether the support is `(0, ∞)` (optimized on the log scale).
    pub fn is_positive(&self) -> bool {
        matches!(
            self,
            PriorSpec::HalfNormal { .. } | PriorSpec::Exponential { .. } | PriorSpec::InverseGamma { .. }
        )
    }

    pub fn log_density(&self, x: f64) -> f64 {
        if self.is_positive() && !(x > 0.0) {
            return f64::NEG_INFINITY;
        }
        match *self {
            PriorSpec::HalfNormal { location, scale } => {
                let n = NormalDist::new(location, scale).expect("validated prior");
                n.ln_pdf(x) - (1.0 - n.cdf(0.0)).ln()
            }
            PriorSpec::Exponential { rate } => rate.ln() - rate * x,
            PriorSpec::InverseGamma { shape, rate } => {
                shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
            }
            PriorSpec::Normal { mean, sd } => NormalDist::new(mean, sd).expect("validated prior").ln_pdf(x),
            PriorSpec::Fixed { value } => {
                if x == value {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            PriorSpec::HalfNormal { location, scale } => {
                let n = NormalDist::new(location, scale).expect("validated prior");
                let lo = n.cdf(0.0);
                let u: f64 = rng.random();
                let x = n.inverse_cdf(lo + u * (1.0 - lo));
                if x > 0.0 {
                    x
                } else {
                    f64::MIN_POSITIVE.max(location.abs() * 1e-6)
                }
            }
            PriorSpec::Exponential { rate } => Exp::new(rate).expect("validated prior").sample(rng),
            PriorSpec::InverseGamma { shape, rate } => {
                1.0 / Gamma::new(shape, 1.0 / rate).expect("validated prior").sample(rng)
            }
            PriorSpec::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
            PriorSpec::Fixed { value } => value,
        }
    }

    pub fn to_free(&self, x: f64) -> f64 {
        if self.is_positive() {
            x.ln()
        } else {
            x
        }
    }

    pub fn from_free(&self, z: f64) -> f64 {
        if self.is_positive() {
            z.exp()
        } else {
            z
        }
    }

    /// `log |dx/dz|` of the free-to-constrained map.
    pub fn log_jacobian(&self, z: f64) -> f64 {
        if self.is_positive() {
            z
        } else {
            0.0
        }
    }

    pub fn inverse_gamma_cdf(shape: f64, rate: f64, x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else {
            gamma_ur(shape, rate / x)
        }
    }
}

/// Shape and rate of the inverse-gamma law with 1% of its mass below
/// `lower` and 1% above `upper`.
pub fn calibrate_invgamma(lower: f64, upper: f64) -> Result<(f64, f64)> {
    if !(lower > 0.0 && upper.is_finite() && lower < upper) {
        return Err(GpError::InvalidParameter(format!(
            "inverse-gamma calibration needs 0 < lower < upper, got ({lower}, {upper})"
        )));
    }
    // With X ~ Gamma(a, 1): 1/X scaled by b puts 1% below `lower` when
    // b = lower q99(a), and 1% above `upper` when b = upper q01(a). The ratio
    // q99/q01 decreases in a, so the shape is found by bisection on log a.
    let ratio = |a: f64| {
        let g = GammaDist::new(a, 1.0).expect("positive shape");
        g.inverse_cdf(0.99) / g.inverse_cdf(0.01)
    };
    let target = upper / lower;
    let (mut lo, mut hi) = (1e-3f64.ln(), 1e6f64.ln());
    if ratio(lo.exp()) < target || ratio(hi.exp()) > target {
        return Err(GpError::NonConvergence(format!(
            "cannot bracket inverse-gamma shape for ratio {target}"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ratio(mid.exp()) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    let shape = (0.5 * (lo + hi)).exp();
    let g = GammaDist::new(shape, 1.0).expect("positive shape");
    let rate = 0.5 * (lower * g.inverse_cdf(0.99) + upper * g.inverse_cdf(0.01));
    let c_lo = PriorSpec::inverse_gamma_cdf(shape, rate, lower);
    let c_hi = PriorSpec::inverse_gamma_cdf(shape, rate, upper);
    if (c_lo - 0.01).abs() > 1e-6 || (c_hi - 0.99).abs() > 1e-6 {
        return Err(GpError::NonConvergence(format!(
            "inverse-gamma calibration missed its quantiles: cdf({lower}) = {c_lo}, cdf({upper}) = {c_hi}"
        )));
    }
    Ok((shape, rate))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthScaleBounds {
    pub lower: f64,
    pub upper: f64,
    /// The raw lower bound was not below the upper one; `lower` was reset to `upper / 2`.
    pub fallback: bool,
}

impl LengthScaleBounds {
    pub fn prior(&self) -> Result<PriorSpec> {
        let (shape, rate) = calibrate_invgamma(self.lower, self.upper)?;
        Ok(PriorSpec::InverseGamma { shape, rate })
    }

    fn from_distances(mut d: Vec<f64>) -> Result<Self> {
        d.sort_by(f64::total_cmp);
        let dmax = *d.last().expect("at least one distance");
        let lower = quantile_sorted(&d, 0.05).max(1.0);
        let upper = 0.8 * dmax;
        if lower >= upper {
            return Ok(LengthScaleBounds {
                lower: upper / 2.0,
                upper,
                fallback: true,
            });
        }
        Ok(LengthScaleBounds {
            lower,
            upper,
            fallback: false,
        })
    }
}

/// `ℓ = max(1, q05)`, `u = 0.8 dmax` over pairwise absolute differences of
/// the distinct concurrent enrollment times.
pub fn default_length_scale_bounds(times: &[f64]) -> Result<LengthScaleBounds> {
    let mut t: Vec<f64> = times.to_vec();
    if t.iter().any(|v| !v.is_finite()) {
        return Err(GpError::InvalidParameter("non-finite enrollment time".into()));
    }
    t.sort_by(f64::total_cmp);
    t.dedup();
    if t.len() < 2 {
        return Err(GpError::InvalidParameter(
            "length-scale bounds need at least 2 distinct times".into(),
        ));
    }
    let mut d = Vec::with_capacity(t.len() * (t.len() - 1) / 2);
    for i in 0..t.len() {
        for j in (i + 1)..t.len() {
            d.push(t[j] - t[i]);
        }
    }
    LengthScaleBounds::from_distances(d)
}

/// Same rule on Euclidean distances between distinct standardized
/// covariate vectors.
pub fn covariate_length_scale_bounds(xs: &[Vec<f64>]) -> Result<LengthScaleBounds> {
    let inputs: Vec<Input> = xs.iter().map(|x| Input::new(0.0, x.clone())).collect();
    let st = Standardizer::fit(&inputs)?;
    let mut z: Vec<Vec<f64>> = st.apply_all(&inputs)?.into_iter().map(|u| u.x).collect();
    z.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    z.dedup();
    if z.len() < 2 {
        return Err(GpError::InvalidParameter(
            "covariate length-scale bounds need at least 2 distinct covariate vectors".into(),
        ));
    }
    let mut d = Vec::with_capacity(z.len() * (z.len() - 1) / 2);
    for i in 0..z.len() {
        for j in (i + 1)..z.len() {
            d.push(
                z[i].iter()
                    .zip(&z[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt(),
            );
        }
    }
    LengthScaleBounds::from_distances(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Single,
    Multi,
    Glm { likelihood: LikelihoodSpec },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum TimeKernel {
    #[default]
    SquaredExponential,
    Matern {
        nu: f64,
    },
}

impl TimeKernel {
    pub fn build(&self, alpha2: f64, h: f64) -> KernelSpec {
        match *self {
            TimeKernel::SquaredExponential => KernelSpec::se(alpha2, h),
            TimeKernel::Matern { nu } => KernelSpec::matern(alpha2, nu, h),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovariateMode {
    #[default]
    None,
    /// Marginalized linear mean, i.e. a linear kernel on standardized covariates.
    Linear,
    /// Linear kernel plus an additive ARD squared-exponential covariate kernel.
    LinearArd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    pub restarts: usize,
    pub max_evals: usize,
    pub tol: f64,
    pub initial_step: f64,
    /// Maximize the posterior density of the free (log-scale) coordinates,
    /// i.e. add the log Jacobian. When false the constrained-scale density
    /// is maximized.
    pub free_scale_density: bool,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            restarts: 8,
            max_evals: 3000,
            tol: 1e-7,
            initial_step: 0.5,
            free_scale_density: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub chain_length: usize,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    pub kind: ModelKind,
    #[serde(default)]
    pub time_kernel: TimeKernel,
    #[serde(default)]
    pub covariates: CovariateMode,
    #[serde(default)]
    pub n_covariates: usize,
    pub priors: BTreeMap<String, PriorSpec>,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    #[serde(default)]
    pub sampler: Option<SamplerSettings>,
    /// Integrate Normal-prior constant means (`mean`, `base_mean`, `delta`)
    /// out of the model instead of optimizing them.
    #[serde(default = "default_true")]
    pub marginalize_means: bool,
}

fn default_true() -> bool {
    true
}

/// Hyperparameter names of a model, in canonical order.
pub fn param_names(kind: &ModelKind, covariates: CovariateMode, p: usize) -> Vec<String> {
    let mut names: Vec<&str> = match kind {
        ModelKind::Single => vec!["alpha2", "h", "sigma", "mean"],
        ModelKind::Glm { .. } => vec!["alpha2", "h", "mean"],
        ModelKind::Multi => vec![
            "alpha_f2",
            "h_f",
            "alpha_delta2",
            "h_delta",
            "sigma_j",
            "sigma_k",
            "base_mean",
            "delta",
        ],
    };
    if covariates != CovariateMode::None {
        names.push("tau_beta2");
    }
    let mut out: Vec<String> = names.into_iter().map(String::from).collect();
    if covariates == CovariateMode::LinearArd {
        out.push("alpha2_x".into());
        out.extend((1..=p).map(|d| format!("h_x{d}")));
    }
    out
}

impl HyperConfig {
    /// Default priors, with length-scale priors calibrated from the ECE
    /// subjects. Returns warnings for degenerate bounds.
    pub fn with_defaults(
        kind: ModelKind,
        time_kernel: TimeKernel,
        covariates: CovariateMode,
        ece_inputs: &[Input],
    ) -> Result<(HyperConfig, Vec<String>)> {
        let mut warnings = Vec::new();
        let times: Vec<f64> = ece_inputs.iter().map(|u| u.time).collect();
        let tb = default_length_scale_bounds(&times)?;
        if tb.fallback {
            warnings.push(format!(
                "time length-scale lower bound not below upper bound; using lower = {}",
                tb.lower
            ));
        }
        let h_prior = tb.prior()?;
        let half_normal = |location| PriorSpec::HalfNormal { location, scale: 1.0 };
        let mut priors = BTreeMap::new();
        let mut put = |k: &str, v: PriorSpec| {
            priors.insert(k.to_string(), v);
        };
        match kind {
            ModelKind::Single | ModelKind::Glm { .. } => {
                put("alpha2", half_normal(1.0));
                put("h", h_prior);
                put("mean", PriorSpec::Normal { mean: 0.0, sd: 1.0 });
                if kind == ModelKind::Single {
                    put("sigma", half_normal(0.0));
                }
            }
            ModelKind::Multi => {
                put("alpha_f2", PriorSpec::Exponential { rate: 1.0 });
                put("alpha_delta2", PriorSpec::Exponential { rate: 1.0 });
                put("h_f", h_prior);
                put("h_delta", h_prior);
                put("sigma_j", half_normal(0.0));
                put("sigma_k", half_normal(0.0));
                put("base_mean", PriorSpec::Normal { mean: 0.0, sd: 5.0 });
                put("delta", PriorSpec::Normal { mean: 0.0, sd: 5.0 });
            }
        }
        let p = ece_inputs.first().map(|u| u.x.len()).unwrap_or(0);
        if covariates != CovariateMode::None {
            if p == 0 {
                return Err(GpError::InvalidParameter(
                    "covariate adjustment requested but no covariates supplied".into(),
                ));
            }
            put("tau_beta2", PriorSpec::Fixed { value: 1.0 });
        }
        if covariates == CovariateMode::LinearArd {
            let xs: Vec<Vec<f64>> = ece_inputs.iter().map(|u| u.x.clone()).collect();
            let cb = covariate_length_scale_bounds(&xs)?;
            if cb.fallback {
                warnings.push(format!(
                    "covariate length-scale lower bound not below upper bound; using lower = {}",
                    cb.lower
                ));
            }
            let hx = cb.prior()?;
            put("alpha2_x", PriorSpec::Exponential { rate: 1.0 });
            for d in 1..=p {
                put(&format!("h_x{d}"), hx);
            }
        }
        let cfg = HyperConfig {
            kind,
            time_kernel,
            covariates,
            n_covariates: if covariates == CovariateMode::None { 0 } else { p },
            priors,
            optimizer: OptimizerSettings::default(),
            sampler: None,
            marginalize_means: true,
        };
        cfg.validate()?;
        Ok((cfg, warnings))
    }

    pub fn names(&self) -> Vec<String> {
        param_names(&self.kind, self.covariates, self.n_covariates)
    }

    pub fn validate(&self) -> Result<()> {
        let names = self.names();
        for n in &names {
            match self.priors.get(n) {
                None => {
                    return Err(GpError::InvalidParameter(format!(
                        "no prior given for hyperparameter `{n}`"
                    )))
                }
                Some(p) => p.validate()?,
            }
        }
        if let Some(extra) = self.priors.keys().find(|k| !names.contains(k)) {
            return Err(GpError::InvalidParameter(format!(
                "prior given for unknown hyperparameter `{extra}`"
            )));
        }
        if let TimeKernel::Matern { nu } = self.time_kernel {
            if ![0.5, 1.5, 2.5].contains(&nu) {
                return Err(GpError::InvalidKernel(format!(
                    "Matérn smoothness must be 0.5, 1.5 or 2.5, got {nu}"
                )));
            }
        }
        if self.optimizer.restarts == 0 {
            return Err(GpError::InvalidParameter("optimizer needs at least one restart".into()));
        }
        Ok(())
    }

    pub fn transform(&self) -> Transform {
        let names = self.names();
        let priors = names.iter().map(|n| self.priors[n]).collect();
        let marginal = names
            .iter()
            .map(|n| self.marginalize_means && is_mean_param(n) && matches!(self.priors[n], PriorSpec::Normal { .. }))
            .collect();
        Transform {
            names,
            priors,
            marginal,
        }
    }
}

fn is_mean_param(name: &str) -> bool {
    matches!(name, "mean" | "base_mean" | "delta")
}

/// Map between constrained hyperparameter values (canonical order, fixed
/// ones included) and the free optimization coordinates.
///
/// Marginalized mean parameters are not optimized: their value slot holds
/// the prior mean and their prior variance enters the kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Transform {
    pub names: Vec<String>,
    pub priors: Vec<PriorSpec>,
    pub marginal: Vec<bool>,
}

impl Transform {
    fn is_free(&self, i: usize) -> bool {
        !self.priors[i].is_fixed() && !self.marginal[i]
    }

    fn held_value(&self, i: usize) -> f64 {
        match self.priors[i] {
            PriorSpec::Fixed { value } => value,
            PriorSpec::Normal { mean, .. } => mean,
            _ => unreachable!("only fixed and normal-mean priors are held"),
        }
    }

    pub fn n_free(&self) -> usize {
        (0..self.priors.len()).filter(|&i| self.is_free(i)).count()
    }

    pub fn is_marginal(&self, name: &str) -> bool {
        self.names.iter().zip(&self.marginal).any(|(n, &m)| m && n == name)
    }

    /// Prior standard deviation of a marginalized mean, if it is one.
    pub fn marginal_sd(&self, name: &str) -> Option<f64> {
        let i = self.names.iter().position(|n| n == name)?;
        match (self.marginal[i], self.priors[i]) {
            (true, PriorSpec::Normal { sd, .. }) => Some(sd),
            _ => None,
        }
    }

    pub fn unconstrain(&self, values: &[f64]) -> Vec<f64> {
        (0..self.priors.len())
            .filter(|&i| self.is_free(i))
            .map(|i| self.priors[i].to_free(values[i]))
            .collect()
    }

    pub fn constrain(&self, z: &[f64]) -> Vec<f64> {
        let mut it = z.iter();
        (0..self.priors.len())
            .map(|i| {
                if self.is_free(i) {
                    self.priors[i].from_free(*it.next().expect("one free coordinate per free prior"))
                } else {
                    self.held_value(i)
                }
            })
            .collect()
    }

    /// Prior log density of the optimized and fixed values; marginalized
    /// means are accounted for inside the marginal likelihood.
    pub fn log_prior(&self, values: &[f64]) -> f64 {
        (0..self.priors.len())
            .filter(|&i| !self.marginal[i])
            .map(|i| self.priors[i].log_density(values[i]))
            .sum()
    }

    pub fn log_jacobian(&self, z: &[f64]) -> f64 {
        (0..self.priors.len())
            .filter(|&i| self.is_free(i))
            .zip(z)
            .map(|(i, &zi)| self.priors[i].log_jacobian(zi))
            .sum()
    }

    pub fn named(&self, values: &[f64]) -> BTreeMap<String, f64> {
        self.names.iter().cloned().zip(values.iter().cloned()).collect()
    }

    fn sample_start<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.priors.len())
            .map(|i| {
                if self.is_free(i) {
                    self.priors[i].sample(rng)
                } else {
                    self.held_value(i)
                }
            })
            .collect()
    }
}

/// Data for one model fit.
#[derive(Debug, Clone, Copy)]
pub enum FitProblem<'a> {
    Single {
        arm: usize,
        data: &'a ArmData,
    },
    Multi {
        treatment: &'a ArmData,
        control: &'a ArmData,
    },
    Glm {
        arm: usize,
        data: &'a ArmData,
    },
}

#[derive(Debug, Clone)]
pub enum FittedModel {
    Single(SingleTaskFit),
    Multi(MultiTaskFit),
    Glm(LaplaceFit),
}

impl FittedModel {
    pub fn log_likelihood(&self) -> f64 {
        match self {
            FittedModel::Single(f) => f.log_marginal_likelihood(),
            FittedModel::Multi(f) => f.log_marginal_likelihood(),
            FittedModel::Glm(f) => f.log_marginal_likelihood(),
        }
    }

    pub fn as_single(&self) -> Option<&SingleTaskFit> {
        match self {
            FittedModel::Single(f) => Some(f),
            _ => None,
        }
    }

    pub fn as_multi(&self) -> Option<&MultiTaskFit> {
        match self {
            FittedModel::Multi(f) => Some(f),
            _ => None,
        }
    }

    pub fn as_glm(&self) -> Option<&LaplaceFit> {
        match self {
            FittedModel::Glm(f) => Some(f),
            _ => None,
        }
    }
}

fn covariate_terms(cfg: &HyperConfig, v: &BTreeMap<String, f64>, base: KernelSpec) -> KernelSpec {
    if cfg.covariates == CovariateMode::None {
        return base;
    }
    let mut terms = vec![
        base,
        KernelSpec::Linear {
            tau_beta2: v["tau_beta2"],
        },
    ];
    if cfg.covariates == CovariateMode::LinearArd {
        let h = (1..=cfg.n_covariates).map(|d| v[&format!("h_x{d}")]).collect();
        terms.push(KernelSpec::ArdSe {
            alpha2: v["alpha2_x"],
            h,
        });
    }
    KernelSpec::Sum { terms }
}

/// Build the model at the given hyperparameter values (canonical order).
pub fn build_model(problem: &FitProblem, cfg: &HyperConfig, values: &[f64]) -> Result<FittedModel> {
    let tr = cfg.transform();
    let v = tr.named(values);
    // a marginalized mean contributes its prior variance as a constant kernel
    let with_mean = |k: KernelSpec, name: &str| match tr.marginal_sd(name) {
        Some(sd) => KernelSpec::Sum {
            terms: vec![k, KernelSpec::Constant { variance: sd * sd }],
        },
        None => k,
    };
    match (problem, cfg.kind) {
        (FitProblem::Single { arm, data }, ModelKind::Single) => {
            let k = covariate_terms(cfg, &v, cfg.time_kernel.build(v["alpha2"], v["h"]));
            let k = with_mean(k, "mean");
            Ok(FittedModel::Single(fit_single(
                *arm,
                data,
                &k,
                v["sigma"].powi(2),
                v["mean"],
            )?))
        }
        (FitProblem::Glm { arm, data }, ModelKind::Glm { likelihood }) => {
            let k = covariate_terms(cfg, &v, cfg.time_kernel.build(v["alpha2"], v["h"]));
            let k = with_mean(k, "mean");
            Ok(FittedModel::Glm(fit_laplace(*arm, data, &k, v["mean"], likelihood)?))
        }
        (FitProblem::Multi { treatment, control }, ModelKind::Multi) => {
            let k_f = covariate_terms(cfg, &v, cfg.time_kernel.build(v["alpha_f2"], v["h_f"]));
            let mk = MultiTaskKernelSpec {
                k_f: with_mean(k_f, "base_mean"),
                k_delta: with_mean(cfg.time_kernel.build(v["alpha_delta2"], v["h_delta"]), "delta"),
            };
            Ok(FittedModel::Multi(fit_multi(
                treatment,
                control,
                &mk,
                ArmNoise {
                    treatment: v["sigma_j"].powi(2),
                    control: v["sigma_k"].powi(2),
                },
                MultiTaskMeans {
                    base: v["base_mean"],
                    delta: v["delta"],
                },
            )?))
        }
        _ => Err(GpError::InvalidParameter(format!(
            "model kind {:?} does not match the supplied data",
            cfg.kind
        ))),
    }
}

/// Log marginal likelihood plus log prior; `-inf` outside the prior
/// support or where the model cannot be built.
pub fn log_posterior(problem: &FitProblem, cfg: &HyperConfig, values: &[f64]) -> f64 {
    let lp = cfg.transform().log_prior(values);
    if !lp.is_finite() {
        return f64::NEG_INFINITY;
    }
    match build_model(problem, cfg, values) {
        Ok(m) => {
            let ll = m.log_likelihood();
            if ll.is_finite() {
                ll + lp
            } else {
                f64::NEG_INFINITY
            }
        }
        Err(_) => f64::NEG_INFINITY,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartTrace {
    pub start: Vec<f64>,
    pub start_objective: f64,
    pub final_values: Vec<f64>,
    pub final_objective: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub names: Vec<String>,
    pub restarts: Vec<RestartTrace>,
    pub best: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct MapResult {
    pub fit: FittedModel,
    pub values: BTreeMap<String, f64>,
    /// Log marginal likelihood plus log prior at the optimum.
    pub log_posterior: f64,
    /// The maximized objective (equal to `log_posterior` unless the
    /// free-scale Jacobian is included).
    pub objective: f64,
    pub trace: OptimizationTrace,
    pub warning: Option<String>,
}

const MAX_START_DRAWS: usize = 50;

/// MAP hyperparameters by multi-restart simplex search on the free scale.
/// Restart `r` draws its start from the priors with its own substream; the
/// winner is the highest objective, ties going to the lowest index.
pub fn map_fit(problem: &FitProblem, cfg: &HyperConfig, seed: u64) -> Result<MapResult> {
    cfg.validate()?;
    let tr = cfg.transform();
    if tr.n_free() == 0 {
        let values = tr.constrain(&[]);
        let fit = build_model(problem, cfg, &values)?;
        let lp = fit.log_likelihood() + tr.log_prior(&values);
        return Ok(MapResult {
            fit,
            values: tr.named(&values),
            log_posterior: lp,
            objective: lp,
            trace: OptimizationTrace {
                names: tr.names.clone(),
                restarts: vec![],
                best: None,
            },
            warning: None,
        });
    }
    let settings = SimplexSettings {
        max_evals: cfg.optimizer.max_evals,
        f_tol: cfg.optimizer.tol,
        x_tol: 1e-4,
        initial_step: cfg.optimizer.initial_step,
    };
    let objective = |z: &[f64]| {
        let lp = log_posterior(problem, cfg, &tr.constrain(z));
        if cfg.optimizer.free_scale_density {
            lp + tr.log_jacobian(z)
        } else {
            lp
        }
    };
    let restarts: Vec<RestartTrace> = (0..cfg.optimizer.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(seed, domain::RESTART, r as u64);
            let mut start = tr.sample_start(&mut rng);
            let mut start_obj = objective(&tr.unconstrain(&start));
            let mut tries = 1;
            while !start_obj.is_finite() && tries < MAX_START_DRAWS {
                start = tr.sample_start(&mut rng);
                start_obj = objective(&tr.unconstrain(&start));
                tries += 1;
            }
            let z0 = tr.unconstrain(&start);
            let res = minimize(|z| -objective(z), &z0, &settings);
            RestartTrace {
                start,
                start_objective: start_obj,
                final_values: tr.constrain(&res.x),
                final_objective: -res.fx,
                iterations: res.iterations,
                evaluations: res.evaluations,
                converged: res.converged,
            }
        })
        .collect();

    let mut best: Option<usize> = None;
    for (i, r) in restarts.iter().enumerate() {
        if !r.final_objective.is_finite() {
            continue;
        }
        match best {
            Some(b) if restarts[b].final_objective >= r.final_objective => {}
            _ => best = Some(i),
        }
    }
    let Some(b) = best else {
        return Err(GpError::NonConvergence(
            "no restart reached a finite log posterior".into(),
        ));
    };
    let improved = restarts.iter().any(|r| r.final_objective > r.start_objective);
    let warning = if improved {
        None
    } else {
        Some("no restart improved on its starting point".to_string())
    };
    let values = restarts[b].final_values.clone();
    let fit = build_model(problem, cfg, &values)?;
    Ok(MapResult {
        fit,
        values: tr.named(&values),
        log_posterior: log_posterior(problem, cfg, &values),
        objective: restarts[b].final_objective,
        trace: OptimizationTrace {
            names: tr.names.clone(),
            restarts,
            best: Some(b),
        },
        warning,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainResult {
    pub names: Vec<String>,
    /// One row of constrained values per iteration.
    pub draws: Vec<Vec<f64>>,
    pub log_target: Vec<f64>,
    pub acceptance_rate: f64,
}

/// Random-walk Metropolis with isotropic Gaussian proposals of scale `step`.
pub fn mh_chain<F, R>(
    log_target: F,
    z0: &[f64],
    length: usize,
    step: f64,
    rng: &mut R,
) -> (Vec<Vec<f64>>, Vec<f64>, f64)
where
    F: Fn(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    let mut z = z0.to_vec();
    let mut lp = log_target(&z);
    let mut draws = Vec::with_capacity(length);
    let mut lps = Vec::with_capacity(length);
    let mut accepted = 0usize;
    for _ in 0..length {
        let prop: Vec<f64> = z
            .iter()
            .map(|v| v + step * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lp_new = log_target(&prop);
        let u: f64 = rng.random();
        if lp_new.is_finite() && u.ln() < lp_new - lp {
            z = prop;
            lp = lp_new;
            accepted += 1;
        }
        draws.push(z.clone());
        lps.push(lp);
    }
    let rate = if length == 0 {
        0.0
    } else {
        accepted as f64 / length as f64
    };
    (draws, lps, rate)
}

/// Metropolis sampling of the hyperparameter posterior on the free scale
/// (log-Jacobian included), started from `init` (canonical order).
pub fn mh_sample(
    problem: &FitProblem,
    cfg: &HyperConfig,
    settings: SamplerSettings,
    init: &[f64],
    seed: u64,
) -> Result<ChainResult> {
    cfg.validate()?;
    if settings.chain_length == 0 {
        return Err(GpError::InvalidParameter("chain length must be >= 1".into()));
    }
    if !(settings.step >= 0.0 && settings.step.is_finite()) {
        return Err(GpError::InvalidParameter(
            "proposal scale must be finite and >= 0".into(),
        ));
    }
    let tr = cfg.transform();
    if init.len() != tr.names.len() {
        return Err(GpError::DimensionMismatch {
            context: "sampler initial values",
            expected: tr.names.len(),
            got: init.len(),
        });
    }
    let z0 = tr.unconstrain(init);
    let target = |z: &[f64]| log_posterior(problem, cfg, &tr.constrain(z)) + tr.log_jacobian(z);
    let mut rng = substream(seed, domain::SAMPLER, 0);
    let (zs, lps, rate) = mh_chain(target, &z0, settings.chain_length, settings.step, &mut rng);
    Ok(ChainResult {
        names: tr.names.clone(),
        draws: zs.iter().map(|z| tr.constrain(z)).collect(),
        log_target: lps,
        acceptance_rate: rate,
    })
}
