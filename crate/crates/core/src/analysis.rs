//! End-to-end contrast estimation for one pair of arms: data selection,
//! default priors, MAP hyperparameters and the Bayesian bootstrap.

use std::collections::BTreeMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{weight_matrix_multi, weight_matrix_single, WeightReport};
use crate::error::{GpError, Result};
use crate::estimator::{
    ece_population, estimate_contrast_multi, estimate_contrast_single, EceSet, EstimateResult, Subject,
};
use crate::glm_gp::{estimate_contrast_glm, LaplaceFit};
use crate::gp_multi::MultiTaskFit;
use crate::gp_single::{ArmData, SingleTaskFit};
use crate::hyperfit::{
    map_fit, CovariateMode, FitProblem, HyperConfig, ModelKind, OptimizationTrace, OptimizerSettings, PriorSpec,
    TimeKernel,
};
use crate::kernels::Input;
use crate::rng::{domain, substream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataScope {
    /// Only subjects in the concurrently eligible set.
    Concurrent,
    /// Every subject randomized to either arm.
    #[default]
    All,
}

impl DataScope {
    pub fn label(&self) -> &'static str {
        match self {
            DataScope::Concurrent => "concurrent",
            DataScope::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSpec {
    pub j: usize,
    pub k: usize,
    pub kind: ModelKind,
    pub time_kernel: TimeKernel,
    pub covariates: CovariateMode,
    pub scope: DataScope,
    pub bootstrap: usize,
    pub seed: u64,
    pub optimizer: OptimizerSettings,
    /// Replace individual default priors by name.
    pub prior_overrides: BTreeMap<String, PriorSpec>,
    pub marginalize_means: bool,
}

impl AnalysisSpec {
    pub fn new(j: usize, k: usize, kind: ModelKind, scope: DataScope, bootstrap: usize, seed: u64) -> Self {
        AnalysisSpec {
            j,
            k,
            kind,
            time_kernel: TimeKernel::default(),
            covariates: CovariateMode::None,
            scope,
            bootstrap,
            seed,
            optimizer: OptimizerSettings::default(),
            prior_overrides: BTreeMap::new(),
            marginalize_means: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperSummary {
    /// `"treatment"`, `"control"` or `"joint"`.
    pub role: String,
    pub values: BTreeMap<String, f64>,
    /// Mean parameters integrated out; their entry in `values` is the prior mean.
    pub marginalized: Vec<String>,
    pub log_posterior: f64,
    pub trace: OptimizationTrace,
    pub warning: Option<String>,
}

#[derive(Debug, Clone)]
pub enum FittedPair {
    Single {
        treatment: SingleTaskFit,
        control: SingleTaskFit,
    },
    Multi(MultiTaskFit),
    Glm {
        treatment: LaplaceFit,
        control: LaplaceFit,
    },
}

impl FittedPair {
    /// Explicit outcome weights; not available for the Laplace model, whose
    /// posterior mean is nonlinear in the outcomes.
    pub fn weights(&self, ece: &EceSet) -> Result<Option<WeightReport>> {
        match self {
            FittedPair::Single { treatment, control } => weight_matrix_single(treatment, control, ece).map(Some),
            FittedPair::Multi(f) => weight_matrix_multi(f, ece).map(Some),
            FittedPair::Glm { .. } => Ok(None),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnalysisOutput {
    pub estimate: EstimateResult,
    pub ece: EceSet,
    pub fits: FittedPair,
    pub hyper: Vec<HyperSummary>,
    pub warnings: Vec<String>,
    /// Subject indices used for the treatment and control arms.
    pub treatment_rows: Vec<usize>,
    pub control_rows: Vec<usize>,
    /// Control rows outside the concurrently eligible set.
    pub n_nonconcurrent: usize,
}

/// Outcomes and inputs of arm `arm`, restricted to ECE members for the
/// concurrent scope. Covariates are dropped when unused.
pub fn arm_data(
    subjects: &[Subject],
    arm: usize,
    scope: DataScope,
    j: usize,
    k: usize,
    keep_covariates: bool,
) -> Result<(ArmData, Vec<usize>)> {
    let mut inputs = Vec::new();
    let mut y = Vec::new();
    let mut rows = Vec::new();
    for (i, s) in subjects.iter().enumerate() {
        if s.arm != arm || (scope == DataScope::Concurrent && !s.eligible(j, k)) {
            continue;
        }
        let Some(v) = s.outcome else {
            return Err(GpError::InvalidOutcome(format!(
                "subject `{}` in arm {arm} has no outcome",
                s.id
            )));
        };
        inputs.push(strip(s.input(), keep_covariates));
        y.push(v);
        rows.push(i);
    }
    if rows.is_empty() {
        return Err(GpError::EmptyArm(format!("no {} subjects in arm {arm}", scope.label())));
    }
    Ok((ArmData::new(inputs, y)?, rows))
}

fn strip(u: Input, keep: bool) -> Input {
    if keep {
        u
    } else {
        Input::at(u.time)
    }
}

/// Seed for a hyperparameter search, derived from the analysis seed.
pub fn fit_seed(seed: u64, role: u64) -> u64 {
    substream(seed, domain::FIT, role).next_u64()
}

fn config(spec: &AnalysisSpec, kind: ModelKind, ece: &EceSet) -> Result<(HyperConfig, Vec<String>)> {
    let (mut cfg, warnings) = HyperConfig::with_defaults(kind, spec.time_kernel, spec.covariates, &ece.inputs)?;
    for (name, p) in &spec.prior_overrides {
        if !cfg.priors.contains_key(name) {
            return Err(GpError::InvalidParameter(format!(
                "prior override for unknown hyperparameter `{name}`"
            )));
        }
        cfg.priors.insert(name.clone(), *p);
    }
    cfg.optimizer = spec.optimizer;
    cfg.marginalize_means = spec.marginalize_means;
    cfg.validate()?;
    Ok((cfg, warnings))
}

pub fn run_analysis(subjects: &[Subject], spec: &AnalysisSpec) -> Result<AnalysisOutput> {
    let keep = spec.covariates != CovariateMode::None;
    let mut ece = ece_population(subjects, spec.j, spec.k)?;
    if !keep {
        ece.inputs = ece.inputs.into_iter().map(|u| Input::at(u.time)).collect();
    }
    let (dj, rows_j) = arm_data(subjects, spec.j, spec.scope, spec.j, spec.k, keep)?;
    let (dk, rows_k) = arm_data(subjects, spec.k, spec.scope, spec.j, spec.k, keep)?;
    let n_nonconcurrent = rows_k
        .iter()
        .filter(|&&i| !subjects[i].eligible(spec.j, spec.k))
        .count();
    let (cfg, warnings) = config(spec, spec.kind, &ece)?;

    let tr = cfg.transform();
    let marginalized: Vec<String> = tr.names.iter().filter(|n| tr.is_marginal(n)).cloned().collect();
    let summary = |role: &str, m: &crate::hyperfit::MapResult| HyperSummary {
        role: role.to_string(),
        values: m.values.clone(),
        marginalized: marginalized.clone(),
        log_posterior: m.log_posterior,
        trace: m.trace.clone(),
        warning: m.warning.clone(),
    };
    let (estimate, fits, hyper) = match spec.kind {
        ModelKind::Multi => {
            let m = map_fit(
                &FitProblem::Multi {
                    treatment: &dj,
                    control: &dk,
                },
                &cfg,
                fit_seed(spec.seed, 0),
            )?;
            let fit = m.fit.as_multi().expect("multi-task fit").clone();
            let est = estimate_contrast_multi(&fit, &ece, spec.bootstrap, spec.seed)?;
            (est, FittedPair::Multi(fit), vec![summary("joint", &m)])
        }
        ModelKind::Single => {
            let mj = map_fit(
                &FitProblem::Single { arm: spec.j, data: &dj },
                &cfg,
                fit_seed(spec.seed, spec.j as u64),
            )?;
            let mk = map_fit(
                &FitProblem::Single { arm: spec.k, data: &dk },
                &cfg,
                fit_seed(spec.seed, spec.k as u64),
            )?;
            let fj = mj.fit.as_single().expect("single-task fit").clone();
            let fk = mk.fit.as_single().expect("single-task fit").clone();
            let est = estimate_contrast_single(&fj, &fk, &ece, spec.bootstrap, spec.seed)?;
            (
                est,
                FittedPair::Single {
                    treatment: fj,
                    control: fk,
                },
                vec![summary("treatment", &mj), summary("control", &mk)],
            )
        }
        ModelKind::Glm { .. } => {
            let mj = map_fit(
                &FitProblem::Glm { arm: spec.j, data: &dj },
                &cfg,
                fit_seed(spec.seed, spec.j as u64),
            )?;
            let mk = map_fit(
                &FitProblem::Glm { arm: spec.k, data: &dk },
                &cfg,
                fit_seed(spec.seed, spec.k as u64),
            )?;
            let fj = mj.fit.as_glm().expect("laplace fit").clone();
            let fk = mk.fit.as_glm().expect("laplace fit").clone();
            let est = estimate_contrast_glm(&fj, &fk, &ece, spec.bootstrap, spec.seed)?;
            (
                est,
                FittedPair::Glm {
                    treatment: fj,
                    control: fk,
                },
                vec![summary("treatment", &mj), summary("control", &mk)],
            )
        }
    };
    Ok(AnalysisOutput {
        estimate,
        ece,
        fits,
        hyper,
        warnings,
        treatment_rows: rows_j,
        control_rows: rows_k,
        n_nonconcurrent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subject(i: usize, t: f64, arm: usize, y: f64, probs: Vec<f64>) -> Subject {
        Subject {
            id: format!("s{i}"),
            enroll_time: t,
            arm,
            outcome: Some(y),
            covariates: vec![],
            rand_probs: probs,
        }
    }

    fn toy() -> Vec<Subject> {
        let mut out = Vec::new();
        for i in 0..30 {
            let t = i as f64 * 0.6;
            if t <= 8.0 {
                out.push(subject(
                    i,
                    t,
                    1 + i % 2,
                    1.0 + 0.05 * t + 0.1 * ((i * 7) % 5) as f64,
                    vec![0.5, 0.5, 0.0],
                ));
            } else {
                let arm = 1 + i % 3;
                let y = if arm == 3 { 3.0 } else { 1.0 } + 0.05 * t + 0.1 * ((i * 7) % 5) as f64;
                out.push(subject(i, t, arm, y, vec![1.0 / 3.0; 3]));
            }
        }
        out
    }

    #[test]
    fn arm_selection_by_scope() {
        let s = toy();
        let (all, _) = arm_data(&s, 1, DataScope::All, 3, 1, false).unwrap();
        let (cc, _) = arm_data(&s, 1, DataScope::Concurrent, 3, 1, false).unwrap();
        assert!(cc.len() < all.len());
        assert!(cc.inputs.iter().all(|u| u.time > 8.0));
    }

    #[test]
    fn multi_analysis_runs_and_is_deterministic() {
        let s = toy();
        let mut spec = AnalysisSpec::new(3, 1, ModelKind::Multi, DataScope::All, 200, 11);
        spec.optimizer.restarts = 2;
        let a = run_analysis(&s, &spec).unwrap();
        let b = run_analysis(&s, &spec).unwrap();
        assert_eq!(a.estimate, b.estimate);
        assert!(a.n_nonconcurrent > 0);
        assert!((a.estimate.point - 2.0).abs() < 1.0);
        let w = a.fits.weights(&a.ece).unwrap().unwrap();
        assert_eq!(w.w_cc.nrows(), a.ece.n());
    }

    #[test]
    fn unknown_override_rejected() {
        let s = toy();
        let mut spec = AnalysisSpec::new(3, 1, ModelKind::Single, DataScope::Concurrent, 50, 1);
        spec.prior_overrides
            .insert("nope".into(), PriorSpec::Fixed { value: 1.0 });
        assert!(matches!(run_analysis(&s, &spec), Err(GpError::InvalidParameter(_))));
    }
}
