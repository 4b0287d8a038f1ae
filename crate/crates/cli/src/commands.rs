//! `analyze`, `diagnose` and `simulate`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use platform_gp::analysis::{run_analysis, AnalysisOutput, DataScope, FittedPair, HyperSummary};
use platform_gp::diagnostics::{variance_reduction_multi, variance_reduction_single, Certificate, WeightReport};
use platform_gp::hyperfit::CovariateMode;
use platform_gp::kernels::Input;
use platform_gp::simharness::{fmt_sig, metrics_csv, metrics_text, run_study, Method, ScenarioSpec, StudySettings};
use serde::Serialize;

use crate::config::AnalysisConfig;
use crate::dataset::Dataset;
use crate::error::CliError;

/// Round to six significant digits for reporting.
pub fn sig6(x: f64) -> Option<f64> {
    if !x.is_finite() {
        return None;
    }
    format!("{x:.5e}").parse().ok()
}

fn prepare(cfg: &AnalysisConfig, ds: &Dataset) -> Result<Dataset, CliError> {
    for arm in [cfg.treatment, cfg.control] {
        if arm > ds.n_arms {
            return Err(CliError::Input(format!(
                "config names arm {arm} but the dataset has {} arms",
                ds.n_arms
            )));
        }
    }
    if cfg.covariate_mode == CovariateMode::None {
        return ds.select_covariates(&[]);
    }
    let names = if cfg.covariates.is_empty() {
        ds.covariate_names.clone()
    } else {
        cfg.covariates.clone()
    };
    if names.is_empty() {
        return Err(CliError::Input(
            "covariate adjustment requested but the dataset has no `x_` columns".into(),
        ));
    }
    ds.select_covariates(&names)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateSummary {
    pub point: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub se: Option<f64>,
    pub bootstrap: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EssSummary {
    pub ess: Option<f64>,
    pub negative_weights: bool,
    pub n_control: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HyperReport {
    pub role: String,
    pub values: BTreeMap<String, Option<f64>>,
    pub marginalized: Vec<String>,
    pub log_posterior: Option<f64>,
    pub restarts: usize,
    pub converged_restarts: usize,
    pub best_restart: Option<usize>,
    pub evaluations: usize,
    pub warning: Option<String>,
}

impl HyperReport {
    fn from_summary(h: &HyperSummary) -> Self {
        HyperReport {
            role: h.role.clone(),
            values: h.values.iter().map(|(k, v)| (k.clone(), sig6(*v))).collect(),
            marginalized: h.marginalized.clone(),
            log_posterior: sig6(h.log_posterior),
            restarts: h.trace.restarts.len(),
            converged_restarts: h.trace.restarts.iter().filter(|r| r.converged).count(),
            best_restart: h.trace.best,
            evaluations: h.trace.restarts.iter().map(|r| r.evaluations).sum(),
            warning: h.warning.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyzeReport {
    pub model: String,
    pub treatment: usize,
    pub control: usize,
    pub scope: String,
    pub n_ece: usize,
    pub n_treatment: usize,
    pub n_control: usize,
    pub n_nonconcurrent_control: usize,
    pub estimate: EstimateSummary,
    pub ess: Option<EssSummary>,
    pub hyperparameters: Vec<HyperReport>,
    pub warnings: Vec<String>,
}

pub struct Analysis {
    pub report: AnalyzeReport,
    pub output: AnalysisOutput,
    pub weights: Option<WeightReport>,
    pub data: Dataset,
}

pub fn analyze(cfg: &AnalysisConfig, ds: &Dataset) -> Result<Analysis, CliError> {
    let data = prepare(cfg, ds)?;
    let out = run_analysis(&data.subjects, &cfg.analysis_spec(cfg.scope))?;
    let weights = out.fits.weights(&out.ece)?;
    let e = &out.estimate;
    let report = AnalyzeReport {
        model: e.model.clone(),
        treatment: cfg.treatment,
        control: cfg.control,
        scope: cfg.scope.label().to_string(),
        n_ece: out.ece.n(),
        n_treatment: out.treatment_rows.len(),
        n_control: out.control_rows.len(),
        n_nonconcurrent_control: out.n_nonconcurrent,
        estimate: EstimateSummary {
            point: sig6(e.point),
            ci_lower: sig6(e.ci.0),
            ci_upper: sig6(e.ci.1),
            se: sig6(e.se),
            bootstrap: e.b,
            seed: e.seed,
        },
        ess: weights.as_ref().map(|w| EssSummary {
            ess: w.ess_control.as_ref().and_then(|r| sig6(r.ess)),
            negative_weights: w.ess_control.as_ref().is_some_and(|r| r.negative_weights),
            n_control: w.control_weights.len(),
        }),
        hyperparameters: out.hyper.iter().map(HyperReport::from_summary).collect(),
        warnings: out.warnings.clone(),
    };
    Ok(Analysis {
        report,
        output: out,
        weights,
        data,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_sig).unwrap_or_else(|| "NA".into())
}

pub fn render_analyze(r: &AnalyzeReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "contrast      arm {} vs arm {} ({} model, {} data)",
        r.treatment, r.control, r.model, r.scope
    );
    let _ = writeln!(
        s,
        "subjects      ECE {}, treatment {}, control {} ({} nonconcurrent)",
        r.n_ece, r.n_treatment, r.n_control, r.n_nonconcurrent_control
    );
    let e = &r.estimate;
    let _ = writeln!(s, "estimate      {}", opt(e.point));
    let _ = writeln!(s, "95% interval  ({}, {})", opt(e.ci_lower), opt(e.ci_upper));
    let _ = writeln!(s, "SE            {}", opt(e.se));
    let _ = writeln!(s, "bootstrap     B = {}, seed = {}", e.bootstrap, e.seed);
    if let Some(w) = &r.ess {
        let flag = if w.negative_weights {
            " (negative weights present)"
        } else {
            ""
        };
        let _ = writeln!(s, "control ESS   {} of {}{flag}", opt(w.ess), w.n_control);
    }
    for h in &r.hyperparameters {
        let _ = writeln!(
            s,
            "hyperparameters [{}]  log posterior {}, {}/{} restarts converged, {} evaluations",
            h.role,
            opt(h.log_posterior),
            h.converged_restarts,
            h.restarts,
            h.evaluations
        );
        for (k, v) in &h.values {
            let note = if h.marginalized.contains(k) {
                "  (integrated out; prior mean)"
            } else {
                ""
            };
            let _ = writeln!(s, "  {k:<14}{}{note}", opt(*v));
        }
        if let Some(w) = &h.warning {
            let _ = writeln!(s, "  warning: {w}");
        }
    }
    for w in &r.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

/// Full-precision weight matrix: one row per ECE subject, one column per
/// outcome used in the fit (treatment arm first).
pub fn weights_csv(a: &Analysis) -> Result<String, CliError> {
    let w = a
        .weights
        .as_ref()
        .ok_or_else(|| CliError::Input("explicit weights are not available for the glm model".into()))?;
    let subjects = &a.data.subjects;
    let cols: Vec<usize> = a
        .output
        .treatment_rows
        .iter()
        .chain(&a.output.control_rows)
        .cloned()
        .collect();
    let mut out = String::from("ece_id");
    for &c in &cols {
        let _ = write!(out, ",{}", subjects[c].id);
    }
    out.push('\n');
    for (r, &i) in a.output.ece.indices.iter().enumerate() {
        out.push_str(&subjects[i].id);
        for c in 0..cols.len() {
            let _ = write!(out, ",{}", w.w_cc[(r, c)]);
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightEntry {
    pub id: String,
    pub arm: usize,
    pub concurrent: bool,
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateReport {
    pub min_eigenvalue: Option<f64>,
    pub passes: bool,
    pub n_concurrent_control: usize,
    pub n_all_control: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnoseReport {
    pub analysis: AnalyzeReport,
    /// Control outcomes with the largest absolute weight.
    pub top_control_weights: Vec<WeightEntry>,
    pub constant_offset: Option<f64>,
    pub certificate: CertificateReport,
}

pub const TOP_WEIGHTS: usize = 10;

/// Weight summary and the variance-reduction certificate comparing
/// concurrent-only with all-data conditioning at the all-data fit's
/// hyperparameters.
pub fn diagnose(cfg: &AnalysisConfig, ds: &Dataset) -> Result<DiagnoseReport, CliError> {
    let mut cfg = cfg.clone();
    cfg.scope = DataScope::All;
    let a = analyze(&cfg, ds)?;
    let w = a
        .weights
        .as_ref()
        .ok_or_else(|| CliError::Input("diagnostics need explicit weights, which the glm model lacks".into()))?;
    let subjects = &a.data.subjects;
    let (j, k) = (cfg.treatment, cfg.control);
    let ctrl = &a.output.control_rows;
    let mut order: Vec<usize> = (0..ctrl.len()).collect();
    order.sort_by(|&x, &y| {
        w.control_weights[y]
            .abs()
            .total_cmp(&w.control_weights[x].abs())
            .then(x.cmp(&y))
    });
    let top = order
        .iter()
        .take(TOP_WEIGHTS)
        .map(|&c| {
            let s = &subjects[ctrl[c]];
            WeightEntry {
                id: s.id.clone(),
                arm: s.arm,
                concurrent: s.eligible(j, k),
                weight: sig6(w.control_weights[c]),
            }
        })
        .collect();

    let inputs = |rows: &[usize], only_cc: bool| -> Vec<Input> {
        rows.iter()
            .filter(|&&i| !only_cc || subjects[i].eligible(j, k))
            .map(|&i| {
                let s = &subjects[i];
                if cfg.covariate_mode == CovariateMode::None {
                    Input::at(s.enroll_time)
                } else {
                    s.input()
                }
            })
            .collect()
    };
    let full = inputs(ctrl, false);
    let cc = inputs(ctrl, true);
    let grid = &a.output.ece.inputs;
    let cert: Certificate = match &a.output.fits {
        FittedPair::Multi(f) => {
            let treat = inputs(&a.output.treatment_rows, false);
            variance_reduction_multi(f.kernel(), f.noise(), &treat, &cc, &full, grid)?
        }
        FittedPair::Single { control, .. } => {
            variance_reduction_single(control.kernel(), control.noise_var(), &cc, &full, grid)?
        }
        FittedPair::Glm { .. } => unreachable!("weights checked above"),
    };
    Ok(DiagnoseReport {
        top_control_weights: top,
        constant_offset: sig6(w.constant_offset),
        certificate: CertificateReport {
            min_eigenvalue: sig6(cert.min_eigenvalue),
            passes: cert.passes,
            n_concurrent_control: cc.len(),
            n_all_control: full.len(),
        },
        analysis: a.report,
    })
}

pub fn render_diagnose(r: &DiagnoseReport) -> String {
    let mut s = render_analyze(&r.analysis);
    let _ = writeln!(s, "constant offset {}", opt(r.constant_offset));
    let _ = writeln!(s, "largest control weights");
    for e in &r.top_control_weights {
        let tag = if e.concurrent { "concurrent" } else { "nonconcurrent" };
        let _ = writeln!(s, "  {:<12} arm {}  {:<13} {}", e.id, e.arm, tag, opt(e.weight));
    }
    let c = &r.certificate;
    let _ = writeln!(
        s,
        "variance reduction certificate: min eigenvalue {} ({}), {} concurrent vs {} total controls",
        opt(c.min_eigenvalue),
        if c.passes { "pass" } else { "FAIL" },
        c.n_concurrent_control,
        c.n_all_control
    );
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateArgs {
    pub scenario: u8,
    pub replicates: usize,
    pub n: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub bootstrap: usize,
    pub restarts: Option<usize>,
    pub threads: Option<usize>,
}

pub fn parse_methods(list: &str) -> Result<Vec<Method>, CliError> {
    if list.trim() == "all" {
        return Ok(Method::all());
    }
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse::<Method>().map_err(CliError::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateReport {
    pub scenario: u8,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub bootstrap: usize,
    pub truth: Option<f64>,
    pub rows: Vec<BTreeMap<String, serde_json::Value>>,
    pub failures: usize,
    #[serde(skip)]
    pub text: String,
    #[serde(skip)]
    pub csv: String,
}

pub fn simulate(args: &SimulateArgs) -> Result<SimulateReport, CliError> {
    let spec = ScenarioSpec::new(args.scenario, args.n)?;
    let mut st = StudySettings::new(args.replicates, args.seed);
    st.bootstrap = args.bootstrap;
    st.threads = args.threads;
    if let Some(r) = args.restarts {
        st.optimizer.restarts = r;
    }
    let res = run_study(&spec, &args.methods, &st)?;
    let rows = res
        .rows
        .iter()
        .map(|r| {
            let num = |v: f64| sig6(v).map(serde_json::Value::from).unwrap_or(serde_json::Value::Null);
            let mut m = BTreeMap::new();
            m.insert("method".into(), r.method.clone().into());
            m.insert("scope".into(), r.scope.clone().into());
            m.insert("n_ok".into(), r.n_ok.into());
            m.insert("n_failed".into(), r.n_failed.into());
            for (k, v) in [
                ("bias", r.bias),
                ("bias_mcse", r.bias_mcse),
                ("sd", r.sd),
                ("sd_mcse", r.sd_mcse),
                ("se", r.se),
                ("se_mcse", r.se_mcse),
                ("cp", r.cp),
                ("cp_mcse", r.cp_mcse),
            ] {
                m.insert(k.into(), num(v));
            }
            m
        })
        .collect();
    let mut text = format!(
        "scenario {}  n = {}  replicates = {}  seed = {}  B = {}  true effect {}\n",
        spec.id,
        spec.n,
        args.replicates,
        args.seed,
        args.bootstrap,
        fmt_sig(res.truth)
    );
    text.push_str(&metrics_text(&res.rows));
    if !res.failures.is_empty() {
        let _ = writeln!(text, "{} failed method runs (excluded):", res.failures.len());
        for (m, r, msg) in res.failures.iter().take(10) {
            let _ = writeln!(text, "  {m} replicate {r}: {msg}");
        }
    }
    Ok(SimulateReport {
        scenario: spec.id,
        n: spec.n,
        replicates: args.replicates,
        seed: args.seed,
        bootstrap: args.bootstrap,
        truth: sig6(res.truth),
        rows,
        failures: res.failures.len(),
        text,
        csv: metrics_csv(&res.rows),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(1234.567891), Some(1234.57));
        assert_eq!(sig6(0.000123456789), Some(0.000123457));
        assert_eq!(sig6(f64::NAN), None);
    }

    #[test]
    fn method_lists() {
        assert_eq!(parse_methods("anova,multi_gp_all").unwrap().len(), 2);
        assert_eq!(parse_methods("all").unwrap(), Method::all());
        assert_eq!(parse_methods("anova,nope").unwrap_err().exit_code(), 2);
    }
}
