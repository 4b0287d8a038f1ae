//! Simulation study: the five three-arm scenarios, the ANOVA and
//! enrollment-window regression comparators, and operating-characteristic
//! tables (bias, SD, SE, coverage).
//!
//! Enrollment is uniform on (0, 20). Window 1 (`E ≤ 12`) randomizes 1:1 to
//! arms 1 and 2; window 2 adds arm 3 and randomizes 1:1:1. The contrast of
//! interest is arm 3 versus arm 1 over window 2.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::{Bernoulli, Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::analysis::{run_analysis, AnalysisSpec, DataScope};
use crate::error::{GpError, Result};
use crate::estimator::Subject;
use crate::glm_gp::{expit, LikelihoodSpec};
use crate::hyperfit::{CovariateMode, ModelKind, OptimizerSettings};
use crate::rng::{domain, substream};

pub const TREATMENT: usize = 3;
pub const CONTROL: usize = 1;
pub const WINDOW_CUT: f64 = 12.0;
pub const HORIZON: f64 = 20.0;

const EW1_PROBS: [f64; 3] = [0.5, 0.5, 0.0];
const EW2_PROBS: [f64; 3] = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: u8,
    pub n: usize,
}

impl ScenarioSpec {
    pub fn new(id: u8, n: usize) -> Result<Self> {
        if !(1..=5).contains(&id) {
            return Err(GpError::InvalidParameter(format!("scenario must be 1..5, got {id}")));
        }
        if n == 0 {
            return Err(GpError::InvalidParameter("scenario needs n >= 1".into()));
        }
        Ok(ScenarioSpec { id, n })
    }

    pub fn binary(&self) -> bool {
        self.id == 5
    }

    pub fn has_covariates(&self) -> bool {
        self.id == 4
    }

    /// Rounded truth as published for the scenario.
    pub fn stated_truth(&self) -> f64 {
        match self.id {
            1 | 3 => 3.58,
            2 => 4.0,
            4 => 3.38,
            _ => 0.12,
        }
    }

    /// Noise standard deviations of arms 1, 2, 3 (continuous scenarios).
    fn noise_sd(&self) -> [f64; 3] {
        match self.id {
            1 => [2.0, 1.0, 1.0],
            _ => [1.0, 1.0, 0.5],
        }
    }

    /// Conditional mean of the potential outcome under `arm`. For the
    /// binary scenario this is the success probability.
    pub fn outcome_mean(&self, arm: usize, e: f64, x: &[f64]) -> f64 {
        let trend1 = 1.0 + expit(e / 2.0 - 6.0);
        let trend3 = 5.0 + (e / 10.0 - 1.0).powi(2);
        match (self.id, arm) {
            (5, 1) => expit(-1.0 + e / 20.0),
            (5, 2) => 0.5,
            (5, _) => expit(-0.5 + e / 20.0),
            (_, 2) => 0.0,
            (1, 1) => trend1,
            (1, _) => trend3,
            (2, 1) => 1.0,
            (2, _) => 5.0,
            (3, 1) => trend1 - if e < WINDOW_CUT { 3.0 } else { 0.0 },
            (3, _) => trend3,
            (_, 1) => trend1 + x[0] * x[1] / 2.0,
            _ => trend3 + x[1] / 4.0 - x[0] / 2.0,
        }
    }

    fn draw_covariates<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        if !self.has_covariates() {
            return vec![];
        }
        let xb = if Bernoulli::new(0.4).expect("valid p").sample(rng) {
            1.0
        } else {
            0.0
        };
        let xc: f64 = Normal::new(0.0, 0.5).expect("valid sd").sample(rng);
        vec![xb, xc]
    }

    fn draw_outcome<R: Rng + ?Sized>(&self, arm: usize, e: f64, x: &[f64], rng: &mut R) -> f64 {
        let m = self.outcome_mean(arm, e, x);
        if self.binary() {
            if rng.random::<f64>() < m {
                1.0
            } else {
                0.0
            }
        } else {
            m + Normal::new(0.0, self.noise_sd()[arm - 1])
                .expect("valid sd")
                .sample(rng)
        }
    }

    /// Exact window-2 average of the treatment effect, by composite
    /// Simpson quadrature over enrollment time (covariate terms enter
    /// through their closed-form expectations).
    pub fn true_delta(&self) -> f64 {
        let cov_shift = if self.has_covariates() {
            // E[X_c/4 - X_b/2 - X_b X_c/2] with X_b, X_c independent, E X_c = 0
            -0.4 / 2.0
        } else {
            0.0
        };
        let x0 = [0.0, 0.0];
        let f = |e: f64| self.outcome_mean(TREATMENT, e, &x0) - self.outcome_mean(CONTROL, e, &x0);
        let m = 20_000;
        let h = (HORIZON - WINDOW_CUT) / m as f64;
        let mut s = f(WINDOW_CUT) + f(HORIZON);
        for i in 1..m {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(WINDOW_CUT + i as f64 * h);
        }
        s * h / 3.0 / (HORIZON - WINDOW_CUT) + cov_shift
    }
}

/// Simulated trial of `spec.n` subjects. Only the assigned arm's outcome
/// is realized.
pub fn generate_scenario(spec: &ScenarioSpec, seed: u64) -> Vec<Subject> {
    let mut rng = substream(seed, domain::SCENARIO, 0);
    let time = Uniform::new(0.0, HORIZON).expect("valid range");
    (0..spec.n)
        .map(|i| {
            let e = time.sample(&mut rng);
            let probs = if e <= WINDOW_CUT { EW1_PROBS } else { EW2_PROBS };
            let u: f64 = rng.random();
            let arm = if e <= WINDOW_CUT {
                1 + (u >= 0.5) as usize
            } else {
                1 + (u * 3.0).floor().min(2.0) as usize
            };
            let x = spec.draw_covariates(&mut rng);
            let y = spec.draw_outcome(arm, e, &x, &mut rng);
            Subject {
                id: format!("{}", i + 1),
                enroll_time: e,
                arm,
                outcome: Some(y),
                covariates: x,
                rand_probs: probs.to_vec(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloTruth {
    pub estimate: f64,
    pub mc_se: f64,
    pub draws: usize,
}

/// Average of simulated potential-outcome contrasts `Y(3) - Y(1)` over
/// window-2 enrollees.
pub fn monte_carlo_truth(spec: &ScenarioSpec, draws: usize, seed: u64) -> MonteCarloTruth {
    const CHUNK: usize = 100_000;
    let chunks = draws.div_ceil(CHUNK);
    let time = Uniform::new(WINDOW_CUT, HORIZON).expect("valid range");
    let parts: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = substream(seed, domain::TRUTH, c as u64);
            let len = CHUNK.min(draws - c * CHUNK);
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..len {
                let e = time.sample(&mut rng);
                let x = spec.draw_covariates(&mut rng);
                let d = spec.draw_outcome(TREATMENT, e, &x, &mut rng) - spec.draw_outcome(CONTROL, e, &x, &mut rng);
                s += d;
                s2 += d * d;
            }
            (s, s2)
        })
        .collect();
    let (s, s2) = parts.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let n = draws as f64;
    let mean = s / n;
    let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    MonteCarloTruth {
        estimate: mean,
        mc_se: (var / n).sqrt(),
        draws,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequentistEstimate {
    pub estimate: f64,
    pub se: f64,
}

impl FrequentistEstimate {
    pub fn ci(&self) -> (f64, f64) {
        (self.estimate - 1.96 * self.se, self.estimate + 1.96 * self.se)
    }
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, s2)
}

/// Difference in arm means among concurrently eligible subjects with the
/// unpooled standard error.
pub fn anova_estimate(subjects: &[Subject], j: usize, k: usize) -> Result<FrequentistEstimate> {
    let pick = |arm: usize| -> Result<Vec<f64>> {
        let y: Vec<f64> = subjects
            .iter()
            .filter(|s| s.arm == arm && s.eligible(j, k))
            .filter_map(|s| s.outcome)
            .collect();
        if y.len() < 2 {
            return Err(GpError::EmptyArm(format!(
                "arm {arm} has {} concurrent outcomes; at least 2 are needed",
                y.len()
            )));
        }
        Ok(y)
    };
    let (yj, yk) = (pick(j)?, pick(k)?);
    let (mj, vj) = mean_var(&yj);
    let (mk, vk) = mean_var(&yk);
    Ok(FrequentistEstimate {
        estimate: mj - mk,
        se: (vj / yj.len() as f64 + vk / yk.len() as f64).sqrt(),
    })
}

/// Least squares over every subject with an outcome, on an intercept, one
/// indicator per arm other than `k`, and a concurrent-window indicator. The
/// window effect is shared by all arms, so arms observed in both windows
/// (not just the control) determine it. The window column is dropped when
/// it is constant. Returns the arm-`j` coefficient.
pub fn lr_ew_estimate(subjects: &[Subject], j: usize, k: usize) -> Result<FrequentistEstimate> {
    let rows: Vec<&Subject> = subjects.iter().filter(|s| s.outcome.is_some()).collect();
    for a in [j, k] {
        if !rows.iter().any(|s| s.arm == a) {
            return Err(GpError::EmptyArm(format!("no outcomes in arm {a}")));
        }
    }
    let mut arms: Vec<usize> = rows.iter().map(|s| s.arm).filter(|&a| a != k).collect();
    arms.sort_unstable();
    arms.dedup();
    let ew: Vec<f64> = rows.iter().map(|s| s.eligible(j, k) as u8 as f64).collect();
    let with_ew = ew.iter().any(|&v| v != ew[0]);
    let p = 1 + arms.len() + usize::from(with_ew);
    let n = rows.len();
    if n <= p {
        return Err(GpError::RankDeficient(format!("{n} observations for {p} coefficients")));
    }
    let x = DMatrix::from_fn(n, p, |r, c| match c {
        0 => 1.0,
        c if c <= arms.len() => (rows[r].arm == arms[c - 1]) as u8 as f64,
        _ => ew[r],
    });
    let y = DVector::from_iterator(n, rows.iter().map(|s| s.outcome.unwrap_or(f64::NAN)));
    let svd = x.clone().svd(false, false);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-10 * smax {
        return Err(GpError::RankDeficient(
            "arm indicators are collinear with the enrollment-window indicator".into(),
        ));
    }
    let xtx = x.tr_mul(&x);
    let inv = xtx
        .try_inverse()
        .ok_or_else(|| GpError::RankDeficient("normal equations are singular".into()))?;
    let beta = &inv * x.tr_mul(&y);
    let resid = &y - &x * &beta;
    let s2 = resid.norm_squared() / (n - p) as f64;
    let c = 1 + arms.iter().position(|&a| a == j).expect("arm j has rows");
    Ok(FrequentistEstimate {
        estimate: beta[c],
        se: (s2 * inv[(c, c)]).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpModel {
    Single,
    Multi,
    /// Multi-task model with linear + ARD covariate kernel on the baseline.
    MultiCovariate,
    /// Single-task Bernoulli-logit model per arm, Laplace approximation.
    Glm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Anova,
    LrEw,
    Gp { model: GpModel, scope: DataScope },
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Anova => "anova".into(),
            Method::LrEw => "lr_ew".into(),
            Method::Gp { model, scope } => {
                let m = match model {
                    GpModel::Single => "single_gp",
                    GpModel::Multi => "multi_gp",
                    GpModel::MultiCovariate => "multi_gp_cov",
                    GpModel::Glm => "glm_gp",
                };
                format!("{m}_{}", scope.label())
            }
        }
    }

    /// Which data the method uses.
    pub fn scope(&self) -> DataScope {
        match self {
            Method::Anova => DataScope::Concurrent,
            Method::LrEw => DataScope::All,
            Method::Gp { scope, .. } => *scope,
        }
    }

    pub fn all() -> Vec<Method> {
        let mut out = vec![Method::Anova, Method::LrEw];
        for model in [GpModel::Single, GpModel::Multi, GpModel::MultiCovariate, GpModel::Glm] {
            for scope in [DataScope::Concurrent, DataScope::All] {
                out.push(Method::Gp { model, scope });
            }
        }
        out
    }
}

impl FromStr for Method {
    type Err = GpError;

    fn from_str(s: &str) -> Result<Self> {
        Method::all()
            .into_iter()
            .find(|m| m.label() == s.trim())
            .ok_or_else(|| {
                let known: Vec<String> = Method::all().iter().map(|m| m.label()).collect();
                GpError::InvalidParameter(format!("unknown method `{s}`; expected one of {}", known.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudySettings {
    pub replicates: usize,
    pub seed: u64,
    pub bootstrap: usize,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
    pub optimizer: OptimizerSettings,
}

impl StudySettings {
    pub fn new(replicates: usize, seed: u64) -> Self {
        StudySettings {
            replicates,
            seed,
            bootstrap: 1000,
            threads: None,
            optimizer: OptimizerSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicateEstimate {
    pub estimate: f64,
    pub se: f64,
    pub ci: (f64, f64),
}

impl ReplicateEstimate {
    fn covers(&self, truth: f64) -> bool {
        self.ci.0 <= truth && truth <= self.ci.1
    }
}

/// Seed of replicate `r`'s dataset.
pub fn replicate_seed(seed: u64, r: usize) -> u64 {
    substream(seed, domain::REPLICATE, r as u64).next_u64()
}

/// Apply one method to one dataset.
pub fn run_method(
    method: Method,
    spec: &ScenarioSpec,
    subjects: &[Subject],
    settings: &StudySettings,
    seed: u64,
) -> Result<ReplicateEstimate> {
    let freq = |f: FrequentistEstimate| ReplicateEstimate {
        estimate: f.estimate,
        se: f.se,
        ci: f.ci(),
    };
    match method {
        Method::Anova => anova_estimate(subjects, TREATMENT, CONTROL).map(freq),
        Method::LrEw => lr_ew_estimate(subjects, TREATMENT, CONTROL).map(freq),
        Method::Gp { model, scope } => {
            let kind = match model {
                GpModel::Single => ModelKind::Single,
                GpModel::Multi | GpModel::MultiCovariate => ModelKind::Multi,
                GpModel::Glm => ModelKind::Glm {
                    likelihood: LikelihoodSpec::BernoulliLogit,
                },
            };
            if (model == GpModel::Glm) != spec.binary() {
                return Err(GpError::InvalidParameter(format!(
                    "method {} does not apply to scenario {}",
                    method.label(),
                    spec.id
                )));
            }
            let mut a = AnalysisSpec::new(TREATMENT, CONTROL, kind, scope, settings.bootstrap, seed);
            a.optimizer = settings.optimizer;
            if model == GpModel::MultiCovariate {
                a.covariates = CovariateMode::LinearArd;
            }
            let out = run_analysis(subjects, &a)?;
            Ok(ReplicateEstimate {
                estimate: out.estimate.point,
                se: out.estimate.se,
                ci: out.estimate.ci,
            })
        }
    }
}

/// Operating characteristics of one method. Monte Carlo standard errors
/// accompany each summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub scope: String,
    pub n_ok: usize,
    pub n_failed: usize,
    pub bias: f64,
    pub bias_mcse: f64,
    pub sd: f64,
    pub sd_mcse: f64,
    pub se: f64,
    pub se_mcse: f64,
    /// Coverage of the nominal 95% intervals, in percent.
    pub cp: f64,
    pub cp_mcse: f64,
}

impl MetricsRow {
    pub fn from_estimates(method: Method, estimates: &[ReplicateEstimate], n_failed: usize, truth: f64) -> Self {
        let n = estimates.len();
        let nf = n as f64;
        let mut row = MetricsRow {
            method: method.label(),
            scope: method.scope().label().to_string(),
            n_ok: n,
            n_failed,
            bias: f64::NAN,
            bias_mcse: f64::NAN,
            sd: f64::NAN,
            sd_mcse: f64::NAN,
            se: f64::NAN,
            se_mcse: f64::NAN,
            cp: f64::NAN,
            cp_mcse: f64::NAN,
        };
        if n == 0 {
            return row;
        }
        let est: Vec<f64> = estimates.iter().map(|e| e.estimate).collect();
        let ses: Vec<f64> = estimates.iter().map(|e| e.se).collect();
        let cover = estimates.iter().filter(|e| e.covers(truth)).count() as f64 / nf;
        row.bias = est.iter().sum::<f64>() / nf - truth;
        row.se = ses.iter().sum::<f64>() / nf;
        row.cp = 100.0 * cover;
        row.cp_mcse = 100.0 * (cover * (1.0 - cover) / nf).sqrt();
        if n >= 2 {
            let (_, v) = mean_var(&est);
            let (_, vs) = mean_var(&ses);
            row.sd = v.sqrt();
            row.bias_mcse = row.sd / nf.sqrt();
            row.sd_mcse = row.sd / (2.0 * (nf - 1.0)).sqrt();
            row.se_mcse = (vs / nf).sqrt();
        }
        row
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub scenario: ScenarioSpec,
    pub truth: f64,
    pub settings: StudySettings,
    pub rows: Vec<MetricsRow>,
    /// Error messages of failed replicates as `(method, replicate, message)`.
    pub failures: Vec<(String, usize, String)>,
}

type ReplicateOutcome = Vec<std::result::Result<ReplicateEstimate, String>>;

/// Run every method on `settings.replicates` simulated datasets. The
/// result depends only on the master seed, not on thread count or
/// scheduling.
pub fn run_study(spec: &ScenarioSpec, methods: &[Method], settings: &StudySettings) -> Result<StudyResult> {
    if settings.replicates < 2 {
        return Err(GpError::InvalidParameter(format!(
            "a study needs at least 2 replicates, got {}",
            settings.replicates
        )));
    }
    if methods.is_empty() {
        return Err(GpError::InvalidParameter("no methods requested".into()));
    }
    let one = |r: usize| -> ReplicateOutcome {
        let seed = replicate_seed(settings.seed, r);
        let data = generate_scenario(spec, seed);
        methods
            .iter()
            .enumerate()
            .map(|(mi, &m)| {
                let mseed = substream(seed, domain::REPLICATE, mi as u64).next_u64();
                run_method(m, spec, &data, settings, mseed).map_err(|e| e.to_string())
            })
            .collect()
    };
    let per_rep: Vec<ReplicateOutcome> = match settings.threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t.max(1))
                .build()
                .map_err(|e| GpError::InvalidParameter(format!("thread pool: {e}")))?;
            pool.install(|| (0..settings.replicates).into_par_iter().map(one).collect())
        }
        None => (0..settings.replicates).into_par_iter().map(one).collect(),
    };
    Ok(aggregate(spec, methods, settings, &per_rep))
}

fn aggregate(
    spec: &ScenarioSpec,
    methods: &[Method],
    settings: &StudySettings,
    per_rep: &[ReplicateOutcome],
) -> StudyResult {
    let truth = spec.true_delta();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (mi, &m) in methods.iter().enumerate() {
        let mut ok = Vec::new();
        for (r, rep) in per_rep.iter().enumerate() {
            match &rep[mi] {
                Ok(e) => ok.push(*e),
                Err(msg) => failures.push((m.label(), r, msg.clone())),
            }
        }
        let nf = per_rep.len() - ok.len();
        rows.push(MetricsRow::from_estimates(m, &ok, nf, truth));
    }
    StudyResult {
        scenario: *spec,
        truth,
        settings: *settings,
        rows,
        failures,
    }
}

/// `x` with six significant digits.
pub fn fmt_sig(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "NA".into() } else { format!("{x}") };
    }
    if x == 0.0 {
        return "0".into();
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-5..=9).contains(&mag) {
        return format!("{x:.5e}");
    }
    let decimals = (5 - mag).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // -0.00000 style results from rounding tiny negatives
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        "0".into()
    } else {
        s
    }
}

const COLUMNS: [&str; 12] = [
    "method",
    "scope",
    "n_ok",
    "n_failed",
    "bias",
    "bias_mcse",
    "sd",
    "sd_mcse",
    "se",
    "se_mcse",
    "cp",
    "cp_mcse",
];

fn row_cells(r: &MetricsRow) -> Vec<String> {
    let mut c = vec![
        r.method.clone(),
        r.scope.clone(),
        r.n_ok.to_string(),
        r.n_failed.to_string(),
    ];
    for v in [r.bias, r.bias_mcse, r.sd, r.sd_mcse, r.se, r.se_mcse, r.cp, r.cp_mcse] {
        c.push(fmt_sig(v));
    }
    c
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&row_cells(r).join(","));
        out.push('\n');
    }
    out
}

pub fn metrics_text(rows: &[MetricsRow]) -> String {
    let cells: Vec<Vec<String>> = rows.iter().map(row_cells).collect();
    let widths: Vec<usize> = (0..COLUMNS.len())
        .map(|c| {
            cells
                .iter()
                .map(|r| r[c].len())
                .chain([COLUMNS[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |cols: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cols
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c < 2 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(COLUMNS.to_vec(), &mut out);
    for r in &cells {
        line(r.iter().map(|s| s.as_str()).collect(), &mut out);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareCheck {
    pub window: u8,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Pearson goodness-of-fit of the realized arm counts in each enrollment
/// window against the design probabilities.
pub fn randomization_check(subjects: &[Subject]) -> Vec<ChiSquareCheck> {
    [(1u8, EW1_PROBS), (2u8, EW2_PROBS)]
        .iter()
        .map(|&(w, probs)| {
            let in_window = |s: &&Subject| (s.enroll_time <= WINDOW_CUT) == (w == 1);
            let members: Vec<&Subject> = subjects.iter().filter(in_window).collect();
            let n = members.len() as f64;
            let mut stat = 0.0;
            let mut cells = 0;
            for (a, &p) in probs.iter().enumerate() {
                let obs = members.iter().filter(|s| s.arm == a + 1).count() as f64;
                if p > 0.0 {
                    stat += (obs - n * p).powi(2) / (n * p);
                    cells += 1;
                } else if obs > 0.0 {
                    stat = f64::INFINITY;
                }
            }
            let df = cells - 1;
            let p_value = if stat.is_finite() {
                1.0 - ChiSquared::new(df as f64).expect("df >= 1").cdf(stat)
            } else {
                0.0
            };
            ChiSquareCheck {
                window: w,
                statistic: stat,
                df,
                p_value,
            }
        })
        .collect()
}
