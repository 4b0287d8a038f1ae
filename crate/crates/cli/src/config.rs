//! Analysis configuration (TOML).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use platform_gp::analysis::{AnalysisSpec, DataScope};
use platform_gp::estimator::DEFAULT_BOOTSTRAP;
use platform_gp::glm_gp::LikelihoodSpec;
use platform_gp::hyperfit::{CovariateMode, ModelKind, OptimizerSettings, PriorSpec, TimeKernel};
use serde::{Deserialize, Serialize};

use crate::error::{io_error, CliError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    Single,
    #[default]
    Multi,
    Glm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodChoice {
    BernoulliLogit,
    PoissonLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelChoice {
    #[default]
    SquaredExponential,
    Matern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Structured report path.
    pub json: Option<PathBuf>,
    /// Weight-matrix dump path.
    pub weights: Option<PathBuf>,
}

fn default_bootstrap() -> usize {
    DEFAULT_BOOTSTRAP
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub treatment: usize,
    pub control: usize,
    #[serde(default)]
    pub model: ModelChoice,
    /// Required for `model = "glm"`.
    pub likelihood: Option<LikelihoodChoice>,
    #[serde(default)]
    pub scope: DataScope,
    #[serde(default)]
    pub kernel: KernelChoice,
    /// Matérn smoothness, one of 0.5, 1.5, 2.5.
    pub matern_nu: Option<f64>,
    #[serde(default)]
    pub covariate_mode: CovariateMode,
    /// Covariate columns to use; empty means every `x_` column.
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    /// Per-hyperparameter prior overrides.
    #[serde(default)]
    pub priors: BTreeMap<String, PriorSpec>,
    #[serde(default = "default_true")]
    pub marginalize_means: bool,
    #[serde(default)]
    pub output: OutputConfig,
}

impl AnalysisConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: AnalysisConfig = toml::from_str(text).map_err(|e| CliError::Input(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        Self::parse(&text).map_err(|e| CliError::Input(format!("{}: {}", path.display(), e.message())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Input(format!("config: {m}")));
        if self.treatment == 0 || self.control == 0 {
            return bad("arms are numbered from 1".into());
        }
        if self.treatment == self.control {
            return bad(format!("treatment and control are both arm {}", self.treatment));
        }
        if self.bootstrap < 2 {
            return bad(format!("bootstrap must be >= 2, got {}", self.bootstrap));
        }
        match (self.model, self.likelihood) {
            (ModelChoice::Glm, None) => return bad("model `glm` needs a `likelihood`".into()),
            (ModelChoice::Single | ModelChoice::Multi, Some(_)) => {
                return bad("`likelihood` only applies to model `glm`".into())
            }
            _ => {}
        }
        match (self.kernel, self.matern_nu) {
            (KernelChoice::Matern, None) => return bad("kernel `matern` needs `matern_nu`".into()),
            (KernelChoice::Matern, Some(nu)) if ![0.5, 1.5, 2.5].contains(&nu) => {
                return bad(format!("matern_nu must be 0.5, 1.5 or 2.5, got {nu}"))
            }
            (KernelChoice::SquaredExponential, Some(_)) => {
                return bad("`matern_nu` only applies to kernel `matern`".into())
            }
            _ => {}
        }
        if self.covariate_mode == CovariateMode::None && !self.covariates.is_empty() {
            return bad("covariate columns listed but `covariate_mode` is `none`".into());
        }
        if self.optimizer.restarts == 0 {
            return bad("optimizer.restarts must be >= 1".into());
        }
        for (name, p) in &self.priors {
            p.validate()
                .map_err(|e| CliError::Input(format!("config: prior for `{name}`: {e}")))?;
        }
        Ok(())
    }

    pub fn model_kind(&self) -> ModelKind {
        match self.model {
            ModelChoice::Single => ModelKind::Single,
            ModelChoice::Multi => ModelKind::Multi,
            ModelChoice::Glm => ModelKind::Glm {
                likelihood: match self.likelihood {
                    Some(LikelihoodChoice::PoissonLog) => LikelihoodSpec::PoissonLog,
                    _ => LikelihoodSpec::BernoulliLogit,
                },
            },
        }
    }

    pub fn time_kernel(&self) -> TimeKernel {
        match self.kernel {
            KernelChoice::SquaredExponential => TimeKernel::SquaredExponential,
            KernelChoice::Matern => TimeKernel::Matern {
                nu: self.matern_nu.unwrap_or(2.5),
            },
        }
    }

    pub fn analysis_spec(&self, scope: DataScope) -> AnalysisSpec {
        let mut s = AnalysisSpec::new(
            self.treatment,
            self.control,
            self.model_kind(),
            scope,
            self.bootstrap,
            self.seed,
        );
        s.time_kernel = self.time_kernel();
        s.covariates = self.covariate_mode;
        s.optimizer = self.optimizer;
        s.prior_overrides = self.priors.clone();
        s.marginalize_means = self.marginalize_means;
        s
    }
}
