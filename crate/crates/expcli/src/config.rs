use std::path::{Path, PathBuf};

use replora_core::estimation::{FitOptions, InitMode};
use replora_core::parameterization::DEFAULT_THETA_BOX;
use replora_core::{Activation, Family, FamilyParams, FamilySpec, InputDist};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Random,
    Oracle,
    Warm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub step: f64,
    pub steps: usize,
    pub restarts: usize,
    pub init: InitKind,
    pub warm_delta: f64,
    pub final_lr_fraction: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let d = FitOptions::default();
        OptimizerConfig {
            step: d.step,
            steps: d.steps,
            restarts: d.restarts,
            init: InitKind::Warm,
            warm_delta: 0.1,
            final_lr_fraction: d.final_lr_fraction,
        }
    }
}

impl OptimizerConfig {
    pub fn fit_options(&self, truth: &FamilyParams, seed: u64) -> FitOptions {
        let init = match self.init {
            InitKind::Random => InitMode::Random,
            InitKind::Oracle => InitMode::Oracle { truth: truth.clone() },
            InitKind::Warm => InitMode::Warm {
                truth: truth.clone(),
                delta: self.warm_delta,
            },
        };
        FitOptions {
            step: self.step,
            steps: self.steps,
            restarts: self.restarts,
            init,
            seed,
            final_lr_fraction: self.final_lr_fraction,
            normalize_weights: true,
        }
    }
}

/// One sweep: model sizes, truth and data settings, sample-size grid and
/// optimizer. Every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dim: usize,
    pub rank: usize,
    pub true_experts: usize,
    pub fitted_experts: usize,
    pub family: Family,
    pub act1: Activation,
    pub act2: Activation,
    pub hidden: usize,
    pub backbone_seed: u64,
    pub identity_key: bool,
    pub input_dist: InputDist,
    pub noise_std: f64,
    pub n_grid: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    /// One truth for the whole sweep; otherwise a fresh truth per cell.
    pub fixed_truth: bool,
    /// Truth entries are uniform in `[-truth_scale, truth_scale]`.
    pub truth_scale: f64,
    pub theta_box: f64,
    pub optimizer: OptimizerConfig,
    pub mc_samples: usize,
    /// Exponent of `D1_r` for the free family.
    pub r_exp: u32,
    pub output: Option<PathBuf>,
    /// Write measured wall time; off by default so output is reproducible.
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dim: 2,
            rank: 1,
            true_experts: 2,
            fitted_experts: 2,
            family: Family::LinearShared,
            act1: Activation::SIGMOID,
            act2: Activation::SIGMOID,
            hidden: replora_core::parameterization::DEFAULT_HIDDEN,
            backbone_seed: 0xB0B,
            identity_key: false,
            input_dist: InputDist::default(),
            noise_std: 0.05,
            n_grid: vec![250, 500, 1000, 2000, 4000, 8000],
            trials: 20,
            seed: 0,
            fixed_truth: true,
            truth_scale: 1.0,
            theta_box: DEFAULT_THETA_BOX,
            optimizer: OptimizerConfig::default(),
            mc_samples: 20_000,
            r_exp: 2,
            output: None,
            record_timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        ExperimentConfig::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn spec(&self, experts: usize) -> FamilySpec {
        FamilySpec {
            act1: self.act1,
            act2: self.act2,
            hidden: self.hidden,
            ..FamilySpec::new(self.family, self.dim, self.rank, experts)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Usage(m));
        if self.n_grid.is_empty() || self.n_grid[0] == 0 {
            return bad("n_grid must be non-empty with sizes >= 1".into());
        }
        if self.n_grid.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("n_grid must be strictly increasing: {:?}", self.n_grid));
        }
        if self.trials == 0 || self.mc_samples == 0 {
            return bad("trials and mc_samples must be >= 1".into());
        }
        if self.fitted_experts < self.true_experts && self.optimizer.init != InitKind::Random {
            return bad(format!(
                "{:?} init needs fitted_experts >= true_experts",
                self.optimizer.init
            ));
        }
        if !(self.noise_std >= 0.0) || !(self.truth_scale > 0.0) || !(self.theta_box > 0.0) {
            return bad("noise_std must be >= 0, truth_scale and theta_box > 0".into());
        }
        if self.optimizer.steps == 0 || self.optimizer.restarts == 0 || !(self.optimizer.step > 0.0) {
            return bad("optimizer needs steps >= 1, restarts >= 1 and step > 0".into());
        }
        if self.r_exp == 0 {
            return bad("r_exp must be >= 1".into());
        }
        self.spec(self.true_experts).validate()?;
        self.spec(self.fitted_experts).validate()?;
        self.input_dist.validate()?;
        if let (Family::NonlinearShared, false) = (self.family, self.act1.has_derivatives() && self.act2.has_derivatives()) {
            return bad("non-linear family needs differentiable activations".into());
        }
        Ok(())
    }
}
