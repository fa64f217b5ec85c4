use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::datagen::SuiteProfile;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_ECE_BINS;
use crate::models::ArchConfig;
use crate::training::{Mode, TrainConfig};

/// Every knob of an experiment. Read from a flat TOML file; any key may be
/// omitted and takes the default below, unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    // generator
    pub num_envs: usize,
    pub n_per_env: usize,
    pub d_z: usize,
    pub d_c: usize,
    pub signal_strength: f64,
    pub train_spurious: f64,
    pub holdout_spurious: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub missing_rates: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub obs_noise: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_priors: Option<Vec<f64>>,
    /// Held-out environment; defaults to the last one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holdout: Option<usize>,
    /// Fraction of each training environment kept for validation and
    /// in-distribution evaluation.
    pub valid_frac: f64,

    // architecture
    pub embed_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub env_head_hidden: Vec<usize>,
    pub activation: Activation,

    // optimization
    pub lambda: f64,
    pub gamma: f64,
    pub ridge: f64,
    pub lr_theta: f64,
    pub lr_psi: f64,
    pub epochs: usize,
    pub batch_per_env: usize,
    pub psi_steps: usize,
    /// θ-gradient norm cap; 0 disables.
    pub grad_clip: f64,

    // experiment
    pub modes: Vec<Mode>,
    pub num_seeds: usize,
    pub master_seed: u64,
    pub lambda_grid: Vec<f64>,
    pub gamma_grid: Vec<f64>,
    pub ece_bins: usize,
    pub probe_train_frac: f64,
    /// Where runs are written; relative paths resolve against the working
    /// directory.
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let profile = SuiteProfile::default();
        let train = TrainConfig::default();
        ExperimentConfig {
            num_envs: 4,
            n_per_env: 2000,
            d_z: profile.physiologic_dim,
            d_c: profile.practice_dim,
            signal_strength: profile.signal_strength,
            train_spurious: profile.train_spurious,
            holdout_spurious: profile.holdout_spurious,
            missing_rates: None,
            obs_noise: None,
            class_priors: None,
            holdout: None,
            valid_frac: 0.2,
            embed_dim: 16,
            encoder_hidden: vec![64, 32],
            env_head_hidden: vec![32],
            activation: Activation::Relu,
            lambda: train.lambda,
            gamma: train.gamma,
            ridge: train.ridge,
            lr_theta: train.lr_theta,
            lr_psi: train.lr_psi,
            epochs: train.epochs,
            batch_per_env: train.batch_per_env,
            psi_steps: train.psi_steps_per_theta_step,
            grad_clip: train.grad_clip,
            modes: Mode::ALL.to_vec(),
            num_seeds: 10,
            master_seed: 0,
            lambda_grid: vec![0.1, 1.0, 10.0],
            gamma_grid: vec![0.1, 1.0, 10.0],
            ece_bins: DEFAULT_ECE_BINS,
            probe_train_frac: 0.5,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn holdout_env(&self) -> usize {
        self.holdout.unwrap_or(self.num_envs.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_envs < 2 {
            return fail(format!("num_envs must be >= 2, got {}", self.num_envs));
        }
        if self.holdout_env() >= self.num_envs {
            return fail(format!("holdout {} is not a valid environment (num_envs = {})", self.holdout_env(), self.num_envs));
        }
        if self.n_per_env < 10 {
            return fail(format!("n_per_env must be >= 10, got {}", self.n_per_env));
        }
        if !(self.valid_frac > 0.0 && self.valid_frac < 1.0) {
            return fail(format!("valid_frac must be in (0, 1), got {}", self.valid_frac));
        }
        if !(self.probe_train_frac > 0.0 && self.probe_train_frac < 1.0) {
            return fail(format!("probe_train_frac must be in (0, 1), got {}", self.probe_train_frac));
        }
        if self.modes.is_empty() {
            return fail("modes must not be empty".into());
        }
        if self.num_seeds == 0 {
            return fail("num_seeds must be >= 1".into());
        }
        if self.ece_bins == 0 {
            return fail("ece_bins must be >= 1".into());
        }
        if self.lambda_grid.iter().chain(&self.gamma_grid).any(|v| !(*v >= 0.0)) {
            return fail("sweep grid values must be >= 0".into());
        }
        self.train_config(Mode::Full, 0).validate()?;
        self.arch_config(0).validate()?;
        Ok(())
    }

    pub fn suite_profile(&self) -> SuiteProfile {
        SuiteProfile {
            physiologic_dim: self.d_z,
            practice_dim: self.d_c,
            signal_strength: self.signal_strength,
            train_spurious: self.train_spurious,
            holdout_spurious: self.holdout_spurious,
            holdout: Some(self.holdout_env()),
            missing_rates: self.missing_rates.clone(),
            obs_noise: self.obs_noise.clone(),
            class_priors: self.class_priors.clone(),
        }
    }

    pub fn arch_config(&self, init_seed: u64) -> ArchConfig {
        ArchConfig {
            input_dim: self.d_z + self.d_c,
            embed_dim: self.embed_dim,
            encoder_hidden: self.encoder_hidden.clone(),
            env_head_hidden: self.env_head_hidden.clone(),
            num_envs: self.num_envs - 1,
            activation: self.activation,
            init_seed,
        }
    }

    pub fn train_config(&self, mode: Mode, seed: u64) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            gamma: self.gamma,
            ridge: self.ridge,
            lr_theta: self.lr_theta,
            lr_psi: self.lr_psi,
            epochs: self.epochs,
            batch_per_env: self.batch_per_env,
            psi_steps_per_theta_step: self.psi_steps,
            grad_clip: self.grad_clip,
            seed,
            mode,
        }
    }
}
