//! Alternating minimax optimization.
//!
//! Every θ step (encoder + outcome head, full objective) is preceded by a
//! fixed number of ψ steps (environment head, cross-entropy on detached
//! embeddings). Both use SGD with fixed learning rates; the θ step length is
//! capped by `grad_clip`.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::metrics;
use crate::models::{ArchConfig, Group, GroupGrads, ModelParams};
use crate::objectives::{self, EnvBatch, LossBreakdown, ObjectiveWeights};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Erm,
    AdversarialOnly,
    IrmOnly,
    Full,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Erm, Mode::AdversarialOnly, Mode::IrmOnly, Mode::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Erm => "erm",
            Mode::AdversarialOnly => "adversarial_only",
            Mode::IrmOnly => "irm_only",
            Mode::Full => "full",
        }
    }

    pub fn uses_adversary(self) -> bool {
        matches!(self, Mode::AdversarialOnly | Mode::Full)
    }

    pub fn uses_penalty(self) -> bool {
        matches!(self, Mode::IrmOnly | Mode::Full)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?} (expected erm, adversarial_only, irm_only or full)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub ridge: f64,
    pub lr_theta: f64,
    pub lr_psi: f64,
    pub epochs: usize,
    pub batch_per_env: usize,
    pub psi_steps_per_theta_step: usize,
    /// Largest θ-gradient norm applied per step; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            gamma: 1.0,
            ridge: 0.1,
            lr_theta: 0.05,
            lr_psi: 0.1,
            epochs: 30,
            batch_per_env: 32,
            psi_steps_per_theta_step: 3,
            grad_clip: 1.0,
            seed: 0,
            mode: Mode::Full,
        }
    }
}

impl TrainConfig {
    /// λ after the mode mask: zero unless the mode uses the adversary.
    pub fn effective_lambda(&self) -> f64 {
        if self.mode.uses_adversary() {
            self.lambda
        } else {
            0.0
        }
    }

    /// γ after the mode mask: zero unless the mode uses the penalty.
    pub fn effective_gamma(&self) -> f64 {
        if self.mode.uses_penalty() {
            self.gamma
        } else {
            0.0
        }
    }

    pub fn objective_weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            lambda: self.effective_lambda(),
            gamma: self.effective_gamma(),
            ridge: self.ridge,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ObjectiveWeights {
            lambda: self.lambda,
            gamma: self.gamma,
            ridge: self.ridge,
        }
        .validate()?;
        if !(self.lr_theta >= 0.0) || !(self.lr_psi >= 0.0) {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        if self.batch_per_env == 0 {
            return Err(Error::Config("batch_per_env must be >= 1".into()));
        }
        if !(self.grad_clip >= 0.0) || !self.grad_clip.is_finite() {
            return Err(Error::Config(format!("grad_clip must be finite and >= 0, got {}", self.grad_clip)));
        }
        if self.psi_steps_per_theta_step == 0 {
            return Err(Error::Config("psi_steps_per_theta_step must be >= 1".into()));
        }
        Ok(())
    }
}

/// One training environment: rows used for fitting and rows held back for
/// validation and in-distribution evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSplit {
    pub fit: Dataset,
    pub valid: Dataset,
}

/// Training environments in adversary-class order: the environment at
/// position `k` is class `k` for the environment head.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub envs: Vec<EnvSplit>,
}

impl TrainData {
    pub fn from_datasets(train: Vec<Dataset>, valid_frac: f64, seed: u64) -> Result<TrainData> {
        if train.is_empty() {
            return Err(Error::invalid("no training environments"));
        }
        let envs = train
            .into_iter()
            .enumerate()
            .map(|(k, ds)| {
                let (valid, fit) = ds.split(valid_frac, rng::derive_seed(rng::derive_seed(seed, tag::SPLIT), k as u64))?;
                Ok(EnvSplit { fit, valid })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainData { envs })
    }

    pub fn num_envs(&self) -> usize {
        self.envs.len()
    }

    pub fn input_dim(&self) -> usize {
        self.envs[0].fit.input_dim()
    }

    /// Validation rows of every environment stacked, with class indices.
    pub fn pooled_valid(&self) -> Result<(Tensor, Vec<usize>)> {
        let parts: Vec<&Tensor> = self.envs.iter().map(|e| &e.valid.x).collect();
        let ids = self
            .envs
            .iter()
            .enumerate()
            .flat_map(|(k, e)| std::iter::repeat_n(k, e.valid.len()))
            .collect();
        Ok((Tensor::vstack(&parts)?, ids))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub val_auroc: f64,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,l_sup,l_env,r_inv,total,val_auroc";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.epochs {
            let l = r.losses;
            let _ = writeln!(s, "{},{},{},{},{},{}", r.epoch, l.l_sup, l.l_env, l.r_inv, l.total, r.val_auroc);
        }
        s
    }
}

/// One SGD step on the environment head against `L_env`, with the
/// embeddings detached from the encoder. Returns `L_env` before the step.
pub fn step_psi(params: &mut ModelParams, batches: &[EnvBatch], config: &TrainConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let model = params.bind(&mut tape);
    let emb = objectives::embed_batches(&mut tape, &model, batches)?;
    let h = tape.value(emb.h).clone();
    psi_step_on_embeddings(params, &h, &emb.env_ids, config.lr_psi)
}

fn psi_step_on_embeddings(params: &mut ModelParams, h: &Tensor, env_ids: &[usize], lr: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let model = params.bind(&mut tape);
    let hv = tape.leaf(h.clone());
    let logits = model.classify_env_detached(&mut tape, hv)?;
    let loss = tape.softmax_ce(logits, env_ids)?;
    tape.backward(loss)?;
    let grads = GroupGrads::collect(&tape, &model, Group::Psi);
    if !grads.is_finite() {
        return Err(Error::NonFinite("environment-head gradient".into()));
    }
    params.sgd_step(Group::Psi, &grads, lr);
    Ok(tape.value(loss).item())
}

/// One SGD step on the encoder and outcome head against the full objective.
/// The environment head is left untouched.
pub fn step_theta(params: &mut ModelParams, batches: &[EnvBatch], config: &TrainConfig) -> Result<LossBreakdown> {
    let mut pass = objectives::total_objective(params, batches, config.objective_weights())?;
    pass.tape.backward(pass.root)?;
    let grads = GroupGrads::collect(&pass.tape, &pass.model, Group::Theta);
    if !grads.is_finite() {
        return Err(Error::NonFinite(format!(
            "encoder gradient (losses {:?})",
            pass.breakdown
        )));
    }
    let norm = grads.norm();
    let lr = if config.grad_clip > 0.0 && norm > config.grad_clip {
        config.lr_theta * config.grad_clip / norm
    } else {
        config.lr_theta
    };
    params.sgd_step(Group::Theta, &grads, lr);
    Ok(pass.breakdown)
}

/// Mean per-environment AUROC on the validation rows.
pub fn validation_auroc(params: &ModelParams, data: &TrainData) -> Result<f64> {
    let mut total = 0.0;
    for e in &data.envs {
        let probs = params.predict_proba(&e.valid.x)?;
        total += metrics::auroc(&probs, &e.valid.y)?;
    }
    Ok(total / data.num_envs() as f64)
}

/// Full training run. A pure function of `(arch, data, config)` apart from
/// the wall-clock field of the history.
pub fn train(arch: &ArchConfig, data: &TrainData, config: &TrainConfig) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    if data.num_envs() < 2 && config.mode != Mode::Erm {
        return Err(Error::Config(format!(
            "mode {} needs at least 2 training environments, got {}",
            config.mode,
            data.num_envs()
        )));
    }
    if arch.num_envs != data.num_envs() || arch.input_dim != data.input_dim() {
        return Err(Error::Config(format!(
            "architecture expects {} inputs / {} environments, data has {} / {}",
            arch.input_dim,
            arch.num_envs,
            data.input_dim(),
            data.num_envs()
        )));
    }
    let mut params = ModelParams::init(arch)?;
    let mut history = TrainHistory::default();
    if config.epochs == 0 {
        return Ok((params, history));
    }

    let min_fit = data.envs.iter().map(|e| e.fit.len()).min().unwrap_or(0);
    if min_fit == 0 {
        return Err(Error::invalid("a training environment has no fitting rows"));
    }
    let batch = config.batch_per_env.min(min_fit);
    let steps = min_fit / batch;
    let mut shuffler = rng::seeded(rng::derive_seed(config.seed, tag::SHUFFLE));
    let mut order: Vec<Vec<usize>> = data.envs.iter().map(|e| (0..e.fit.len()).collect()).collect();
    let started = Instant::now();

    for epoch in 0..config.epochs {
        for o in &mut order {
            o.shuffle(&mut shuffler);
        }
        let mut sums = LossBreakdown::default();
        for step in 0..steps {
            let batches: Vec<EnvBatch> = data
                .envs
                .iter()
                .zip(&order)
                .enumerate()
                .map(|(k, (e, o))| {
                    let idx = &o[step * batch..(step + 1) * batch];
                    let sub = e.fit.subset(idx);
                    EnvBatch { env: k, x: sub.x, y: sub.y }
                })
                .collect();

            if config.psi_steps_per_theta_step > 0 {
                let mut tape = Tape::new();
                let model = params.bind(&mut tape);
                let emb = objectives::embed_batches(&mut tape, &model, &batches)?;
                let h = tape.value(emb.h).clone();
                for _ in 0..config.psi_steps_per_theta_step {
                    psi_step_on_embeddings(&mut params, &h, &emb.env_ids, config.lr_psi)?;
                }
            }
            let losses = step_theta(&mut params, &batches, config).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("epoch {epoch}, step {step}: {what}")),
                other => other,
            })?;
            sums.l_sup += losses.l_sup;
            sums.l_env += losses.l_env;
            sums.r_inv += losses.r_inv;
            sums.total += losses.total;
        }
        let k = steps as f64;
        let losses = LossBreakdown {
            l_sup: sums.l_sup / k,
            l_env: sums.l_env / k,
            r_inv: sums.r_inv / k,
            total: sums.total / k,
        };
        history.epochs.push(EpochRecord {
            epoch,
            losses,
            val_auroc: validation_auroc(&params, data)?,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        });
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{default_env_suite, loeo_split};
    use std::collections::hash_map::DefaultHasher;
    use std::hash::{Hash, Hasher};

    fn group_hash(p: &ModelParams, g: Group) -> u64 {
        let mut h = DefaultHasher::new();
        for l in p.group(g) {
            for v in l.weight.data().iter().chain(l.bias.data()) {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    fn small_setup(n_per_env: usize) -> (ArchConfig, TrainData) {
        let suite = default_env_suite(4, 5).unwrap();
        let (train, _) = loeo_split(&suite, 3, n_per_env).unwrap();
        let data = TrainData::from_datasets(train, 0.25, 5).unwrap();
        let arch = ArchConfig {
            encoder_hidden: vec![16, 8],
            embed_dim: 6,
            env_head_hidden: vec![8],
            init_seed: 1,
            ..ArchConfig::new(data.input_dim(), data.num_envs())
        };
        (arch, data)
    }

    fn first_batches(data: &TrainData, n: usize) -> Vec<EnvBatch> {
        data.envs
            .iter()
            .enumerate()
            .map(|(k, e)| {
                let idx: Vec<usize> = (0..n).collect();
                let s = e.fit.subset(&idx);
                EnvBatch { env: k, x: s.x, y: s.y }
            })
            .collect()
    }

    #[test]
    fn mode_masks() {
        let base = TrainConfig {
            lambda: 2.0,
            gamma: 3.0,
            ..TrainConfig::default()
        };
        let w = |mode| TrainConfig { mode, ..base.clone() }.objective_weights();
        assert_eq!((w(Mode::Erm).lambda, w(Mode::Erm).gamma), (0.0, 0.0));
        assert_eq!((w(Mode::AdversarialOnly).lambda, w(Mode::AdversarialOnly).gamma), (2.0, 0.0));
        assert_eq!((w(Mode::IrmOnly).lambda, w(Mode::IrmOnly).gamma), (0.0, 3.0));
        assert_eq!((w(Mode::Full).lambda, w(Mode::Full).gamma), (2.0, 3.0));
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("ermm".parse::<Mode>().is_err());
    }

    #[test]
    fn psi_step_leaves_theta_alone() {
        let (arch, data) = small_setup(80);
        let mut p = ModelParams::init(&arch).unwrap();
        let b = first_batches(&data, 16);
        let before = group_hash(&p, Group::Theta);
        let psi_before = group_hash(&p, Group::Psi);
        step_psi(&mut p, &b, &TrainConfig::default()).unwrap();
        assert_eq!(before, group_hash(&p, Group::Theta));
        assert_ne!(psi_before, group_hash(&p, Group::Psi));

        let frozen = TrainConfig {
            lr_psi: 0.0,
            ..TrainConfig::default()
        };
        let psi_before = group_hash(&p, Group::Psi);
        step_psi(&mut p, &b, &frozen).unwrap();
        assert_eq!(psi_before, group_hash(&p, Group::Psi));
    }

    #[test]
    fn theta_step_leaves_psi_alone() {
        let (arch, data) = small_setup(80);
        let mut p = ModelParams::init(&arch).unwrap();
        let b = first_batches(&data, 16);
        let before = group_hash(&p, Group::Psi);
        let theta_before = group_hash(&p, Group::Theta);
        step_theta(&mut p, &b, &TrainConfig::default()).unwrap();
        assert_eq!(before, group_hash(&p, Group::Psi));
        assert_ne!(theta_before, group_hash(&p, Group::Theta));
    }

    #[test]
    fn erm_step_equals_plain_supervised_step() {
        let (arch, data) = small_setup(80);
        let b = first_batches(&data, 16);
        let config = TrainConfig {
            mode: Mode::Erm,
            grad_clip: 0.0,
            ..TrainConfig::default()
        };
        let mut a = ModelParams::init(&arch).unwrap();
        step_theta(&mut a, &b, &config).unwrap();

        let mut plain = ModelParams::init(&arch).unwrap();
        let mut tape = Tape::new();
        let m = plain.bind(&mut tape);
        let emb = objectives::embed_batches(&mut tape, &m, &b).unwrap();
        let l = objectives::supervised_loss(&mut tape, &m, &emb, &b).unwrap();
        tape.backward(l).unwrap();
        let g = GroupGrads::collect(&tape, &m, Group::Theta);
        plain.sgd_step(Group::Theta, &g, config.lr_theta);
        assert_eq!(group_hash(&a, Group::Theta), group_hash(&plain, Group::Theta));
    }

    #[test]
    fn clipped_step_has_bounded_length() {
        let (arch, data) = small_setup(80);
        let b = first_batches(&data, 16);
        let clip = 1e-3;
        let config = TrainConfig {
            grad_clip: clip,
            ..TrainConfig::default()
        };
        let before = ModelParams::init(&arch).unwrap();
        let mut after = before.clone();
        step_theta(&mut after, &b, &config).unwrap();
        let moved: f64 = before
            .named_tensors()
            .iter()
            .zip(after.named_tensors())
            .flat_map(|((_, x), (_, y))| x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).collect::<Vec<_>>())
            .sum::<f64>()
            .sqrt();
        assert!(moved > 0.0);
        assert!(moved <= config.lr_theta * clip * (1.0 + 1e-9), "{moved}");
    }

    #[test]
    fn theta_step_aborts_on_nan() {
        let (arch, data) = small_setup(80);
        let mut p = ModelParams::init(&arch).unwrap();
        p.encoder[0].weight.data_mut()[0] = f64::NAN;
        let b = first_batches(&data, 16);
        assert!(matches!(step_theta(&mut p, &b, &TrainConfig::default()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn psi_loss_trends_down_on_fixed_embeddings() {
        let (arch, data) = small_setup(120);
        let mut decreasing = 0;
        let trials = 10;
        for t in 0..trials {
            let mut a = arch.clone();
            a.init_seed = 100 + t;
            let mut p = ModelParams::init(&a).unwrap();
            let b = first_batches(&data, 32);
            let config = TrainConfig::default();
            let first = step_psi(&mut p, &b, &config).unwrap();
            let mut last = first;
            for _ in 0..49 {
                last = step_psi(&mut p, &b, &config).unwrap();
            }
            if last <= first {
                decreasing += 1;
            }
        }
        assert!(decreasing * 10 >= trials * 8, "{decreasing}/{trials}");
    }

    #[test]
    fn zero_epochs_returns_init() {
        let (arch, data) = small_setup(60);
        let config = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (p, h) = train(&arch, &data, &config).unwrap();
        assert_eq!(p, ModelParams::init(&arch).unwrap());
        assert!(h.epochs.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let (arch, data) = small_setup(60);
        let config = TrainConfig {
            epochs: 2,
            batch_per_env: 16,
            ..TrainConfig::default()
        };
        let (p1, h1) = train(&arch, &data, &config).unwrap();
        let (p2, h2) = train(&arch, &data, &config).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(h1.epochs.len(), 2);
        for (a, b) in h1.epochs.iter().zip(&h2.epochs) {
            assert_eq!((a.epoch, a.losses, a.val_auroc), (b.epoch, b.losses, b.val_auroc));
        }
    }

    #[test]
    fn single_env_only_for_erm() {
        let (_, mut data) = small_setup(60);
        data.envs.truncate(1);
        let arch = ArchConfig {
            encoder_hidden: vec![8],
            embed_dim: 4,
            env_head_hidden: vec![4],
            ..ArchConfig::new(data.input_dim(), 1)
        };
        let config = TrainConfig {
            epochs: 1,
            batch_per_env: 16,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&arch, &data, &config), Err(Error::Config(_))));
        let erm = TrainConfig { mode: Mode::Erm, ..config };
        assert!(train(&arch, &data, &erm).is_ok());
    }

    #[test]
    fn history_csv_layout() {
        let (arch, data) = small_setup(60);
        let config = TrainConfig {
            epochs: 1,
            batch_per_env: 16,
            ..TrainConfig::default()
        };
        let (_, h) = train(&arch, &data, &config).unwrap();
        let csv = h.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,l_sup,l_env,r_inv,total,val_auroc");
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].split(',').count(), 6);
    }
}
