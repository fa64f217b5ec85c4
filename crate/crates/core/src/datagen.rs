//! Synthetic multi-environment data.
//!
//! A latent physiologic state `z ~ N(0, I)` determines the outcome through a
//! logistic mechanism shared by every environment. Practice features `c` are
//! generated from the outcome with an environment-specific correlation, then
//! partially zeroed (selective measurement). The observation is
//! `x = [z + noise | c]`.

use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tensor};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Coefficients of `P(y = 1 | z) = sigmoid(coef·z + intercept)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeMechanism {
    pub coef: Vec<f64>,
    pub intercept: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub env_id: usize,
    /// Correlation of each practice feature with the ±1-coded outcome.
    pub spurious_strength: f64,
    /// Probability that a practice feature is zeroed.
    pub missing_rate: f64,
    /// Standard deviation of the noise added to the physiologic block.
    pub obs_noise: f64,
    pub class_prior: f64,
    pub practice_dim: usize,
    pub mechanism: OutcomeMechanism,
    pub seed: u64,
}

impl EnvSpec {
    pub fn physiologic_dim(&self) -> usize {
        self.mechanism.coef.len()
    }

    pub fn input_dim(&self) -> usize {
        self.physiologic_dim() + self.practice_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::invalid(format!("env {}: {what} out of range: {v}", self.env_id)));
        if !(-1.0..=1.0).contains(&self.spurious_strength) {
            return bad("spurious strength", self.spurious_strength);
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad("missing rate", self.missing_rate);
        }
        if !(self.obs_noise > 0.0) || !self.obs_noise.is_finite() {
            return bad("observation noise", self.obs_noise);
        }
        if !(self.class_prior > 0.0 && self.class_prior < 1.0) {
            return bad("class prior", self.class_prior);
        }
        if self.mechanism.coef.is_empty() {
            return Err(Error::invalid("outcome mechanism needs at least one coefficient"));
        }
        Ok(())
    }
}

/// Knobs for building an environment suite. Per-environment lists, when
/// given, must have one entry per environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteProfile {
    pub physiologic_dim: usize,
    pub practice_dim: usize,
    /// Norm of the shared outcome coefficient vector.
    pub signal_strength: f64,
    pub train_spurious: f64,
    pub holdout_spurious: f64,
    /// Environment that receives `holdout_spurious`; defaults to the last.
    pub holdout: Option<usize>,
    pub missing_rates: Option<Vec<f64>>,
    pub obs_noise: Option<Vec<f64>>,
    pub class_priors: Option<Vec<f64>>,
}

impl Default for SuiteProfile {
    fn default() -> Self {
        SuiteProfile {
            physiologic_dim: 8,
            practice_dim: 8,
            signal_strength: 10.0,
            train_spurious: 0.9,
            holdout_spurious: -0.9,
            holdout: None,
            missing_rates: None,
            obs_noise: None,
            class_priors: None,
        }
    }
}

impl SuiteProfile {
    /// Default (missing rate, noise, prior) for training environment number
    /// `rank` out of `count`, or for the holdout when `rank` is `None`.
    fn default_env_params(rank: Option<usize>, count: usize) -> (f64, f64, f64) {
        match rank {
            None => (0.6, 0.15, 0.5),
            Some(r) => {
                let frac = if count > 1 { r as f64 / (count - 1) as f64 } else { 0.0 };
                (0.9 * frac, 0.1 + 0.1 * frac, 0.3 + 0.4 * frac)
            }
        }
    }
}

/// Build `num_envs` environments sharing one outcome mechanism.
pub fn env_suite(profile: &SuiteProfile, num_envs: usize, master_seed: u64) -> Result<Vec<EnvSpec>> {
    if num_envs < 2 {
        return Err(Error::invalid(format!(
            "an environment suite needs at least 2 environments, got {num_envs}"
        )));
    }
    if profile.physiologic_dim == 0 {
        return Err(Error::invalid("physiologic dimension must be >= 1"));
    }
    let holdout = profile.holdout.unwrap_or(num_envs - 1);
    if holdout >= num_envs {
        return Err(Error::invalid(format!("holdout {holdout} not in 0..{num_envs}")));
    }
    for (name, list) in [
        ("missing_rates", &profile.missing_rates),
        ("obs_noise", &profile.obs_noise),
        ("class_priors", &profile.class_priors),
    ] {
        if let Some(l) = list {
            if l.len() != num_envs {
                return Err(Error::invalid(format!(
                    "{name} has {} entries for {num_envs} environments",
                    l.len()
                )));
            }
        }
    }

    let mut rng = rng::seeded(rng::derive_seed(master_seed, tag::SUITE));
    let mut coef: Vec<f64> = (0..profile.physiologic_dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = coef.iter().map(|c| c * c).sum::<f64>().sqrt();
    coef.iter_mut().for_each(|c| *c *= profile.signal_strength / norm);
    let mechanism = OutcomeMechanism { coef, intercept: 0.0 };

    let env_seed_base = rng::derive_seed(master_seed, tag::ENV);
    let mut specs = Vec::with_capacity(num_envs);
    let mut train_rank = 0;
    for env_id in 0..num_envs {
        let rank = if env_id == holdout {
            None
        } else {
            train_rank += 1;
            Some(train_rank - 1)
        };
        let (m, s, p) = SuiteProfile::default_env_params(rank, num_envs - 1);
        let pick = |list: &Option<Vec<f64>>, dflt: f64| list.as_ref().map_or(dflt, |l| l[env_id]);
        let spec = EnvSpec {
            env_id,
            spurious_strength: if rank.is_some() {
                profile.train_spurious
            } else {
                profile.holdout_spurious
            },
            missing_rate: pick(&profile.missing_rates, m),
            obs_noise: pick(&profile.obs_noise, s),
            class_prior: pick(&profile.class_priors, p),
            practice_dim: profile.practice_dim,
            mechanism: mechanism.clone(),
            seed: rng::derive_seed(env_seed_base, env_id as u64),
        };
        spec.validate()?;
        specs.push(spec);
    }
    Ok(specs)
}

/// Default suite: every environment but the last has practice features
/// positively correlated with the outcome; the last one is anti-correlated.
pub fn default_env_suite(num_envs: usize, master_seed: u64) -> Result<Vec<EnvSpec>> {
    env_suite(&SuiteProfile::default(), num_envs, master_seed)
}

/// Observations of one environment. `y` holds 0.0 / 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<f64>,
    pub env: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            env: idx.iter().map(|&i| self.env[i]).collect(),
        }
    }

    /// Seeded shuffle then split into `(first, second)` with
    /// `round(len·first_frac)` rows in the first part.
    pub fn split(&self, first_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(first_frac > 0.0 && first_frac < 1.0) {
            return Err(Error::invalid(format!("split fraction must be in (0, 1), got {first_frac}")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::seeded(seed));
        let cut = ((self.len() as f64) * first_frac).round() as usize;
        let cut = cut.clamp(1, self.len().saturating_sub(1).max(1));
        Ok((self.subset(&idx[..cut]), self.subset(&idx[cut..])))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let p = self.input_dim();
        let header: Vec<String> = (0..p).map(|j| format!("x_{j}")).chain(["y".into(), "env".into()]).collect();
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut line = String::new();
            for v in self.x.row(i) {
                line.push_str(&v.to_string());
                line.push(',');
            }
            line.push_str(&format!("{},{}", self.y[i] as u8, self.env[i]));
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
    }
}

/// Draw `n` observations from one environment. A pure function of
/// `(spec, n)`.
pub fn generate(spec: &EnvSpec, n: usize) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("cannot generate an empty dataset"));
    }
    let dz = spec.physiologic_dim();
    let dc = spec.practice_dim;
    let p = dz + dc;
    let mut rng = rng::seeded(spec.seed);

    // Class quotas; rejection keeps p(z | y) intact and fixes the prior.
    let want_pos = ((n as f64) * spec.class_prior).round() as usize;
    let mut quota = [n - want_pos, want_pos];
    let max_draws = 1000 * n + 10_000;
    let mut draws = 0;

    let rho = spec.spurious_strength;
    let resid = (1.0 - rho * rho).max(0.0).sqrt();
    let mut x = Vec::with_capacity(n * p);
    let mut y = Vec::with_capacity(n);
    let mut z = vec![0.0; dz];
    while y.len() < n {
        draws += 1;
        if draws > max_draws {
            return Err(Error::invalid(format!(
                "env {}: class prior {} unreachable by rejection",
                spec.env_id, spec.class_prior
            )));
        }
        z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        let logit: f64 = z.iter().zip(&spec.mechanism.coef).map(|(a, b)| a * b).sum::<f64>() + spec.mechanism.intercept;
        let label = usize::from(rng.random::<f64>() < sigmoid(logit));
        if quota[label] == 0 {
            continue;
        }
        quota[label] -= 1;
        let sign = if label == 1 { 1.0 } else { -1.0 };
        for &zj in &z {
            let noise: f64 = rng.sample(StandardNormal);
            x.push(zj + spec.obs_noise * noise);
        }
        for _ in 0..dc {
            let v: f64 = rng.sample(StandardNormal);
            let c = rho * sign + resid * v;
            let missing = rng.random::<f64>() < spec.missing_rate;
            x.push(if missing { 0.0 } else { c });
        }
        y.push(label as f64);
    }
    Ok(Dataset {
        x: Tensor::matrix(n, p, x)?,
        y,
        env: vec![spec.env_id; n],
    })
}

/// Leave-one-environment-out split: one dataset per training environment, in
/// suite order, and the held-out environment's dataset.
pub fn loeo_split(suite: &[EnvSpec], holdout: usize, n_per_env: usize) -> Result<(Vec<Dataset>, Dataset)> {
    if !suite.iter().any(|s| s.env_id == holdout) {
        return Err(Error::invalid(format!("holdout environment {holdout} is not in the suite")));
    }
    let mut train = Vec::with_capacity(suite.len() - 1);
    let mut test = None;
    for spec in suite {
        let ds = generate(spec, n_per_env)?;
        if spec.env_id == holdout {
            test = Some(ds);
        } else {
            train.push(ds);
        }
    }
    Ok((train, test.expect("holdout present")))
}
