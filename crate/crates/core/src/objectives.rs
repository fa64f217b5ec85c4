//! Training objective: supervised risk, adversarial environment loss and the
//! invariant-risk penalty over per-environment ridge probes.
//!
//! All three terms are built on one tape from the same embeddings. The
//! backward root is `L_sup + γ·R_inv + L_env`, where `L_env` reaches the
//! encoder through a gradient reversal of strength λ. One backward pass then
//! gives the encoder and outcome head the gradient of
//! `L_sup + γ·R_inv − λ·L_env`, and the environment head the gradient of
//! `+L_env`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::linalg;
use crate::models::{BoundModel, ModelParams};

/// A minibatch from one training environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvBatch {
    pub env: usize,
    pub x: Tensor,
    /// 0.0 / 1.0 outcome labels.
    pub y: Vec<f64>,
}

impl EnvBatch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sup: f64,
    pub l_env: f64,
    pub r_inv: f64,
    /// `l_sup + γ·r_inv − λ·l_env`, the value the encoder minimizes.
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(l_sup: f64, l_env: f64, r_inv: f64, lambda: f64, gamma: f64) -> Self {
        LossBreakdown {
            l_sup,
            l_env,
            r_inv,
            total: l_sup + gamma * r_inv - lambda * l_env,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_sup.is_finite() && self.l_env.is_finite() && self.r_inv.is_finite() && self.total.is_finite()
    }
}

/// Per-environment ridge probes, intercept last.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeWeights {
    pub weights: Vec<Vec<f64>>,
    pub ridge: f64,
}

/// Embeddings of every environment batch, stacked in batch order.
#[derive(Debug, Clone)]
pub struct PooledEmbedding {
    pub h: Var,
    pub per_env: Vec<Var>,
    pub env_ids: Vec<usize>,
}

pub fn embed_batches(tape: &mut Tape, model: &BoundModel, batches: &[EnvBatch]) -> Result<PooledEmbedding> {
    if batches.is_empty() {
        return Err(Error::invalid("need at least one environment batch"));
    }
    if let Some(b) = batches.iter().find(|b| b.is_empty()) {
        return Err(Error::invalid(format!("empty batch for environment {}", b.env)));
    }
    let parts: Vec<&Tensor> = batches.iter().map(|b| &b.x).collect();
    let x = tape.leaf(Tensor::vstack(&parts)?);
    let h = model.encode(tape, x)?;
    let mut per_env = Vec::with_capacity(batches.len());
    let mut env_ids = Vec::new();
    let mut start = 0;
    for b in batches {
        per_env.push(tape.slice_rows(h, start, start + b.len())?);
        start += b.len();
        env_ids.extend(std::iter::repeat_n(b.env, b.len()));
    }
    Ok(PooledEmbedding { h, per_env, env_ids })
}

/// `Σ_e mean_i bce(f(h_i), y_i)`: summed over environments, averaged within.
pub fn supervised_loss(tape: &mut Tape, model: &BoundModel, emb: &PooledEmbedding, batches: &[EnvBatch]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (&h, b) in emb.per_env.iter().zip(batches) {
        let logits = model.predict_outcome(tape, h)?;
        let l = tape.bce_with_logits(logits, &b.y)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::invalid("need at least one environment batch"))
}

/// Mean cross-entropy of the environment head on the pooled batch, with the
/// encoder reached through a gradient reversal of strength `lambda`.
pub fn env_adversarial_loss(tape: &mut Tape, model: &BoundModel, emb: &PooledEmbedding, lambda: f64) -> Result<Var> {
    let logits = model.classify_env(tape, emb.h, lambda)?;
    tape.softmax_ce(logits, &emb.env_ids)
}

/// Closed-form ridge probe on `[h | 1]` with ±1 targets.
pub fn fit_probe(tape: &mut Tape, h: Var, labels: &[f64], ridge: f64) -> Result<Var> {
    let targets: Vec<f64> = labels.iter().map(|&y| 2.0 * y - 1.0).collect();
    tape.ridge_solve(h, &targets, ridge)
}

/// Same fit on plain values.
pub fn fit_probe_values(h: &Tensor, labels: &[f64], ridge: f64) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone());
    let w = fit_probe(&mut tape, hv, labels, ridge)?;
    Ok(tape.value(w).data().to_vec())
}

/// Euclidean norm of `(AᵀA + εI)w − Aᵀỹ` for a fitted probe.
pub fn probe_residual(h: &Tensor, labels: &[f64], ridge: f64, w: &[f64]) -> f64 {
    let targets: Vec<f64> = labels.iter().map(|&y| 2.0 * y - 1.0).collect();
    let (gram, rhs) = linalg::ridge_system(h.data(), h.rows(), h.cols(), &targets, ridge);
    linalg::residual(&gram, h.cols() + 1, w, &rhs)
        .iter()
        .map(|r| r * r)
        .sum::<f64>()
        .sqrt()
}

/// `Σ_{e≠e'} ‖w_e − w_e'‖²` over ordered pairs.
pub fn invariant_risk_penalty(tape: &mut Tape, probes: &[Var]) -> Result<Var> {
    if probes.len() < 2 {
        return Err(Error::invalid(format!(
            "invariance penalty needs at least 2 environments, got {}",
            probes.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (i, &a) in probes.iter().enumerate() {
        for (j, &b) in probes.iter().enumerate() {
            if i == j {
                continue;
            }
            let diff = tape.sub(a, b)?;
            let sq = tape.sum_sq(diff)?;
            total = Some(match total {
                Some(t) => tape.add(t, sq)?,
                None => sq,
            });
        }
    }
    Ok(total.expect("at least one pair"))
}

/// Hyperparameters of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    pub lambda: f64,
    pub gamma: f64,
    pub ridge: f64,
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.gamma >= 0.0) || !self.lambda.is_finite() || !self.gamma.is_finite() {
            return Err(Error::Config(format!(
                "lambda and gamma must be finite and >= 0 (lambda = {}, gamma = {})",
                self.lambda, self.gamma
            )));
        }
        if !(self.ridge > 0.0) || !self.ridge.is_finite() {
            return Err(Error::Config(format!("ridge must be > 0, got {}", self.ridge)));
        }
        Ok(())
    }
}

/// One forward pass of the full objective, ready for `tape.backward(root)`.
pub struct ObjectivePass {
    pub tape: Tape,
    pub model: BoundModel,
    pub root: Var,
    pub breakdown: LossBreakdown,
    pub probes: ProbeWeights,
}

pub fn total_objective(params: &ModelParams, batches: &[EnvBatch], weights: ObjectiveWeights) -> Result<ObjectivePass> {
    weights.validate()?;
    let mut tape = Tape::new();
    let model = params.bind(&mut tape);
    let emb = embed_batches(&mut tape, &model, batches)?;
    let l_sup = supervised_loss(&mut tape, &model, &emb, batches)?;
    let l_env = env_adversarial_loss(&mut tape, &model, &emb, weights.lambda)?;

    let (r_inv, probe_vars) = if batches.len() >= 2 {
        let probes = emb
            .per_env
            .iter()
            .zip(batches)
            .map(|(&h, b)| fit_probe(&mut tape, h, &b.y, weights.ridge))
            .collect::<Result<Vec<_>>>()?;
        (Some(invariant_risk_penalty(&mut tape, &probes)?), probes)
    } else {
        (None, Vec::new())
    };

    let mut root = tape.add(l_sup, l_env)?;
    if let Some(r) = r_inv {
        let scaled = tape.scale(r, weights.gamma)?;
        root = tape.add(root, scaled)?;
    }

    let value = |t: &Tape, v: Var| t.value(v).item();
    let breakdown = LossBreakdown::compose(
        value(&tape, l_sup),
        value(&tape, l_env),
        r_inv.map_or(0.0, |r| value(&tape, r)),
        weights.lambda,
        weights.gamma,
    );
    if !breakdown.is_finite() {
        return Err(Error::NonFinite(format!("objective {breakdown:?}")));
    }
    let probes = ProbeWeights {
        weights: probe_vars.iter().map(|&v| tape.value(v).data().to_vec()).collect(),
        ridge: weights.ridge,
    };
    Ok(ObjectivePass {
        tape,
        model,
        root,
        breakdown,
        probes,
    })
}
