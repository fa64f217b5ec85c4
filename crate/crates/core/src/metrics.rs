//! Discrimination, calibration and environment-leakage metrics.

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_ECE_BINS: usize = 10;

fn check_lengths(a: usize, b: usize, op: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            op,
            left: vec![a],
            right: vec![b],
        });
    }
    Ok(())
}

fn check_labels(labels: &[f64]) -> Result<()> {
    match labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        Some(bad) => Err(Error::invalid(format!("binary label expected, got {bad}"))),
        None => Ok(()),
    }
}

/// Indices sorted by descending score, grouped by exactly equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Mann–Whitney AUROC with ties counted as one half.
pub fn auroc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(scores.len(), labels.len(), "auroc")?;
    check_labels(labels)?;
    let pos = labels.iter().filter(|&&y| y == 1.0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("AUROC is undefined when only one class is present"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("AUROC scores must be finite"));
    }
    // Walk from the lowest score upward; each positive beats every negative
    // seen so far and ties half of the negatives in its own group.
    let mut groups = tie_groups(scores);
    groups.reverse();
    let mut neg_below = 0usize;
    let mut concordant = 0.0;
    for g in groups {
        let gp = g.iter().filter(|&&i| labels[i] == 1.0).count();
        let gn = g.len() - gp;
        concordant += gp as f64 * (neg_below as f64 + 0.5 * gn as f64);
        neg_below += gn;
    }
    Ok(concordant / (pos as f64 * neg as f64))
}

/// Average precision: `Σ_k (R_k − R_{k−1})·P_k` over distinct score
/// thresholds, with tied scores entering together.
pub fn auprc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(scores.len(), labels.len(), "auprc")?;
    check_labels(labels)?;
    let pos = labels.iter().filter(|&&y| y == 1.0).count();
    if pos == 0 {
        return Err(Error::invalid("AUPRC is undefined without positives"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("AUPRC scores must be finite"));
    }
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for g in tie_groups(scores) {
        tp += g.iter().filter(|&&i| labels[i] == 1.0).count();
        seen += g.len();
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

fn check_probs(probs: &[f64]) -> Result<()> {
    match probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        Some(bad) => Err(Error::invalid(format!("probability out of [0, 1]: {bad}"))),
        None => Ok(()),
    }
}

pub fn brier(probs: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(probs.len(), labels.len(), "brier")?;
    check_labels(labels)?;
    check_probs(probs)?;
    if probs.is_empty() {
        return Err(Error::invalid("Brier score of an empty set"));
    }
    Ok(probs.iter().zip(labels).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / probs.len() as f64)
}

/// Expected calibration error over `bins` equal-width bins. Bin `b` covers
/// `[b/B, (b+1)/B)`; the last bin is closed at 1.
pub fn ece(probs: &[f64], labels: &[f64], bins: usize) -> Result<f64> {
    check_lengths(probs.len(), labels.len(), "ece")?;
    check_labels(labels)?;
    check_probs(probs)?;
    if bins == 0 {
        return Err(Error::invalid("ECE needs at least one bin"));
    }
    if probs.is_empty() {
        return Err(Error::invalid("ECE of an empty set"));
    }
    let mut conf = vec![0.0; bins];
    let mut acc = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for (&p, &y) in probs.iter().zip(labels) {
        let b = ((p * bins as f64).floor() as usize).min(bins - 1);
        conf[b] += p;
        acc[b] += y;
        count[b] += 1;
    }
    let n = probs.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            (c / n) * (conf[b] / c - acc[b] / c).abs()
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitLabel {
    InDistribution,
    HeldOut,
}

impl SplitLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitLabel::InDistribution => "in_distribution",
            SplitLabel::HeldOut => "held_out",
        }
    }
}

impl fmt::Display for SplitLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auroc: f64,
    pub auprc: f64,
    pub brier: f64,
    pub ece: f64,
    pub n: usize,
    pub split: SplitLabel,
}

impl MetricsReport {
    pub fn evaluate(probs: &[f64], labels: &[f64], bins: usize, split: SplitLabel) -> Result<Self> {
        Ok(MetricsReport {
            auroc: auroc(probs, labels)?,
            auprc: auprc(probs, labels)?,
            brier: brier(probs, labels)?,
            ece: ece(probs, labels, bins)?,
            n: probs.len(),
            split,
        })
    }

    /// Unweighted mean of per-environment reports.
    pub fn mean(reports: &[MetricsReport], split: SplitLabel) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::invalid("cannot average zero reports"));
        }
        let k = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
        Ok(MetricsReport {
            auroc: avg(|r| r.auroc),
            auprc: avg(|r| r.auprc),
            brier: avg(|r| r.brier),
            ece: avg(|r| r.ece),
            n: reports.iter().map(|r| r.n).sum(),
            split,
        })
    }

    pub fn is_valid(&self) -> bool {
        [self.auroc, self.auprc, self.brier, self.ece]
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub env_accuracy: f64,
    pub chance_level: f64,
    pub probe_seed: u64,
}

const PROBE_MAX_ITERS: usize = 5000;
const PROBE_GRAD_TOL: f64 = 1e-5;

/// Multinomial linear probe predicting environment identity from frozen
/// embeddings.
///
/// Rows are split by `seed` into probe-train (`train_frac`) and probe-test.
/// Features are standardized with probe-train statistics, then softmax
/// regression is fit by full-batch gradient descent until the gradient norm
/// drops to 1e-5 or 5000 iterations pass. Returns held-out accuracy.
pub fn leakage_probe(embeddings: &Tensor, env_ids: &[usize], train_frac: f64, seed: u64) -> Result<LeakageReport> {
    let n = embeddings.rows();
    check_lengths(n, env_ids.len(), "leakage_probe")?;
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::invalid(format!("train fraction must be in (0, 1), got {train_frac}")));
    }
    let mut classes: Vec<usize> = env_ids.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::invalid("leakage probe needs at least 2 environments"));
    }
    let k = classes.len();
    let target: Vec<usize> = env_ids
        .iter()
        .map(|e| classes.binary_search(e).expect("present"))
        .collect();

    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded(rng::derive_seed(seed, rng::tag::PROBE)));
    let cut = ((n as f64 * train_frac).round() as usize).clamp(1, n - 1);
    let (train_idx, test_idx) = idx.split_at(cut);

    let d = embeddings.cols();
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &i in train_idx {
        for (m, v) in mean.iter_mut().zip(embeddings.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train_idx.len() as f64);
    for &i in train_idx {
        for ((s, v), m) in sd.iter_mut().zip(embeddings.row(i)).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    sd.iter_mut().for_each(|s| {
        *s = (*s / train_idx.len() as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    });
    // Standardized features with a trailing 1 for the intercept.
    let feats = |i: usize| -> Vec<f64> {
        embeddings
            .row(i)
            .iter()
            .zip(&mean)
            .zip(&sd)
            .map(|((v, m), s)| (v - m) / s)
            .chain(std::iter::once(1.0))
            .collect()
    };
    let train_x: Vec<Vec<f64>> = train_idx.iter().map(|&i| feats(i)).collect();
    let train_y: Vec<usize> = train_idx.iter().map(|&i| target[i]).collect();
    let m = d + 1;
    // Step size from the trace bound on the softmax-loss Hessian.
    let trace: f64 = train_x.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / train_x.len() as f64;
    let lr = 1.0 / trace.max(1e-12);

    let mut w = vec![0.0; m * k];
    let mut grad = vec![0.0; m * k];
    let mut logits = vec![0.0; k];
    for _ in 0..PROBE_MAX_ITERS {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (row, &c) in train_x.iter().zip(&train_y) {
            for (j, l) in logits.iter_mut().enumerate() {
                *l = row.iter().enumerate().map(|(a, v)| v * w[a * k + j]).sum();
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for j in 0..k {
                let p = (logits[j] - max).exp() / z - if j == c { 1.0 } else { 0.0 };
                for (a, v) in row.iter().enumerate() {
                    grad[a * k + j] += p * v;
                }
            }
        }
        let scale = 1.0 / train_x.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm <= PROBE_GRAD_TOL {
            break;
        }
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= lr * g;
        }
    }

    let correct = test_idx
        .iter()
        .filter(|&&i| {
            let row = feats(i);
            let scores: Vec<f64> = (0..k)
                .map(|j| row.iter().enumerate().map(|(a, v)| v * w[a * k + j]).sum())
                .collect();
            let best = (0..k).max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a))).expect("k >= 2");
            best == target[i]
        })
        .count();
    Ok(LeakageReport {
        env_accuracy: correct as f64 / test_idx.len() as f64,
        chance_level: 1.0 / k as f64,
        probe_seed: seed,
    })
}
