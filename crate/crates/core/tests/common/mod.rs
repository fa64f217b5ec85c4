//! Fixtures and oracles shared by the integration tests.
#![allow(dead_code)]

use pirl::autodiff::{Activation, Tensor};
use pirl::models::{ArchConfig, Group, GroupGrads, ModelParams};
use pirl::objectives::{self, EnvBatch, ObjectiveWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(r: &mut ChaCha8Rng, n: usize, p: usize) -> Tensor {
    Tensor::matrix(n, p, (0..n * p).map(|_| r.sample(StandardNormal)).collect()).unwrap()
}

pub fn labels(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| f64::from(r.random_bool(0.5))).collect()
}

/// A random small model with nonzero biases, per-environment batches of at
/// most 16 rows, and random objective weights.
pub struct Setup {
    pub params: ModelParams,
    pub batches: Vec<EnvBatch>,
    pub weights: ObjectiveWeights,
}

pub fn random_setup(seed: u64) -> Setup {
    let mut r = rng(seed);
    let input_dim = r.random_range(2..=5);
    let num_envs = r.random_range(2..=3);
    let depth = r.random_range(1..=2);
    let arch = ArchConfig {
        input_dim,
        embed_dim: r.random_range(2..=4),
        encoder_hidden: (0..depth).map(|_| r.random_range(2..=5)).collect(),
        env_head_hidden: vec![r.random_range(2..=4)],
        num_envs,
        activation: [Activation::Tanh, Activation::Sigmoid, Activation::Relu][r.random_range(0..3)],
        init_seed: r.random(),
    };
    let mut params = ModelParams::init(&arch).unwrap();
    for g in [Group::Theta, Group::Psi] {
        for layer in params.group_mut(g) {
            layer.bias.data_mut().iter_mut().for_each(|b| *b = r.random_range(-0.5..0.5));
        }
    }
    let batches = (0..num_envs)
        .map(|env| {
            let n = r.random_range(5..=16);
            EnvBatch {
                env,
                x: normal_matrix(&mut r, n, input_dim),
                y: labels(&mut r, n),
            }
        })
        .collect();
    let weights = ObjectiveWeights {
        lambda: r.random_range(0.0..2.0),
        gamma: r.random_range(0.0..2.0),
        ridge: r.random_range(0.05..1.0),
    };
    Setup { params, batches, weights }
}

fn flat_mut(params: &mut ModelParams, g: Group) -> Vec<&mut f64> {
    params
        .group_mut(g)
        .into_iter()
        .flat_map(|l| l.weight.data_mut().iter_mut().chain(l.bias.data_mut().iter_mut()))
        .collect()
}

fn set(params: &mut ModelParams, g: Group, i: usize, v: f64) {
    *flat_mut(params, g).into_iter().nth(i).unwrap() = v;
}

fn get(params: &mut ModelParams, g: Group, i: usize) -> f64 {
    *flat_mut(params, g).into_iter().nth(i).unwrap()
}

/// Autodiff and central-difference derivatives of one objective pass, per
/// parameter group: θ against `l_sup + γ·r_inv − λ·l_env`, ψ against
/// `l_env`.
pub fn objective_fd_pairs(s: &Setup, step: f64) -> Vec<Vec<(f64, f64)>> {
    let mut pass = objectives::total_objective(&s.params, &s.batches, s.weights).unwrap();
    pass.tape.backward(pass.root).unwrap();
    let mut groups = Vec::new();
    for (g, pick) in [
        (Group::Theta, (|b: &objectives::LossBreakdown| b.total) as fn(&objectives::LossBreakdown) -> f64),
        (Group::Psi, |b: &objectives::LossBreakdown| b.l_env),
    ] {
        let analytic = GroupGrads::collect(&pass.tape, &pass.model, g).flatten();
        let mut p = s.params.clone();
        let mut pairs = Vec::with_capacity(analytic.len());
        for (i, &ad) in analytic.iter().enumerate() {
            let orig = get(&mut p, g, i);
            let eval = |p: &ModelParams| pick(&objectives::total_objective(p, &s.batches, s.weights).unwrap().breakdown);
            set(&mut p, g, i, orig + step);
            let up = eval(&p);
            set(&mut p, g, i, orig - step);
            let down = eval(&p);
            set(&mut p, g, i, orig);
            pairs.push((ad, (up - down) / (2.0 * step)));
        }
        groups.push(pairs);
    }
    groups
}

/// Worst coordinate-wise `|ad − fd| / (max(|ad|, |fd|) + 1e-8)`.
pub fn objective_fd_error(s: &Setup, step: f64) -> f64 {
    objective_fd_pairs(s, step)
        .iter()
        .flatten()
        .map(|&(ad, fd)| (ad - fd).abs() / (ad.abs().max(fd.abs()) + 1e-8))
        .fold(0.0, f64::max)
}

/// Worst coordinate-wise error with each group's denominator floored at
/// `1e-3` of its largest `|fd|`, so near-zero coordinates are judged
/// against the group's gradient scale instead of roundoff.
pub fn objective_fd_error_scaled(s: &Setup, step: f64) -> f64 {
    objective_fd_pairs(s, step)
        .iter()
        .map(|pairs| {
            let floor = (1e-3 * pairs.iter().map(|p| p.1.abs()).fold(0.0, f64::max)).max(1e-8);
            pairs
                .iter()
                .map(|&(ad, fd)| (ad - fd).abs() / ad.abs().max(fd.abs()).max(floor))
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// Ridge objective `‖Aw − ỹ‖² + ε‖w‖²` with `A = [H | 1]`, minimized by
/// plain gradient descent from zero.
pub fn ridge_by_descent(h: &Tensor, targets: &[f64], eps: f64) -> Vec<f64> {
    let (n, d) = (h.rows(), h.cols());
    let a = |i: usize, j: usize| if j == d { 1.0 } else { h.get(i, j) };
    // Step from a Gershgorin bound on the Hessian's largest eigenvalue.
    let mut gram = vec![0.0; (d + 1) * (d + 1)];
    for i in 0..n {
        for j in 0..=d {
            for k in 0..=d {
                gram[j * (d + 1) + k] += a(i, j) * a(i, k);
            }
        }
    }
    let bound = (0..=d)
        .map(|j| (0..=d).map(|k| gram[j * (d + 1) + k].abs()).sum::<f64>() + eps)
        .fold(0.0, f64::max);
    let lr = 1.0 / bound;
    let mut w = vec![0.0; d + 1];
    for _ in 0..200_000 {
        let mut grad: Vec<f64> = w.iter().map(|v| eps * v).collect();
        for i in 0..n {
            let r: f64 = (0..=d).map(|j| a(i, j) * w[j]).sum::<f64>() - targets[i];
            for j in 0..=d {
                grad[j] += a(i, j) * r;
            }
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        w.iter_mut().zip(&grad).for_each(|(v, g)| *v -= lr * g);
        if norm < 1e-13 {
            break;
        }
    }
    w
}

/// `Σ_{e≠e'} ‖w_e − w_e'‖²` by explicit enumeration of ordered pairs.
pub fn pair_enumeration_penalty(ws: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (i, a) in ws.iter().enumerate() {
        for (j, b) in ws.iter().enumerate() {
            if i != j {
                total += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            }
        }
    }
    total
}

/// Mann–Whitney AUROC by counting every positive/negative pair.
pub fn brute_auroc(scores: &[f64], labels: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1.0 && labels[j] == 0.0 {
                pairs += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

/// Deterministic proptest configuration: fixed seed, no failure files.
pub fn proptest_config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases,
        rng_seed: proptest::test_runner::RngSeed::Fixed(0x5eed),
        failure_persistence: None,
        ..proptest::test_runner::Config::default()
    }
}
