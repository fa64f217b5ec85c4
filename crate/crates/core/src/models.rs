//! Encoder, outcome predictor and environment classifier as small MLPs.
//!
//! Parameters are plain tensors. For a forward pass they are bound as leaves
//! on a fresh [`Tape`]; gradients are read back per parameter group. The
//! encoder and outcome head form the θ group, the environment head the ψ
//! group, and the two never share a tensor.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Activation, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub env_head_hidden: Vec<usize>,
    /// Number of training environments the adversary distinguishes.
    pub num_envs: usize,
    pub activation: Activation,
    pub init_seed: u64,
}

impl ArchConfig {
    pub fn new(input_dim: usize, num_envs: usize) -> Self {
        ArchConfig {
            input_dim,
            embed_dim: 16,
            encoder_hidden: vec![64, 32],
            env_head_hidden: vec![32],
            num_envs,
            activation: Activation::Relu,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [self.input_dim, self.embed_dim, self.num_envs]
            .into_iter()
            .chain(self.encoder_hidden.iter().copied())
            .chain(self.env_head_hidden.iter().copied());
        if widths.into_iter().any(|w| w == 0) {
            return Err(Error::Config(format!("all layer widths must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `fan_in × fan_out`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    fn init(fan_in: usize, fan_out: usize, bound: f64, rng: &mut rng::Rng) -> Layer {
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
        Layer {
            weight: Tensor::matrix(fan_in, fan_out, data).expect("layer shape"),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

/// Uniform init bound for a layer with `fan_in` inputs: He scaling for ReLU,
/// LeCun scaling otherwise.
pub fn init_bound(fan_in: usize, activation: Activation) -> f64 {
    let gain = match activation {
        Activation::Relu => 6.0,
        Activation::Tanh | Activation::Sigmoid => 3.0,
    };
    (gain / fan_in as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: Vec<Layer>,
    pub predictor: Layer,
    pub env_head: Vec<Layer>,
    pub activation: Activation,
}

/// Which parameter group a gradient or update refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Theta,
    Psi,
}

impl ModelParams {
    pub fn init(config: &ArchConfig) -> Result<ModelParams> {
        config.validate()?;
        let mut rng = rng::seeded(rng::derive_seed(config.init_seed, tag::INIT));
        let act = config.activation;
        let mut stack = |widths: &[usize]| -> Vec<Layer> {
            widths
                .windows(2)
                .map(|w| Layer::init(w[0], w[1], init_bound(w[0], act), &mut rng))
                .collect()
        };
        let enc_widths: Vec<usize> = std::iter::once(config.input_dim)
            .chain(config.encoder_hidden.iter().copied())
            .chain(std::iter::once(config.embed_dim))
            .collect();
        let encoder = stack(&enc_widths);
        let predictor = stack(&[config.embed_dim, 1]).remove(0);
        let head_widths: Vec<usize> = std::iter::once(config.embed_dim)
            .chain(config.env_head_hidden.iter().copied())
            .chain(std::iter::once(config.num_envs))
            .collect();
        let env_head = stack(&head_widths);
        Ok(ModelParams {
            encoder,
            predictor,
            env_head,
            activation: act,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].fan_in()
    }

    pub fn embed_dim(&self) -> usize {
        self.predictor.fan_in()
    }

    pub fn num_envs(&self) -> usize {
        self.env_head.last().map_or(0, Layer::fan_out)
    }

    /// Layers of one parameter group in a fixed order.
    pub fn group(&self, g: Group) -> Vec<&Layer> {
        match g {
            Group::Theta => self.encoder.iter().chain(std::iter::once(&self.predictor)).collect(),
            Group::Psi => self.env_head.iter().collect(),
        }
    }

    pub fn group_mut(&mut self, g: Group) -> Vec<&mut Layer> {
        match g {
            Group::Theta => self
                .encoder
                .iter_mut()
                .chain(std::iter::once(&mut self.predictor))
                .collect(),
            Group::Psi => self.env_head.iter_mut().collect(),
        }
    }

    /// Named tensors in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &l.weight));
            out.push((format!("encoder.{i}.bias"), &l.bias));
        }
        out.push(("predictor.weight".into(), &self.predictor.weight));
        out.push(("predictor.bias".into(), &self.predictor.bias));
        for (i, l) in self.env_head.iter().enumerate() {
            out.push((format!("env_head.{i}.weight"), &l.weight));
            out.push((format!("env_head.{i}.bias"), &l.bias));
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let mut bind_layer = |l: &Layer| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone()));
        let encoder = self.encoder.iter().map(&mut bind_layer).collect();
        let predictor = bind_layer(&self.predictor);
        let env_head = self.env_head.iter().map(&mut bind_layer).collect();
        BoundModel {
            encoder,
            predictor,
            env_head,
            activation: self.activation,
        }
    }

    /// Embeddings for a batch, without keeping a tape.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let m = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let h = m.encode(&mut tape, xv)?;
        Ok(tape.value(h).clone())
    }

    /// Outcome probabilities for a batch.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let m = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let h = m.encode(&mut tape, xv)?;
        let logits = m.predict_outcome(&mut tape, h)?;
        Ok(tape.value(logits).data().iter().map(|&l| sigmoid(l)).collect())
    }

    /// Write the checkpoint text format (see README).
    pub fn to_checkpoint(&self) -> String {
        let mut s = String::from("pirl-checkpoint v1\n");
        let _ = writeln!(s, "activation {}", self.activation.name());
        for (name, t) in self.named_tensors() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(s, "tensor {name} {}", dims.join("x"));
            let vals: Vec<String> = t.data().iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(s, "{}", vals.join(" "));
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> std::result::Result<ModelParams, String> {
        let mut lines = text.lines();
        if lines.next() != Some("pirl-checkpoint v1") {
            return Err("missing 'pirl-checkpoint v1' header".into());
        }
        let activation = lines
            .next()
            .and_then(|l| l.strip_prefix("activation "))
            .ok_or("missing activation line")?
            .parse::<Activation>()
            .map_err(|e| e.to_string())?;
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        while let Some(head) = lines.next() {
            if head.trim().is_empty() {
                continue;
            }
            let mut parts = head.split_whitespace();
            if parts.next() != Some("tensor") {
                return Err(format!("expected tensor header, got {head:?}"));
            }
            let name = parts.next().ok_or("tensor without name")?.to_string();
            let shape = parts
                .next()
                .ok_or_else(|| format!("{name}: missing shape"))?
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|e| format!("{name}: bad shape: {e}")))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let body = lines.next().ok_or_else(|| format!("{name}: missing values"))?;
            let vals = body
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| format!("{name}: bad value {v:?}: {e}")))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let t = Tensor::new(shape, vals).map_err(|e| format!("{name}: {e}"))?;
            tensors.push((name, t));
        }

        let mut take = |name: String| -> std::result::Result<Tensor, String> {
            let pos = tensors
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| format!("missing tensor {name}"))?;
            Ok(tensors.remove(pos).1)
        };
        let layers = |prefix: &str, take: &mut dyn FnMut(String) -> std::result::Result<Tensor, String>| {
            let mut out = Vec::new();
            while let Ok(weight) = take(format!("{prefix}.{}.weight", out.len())) {
                let bias = take(format!("{prefix}.{}.bias", out.len()))?;
                out.push(Layer { weight, bias });
            }
            Ok::<_, String>(out)
        };
        let encoder = layers("encoder", &mut take)?;
        let env_head = layers("env_head", &mut take)?;
        let predictor = Layer {
            weight: take("predictor.weight".into())?,
            bias: take("predictor.bias".into())?,
        };
        if !tensors.is_empty() {
            return Err(format!("unexpected tensor {}", tensors[0].0));
        }
        let params = ModelParams {
            encoder,
            predictor,
            env_head,
            activation,
        };
        params.check_shapes()?;
        Ok(params)
    }

    fn check_shapes(&self) -> std::result::Result<(), String> {
        let chain = |layers: &[&Layer]| {
            for l in layers {
                if l.weight.ndim() != 2 || l.bias.shape() != [l.fan_out()] {
                    return Err(format!("bad layer shapes {:?} / {:?}", l.weight.shape(), l.bias.shape()));
                }
            }
            for w in layers.windows(2) {
                if w[0].fan_out() != w[1].fan_in() {
                    return Err(format!("layers do not compose: {} -> {}", w[0].fan_out(), w[1].fan_in()));
                }
            }
            Ok(())
        };
        if self.encoder.is_empty() || self.env_head.is_empty() {
            return Err("encoder and environment head need at least one layer".into());
        }
        let enc: Vec<&Layer> = self.encoder.iter().chain(std::iter::once(&self.predictor)).collect();
        chain(&enc)?;
        if self.predictor.fan_out() != 1 {
            return Err("outcome head must have one output".into());
        }
        let head: Vec<&Layer> = self.env_head.iter().collect();
        chain(&head)?;
        if self.env_head[0].fan_in() != self.embed_dim() {
            return Err("environment head input does not match embedding".into());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ModelParams> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ModelParams::from_checkpoint(&text).map_err(|reason| Error::Format {
            path: path.to_path_buf(),
            reason,
        })
    }
}

/// Parameters bound as leaves on one tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub encoder: Vec<(Var, Var)>,
    pub predictor: (Var, Var),
    pub env_head: Vec<(Var, Var)>,
    pub activation: Activation,
}

impl BoundModel {
    fn mlp(&self, tape: &mut Tape, layers: &[(Var, Var)], mut h: Var) -> Result<Var> {
        for (i, &(w, b)) in layers.iter().enumerate() {
            h = tape.affine(h, w, b)?;
            if i + 1 < layers.len() {
                h = tape.activation(h, self.activation)?;
            }
        }
        Ok(h)
    }

    /// `n×p` inputs to `n×d` embeddings.
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.mlp(tape, &self.encoder, x)
    }

    /// Linear outcome logits, shape `[n]`.
    pub fn predict_outcome(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let (w, b) = self.predictor;
        let out = tape.affine(h, w, b)?;
        let n = tape.value(out).rows();
        tape.reshape(out, vec![n])
    }

    /// Environment logits `n×K` behind a gradient reversal of strength
    /// `lambda`.
    pub fn classify_env(&self, tape: &mut Tape, h: Var, lambda: f64) -> Result<Var> {
        let r = tape.grad_reverse(h, lambda)?;
        self.mlp(tape, &self.env_head, r)
    }

    /// Environment logits with a plain (non-reversed) gradient path.
    pub fn env_logits(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        self.mlp(tape, &self.env_head, h)
    }

    /// Environment logits with no gradient path into the encoder.
    pub fn classify_env_detached(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let d = tape.detach(h);
        self.mlp(tape, &self.env_head, d)
    }

    pub fn group_vars(&self, g: Group) -> Vec<(Var, Var)> {
        match g {
            Group::Theta => self.encoder.iter().copied().chain(std::iter::once(self.predictor)).collect(),
            Group::Psi => self.env_head.clone(),
        }
    }
}

/// Gradients of one parameter group, layer-aligned with
/// [`ModelParams::group`].
#[derive(Debug, Clone, PartialEq)]
pub struct GroupGrads {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl GroupGrads {
    pub fn collect(tape: &Tape, bound: &BoundModel, g: Group) -> GroupGrads {
        GroupGrads {
            layers: bound
                .group_vars(g)
                .into_iter()
                .map(|(w, b)| (tape.grad_or_zeros(w), tape.grad_or_zeros(b)))
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.data().iter().chain(b.data()))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|(w, b)| w.is_finite() && b.is_finite())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.data().iter().chain(b.data()).copied())
            .collect()
    }
}

impl ModelParams {
    /// Plain SGD step on one group.
    pub fn sgd_step(&mut self, g: Group, grads: &GroupGrads, lr: f64) {
        for (layer, (gw, gb)) in self.group_mut(g).into_iter().zip(&grads.layers) {
            for (p, d) in layer.weight.data_mut().iter_mut().zip(gw.data()) {
                *p -= lr * d;
            }
            for (p, d) in layer.bias.data_mut().iter_mut().zip(gb.data()) {
                *p -= lr * d;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> ArchConfig {
        ArchConfig {
            init_seed: 42,
            ..ArchConfig::new(6, 3)
        }
    }

    fn rows(n: usize, p: usize, seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::matrix(n, p, (0..n * p).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = ModelParams::init(&arch()).unwrap();
        let b = ModelParams::init(&arch()).unwrap();
        assert_eq!(a, b);
        for (name, t) in a.named_tensors() {
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        let mut other = arch();
        other.init_seed = 43;
        assert_ne!(a, ModelParams::init(&other).unwrap());
    }

    #[test]
    fn weights_within_fan_in_bound() {
        let p = ModelParams::init(&arch()).unwrap();
        for g in [Group::Theta, Group::Psi] {
            for l in p.group(g) {
                let bound = init_bound(l.fan_in(), p.activation);
                assert!(l.weight.data().iter().all(|v| v.abs() <= bound));
            }
        }
    }

    #[test]
    fn shapes_follow_config() {
        let p = ModelParams::init(&arch()).unwrap();
        assert_eq!(p.encoder.len(), 3);
        assert_eq!(p.input_dim(), 6);
        assert_eq!(p.embed_dim(), 16);
        assert_eq!(p.num_envs(), 3);
        let h = p.embed(&rows(5, 6, 1)).unwrap();
        assert_eq!(h.shape(), &[5, 16]);
        assert!(p.embed(&rows(5, 4, 1)).is_err());
        let mut bad = arch();
        bad.encoder_hidden = vec![8, 0];
        assert!(ModelParams::init(&bad).is_err());
    }

    #[test]
    fn batch_consistency() {
        let p = ModelParams::init(&arch()).unwrap();
        let x = rows(5, 6, 2);
        let single = p.embed(&x.select_rows(&[0])).unwrap();
        let batch = p.embed(&x).unwrap();
        assert_eq!(single.row(0), batch.row(0));
    }

    #[test]
    fn zero_weights_give_constant_embedding() {
        let mut p = ModelParams::init(&arch()).unwrap();
        for l in &mut p.encoder {
            l.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let h = p.embed(&rows(4, 6, 3)).unwrap();
        for i in 1..4 {
            assert_eq!(h.row(i), h.row(0));
        }
    }

    #[test]
    fn outcome_head() {
        let mut p = ModelParams::init(&arch()).unwrap();
        let probs = p.predict_proba(&rows(7, 6, 4)).unwrap();
        assert_eq!(probs.len(), 7);
        assert!(probs.iter().all(|&q| q > 0.0 && q < 1.0));
        p.predictor.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let probs = p.predict_proba(&rows(7, 6, 4)).unwrap();
        assert!(probs.iter().all(|&q| q == 0.5));
    }

    #[test]
    fn classify_env_forward_ignores_lambda() {
        let p = ModelParams::init(&arch()).unwrap();
        let x = rows(4, 6, 5);
        let logits = |lambda: f64| {
            let mut t = Tape::new();
            let m = p.bind(&mut t);
            let xv = t.leaf(x.clone());
            let h = m.encode(&mut t, xv).unwrap();
            let e = m.classify_env(&mut t, h, lambda).unwrap();
            t.value(e).clone()
        };
        let a = logits(0.0);
        assert_eq!(a.shape(), &[4, 3]);
        assert_eq!(a, logits(5.0));

        let mut t = Tape::new();
        let m = p.bind(&mut t);
        let xv = t.leaf(x.clone());
        let h = m.encode(&mut t, xv).unwrap();
        assert!(m.classify_env(&mut t, h, -1.0).is_err());
    }

    #[test]
    fn zero_lambda_blocks_encoder_gradient() {
        let p = ModelParams::init(&arch()).unwrap();
        let mut t = Tape::new();
        let m = p.bind(&mut t);
        let xv = t.leaf(rows(6, 6, 6));
        let h = m.encode(&mut t, xv).unwrap();
        let e = m.classify_env(&mut t, h, 0.0).unwrap();
        let loss = t.softmax_ce(e, &[0, 1, 2, 0, 1, 2]).unwrap();
        t.backward(loss).unwrap();
        let theta = GroupGrads::collect(&t, &m, Group::Theta);
        assert!(theta.flatten().iter().all(|&v| v == 0.0));
        let psi = GroupGrads::collect(&t, &m, Group::Psi);
        assert!(psi.norm() > 0.0);
    }

    #[test]
    fn encoder_is_row_permutation_equivariant() {
        let p = ModelParams::init(&arch()).unwrap();
        let x = rows(6, 6, 7);
        let perm = [3, 1, 5, 0, 2, 4];
        let h = p.embed(&x).unwrap();
        let hp = p.embed(&x.select_rows(&perm)).unwrap();
        assert_eq!(hp, h.select_rows(&perm));
    }

    #[test]
    fn groups_are_disjoint() {
        let p = ModelParams::init(&arch()).unwrap();
        let mut t = Tape::new();
        let m = p.bind(&mut t);
        let theta: Vec<Var> = m.group_vars(Group::Theta).into_iter().flat_map(|(a, b)| [a, b]).collect();
        let psi: Vec<Var> = m.group_vars(Group::Psi).into_iter().flat_map(|(a, b)| [a, b]).collect();
        assert!(theta.iter().all(|v| !psi.contains(v)));
        assert_eq!(theta.len() + psi.len(), p.named_tensors().len());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = ModelParams::init(&arch()).unwrap();
        let q = ModelParams::from_checkpoint(&p.to_checkpoint()).unwrap();
        assert_eq!(p, q);
        assert!(ModelParams::from_checkpoint("nonsense").is_err());
        let truncated: String = p.to_checkpoint().lines().take(5).collect::<Vec<_>>().join("\n");
        assert!(ModelParams::from_checkpoint(&truncated).is_err());
    }
}
