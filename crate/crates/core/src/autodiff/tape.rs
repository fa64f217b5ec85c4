use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::linalg::{self, Cholesky};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => sigmoid(v),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::invalid(format!("unknown activation {other:?}"))),
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)` without overflow.
pub(crate) fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Act { x: Var, kind: Activation },
    Bce { logits: Var, labels: Vec<f64> },
    SoftmaxCe { logits: Var, classes: Vec<usize>, probs: Vec<f64> },
    GradReverse { x: Var, lambda: f64 },
    Sum { x: Var },
    SumSq { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Reshape { x: Var },
    SliceRows { x: Var, start: usize },
    Ridge { h: Var, targets: Vec<f64>, chol: Cholesky },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Define-by-run record of one forward pass.
///
/// Nodes are appended in execution order, so every operation's inputs have
/// smaller indices than its output. [`Tape::backward`] walks the nodes once in
/// reverse and adds `∂loss/∂node` into each node's gradient slot. Slots are
/// never cleared implicitly: a second `backward` on the same tape accumulates,
/// and [`Tape::zero_grad`] resets them.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn ensure_finite(op: &str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient, or `None` if no backward pass has reached `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradient with unreached nodes reported as zeros.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape().to_vec()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// `x W + b` for `x: n×p`, `W: p×q`, `b: q`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.ndim() != 2 || wv.ndim() != 2 || xv.cols() != wv.rows() {
            return Err(Error::Shape {
                op: "affine",
                left: xv.shape().to_vec(),
                right: wv.shape().to_vec(),
            });
        }
        let (n, p, q) = (xv.rows(), xv.cols(), wv.cols());
        if bv.len() != q || bv.ndim() != 1 {
            return Err(Error::Shape {
                op: "affine bias",
                left: wv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let mut out = Vec::with_capacity(n * q);
        for i in 0..n {
            out.extend_from_slice(bd);
            let row = &mut out[i * q..(i + 1) * q];
            for k in 0..p {
                let xik = xd[i * p + k];
                if xik == 0.0 {
                    continue;
                }
                let wrow = &wd[k * q..(k + 1) * q];
                for (o, &wkj) in row.iter_mut().zip(wrow) {
                    *o += xik * wkj;
                }
            }
        }
        let t = Tensor::matrix(n, q, out)?;
        ensure_finite("affine", &t)?;
        Ok(self.push(t, Op::Affine { x, w, b }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let xv = self.value(x);
        ensure_finite("activation input", xv)?;
        let data = xv.data().iter().map(|&v| kind.apply(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Act { x, kind }))
    }

    /// Mean binary cross-entropy on logits, `mean log(1 + exp(-s·logit))`
    /// with `s = ±1` for labels 1 / 0.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.is_empty() {
            return Err(Error::invalid("bce_with_logits on empty input"));
        }
        if lv.len() != labels.len() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                left: lv.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::invalid(format!("binary label expected, got {bad}")));
        }
        ensure_finite("bce_with_logits logits", lv)?;
        let n = labels.len() as f64;
        let loss = lv
            .data()
            .iter()
            .zip(labels)
            .map(|(&l, &y)| {
                let s = if y == 1.0 { 1.0 } else { -1.0 };
                softplus(-s * l)
            })
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean negative log-softmax probability of the true class.
    pub fn softmax_ce(&mut self, logits: Var, classes: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.ndim() != 2 || lv.rows() != classes.len() {
            return Err(Error::Shape {
                op: "softmax_ce",
                left: lv.shape().to_vec(),
                right: vec![classes.len()],
            });
        }
        let (n, k) = (lv.rows(), lv.cols());
        if n == 0 {
            return Err(Error::invalid("softmax_ce on empty input"));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
            return Err(Error::invalid(format!(
                "class index {bad} out of range for {k} classes"
            )));
        }
        ensure_finite("softmax_ce logits", lv)?;
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[classes[i]];
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
        }
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxCe {
                logits,
                classes: classes.to_vec(),
                probs,
            },
        ))
    }

    /// Identity forward; backward multiplies the upstream gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!(
                "gradient reversal strength must be a finite value >= 0, got {lambda}"
            )));
        }
        let t = self.value(x).clone();
        Ok(self.push(t, Op::GradReverse { x, lambda }))
    }

    /// Same value, no gradient path back to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.leaf(t)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }))
    }

    pub fn sum_sq(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        let t = Tensor::scalar(s);
        ensure_finite("sum_sq", &t)?;
        Ok(self.push(t, Op::SumSq { x }))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op: name,
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        ensure_finite(name, &t)?;
        Ok(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        ensure_finite("scale", &t)?;
        Ok(self.push(t, Op::Scale { x, c }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let t = Tensor::new(shape, xv.data().to_vec()).map_err(|_| Error::Shape {
            op: "reshape",
            left: xv.shape().to_vec(),
            right: vec![xv.len()],
        })?;
        Ok(self.push(t, Op::Reshape { x }))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 || start > end || end > xv.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                left: xv.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let c = xv.cols();
        let t = Tensor::matrix(end - start, c, xv.data()[start * c..end * c].to_vec())?;
        Ok(self.push(t, Op::SliceRows { x, start }))
    }

    /// Closed-form ridge regression of `targets` on `[h | 1]`:
    /// `w = (AᵀA + εI)⁻¹ Aᵀt`, returned as a vector of length `d + 1` with
    /// the intercept last. Differentiable with respect to `h`.
    pub fn ridge_solve(&mut self, h: Var, targets: &[f64], eps: f64) -> Result<Var> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::invalid(format!("ridge strength must be > 0, got {eps}")));
        }
        let hv = self.value(h);
        if hv.ndim() != 2 || hv.rows() != targets.len() {
            return Err(Error::Shape {
                op: "ridge_solve",
                left: hv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        ensure_finite("ridge_solve input", hv)?;
        let (n, d) = (hv.rows(), hv.cols());
        let (gram, rhs) = linalg::ridge_system(hv.data(), n, d, targets, eps);
        let chol = Cholesky::factor(&gram, d + 1)?;
        let w = chol.solve_refined(&gram, &rhs);
        let t = Tensor::vector(w);
        ensure_finite("ridge_solve", &t)?;
        Ok(self.push(
            t,
            Op::Ridge {
                h,
                targets: targets.to_vec(),
                chol,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            let slot = &mut self.nodes[idx].grad;
            match slot {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, p, q) = (xv.rows(), xv.cols(), wv.cols());
                let (xd, wd) = (xv.data(), wv.data());
                let mut gx = vec![0.0; n * p];
                let mut gw = vec![0.0; p * q];
                let mut gb = vec![0.0; q];
                for i in 0..n {
                    let gi = &g[i * q..(i + 1) * q];
                    for (acc, &v) in gb.iter_mut().zip(gi) {
                        *acc += v;
                    }
                    for k in 0..p {
                        let wrow = &wd[k * q..(k + 1) * q];
                        gx[i * p + k] = wrow.iter().zip(gi).map(|(a, b)| a * b).sum();
                        let xik = xd[i * p + k];
                        if xik != 0.0 {
                            for (acc, &v) in gw[k * q..(k + 1) * q].iter_mut().zip(gi) {
                                *acc += xik * v;
                            }
                        }
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *w, gw);
                accumulate(grads, *b, gb);
            }
            Op::Act { x, kind } => {
                let out = node.value.data();
                let input = self.value(*x).data();
                let gx = match kind {
                    Activation::Tanh => out.iter().zip(g).map(|(y, g)| g * (1.0 - y * y)).collect(),
                    Activation::Sigmoid => out.iter().zip(g).map(|(y, g)| g * y * (1.0 - y)).collect(),
                    Activation::Relu => input
                        .iter()
                        .zip(g)
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect(),
                };
                accumulate(grads, *x, gx);
            }
            Op::Bce { logits, labels } => {
                let scale = g[0] / labels.len() as f64;
                let gx = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&l, &y)| scale * (sigmoid(l) - y))
                    .collect();
                accumulate(grads, *logits, gx);
            }
            Op::SoftmaxCe { logits, classes, probs } => {
                let n = classes.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &c) in classes.iter().enumerate() {
                    gx[i * k + c] -= scale;
                }
                accumulate(grads, *logits, gx);
            }
            Op::GradReverse { x, lambda } => {
                accumulate(grads, *x, g.iter().map(|v| -lambda * v).collect());
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::SumSq { x } => {
                let gx = self.value(*x).data().iter().map(|v| 2.0 * v * g[0]).collect();
                accumulate(grads, *x, gx);
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.to_vec());
            }
            Op::Sub { a, b } => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                accumulate(grads, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                accumulate(grads, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            Op::Scale { x, c } => {
                accumulate(grads, *x, g.iter().map(|v| v * c).collect());
            }
            Op::Reshape { x } => accumulate(grads, *x, g.to_vec()),
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut gx = vec![0.0; xv.len()];
                gx[start * c..start * c + g.len()].copy_from_slice(g);
                accumulate(grads, *x, gx);
            }
            Op::Ridge { h, targets, chol } => {
                // dL/dA = r vᵀ - A v wᵀ with v = M⁻¹ ḡ and r = t - A w.
                let hv = self.value(*h);
                let (n, d) = (hv.rows(), hv.cols());
                let w = node.value.data();
                let v = chol.solve(g);
                let hd = hv.data();
                let mut gh = vec![0.0; n * d];
                for i in 0..n {
                    let a = &hd[i * d..(i + 1) * d];
                    let aw: f64 = a.iter().zip(w).map(|(x, y)| x * y).sum::<f64>() + w[d];
                    let av: f64 = a.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>() + v[d];
                    let r = targets[i] - aw;
                    for j in 0..d {
                        gh[i * d + j] = r * v[j] - av * w[j];
                    }
                }
                accumulate(grads, *h, gh);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot => *slot = Some(g),
    }
}
