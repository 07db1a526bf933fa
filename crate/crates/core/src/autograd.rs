//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every op pushes one node
//! holding its output value and whatever it needs for the backward pass, so
//! insertion order is a topological order and [`Graph::backward`] simply
//! walks the tape in reverse. Nodes that do not depend on any
//! `requires_grad` leaf are skipped.

use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::rng::Rng;
use crate::tensor::{gemm, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn leaky() -> Self {
        Activation::LeakyRelu(0.2)
    }

    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu(s) => {
                if v > 0.0 {
                    v
                } else {
                    s * v
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            Activation::Tanh => v.tanh(),
        }
    }
}

/// Running statistics owned by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Probability clamp applied before the logs in [`Graph::bce_loss`].
pub const BCE_CLAMP: f64 = 1e-7;

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    BatchNorm2d {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape {
        x: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<usize>,
    },
    Bce {
        p: Var,
        clamped: Vec<T>,
        y: Vec<T>,
    },
    Sum {
        x: Var,
    },
    Dot {
        x: Var,
        weights: Tensor<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`, if `v`
    /// participated in it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Drop accumulated gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Convenience for constants.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push_checked(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(value, op, rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad)?;
        self.push_checked(out, Op::Conv2d { x, w, b, stride, pad }, &[x, w, b], "conv2d")
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = kernels::conv_transpose2d_forward(
            self.value(x),
            self.value(w),
            self.value(b),
            stride,
            pad,
        )?;
        self.push_checked(
            out,
            Op::ConvTranspose2d { x, w, b, stride, pad },
            &[x, w, b],
            "conv_transpose2d",
        )
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2d_forward(self.value(x), k, stride)?;
        self.push_checked(out, Op::MaxPool2d { x, argmax }, &[x], "maxpool2d")
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        if let Activation::LeakyRelu(s) = kind {
            if !(s > 0.0 && s < 1.0) {
                return Err(Error::Domain(format!("leaky_relu slope {s} not in (0,1)")));
            }
        }
        let xv = self.value(x);
        let out = match kind {
            Activation::Relu => xv.map(|v| v.max(T::zero())),
            Activation::LeakyRelu(s) => {
                let s = T::from_f64_lossy(s);
                xv.map(|v| if v > T::zero() { v } else { s * v })
            }
            Activation::Sigmoid => xv.map(|v| T::one() / (T::one() + (-v).exp())),
            Activation::Tanh => xv.map(|v| v.tanh()),
        };
        self.push_checked(out, Op::Activation { x, kind }, &[x], "activation")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Relu, x)
    }

    /// Per-channel batch normalisation over `[N,C,H,W]`. In train mode the
    /// batch statistics normalise the input and are folded into `running`
    /// with the given momentum (unbiased variance, as is conventional); in
    /// eval mode `running` is used as-is.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats<T>,
        eps: f64,
        momentum: f64,
        mode: Mode,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return shape_err(format!("batchnorm: affine params do not match {c} channels"));
        }
        if running.mean.len() != c || running.var.len() != c {
            return shape_err(format!("batchnorm: running stats do not match {c} channels"));
        }
        if !(eps > 0.0) || !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Domain(format!(
                "batchnorm eps {eps} must be > 0 and momentum {momentum} in [0,1]"
            )));
        }
        let eps_t = T::from_f64_lossy(eps);
        let plane = h * w;
        let (xhat, inv_std, train) = match mode {
            Mode::Train => {
                let (xhat, inv_std, mean, var) = kernels::batch_norm_stats(self.value(x), eps_t)?;
                let m = T::from_f64_lossy(momentum);
                let count = n * plane;
                let unbias = if count > 1 {
                    T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
                } else {
                    T::one()
                };
                for ch in 0..c {
                    running.mean[ch] = (T::one() - m) * running.mean[ch] + m * mean[ch];
                    running.var[ch] = (T::one() - m) * running.var[ch] + m * var[ch] * unbias;
                }
                (xhat, inv_std, true)
            }
            Mode::Eval => {
                let inv_std: Vec<T> = running
                    .var
                    .iter()
                    .map(|&v| T::one() / (v + eps_t).sqrt())
                    .collect();
                let xd = self.value(x).data();
                let mut xhat = vec![T::zero(); xd.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * plane;
                        for i in off..off + plane {
                            xhat[i] = (xd[i] - running.mean[ch]) * inv_std[ch];
                        }
                    }
                }
                (xhat, inv_std, false)
            }
        };
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); xhat.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                for i in off..off + plane {
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        self.push_checked(
            out,
            Op::BatchNorm2d {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
            "batchnorm2d",
        )
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Domain(format!("dropout probability {p} not in [0,1)")));
        }
        let n = self.value(x).numel();
        let mask: Vec<T> = if mode == Mode::Eval || p == 0.0 {
            vec![T::one(); n]
        } else {
            let keep = T::from_f64_lossy(1.0 / (1.0 - p));
            (0..n)
                .map(|_| if rng.bernoulli(p) { T::zero() } else { keep })
                .collect()
        };
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
        )?;
        self.push_checked(out, Op::Dropout { x, mask }, &[x], "dropout")
    }

    /// `x[N,F] · w[F,O] + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, f) = self.value(x).dims2()?;
        let (wf, o) = self.value(w).dims2()?;
        if wf != f {
            return shape_err(format!("linear: input width {f} vs weight rows {wf}"));
        }
        if self.value(b).shape() != [o] {
            return shape_err(format!("linear: bias shape {:?} vs {o} outputs", self.value(b).shape()));
        }
        let mut out = vec![T::zero(); n * o];
        let bias = self.value(b).data();
        for row in out.chunks_mut(o) {
            row.copy_from_slice(bias);
        }
        gemm(false, false, n, f, o, self.value(x).data(), self.value(w).data(), T::one(), &mut out);
        let out = Tensor::new(vec![n, o], out)?;
        self.push_checked(out, Op::Linear { x, w, b }, &[x, w, b], "linear")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    /// Row-major per-sample flattening `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(x, vec![n, rest])
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).dims2()?;
        if targets.len() != n {
            return shape_err(format!("{} targets for {n} rows", targets.len()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index {
                what: "class logits",
                index: t,
                size: k,
            });
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &ld[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[r * k + j] = e;
                z = z + e;
            }
            for p in &mut probs[r * k..(r + 1) * k] {
                *p = *p / z;
            }
            // -log softmax = log z - (x_t - max)
            total = total + z.ln() - (row[t] - mx);
        }
        let loss = Tensor::scalar(total / T::from_usize(n).unwrap());
        self.push_checked(
            loss,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            &[logits],
            "softmax_cross_entropy",
        )
    }

    /// Mean binary cross-entropy of probabilities `p` against labels `y`.
    /// Probabilities are clamped to `[BCE_CLAMP, 1-BCE_CLAMP]` before the
    /// logs; the gradient is evaluated at the clamped point and passed
    /// straight through, which keeps the logit gradient of a saturated
    /// sigmoid intact.
    pub fn bce_loss(&mut self, p: Var, y: &[T]) -> Result<Var> {
        let pv = self.value(p);
        if pv.numel() != y.len() {
            return shape_err(format!("bce: {} probabilities vs {} labels", pv.numel(), y.len()));
        }
        if let Some(bad) = pv.data().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::Domain(format!("bce probability {bad} outside [0,1]")));
        }
        let lo = T::from_f64_lossy(BCE_CLAMP);
        let hi = T::one() - lo;
        let clamped: Vec<T> = pv.data().iter().map(|&v| v.max(lo).min(hi)).collect();
        let n = T::from_usize(y.len()).unwrap();
        let total: T = clamped
            .iter()
            .zip(y)
            .map(|(&q, &t)| -(t * q.ln() + (T::one() - t) * (T::one() - q).ln()))
            .sum();
        let loss = Tensor::scalar(total / n);
        self.push_checked(
            loss,
            Op::Bce {
                p,
                clamped,
                y: y.to_vec(),
            },
            &[p],
            "bce_loss",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push_checked(out, Op::Sum { x }, &[x], "sum")
    }

    /// `Σ x ⊙ weights` for a constant `weights` of the same shape.
    pub fn dot(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        if weights.shape() != self.value(x).shape() {
            return shape_err(format!(
                "dot: weights {:?} vs value {:?}",
                weights.shape(),
                self.value(x).shape()
            ));
        }
        let out = Tensor::scalar(self.value(x).dot(&weights));
        self.push_checked(out, Op::Dot { x, weights }, &[x], "dot")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push_checked(out, Op::Add { a, b }, &[a, b], "add")
    }

    /// Reverse-mode sweep from a scalar `root`. Gradients accumulate for
    /// every node that depends on a `requires_grad` leaf and stay readable
    /// through [`Graph::grad`] until [`Graph::reset_grads`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this graph; call reset_grads first".into(),
            ));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(Tensor::full(self.value(root).shape().to_vec(), T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &dy)?;
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&mut self, i: usize, dy: &Tensor<T>) -> Result<()> {
        let node = &self.nodes[i];
        let mut out: Vec<(Var, Tensor<T>)> = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let need_dx = self.nodes[x.0].requires_grad;
                let g = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    dy,
                    *stride,
                    *pad,
                    need_dx,
                )?;
                if let Some(dx) = g.dx {
                    out.push((*x, dx));
                }
                out.push((*w, g.dw));
                out.push((*b, g.db));
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let need_dx = self.nodes[x.0].requires_grad;
                let g = kernels::conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    dy,
                    *stride,
                    *pad,
                    need_dx,
                )?;
                if let Some(dx) = g.dx {
                    out.push((*x, dx));
                }
                out.push((*w, g.dw));
                out.push((*b, g.db));
            }
            Op::MaxPool2d { x, argmax } => {
                let dx = kernels::maxpool2d_backward(self.value(*x).shape(), argmax, dy);
                out.push((*x, dx));
            }
            Op::Activation { x, kind } => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let d: Vec<T> = match *kind {
                    Activation::Relu => xv
                        .iter()
                        .zip(dy.data())
                        .map(|(&a, &g)| if a > T::zero() { g } else { T::zero() })
                        .collect(),
                    Activation::LeakyRelu(s) => {
                        let s = T::from_f64_lossy(s);
                        xv.iter()
                            .zip(dy.data())
                            .map(|(&a, &g)| if a > T::zero() { g } else { s * g })
                            .collect()
                    }
                    Activation::Sigmoid => yv
                        .iter()
                        .zip(dy.data())
                        .map(|(&y, &g)| g * y * (T::one() - y))
                        .collect(),
                    Activation::Tanh => yv
                        .iter()
                        .zip(dy.data())
                        .map(|(&y, &g)| g * (T::one() - y * y))
                        .collect(),
                };
                out.push((*x, Tensor::new(node.value.shape().to_vec(), d)?));
            }
            Op::BatchNorm2d {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = dy.dims4()?;
                let plane = h * w;
                let g = self.value(*gamma).data();
                let dyd = dy.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * plane;
                        for i in off..off + plane {
                            dgamma[ch] = dgamma[ch] + dyd[i] * xhat[i];
                            dbeta[ch] = dbeta[ch] + dyd[i];
                        }
                    }
                }
                let mut dx = vec![T::zero(); dyd.len()];
                if *train {
                    // dx = inv_std/M * (M*dxhat - Σdxhat - xhat*Σ(dxhat*xhat)),
                    // with Σdxhat = gamma*dbeta and Σ(dxhat*xhat) = gamma*dgamma.
                    let m = T::from_usize(n * plane).unwrap();
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * plane;
                            let k = g[ch] * inv_std[ch] / m;
                            for i in off..off + plane {
                                dx[i] = k * (m * dyd[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                            }
                        }
                    }
                } else {
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * plane;
                            let k = g[ch] * inv_std[ch];
                            for i in off..off + plane {
                                dx[i] = k * dyd[i];
                            }
                        }
                    }
                }
                out.push((*x, Tensor::new(dy.shape().to_vec(), dx)?));
                out.push((*gamma, Tensor::new(vec![c], dgamma)?));
                out.push((*beta, Tensor::new(vec![c], dbeta)?));
            }
            Op::Dropout { x, mask } => {
                let d = dy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                out.push((*x, Tensor::new(dy.shape().to_vec(), d)?));
            }
            Op::Linear { x, w, b } => {
                let (n, f) = self.value(*x).dims2()?;
                let (_, o) = self.value(*w).dims2()?;
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![T::zero(); n * f];
                    gemm(false, true, n, o, f, dy.data(), self.value(*w).data(), T::zero(), &mut dx);
                    out.push((*x, Tensor::new(vec![n, f], dx)?));
                }
                let mut dw = vec![T::zero(); f * o];
                gemm(true, false, f, n, o, self.value(*x).data(), dy.data(), T::zero(), &mut dw);
                out.push((*w, Tensor::new(vec![f, o], dw)?));
                let mut db = vec![T::zero(); o];
                for row in dy.data().chunks(o) {
                    for (acc, &g) in db.iter_mut().zip(row) {
                        *acc = *acc + g;
                    }
                }
                out.push((*b, Tensor::new(vec![o], db)?));
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).shape().to_vec();
                out.push((*x, dy.clone().reshape(shape)?));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let (n, k) = self.value(*logits).dims2()?;
                let scale = dy.data()[0] / T::from_usize(n).unwrap();
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * k + t] = d[r * k + t] - T::one();
                }
                for v in &mut d {
                    *v = *v * scale;
                }
                out.push((*logits, Tensor::new(vec![n, k], d)?));
            }
            Op::Bce { p, clamped, y } => {
                let scale = dy.data()[0] / T::from_usize(y.len()).unwrap();
                let d = clamped
                    .iter()
                    .zip(y)
                    .map(|(&q, &t)| scale * (-t / q + (T::one() - t) / (T::one() - q)))
                    .collect();
                out.push((*p, Tensor::new(self.value(*p).shape().to_vec(), d)?));
            }
            Op::Sum { x } => {
                let shape = self.value(*x).shape().to_vec();
                out.push((*x, Tensor::full(shape, dy.data()[0])));
            }
            Op::Dot { x, weights } => {
                let g = dy.data()[0];
                out.push((*x, weights.map(|w| w * g)));
            }
            Op::Add { a, b } => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.clone()));
            }
        }
        for (v, g) in out {
            self.accumulate(v, g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_all_ones_sums_to_nine() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv2d_padding_preserves_size() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(vec![1, 1, 4, 4], 1.0));
        let w = g.constant(Tensor::full(vec![2, 1, 3, 3], 1.0));
        let b = g.constant(Tensor::zeros(vec![2]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 4, 4]);
    }

    #[test]
    fn conv2d_channel_mismatch_is_shape_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(vec![1, 3, 3, 3]));
        let b = g.constant(Tensor::zeros(vec![1]));
        assert!(matches!(g.conv2d(x, w, b, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_transpose_single_stamp() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(vec![1, 1, 1, 1], 2.5));
        let w = g.constant(Tensor::full(vec![1, 1, 2, 2], 1.0));
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.conv_transpose2d(x, w, b, 2, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[2.5; 4]);
    }

    #[test]
    fn conv_transpose_doubles_with_k4_s2_p1() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 3, 3]));
        let w = g.constant(Tensor::zeros(vec![2, 1, 4, 4]));
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.conv_transpose2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 6, 6]);
    }

    #[test]
    fn maxpool_basic() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let x = g.constant(Tensor::full(vec![1, 2, 4, 4], 7.0));
        let y = g.maxpool2d(x, 2, 2).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 7.0));
        let x = g.constant(Tensor::zeros(vec![1, 1, 1, 3]));
        assert!(matches!(g.maxpool2d(x, 2, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 1, 2, 2], &[1.0, 5.0, 5.0, 2.0]), true);
        let y = g.maxpool2d(x, 2, 2).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn activations_pointwise() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-2.0, 0.0, 3.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);
        let s = g.activation(Activation::Sigmoid, x).unwrap();
        assert_eq!(g.value(s).data()[1], 0.5);
        let l = g.activation(Activation::leaky(), x).unwrap();
        assert!((g.value(l).data()[0] + 0.4).abs() < 1e-15);
        let m1 = g.constant(t(&[1], &[-1.0]));
        let l = g.activation(Activation::LeakyRelu(0.2), m1).unwrap();
        assert!((g.value(l).data()[0] + 0.2).abs() < 1e-15);
        assert!(g.activation(Activation::LeakyRelu(1.5), x).is_err());
    }

    #[test]
    fn batchnorm_train_standardises() {
        let mut rng = Rng::new(5);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::randn(vec![4, 3, 5, 5], 10.0, &mut rng));
        let gamma = g.constant(Tensor::full(vec![3], 1.0));
        let beta = g.constant(Tensor::zeros(vec![3]));
        let mut rs = RunningStats::new(3);
        let y = g
            .batchnorm2d(x, gamma, beta, &mut rs, 1e-5, 0.1, Mode::Train)
            .unwrap();
        let yv = g.value(y);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|s| yv.data()[(s * 3 + ch) * 25..(s * 3 + ch + 1) * 25].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
        assert!(rs.mean.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn batchnorm_constant_channel_is_zero_and_eval_identity() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(vec![2, 1, 3, 3], 4.0));
        let gamma = g.constant(Tensor::full(vec![1], 1.0));
        let beta = g.constant(Tensor::zeros(vec![1]));
        let mut rs = RunningStats::new(1);
        let y = g
            .batchnorm2d(x, gamma, beta, &mut rs, 1e-5, 0.1, Mode::Train)
            .unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let mut rs = RunningStats::new(1);
        let x = g.constant(Tensor::from_fn(vec![1, 1, 2, 2], |i| i as f32));
        let y = g
            .batchnorm2d(x, gamma, beta, &mut rs, 1e-5, 0.1, Mode::Eval)
            .unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-4);
        }
        let bad = g.constant(Tensor::zeros(vec![1, 2, 2, 2]));
        assert!(matches!(
            g.batchnorm2d(bad, gamma, beta, &mut rs, 1e-5, 0.1, Mode::Eval),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = Rng::new(1);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(vec![100], |i| i as f32));
        let e = g.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(g.value(e), g.value(x));
        let z = g.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(g.value(z), g.value(x));
        let d = g.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        assert!(g
            .value(d)
            .data()
            .iter()
            .zip(g.value(x).data())
            .all(|(&o, &i)| o == 0.0 || o == 2.0 * i));
        assert!(matches!(
            g.dropout(x, 1.0, Mode::Train, &mut rng),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn dropout_monte_carlo_mean() {
        // Mean of inverted-dropout output over many masks matches input.
        let mut rng = Rng::new(99);
        let trials = 10_000;
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for _ in 0..trials {
            let mut g = Graph::<f64>::new();
            let x = g.constant(Tensor::full(vec![1], 3.0));
            let y = g.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
            let v = g.value(y).data()[0];
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / trials as f64;
        let var = sumsq / trials as f64 - mean * mean;
        let se = (var / trials as f64).sqrt();
        assert!((mean - 3.0).abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn linear_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 1.0, 1.0]));
        let b = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 2.0]);

        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = g.linear(x, eye, b).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let x2 = g.constant(t(&[2, 2], &[5.0, -1.0, 2.0, 7.0]));
        let zw = g.constant(Tensor::zeros(vec![2, 3]));
        let bb = g.constant(t(&[3], &[0.5, -1.5, 2.0]));
        let y = g.linear(x2, zw, bb).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.5, 2.0, 0.5, -1.5, 2.0]);
        assert!(matches!(g.linear(x, zw, b), Err(Error::Shape(_))));
    }

    #[test]
    fn flatten_order_and_batch() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(vec![1, 2, 2, 2], |i| i as f32));
        let f = g.flatten(x).unwrap();
        assert_eq!(g.value(f).shape(), &[1, 8]);
        assert_eq!(g.value(f).data(), &[0., 1., 2., 3., 4., 5., 6., 7.]);
        let back = g.reshape(f, vec![1, 2, 2, 2]).unwrap();
        assert_eq!(g.value(back), g.value(x));
        let x = g.constant(Tensor::zeros(vec![5, 3, 4, 4]));
        let f = g.flatten(x).unwrap();
        assert_eq!(g.value(f).shape(), &[5, 48]);
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let ce = g.softmax_cross_entropy(l, &[0]).unwrap();
        assert!((g.value(ce).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

        let mut g32 = Graph::<f32>::new();
        let l = g32.constant(Tensor::new(vec![1, 2], vec![1000.0f32, 0.0]).unwrap());
        let ce = g32.softmax_cross_entropy(l, &[0]).unwrap();
        let v = g32.value(ce).data()[0];
        assert!(v.is_finite() && v.abs() < 1e-6);

        let l = g.constant(t(&[1, 2], &[0.0, 0.0]));
        assert!(matches!(
            g.softmax_cross_entropy(l, &[2]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::<f64>::new();
        let l = g.leaf(t(&[1, 3], &[1.0, 2.0, 0.5]), true);
        let ce = g.softmax_cross_entropy(l, &[1]).unwrap();
        g.backward(ce).unwrap();
        let z: f64 = [1.0f64, 2.0, 0.5].iter().map(|v| v.exp()).sum();
        let expect = [1f64.exp() / z, 2f64.exp() / z - 1.0, 0.5f64.exp() / z];
        for (a, b) in g.grad(l).unwrap().data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_values() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(t(&[1], &[0.5]));
        let l = g.bce_loss(p, &[1.0]).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let p = g.constant(t(&[1], &[1.0]));
        let l = g.bce_loss(p, &[1.0]).unwrap();
        assert!(g.value(l).data()[0] < 1e-6);
        let p = g.constant(t(&[1], &[0.0]));
        let l = g.bce_loss(p, &[1.0]).unwrap();
        let v = g.value(l).data()[0];
        assert!((v - (-(1e-7f64).ln())).abs() < 1e-9, "{v}");
        let p = g.constant(t(&[1], &[1.5]));
        assert!(matches!(g.bce_loss(p, &[1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn backward_root_gradient_is_one_and_second_call_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(s).unwrap().data(), &[1.0]);
        assert!(matches!(g.backward(s), Err(Error::Graph(_))));
        g.reset_grads();
        g.backward(s).unwrap();
        let y = g.leaf(t(&[2], &[1.0, 2.0]), true);
        g.reset_grads();
        assert!(matches!(g.backward(y), Err(Error::Graph(_))));
    }

    #[test]
    fn nan_output_is_numeric_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1], &[f64::NAN]));
        let w = g.constant(t(&[1, 1], &[1.0]));
        let b = g.constant(t(&[1], &[0.0]));
        assert!(matches!(g.linear(x, w, b), Err(Error::Numeric(_))));
    }
}
