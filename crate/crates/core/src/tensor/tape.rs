use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Batch normalization variance floor.
pub const BN_EPSILON: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which statistics batch normalization normalizes with.
#[derive(Clone, Debug)]
pub enum BnMode {
    /// Statistics of the current batch; gradients flow through them.
    Batch,
    /// Stored running statistics; an affine map per channel.
    Running { mean: Vec<f64>, var: Vec<f64> },
}

pub struct BatchNormOutput {
    pub out: Var,
    /// Per-channel batch mean (only in [`BnMode::Batch`]).
    pub batch_mean: Option<Vec<f64>>,
    /// Per-channel unbiased batch variance (only in [`BnMode::Batch`]).
    pub batch_var: Option<Vec<f64>>,
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu {
        input: Var,
    },
    ClipMax {
        input: Var,
        threshold: Var,
    },
    AddConst {
        input: Var,
    },
    MulConst {
        input: Var,
        factor: Vec<f64>,
    },
    Reshape {
        input: Var,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Single-owner: ops append nodes, [`Tape::backward`] walks them in reverse
/// order exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Per-channel layout shared by both batch-norm input ranks.
struct ChannelLayout {
    channels: usize,
    inner: usize,
    outer: usize,
}

impl ChannelLayout {
    fn of(shape: &[usize]) -> Result<Self> {
        match *shape {
            [n, d] => Ok(ChannelLayout {
                channels: d,
                inner: 1,
                outer: n,
            }),
            [n, c, h, w] => Ok(ChannelLayout {
                channels: c,
                inner: h * w,
                outer: n,
            }),
            _ => Err(Error::config(format!(
                "batchnorm expects a 2-d or 4-d input, got {shape:?}"
            ))),
        }
    }

    fn count(&self) -> usize {
        self.inner * self.outer
    }

    /// Visit every element of `channel` in row-major order.
    fn for_each(&self, channel: usize, mut f: impl FnMut(usize)) {
        for o in 0..self.outer {
            let base = (o * self.channels + channel) * self.inner;
            for i in base..base + self.inner {
                f(i);
            }
        }
    }
}

fn finite(op: &str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::numeric(op, "non-finite value in forward output"))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record an input. Parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = kernels::conv2d_forward(self.value(input), self.value(weight), Some(self.value(bias)))?;
        finite("conv2d", &out)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(out, Op::Conv2d { input, weight, bias }, rg))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = kernels::linear_forward(self.value(input), self.value(weight), Some(self.value(bias)))?;
        finite("linear", &out)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(out, Op::Linear { input, weight, bias }, rg))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2_forward(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::MaxPool2 { input, argmax }, rg))
    }

    pub fn batchnorm(&mut self, input: Var, gamma: Var, beta: Var, mode: BnMode) -> Result<BatchNormOutput> {
        let x = self.value(input);
        let layout = ChannelLayout::of(x.shape())?;
        let c = layout.channels;
        self.value(gamma).expect_shape(&[c])?;
        self.value(beta).expect_shape(&[c])?;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xd = x.data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        let (mut bmean, mut bvar) = (None, None);
        match &mode {
            BnMode::Batch => {
                let m = layout.count() as f64;
                let mut means = vec![0.0; c];
                let mut vars = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    layout.for_each(ch, |i| s += xd[i]);
                    let mean = s / m;
                    let mut ss = 0.0;
                    layout.for_each(ch, |i| ss += (xd[i] - mean) * (xd[i] - mean));
                    let var = ss / m;
                    means[ch] = mean;
                    vars[ch] = if m > 1.0 { ss / (m - 1.0) } else { 0.0 };
                    inv_std[ch] = 1.0 / (var + BN_EPSILON).sqrt();
                    let is = inv_std[ch];
                    layout.for_each(ch, |i| {
                        xhat[i] = (xd[i] - mean) * is;
                        out[i] = g[ch] * xhat[i] + b[ch];
                    });
                }
                bmean = Some(means);
                bvar = Some(vars);
            }
            BnMode::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::config("running statistics do not match channel count"));
                }
                for ch in 0..c {
                    inv_std[ch] = 1.0 / (var[ch] + BN_EPSILON).sqrt();
                    let (mu, is) = (mean[ch], inv_std[ch]);
                    layout.for_each(ch, |i| {
                        xhat[i] = (xd[i] - mu) * is;
                        out[i] = g[ch] * xhat[i] + b[ch];
                    });
                }
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        finite("batchnorm", &out)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let var = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: matches!(mode, BnMode::Batch),
            },
            rg,
        );
        Ok(BatchNormOutput {
            out: var,
            batch_mean: bmean,
            batch_var: bvar,
        })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|x| x.max(0.0));
        let rg = self.rg(input);
        self.push(out, Op::Relu { input }, rg)
    }

    /// Elementwise `min(input, threshold)` with a learnable scalar threshold.
    ///
    /// Backward passes the upstream gradient where `input <= threshold`; the
    /// threshold receives the sum of upstream gradients over clipped positions.
    pub fn clip_max(&mut self, input: Var, threshold: Var) -> Result<Var> {
        self.value(threshold).expect_shape(&[1])?;
        let t = self.value(threshold).data()[0];
        let out = self.value(input).map(|x| x.min(t));
        let rg = self.rg(input) || self.rg(threshold);
        Ok(self.push(out, Op::ClipMax { input, threshold }, rg))
    }

    /// `input + offset` where `offset` is a constant (injected noise).
    pub fn add_const(&mut self, input: Var, offset: &Tensor) -> Result<Var> {
        let out = self.value(input).zip_map(offset, |a, b| a + b)?;
        finite("noise injection", &out)?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::AddConst { input }, rg))
    }

    /// `input * factor` elementwise with a constant factor (dropout masks).
    pub fn mul_const(&mut self, input: Var, factor: Tensor) -> Result<Var> {
        let out = self.value(input).zip_map(&factor, |a, b| a * b)?;
        let rg = self.rg(input);
        Ok(self.push(
            out,
            Op::MulConst {
                input,
                factor: factor.into_data(),
            },
            rg,
        ))
    }

    /// Collapse all but the leading axis.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let v = self.value(input);
        let n = v.shape()[0];
        let out = v.clone().reshape(&[n, v.len() / n.max(1)])?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::Reshape { input }, rg))
    }

    /// Mean softmax cross-entropy over the batch, via log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        let [n, k] = *l.shape() else {
            return Err(Error::config(format!(
                "logits must be 2-d, got {:?}",
                l.shape()
            )));
        };
        if labels.len() != n {
            return Err(Error::data(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (i, (row, &y)) in l.data().chunks(k).zip(labels).enumerate() {
            if y >= k {
                return Err(Error::data(format!("label {y} out of range for {k} classes")));
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= z;
            }
            loss += z.ln() + max - row[y];
        }
        let out = Tensor::scalar(loss / n as f64);
        finite("softmax cross-entropy", &out)?;
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        let rg = self.rg(input);
        self.push(out, Op::Sum { input }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.value(input).map(|x| x * factor);
        let rg = self.rg(input);
        self.push(out, Op::Scale { input, factor }, rg)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Visits nodes in exact reverse execution order. The tape can only be
    /// differentiated once; a second call is a usage error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Usage("backward called on a consumed tape".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes.is_empty() {
            return Ok(Gradients { grads });
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d { input, weight, bias } => {
                    let r = kernels::conv2d_backward(self.value(*input), self.value(*weight), &g, self.rg(*input))?;
                    self.accumulate(&mut grads, *weight, r.weight);
                    self.accumulate(&mut grads, *bias, r.bias);
                    if let Some(dx) = r.input {
                        self.accumulate(&mut grads, *input, dx);
                    }
                }
                Op::Linear { input, weight, bias } => {
                    let r = kernels::linear_backward(self.value(*input), self.value(*weight), &g, self.rg(*input))?;
                    self.accumulate(&mut grads, *weight, r.weight);
                    self.accumulate(&mut grads, *bias, r.bias);
                    if let Some(dx) = r.input {
                        self.accumulate(&mut grads, *input, dx);
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    let dx = kernels::maxpool2_backward(self.value(*input).shape(), argmax, &g);
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let x = self.value(*input);
                    let layout = ChannelLayout::of(x.shape())?;
                    let gam = self.value(*gamma).data();
                    let gd = g.data();
                    let c = layout.channels;
                    let m = layout.count() as f64;
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut dx = vec![0.0; x.len()];
                    for ch in 0..c {
                        let (mut sg, mut sgx) = (0.0, 0.0);
                        layout.for_each(ch, |i| {
                            sg += gd[i];
                            sgx += gd[i] * xhat[i];
                        });
                        dgamma[ch] = sgx;
                        dbeta[ch] = sg;
                        let k = gam[ch] * inv_std[ch];
                        if *batch_stats {
                            layout.for_each(ch, |i| {
                                dx[i] = k * (gd[i] - sg / m - xhat[i] * sgx / m);
                            });
                        } else {
                            layout.for_each(ch, |i| dx[i] = k * gd[i]);
                        }
                    }
                    let shape = x.shape().to_vec();
                    self.accumulate(&mut grads, *gamma, Tensor::new(vec![c], dgamma)?);
                    self.accumulate(&mut grads, *beta, Tensor::new(vec![c], dbeta)?);
                    self.accumulate(&mut grads, *input, Tensor::new(shape, dx)?);
                }
                Op::Relu { input } => {
                    let dx = self.value(*input).zip_map(&g, |x, g| if x > 0.0 { g } else { 0.0 })?;
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::ClipMax { input, threshold } => {
                    let t = self.value(*threshold).data()[0];
                    let x = self.value(*input);
                    let mut dt = 0.0;
                    let dx = x.zip_map(&g, |x, g| if x <= t { g } else { 0.0 })?;
                    for (&xv, &gv) in x.data().iter().zip(g.data()) {
                        if xv > t {
                            dt += gv;
                        }
                    }
                    self.accumulate(&mut grads, *input, dx);
                    self.accumulate(&mut grads, *threshold, Tensor::scalar(dt));
                }
                Op::AddConst { input } | Op::Reshape { input } => {
                    let shape = self.value(*input).shape().to_vec();
                    self.accumulate(&mut grads, *input, g.reshape(&shape)?);
                }
                Op::MulConst { input, factor } => {
                    let mut dx = g;
                    for (d, f) in dx.data_mut().iter_mut().zip(factor) {
                        *d *= f;
                    }
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::SoftmaxCe { logits, labels, probs } => {
                    let shape = self.value(*logits).shape().to_vec();
                    let (n, k) = (shape[0], shape[1]);
                    let scale = g.data()[0] / n as f64;
                    let mut dl = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        dl[i * k + y] -= 1.0;
                    }
                    dl.iter_mut().for_each(|v| *v *= scale);
                    self.accumulate(&mut grads, *logits, Tensor::new(shape, dl)?);
                }
                Op::Sum { input } => {
                    let gv = g.data()[0];
                    let dx = Tensor::full(self.value(*input).shape(), gv);
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::Add { a, b } => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g);
                }
                Op::Scale { input, factor } => {
                    let f = *factor;
                    self.accumulate(&mut grads, *input, g.map(|v| v * f));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.rg(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += v;
                }
            }
            slot => *slot = Some(g),
        }
    }
}
