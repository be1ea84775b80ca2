//! The six-layer LeNet-style network and its noisy forward pass.
//!
//! Shape chain: `3x32x32 -> conv1 -> Fx28x28 -> pool -> Fx14x14 -> conv2 ->
//! Gx10x10 -> pool -> Gx5x5 -> fc1 -> H -> fc2 -> 10`. The default widths are
//! `F = 65`, `G = 120`, `H = 390`.
//!
//! Each analog layer runs, in order: VMM, noise injection, batch normalization,
//! activation clipping (hidden layers), ReLU, pooling, dropout.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::clip::{ClipState, CLIPPED_LAYERS};
use crate::error::{Error, Result};
use crate::noise::{self, NoiseConfig, NoiseKind, Vmm, LAYERS};
use crate::rng::{self, Rng};
use crate::stats;
use crate::tensor::{BnMode, Gradients, Tape, Tensor, Var};

pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_SIZE: usize = 32;
pub const KERNEL: usize = 5;
pub const LAYER_NAMES: [&str; LAYERS] = ["conv1", "conv2", "fc1", "fc2"];

/// Percentile used to estimate a layer's maximum output when it is not clipped.
pub const RANGE_PERCENTILE: f64 = 99.9;
/// Momentum of running statistics (batch-norm and output ranges).
pub const RUNNING_MOMENTUM: f64 = 0.1;

const INIT_STREAM: u64 = 0x1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub fc1_units: usize,
    pub classes: usize,
    /// Batch normalization after conv1, conv2 and fc1.
    pub bn_hidden: bool,
    /// Batch normalization on the logits.
    pub bn_output: bool,
    pub input_bits: u32,
    /// Dropout after the ReLU of conv1, conv2 and fc1.
    pub dropout: [f64; CLIPPED_LAYERS],
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            conv1_filters: 65,
            conv2_filters: 120,
            fc1_units: 390,
            classes: 10,
            bn_hidden: true,
            bn_output: false,
            input_bits: 4,
            dropout: [0.0; CLIPPED_LAYERS],
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv1_filters == 0 || self.conv2_filters == 0 || self.fc1_units == 0 {
            return Err(Error::config("layer widths must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if !(1..=8).contains(&self.input_bits) {
            return Err(Error::config(format!(
                "input_bits must be in 1..=8, got {}",
                self.input_bits
            )));
        }
        if self.dropout.iter().any(|&p| !(0.0..1.0).contains(&p)) {
            return Err(Error::config("dropout rates must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Activation shapes (without batch axis) from input to logits.
    pub fn shape_chain(&self) -> Vec<Vec<usize>> {
        let c1 = IMAGE_SIZE - KERNEL + 1;
        let p1 = c1 / 2;
        let c2 = p1 - KERNEL + 1;
        let p2 = c2 / 2;
        vec![
            vec![IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE],
            vec![self.conv1_filters, c1, c1],
            vec![self.conv1_filters, p1, p1],
            vec![self.conv2_filters, c2, c2],
            vec![self.conv2_filters, p2, p2],
            vec![self.fc1_units],
            vec![self.classes],
        ]
    }

    pub fn fc1_inputs(&self) -> usize {
        let c1 = IMAGE_SIZE - KERNEL + 1;
        let c2 = c1 / 2 - KERNEL + 1;
        let p2 = c2 / 2;
        self.conv2_filters * p2 * p2
    }

    fn weight_shapes(&self) -> [Vec<usize>; LAYERS] {
        [
            vec![self.conv1_filters, IMAGE_CHANNELS, KERNEL, KERNEL],
            vec![self.conv2_filters, self.conv1_filters, KERNEL, KERNEL],
            vec![self.fc1_inputs(), self.fc1_units],
            vec![self.fc1_units, self.classes],
        ]
    }

    fn layer_widths(&self) -> [usize; LAYERS] {
        [self.conv1_filters, self.conv2_filters, self.fc1_units, self.classes]
    }

    fn has_bn(&self, layer: usize) -> bool {
        if layer == LAYERS - 1 {
            self.bn_output
        } else {
            self.bn_hidden
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnParams {
    fn new(channels: usize) -> Self {
        BnParams {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Metadata {
    pub seed: u64,
    pub epoch: usize,
    pub config_hash: String,
    /// Test accuracy recorded when this state was selected as best.
    pub test_accuracy: Option<f64>,
}

/// Every learned quantity of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    pub config: NetworkConfig,
    /// conv1, conv2, fc1, fc2.
    pub layers: [LayerParams; LAYERS],
    pub bn: [Option<BnParams>; LAYERS],
    pub clip: ClipState,
    /// Running estimate of each hidden layer's maximum output, 0 until observed.
    pub act_range: [f64; CLIPPED_LAYERS],
    pub meta: Metadata,
}

/// He-initialized network.
pub fn build_network(config: &NetworkConfig, seed: u64) -> Result<NetworkState> {
    config.validate()?;
    let mut rng = rng::stream(seed, INIT_STREAM);
    let shapes = config.weight_shapes();
    let widths = config.layer_widths();
    let layers: [LayerParams; LAYERS] = std::array::from_fn(|l| {
        let shape = &shapes[l];
        let fan_in: usize = if shape.len() == 4 {
            shape[1..].iter().product()
        } else {
            shape[0]
        };
        let std = (2.0 / fan_in as f64).sqrt();
        LayerParams {
            weight: Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal)),
            bias: Tensor::zeros(&[widths[l]]),
        }
    });
    let bn = std::array::from_fn(|l| config.has_bn(l).then(|| BnParams::new(widths[l])));
    Ok(NetworkState {
        config: config.clone(),
        layers,
        bn,
        clip: ClipState::default(),
        act_range: [0.0; CLIPPED_LAYERS],
        meta: Metadata {
            seed,
            ..Metadata::default()
        },
    })
}

impl NetworkState {
    /// Names of the trainable parameter groups, aligned with [`Self::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (l, name) in LAYER_NAMES.iter().enumerate() {
            names.push(format!("{name}.weight"));
            names.push(format!("{name}.bias"));
            if self.bn[l].is_some() {
                names.push(format!("{name}.bn.gamma"));
                names.push(format!("{name}.bn.beta"));
            }
        }
        names.push("clip.y_thr".into());
        names
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in 0..LAYERS {
            out.push(self.layers[l].weight.data());
            out.push(self.layers[l].bias.data());
            if let Some(bn) = &self.bn[l] {
                out.push(bn.gamma.data());
                out.push(bn.beta.data());
            }
        }
        out.push(&self.clip.y_thr);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for (layer, bn) in self.layers.iter_mut().zip(self.bn.iter_mut()) {
            out.push(layer.weight.data_mut());
            out.push(layer.bias.data_mut());
            if let Some(bn) = bn {
                out.push(bn.gamma.data_mut());
                out.push(bn.beta.data_mut());
            }
        }
        out.push(&mut self.clip.y_thr);
        out
    }

    /// Index of the threshold group in [`Self::params`].
    pub fn threshold_group(&self) -> usize {
        self.params().len() - 1
    }

    /// Group indices of the four layer weights.
    pub fn weight_groups(&self) -> [usize; LAYERS] {
        let mut idx = [0; LAYERS];
        let mut at = 0;
        for (l, slot) in idx.iter_mut().enumerate() {
            *slot = at;
            at += if self.bn[l].is_some() { 4 } else { 2 };
        }
        idx
    }

    /// Scalar count of learnable network parameters (weights, biases and
    /// batch-norm affine terms; thresholds excluded).
    pub fn parameter_count(&self) -> usize {
        let p = self.params();
        p[..p.len() - 1].iter().map(|s| s.len()).sum()
    }

    /// Weights flattened in layer order.
    pub fn flat_weights(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data().iter().cloned())
            .collect()
    }

    pub fn set_flat_weights(&mut self, flat: &[f64]) {
        let mut at = 0;
        for layer in &mut self.layers {
            let n = layer.weight.len();
            layer.weight.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
    }

    /// Effective maximum of the input to analog layer `layer` (1..=3).
    pub fn input_max(&self, layer: usize) -> Option<f64> {
        let prev = layer - 1;
        if self.clip.enabled && self.clip.initialized {
            Some(self.clip.y_thr[prev])
        } else if self.act_range[prev] > 0.0 {
            Some(self.act_range[prev])
        } else {
            None
        }
    }

    /// Fold the statistics observed on a training batch into the running
    /// estimates.
    pub fn update_running(&mut self, obs: &Observations) {
        let m = RUNNING_MOMENTUM;
        for (bn, batch) in self.bn.iter_mut().zip(&obs.bn_batch) {
            if let (Some(bn), Some((mean, var))) = (bn, batch) {
                for (r, b) in bn.running_mean.iter_mut().zip(mean) {
                    *r = (1.0 - m) * *r + m * b;
                }
                for (r, b) in bn.running_var.iter_mut().zip(var) {
                    *r = (1.0 - m) * *r + m * b;
                }
            }
        }
        for (r, &o) in self.act_range.iter_mut().zip(&obs.output_p999) {
            if o.is_finite() && o > 0.0 {
                *r = if *r > 0.0 { (1.0 - m) * *r + m * o } else { o };
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnStats {
    /// Statistics of the current batch.
    Batch,
    /// Stored running statistics.
    Running,
}

pub struct ForwardOptions<'a> {
    pub phase: Phase,
    pub bn_stats: BnStats,
    pub noise: &'a NoiseConfig,
    /// Record clean and noisy pre-activations.
    pub taps: bool,
    /// Record percentile statistics used for calibration.
    pub observe: bool,
}

impl<'a> ForwardOptions<'a> {
    pub fn train(noise: &'a NoiseConfig) -> Self {
        ForwardOptions {
            phase: Phase::Train,
            bn_stats: BnStats::Batch,
            noise,
            taps: false,
            observe: true,
        }
    }

    /// Inference; batch statistics under noise, running statistics otherwise.
    pub fn eval(noise: &'a NoiseConfig) -> Self {
        ForwardOptions {
            phase: Phase::Eval,
            bn_stats: if noise.kind.is_none() {
                BnStats::Running
            } else {
                BnStats::Batch
            },
            noise,
            taps: false,
            observe: false,
        }
    }

    pub fn with_bn_stats(mut self, bn: BnStats) -> Self {
        self.bn_stats = bn;
        self
    }

    pub fn with_taps(mut self) -> Self {
        self.taps = true;
        self
    }
}

/// Clean and noisy pre-activations of one layer.
#[derive(Clone, Debug)]
pub struct LayerTap {
    pub clean: Tensor,
    pub noisy: Tensor,
    /// P99 - P1 of the clean pre-activations.
    pub range: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardTaps {
    pub layers: Vec<LayerTap>,
    /// Inputs seen by each analog layer.
    pub inputs: Vec<Tensor>,
}

#[derive(Clone, Debug, Default)]
pub struct Observations {
    /// Per batch-norm layer: batch mean and unbiased variance.
    pub bn_batch: [Option<(Vec<f64>, Vec<f64>)>; LAYERS],
    /// 99.9th percentile of each hidden layer's normalized pre-activation.
    pub post_bn_p999: [f64; CLIPPED_LAYERS],
    /// 99.9th percentile of each hidden layer's output.
    pub output_p999: [f64; CLIPPED_LAYERS],
}

/// A recorded forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    pub logits: Var,
    param_vars: Vec<Var>,
    threshold_vars: [Var; CLIPPED_LAYERS],
    pub taps: Option<ForwardTaps>,
    pub observations: Observations,
}

/// Gradients aligned with [`NetworkState::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn zeros_like(state: &NetworkState) -> Self {
        Grads(state.params().iter().map(|p| vec![0.0; p.len()]).collect())
    }

    pub fn flat_weights(&self, state: &NetworkState) -> Vec<f64> {
        state
            .weight_groups()
            .iter()
            .flat_map(|&g| self.0[g].iter().cloned())
            .collect()
    }

    pub fn add_flat_weights(&mut self, state: &NetworkState, flat: &[f64]) {
        let mut at = 0;
        for g in state.weight_groups() {
            for v in &mut self.0[g] {
                *v += flat[at];
                at += 1;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().flatten().all(|g| g.is_finite())
    }
}

impl ForwardPass {
    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(self.tape.value(self.logits))
    }

    pub fn cross_entropy(&mut self, labels: &[usize]) -> Result<Var> {
        self.tape.softmax_cross_entropy(self.logits, labels)
    }

    pub fn gradients(&mut self, loss: Var) -> Result<Grads> {
        let mut g: Gradients = self.tape.backward(loss)?;
        let mut out: Vec<Vec<f64>> = self
            .param_vars
            .iter()
            .map(|&v| {
                g.take(v)
                    .map(Tensor::into_data)
                    .unwrap_or_else(|| vec![0.0; self.tape.value(v).len()])
            })
            .collect();
        out.push(
            self.threshold_vars
                .iter()
                .map(|&v| g.get(v).map_or(0.0, |t| t.data()[0]))
                .collect(),
        );
        Ok(Grads(out))
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn at_layer(layer: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric { layer: op, detail } => {
            Error::numeric(format!("{} ({op})", LAYER_NAMES[layer]), detail)
        }
        other => other,
    }
}

/// Perturbation added to a layer's pre-activations.
fn layer_offsets(
    state: &NetworkState,
    layer: usize,
    input: &Tensor,
    pre: &Tensor,
    noise: &NoiseConfig,
    rng: &mut Rng,
) -> Result<Tensor> {
    let weight = &state.layers[layer].weight;
    let vmm = if layer < 2 { Vmm::Conv(weight) } else { Vmm::Dense(weight) };
    match noise.kind {
        NoiseKind::Accurate | NoiseKind::AccurateScaled(_) => {
            let factor = noise.kind.accurate_factor().unwrap_or(1.0);
            let i_max = noise.currents.i_max[layer];
            let mut var = if layer == 0 {
                noise::variance_layer1(input, vmm, i_max, &noise.constants)?
            } else {
                let x_max = state
                    .input_max(layer)
                    .unwrap_or_else(|| stats::percentile(input.data(), RANGE_PERCENTILE));
                noise::variance_analog(input, vmm, x_max, i_max, &noise.constants)?
            };
            if factor != 1.0 {
                var = var.map(|v| v * factor);
            }
            noise::gaussian_offsets(&var, rng)
        }
        kind => {
            let range = match kind {
                NoiseKind::UniformRange | NoiseKind::NormalRange => stats::signal_range(pre.data()),
                _ => 0.0,
            };
            noise::alt_offsets(pre, kind, range, noise.scale, rng)
        }
    }
}

/// Run the network on a batch of images `[N, 3, 32, 32]`.
pub fn forward(
    state: &NetworkState,
    batch: &Tensor,
    opts: &ForwardOptions<'_>,
    rng: &mut Rng,
) -> Result<ForwardPass> {
    let n = batch.shape().first().copied().unwrap_or(0);
    batch.expect_shape(&[n, IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE])?;
    let train = opts.phase == Phase::Train;
    let mut tape = Tape::new();
    let mut param_vars = Vec::new();
    let mut layer_vars = Vec::with_capacity(LAYERS);
    for l in 0..LAYERS {
        let w = tape.leaf(state.layers[l].weight.clone(), train);
        let b = tape.leaf(state.layers[l].bias.clone(), train);
        param_vars.push(w);
        param_vars.push(b);
        let bn = state.bn[l].as_ref().map(|bn| {
            let g = tape.leaf(bn.gamma.clone(), train);
            let be = tape.leaf(bn.beta.clone(), train);
            param_vars.push(g);
            param_vars.push(be);
            (g, be)
        });
        layer_vars.push((w, b, bn));
    }
    let threshold_vars: [Var; CLIPPED_LAYERS] =
        std::array::from_fn(|l| tape.leaf(Tensor::scalar(state.clip.y_thr[l]), train && state.clip.enabled));

    let mut taps = opts.taps.then(ForwardTaps::default);
    let mut obs = Observations::default();
    let mut x = tape.leaf(batch.clone(), false);

    for l in 0..LAYERS {
        let (w, b, bn) = layer_vars[l];
        let err = at_layer(l);
        let mut h = if l < 2 {
            tape.conv2d(x, w, b).map_err(&err)?
        } else {
            tape.linear(x, w, b).map_err(&err)?
        };
        let clean = opts.taps.then(|| tape.value(h).clone());
        if opts.noise.is_active(l) {
            let offsets = layer_offsets(state, l, tape.value(x), tape.value(h), opts.noise, rng).map_err(&err)?;
            h = tape.add_const(h, &offsets).map_err(&err)?;
        }
        if let Some(taps) = taps.as_mut() {
            let clean = clean.expect("taps enabled");
            let range = stats::signal_range(clean.data());
            taps.inputs.push(tape.value(x).clone());
            taps.layers.push(LayerTap {
                noisy: tape.value(h).clone(),
                clean,
                range,
            });
        }
        if let (Some((g, be)), Some(params)) = (bn, state.bn[l].as_ref()) {
            let mode = match opts.bn_stats {
                BnStats::Batch => BnMode::Batch,
                BnStats::Running => BnMode::Running {
                    mean: params.running_mean.clone(),
                    var: params.running_var.clone(),
                },
            };
            let out = tape.batchnorm(h, g, be, mode).map_err(&err)?;
            if let (Some(m), Some(v)) = (out.batch_mean, out.batch_var) {
                obs.bn_batch[l] = Some((m, v));
            }
            h = out.out;
        }
        if l == LAYERS - 1 {
            x = h;
            break;
        }
        if opts.observe {
            obs.post_bn_p999[l] = stats::percentile(tape.value(h).data(), RANGE_PERCENTILE);
        }
        if state.clip.enabled {
            h = tape.clip_max(h, threshold_vars[l]).map_err(&err)?;
        }
        h = tape.relu(h);
        if l < 2 {
            h = tape.maxpool2(h).map_err(&err)?;
        }
        if l == 1 {
            h = tape.flatten(h)?;
        }
        if opts.observe {
            obs.output_p999[l] = stats::percentile(tape.value(h).data(), RANGE_PERCENTILE);
        }
        let p = state.config.dropout[l];
        if train && p > 0.0 {
            let keep = 1.0 / (1.0 - p);
            let mask = tape
                .value(h)
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep });
            h = tape.mul_const(h, mask)?;
        }
        x = h;
    }

    Ok(ForwardPass {
        tape,
        logits: x,
        param_vars,
        threshold_vars,
        taps,
        observations: obs,
    })
}
