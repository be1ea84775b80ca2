//! Training loop and noisy evaluation.

use serde::{Deserialize, Serialize};

use crate::clip::{self, RegConfig, CLIPPED_LAYERS, MIN_THRESHOLD};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::model::{self, BnStats, ForwardOptions, Grads, NetworkState, Observations};
use crate::noise::{self, NoiseConfig, LAYERS};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, Rng};
use crate::stats;
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 0x2;
const AUGMENT_STREAM: u64 = 0x3;
const NOISE_STREAM: u64 = 0x4;
const TRAIN_PROGRAM_STREAM: u64 = 0x6;
const EVAL_STREAM: u64 = 0x1000;
const EVAL_PROGRAM_STREAM: u64 = 0x2000;

/// Activation clipping and weight clipping settings for a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipSettings {
    pub enabled: bool,
    /// Symmetric first-layer weight range.
    pub w_clip_t: Option<f64>,
    pub alpha: f64,
    pub thr_lr: Option<f64>,
    /// Thresholds start at this multiple of the calibrated percentile.
    pub init_scale: f64,
}

impl Default for ClipSettings {
    fn default() -> Self {
        ClipSettings {
            enabled: false,
            w_clip_t: None,
            alpha: 0.0,
            thr_lr: None,
            init_scale: 1.0,
        }
    }
}

impl ClipSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.init_scale > 0.0) {
            return Err(Error::config("clip init_scale must be positive"));
        }
        if let Some(lr) = self.thr_lr {
            if !(lr >= 0.0) {
                return Err(Error::config("thr_lr must be non-negative"));
            }
        }
        let probe = clip::ClipState {
            w_clip_t: self.w_clip_t,
            alpha: self.alpha,
            ..clip::ClipState::default()
        };
        probe.validate()
    }

    pub fn apply(&self, state: &mut NetworkState) {
        state.clip.enabled = self.enabled;
        state.clip.w_clip_t = self.w_clip_t;
        state.clip.alpha = self.alpha;
        state.clip.thr_lr = self.thr_lr;
    }
}

/// How a network is scored on a test set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub noise: NoiseConfig,
    /// Resample weight-programming distortion once per run.
    pub programming: bool,
    pub program_layers: [bool; LAYERS],
    pub runs: usize,
    pub batch_size: usize,
    /// Override of the default (batch statistics under noise, running otherwise).
    pub bn_stats: Option<BnStats>,
}

impl EvalConfig {
    pub fn new(noise: NoiseConfig) -> Self {
        EvalConfig {
            noise,
            programming: false,
            program_layers: [true; LAYERS],
            runs: 5,
            batch_size: 200,
            bn_stats: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        if self.runs == 0 {
            return Err(Error::config("evaluation needs at least one run"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("evaluation batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub adam: AdamConfig,
    pub augment: bool,
    /// Noise injected into pre-activations while training.
    pub noise: NoiseConfig,
    /// Apply programming distortion to the weights of every training batch.
    pub program_during_training: bool,
    pub clip: ClipSettings,
    pub reg: RegConfig,
    /// Scoring used to choose the retained checkpoint.
    pub select: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let mut select = EvalConfig::new(NoiseConfig::none());
        select.runs = 1;
        TrainConfig {
            epochs: 250,
            batch_size: 64,
            lr: 5e-4,
            lr_decay: 0.1,
            lr_decay_every: 100,
            adam: AdamConfig::default(),
            augment: true,
            noise: NoiseConfig::none(),
            program_during_training: false,
            clip: ClipSettings::default(),
            reg: RegConfig::default(),
            select,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be non-negative"));
        }
        if !(self.lr_decay > 0.0) || self.lr_decay_every == 0 {
            return Err(Error::config("lr_decay must be positive and lr_decay_every at least 1"));
        }
        self.noise.validate()?;
        self.clip.validate()?;
        self.reg.validate()?;
        self.select.validate()
    }

    /// Learning-rate multiplier for a 0-based epoch.
    pub fn lr_factor(&self, epoch: usize) -> f64 {
        self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub test_std: f64,
    pub thresholds: [f64; CLIPPED_LAYERS],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub skipped_steps: usize,
    /// Epoch of the retained checkpoint, 0 for the initial network.
    pub best_epoch: usize,
    pub best_test_acc: Option<f64>,
    /// Thresholds right after calibration.
    pub initial_thresholds: Option<[f64; CLIPPED_LAYERS]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub mean: f64,
    pub std: f64,
    pub runs: Vec<f64>,
}

/// Output of one optimization step's gradient computation.
pub struct StepOutput {
    pub cross_entropy: f64,
    /// Cross-entropy plus every enabled penalty.
    pub loss: f64,
    pub grads: Grads,
    pub predictions: Vec<usize>,
    pub observations: Observations,
}

/// All weights of `state` with programming distortion applied.
pub fn programmed(state: &NetworkState, noise: &NoiseConfig, layers: &[bool; LAYERS], rng: &mut Rng) -> NetworkState {
    let mut out = state.clone();
    for (l, layer) in out.layers.iter_mut().enumerate() {
        if layers[l] {
            layer.weight =
                noise::program_weights(&layer.weight, noise.currents.i_res, noise.currents.i_max[l], rng);
        }
    }
    out
}

/// Set activation thresholds and output ranges from a clean pass over one
/// batch.
pub fn calibrate(state: &mut NetworkState, batch: &Tensor, init_scale: f64) -> Result<()> {
    let clean = NoiseConfig::none();
    let opts = ForwardOptions {
        observe: true,
        ..ForwardOptions::train(&clean)
    };
    let mut unused = rng::stream(0, 0);
    let saved = state.clip.enabled;
    state.clip.enabled = false;
    let pass = model::forward(state, batch, &opts, &mut unused);
    state.clip.enabled = saved;
    let obs = pass?.observations;
    state.act_range = obs.output_p999.map(|v| v.max(MIN_THRESHOLD));
    if state.clip.enabled {
        state.clip.y_thr = obs.post_bn_p999.map(|v| (init_scale * v).max(MIN_THRESHOLD));
        state.clip.initialized = true;
    }
    Ok(())
}

fn ce_weight_grads(
    state: &NetworkState,
    batch: &Tensor,
    labels: &[usize],
    opts: &ForwardOptions<'_>,
    rng: &Rng,
) -> Result<Vec<f64>> {
    let mut r = rng.clone();
    let mut pass = model::forward(state, batch, opts, &mut r)?;
    let ce = pass.cross_entropy(labels)?;
    Ok(pass.gradients(ce)?.flat_weights(state))
}

/// Loss and gradients for one batch, including every enabled penalty.
pub fn compute_step(
    state: &NetworkState,
    batch: &Tensor,
    labels: &[usize],
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<StepOutput> {
    let opts = ForwardOptions::train(&config.noise);
    let snapshot = rng.clone();
    let mut pass = model::forward(state, batch, &opts, rng)?;
    let predictions = pass.predictions();
    let ce_var = pass.cross_entropy(labels)?;
    let cross_entropy = pass.tape.value(ce_var).data()[0];
    let mut grads = pass.gradients(ce_var)?;
    let observations = std::mem::take(&mut pass.observations);
    let mut loss = cross_entropy;

    let reg = &config.reg;
    if reg.lambda_e2 > 0.0 || reg.lambda_e3 > 0.0 {
        let w = state.flat_weights();
        let g = grads.flat_weights(state);
        let mut probe = state.clone();
        let no_observe = ForwardOptions {
            observe: false,
            ..ForwardOptions::train(&config.noise)
        };
        let mut grad_at = |wv: &[f64]| {
            probe.set_flat_weights(wv);
            ce_weight_grads(&probe, batch, labels, &no_observe, &snapshot)
        };
        if reg.lambda_e2 > 0.0 {
            if let Some(extra) = clip::grad_e2(&mut grad_at, &w, &g, reg.lambda_e2, reg.hvp_epsilon)? {
                loss += reg.lambda_e2 * g.iter().map(|x| x * x).sum::<f64>();
                grads.add_flat_weights(state, &extra);
            }
        }
        if reg.lambda_e3 > 0.0 {
            if let Some(e3) = clip::grad_e3prime(&mut grad_at, &w, reg.lambda_e3, reg.hvp_epsilon)? {
                loss += reg.lambda_e3 * e3.value;
                grads.add_flat_weights(state, &e3.gradient);
            }
        }
    }

    let groups = state.weight_groups();
    if reg.lambda_e1 > 0.0 {
        let weights: Vec<&Tensor> = state.layers.iter().map(|l| &l.weight).collect();
        loss += clip::penalty_e1(&weights, reg.lambda_e1, &reg.e1_layers);
        for (l, layer) in state.layers.iter().enumerate() {
            if reg.e1_layers[l] {
                let extra = clip::grad_e1(layer.weight.data(), reg.lambda_e1);
                for (g, e) in grads.0[groups[l]].iter_mut().zip(extra) {
                    *g += e;
                }
            }
        }
    }

    if state.clip.enabled && state.clip.alpha > 0.0 {
        let (value, tg) = clip::threshold_penalty(
            &state.clip.y_thr,
            &config.noise.currents.i_max[..CLIPPED_LAYERS],
            state.clip.alpha,
        );
        loss += value;
        let t = state.threshold_group();
        for (g, e) in grads.0[t].iter_mut().zip(tg) {
            *g += e;
        }
    }

    if let Some(c) = reg.grad_clip {
        let t = state.threshold_group();
        for (i, g) in grads.0.iter_mut().enumerate() {
            if i != t {
                clip::clip_gradients(g, c);
            }
        }
    }

    Ok(StepOutput {
        cross_entropy,
        loss,
        grads,
        predictions,
        observations,
    })
}

/// Train `state` on `train` (already quantized) and keep the parameters with
/// the best test accuracy.
pub fn train(
    config: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    mut state: NetworkState,
    seed: u64,
) -> Result<(NetworkState, TrainReport)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    config.clip.apply(&mut state);
    state.meta.seed = seed;
    let mut report = TrainReport::default();
    if config.epochs == 0 {
        return Ok((state, report));
    }

    let mut shuffle_rng = rng::stream(seed, SHUFFLE_STREAM);
    let mut augment_rng = rng::stream(seed, AUGMENT_STREAM);
    let mut noise_rng = rng::stream(seed, NOISE_STREAM);
    let mut program_rng = rng::stream(seed, TRAIN_PROGRAM_STREAM);
    let sizes: Vec<usize> = state.params().iter().map(|p| p.len()).collect();
    let mut adam = Adam::new(config.adam, &sizes);
    let thr_group = state.threshold_group();
    let mut best: Option<(f64, NetworkState)> = None;

    for epoch in 0..config.epochs {
        let factor = config.lr_factor(epoch);
        let mut lrs = vec![config.lr * factor; sizes.len()];
        lrs[thr_group] = state.clip.thr_lr.unwrap_or(config.lr) * factor;
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);

        for idx in train.shuffled_batches(config.batch_size, &mut shuffle_rng) {
            let mut x = train.images.select_rows(&idx);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            if config.augment {
                x = data::augment(&x, &mut augment_rng);
            }
            let needs_calibration = state.act_range.iter().all(|&r| r == 0.0)
                || (state.clip.enabled && !state.clip.initialized);
            if needs_calibration {
                calibrate(&mut state, &x, config.clip.init_scale)?;
                if state.clip.enabled {
                    report.initial_thresholds = Some(state.clip.y_thr);
                }
            }
            let step = if config.program_during_training {
                let fwd = programmed(&state, &config.noise, &[true; LAYERS], &mut program_rng);
                compute_step(&fwd, &x, &labels, config, &mut noise_rng)?
            } else {
                compute_step(&state, &x, &labels, config, &mut noise_rng)?
            };
            if !step.loss.is_finite() {
                return Err(Error::numeric(
                    "training",
                    format!("loss diverged to {} in epoch {}", step.loss, epoch + 1),
                ));
            }
            loss_sum += step.loss * labels.len() as f64;
            correct += step.predictions.iter().zip(&labels).filter(|(p, l)| p == l).count();
            seen += labels.len();

            if adam.step(&mut state.params_mut(), &step.grads.0, &lrs) {
                if let Some(t) = state.clip.w_clip_t {
                    clip::clip_weights(&mut state.layers[0].weight, t);
                }
                state.clip.reproject();
                state.update_running(&step.observations);
            }
        }

        let eval = evaluate(&state, test, &config.select, seed)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr: config.lr * factor,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            test_acc: eval.mean,
            test_std: eval.std,
            thresholds: state.clip.y_thr,
        };
        log::info!(
            "epoch {:>3}  loss {:.4}  train {:.4}  test {:.4}",
            record.epoch,
            record.train_loss,
            record.train_acc,
            record.test_acc
        );
        if best.as_ref().is_none_or(|(acc, _)| eval.mean > *acc) {
            let mut keep = state.clone();
            keep.meta.epoch = epoch + 1;
            keep.meta.test_accuracy = Some(eval.mean);
            best = Some((eval.mean, keep));
            report.best_epoch = epoch + 1;
            report.best_test_acc = Some(eval.mean);
        }
        report.epochs.push(record);
    }
    report.skipped_steps = adam.skipped;
    let (_, best) = best.expect("at least one epoch");
    Ok((best, report))
}

/// Accuracy under `config.noise` averaged over independent runs.
pub fn evaluate(state: &NetworkState, data: &Dataset, config: &EvalConfig, seed: u64) -> Result<EvalResult> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::data("evaluation set is empty"));
    }
    let mut opts = ForwardOptions::eval(&config.noise);
    if let Some(bn) = config.bn_stats {
        opts.bn_stats = bn;
    }
    let batches = data.sequential_batches(config.batch_size);
    let mut runs = Vec::with_capacity(config.runs);
    for r in 0..config.runs as u64 {
        let mut noise_rng = rng::stream(seed, EVAL_STREAM + r);
        let programmed_state;
        let net = if config.programming {
            let mut prng = rng::stream(seed, EVAL_PROGRAM_STREAM + r);
            programmed_state = programmed(state, &config.noise, &config.program_layers, &mut prng);
            &programmed_state
        } else {
            state
        };
        let mut correct = 0usize;
        for idx in &batches {
            let x = data.images.select_rows(idx);
            let pass = model::forward(net, &x, &opts, &mut noise_rng)?;
            correct += pass
                .predictions()
                .iter()
                .zip(idx)
                .filter(|(p, &i)| **p == data.labels[i])
                .count();
        }
        runs.push(correct as f64 / data.len() as f64);
    }
    Ok(EvalResult {
        mean: stats::mean(&runs),
        std: stats::std_dev(&runs),
        runs,
    })
}
