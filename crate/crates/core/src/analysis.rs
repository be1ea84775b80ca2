//! Post-hoc measurements on trained networks: relative distortion, per-layer
//! noise sensitivity, synaptic current budgets and accuracy-versus-current
//! sweeps.

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, BnStats, ForwardOptions, NetworkState, LAYER_NAMES, RANGE_PERCENTILE};
use crate::noise::{CurrentConfig, NoiseConfig, NoiseKind, Vmm, LAYERS};
use crate::rng;
use crate::stats;
use crate::trainer::{evaluate, EvalConfig};

const DISTORTION_STREAM: u64 = 0x3000;

/// Relative distortions `(Y_n - Y) / (P99 - P1)` of one layer on one batch.
///
/// The range is taken over the clean pre-activations of the batch.
pub fn distortion_samples(
    state: &NetworkState,
    batch: &crate::Tensor,
    noise: &NoiseConfig,
    layer: usize,
    rng: &mut rng::Rng,
) -> Result<Vec<f64>> {
    if layer >= LAYERS {
        return Err(Error::config(format!("layer index {layer} out of range")));
    }
    let opts = ForwardOptions::eval(noise).with_taps();
    let pass = model::forward(state, batch, &opts, rng)?;
    let tap = &pass.taps.expect("taps requested").layers[layer];
    if !(tap.range > 0.0) {
        return Err(Error::numeric(
            LAYER_NAMES[layer],
            "degenerate signal range (P99 == P1): the layer is dead",
        ));
    }
    Ok(tap
        .noisy
        .data()
        .iter()
        .zip(tap.clean.data())
        .map(|(n, c)| (n - c) / tap.range)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistortionSummary {
    pub layer: usize,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub p1: f64,
    pub p99: f64,
    pub bins: Vec<HistogramBin>,
}

/// Equal-width bins over `[-half_width, half_width]`; values outside land in
/// the edge bins.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramSpec {
    pub bins: usize,
    pub half_width: f64,
    pub batch_size: usize,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        HistogramSpec {
            bins: 40,
            half_width: 0.5,
            batch_size: 200,
        }
    }
}

/// Distortion statistics of `layer` over every image of `data`.
pub fn distortion_histogram(
    state: &NetworkState,
    data: &Dataset,
    noise: &NoiseConfig,
    layer: usize,
    spec: HistogramSpec,
    seed: u64,
) -> Result<DistortionSummary> {
    let HistogramSpec {
        bins,
        half_width,
        batch_size,
    } = spec;
    if bins == 0 || !(half_width > 0.0) {
        return Err(Error::config("histogram needs at least one bin and a positive width"));
    }
    let mut rng = rng::stream(seed, DISTORTION_STREAM + layer as u64);
    let mut samples = Vec::new();
    for idx in data.sequential_batches(batch_size) {
        let x = data.images.select_rows(&idx);
        samples.extend(distortion_samples(state, &x, noise, layer, &mut rng)?);
    }
    let width = 2.0 * half_width / bins as f64;
    let mut counts = vec![0u64; bins];
    for &s in &samples {
        let b = ((s + half_width) / width).floor().clamp(0.0, (bins - 1) as f64) as usize;
        counts[b] += 1;
    }
    let mut buf = samples.clone();
    Ok(DistortionSummary {
        layer,
        count: samples.len(),
        mean: stats::mean(&samples),
        std: stats::std_dev(&samples),
        p1: stats::percentile_in_place(&mut buf, 1.0),
        p99: stats::percentile_in_place(&mut buf, 99.0),
        bins: counts
            .into_iter()
            .enumerate()
            .map(|(i, count)| HistogramBin {
                lo: -half_width + i as f64 * width,
                hi: -half_width + (i + 1) as f64 * width,
                count,
            })
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SensitivityRow {
    pub layer: usize,
    pub clean_acc: f64,
    pub noisy_acc: f64,
    pub drop: f64,
    pub noisy_std: f64,
}

/// Accuracy lost when noise is injected into one layer at a time.
///
/// `eval.noise` supplies the noise kind and probe currents. The clean
/// reference uses the same batch-norm statistics as the noisy runs.
pub fn layer_sensitivity(
    state: &NetworkState,
    data: &Dataset,
    eval: &EvalConfig,
    seed: u64,
) -> Result<Vec<SensitivityRow>> {
    eval.validate()?;
    let bn = eval.bn_stats.unwrap_or(BnStats::Batch);
    let clean_cfg = EvalConfig {
        noise: eval.noise.clone().with_kind(NoiseKind::None, eval.noise.scale),
        bn_stats: Some(bn),
        runs: 1,
        ..eval.clone()
    };
    let clean = evaluate(state, data, &clean_cfg, seed)?.mean;
    (0..LAYERS)
        .map(|l| {
            let cfg = EvalConfig {
                noise: eval.noise.clone().only_layer(l),
                bn_stats: Some(bn),
                ..eval.clone()
            };
            let r = evaluate(state, data, &cfg, seed)?;
            Ok(SensitivityRow {
                layer: l,
                clean_acc: clean,
                noisy_acc: r.mean,
                drop: clean - r.mean,
                noisy_std: r.std,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PowerReport {
    /// Mean total synaptic current per image, amperes.
    pub layer_current: [f64; LAYERS],
    /// Percent of the total.
    pub share: [f64; LAYERS],
    pub total: f64,
}

impl PowerReport {
    /// Power in watts for a given supply voltage.
    pub fn watts(&self, supply_voltage: f64) -> f64 {
        self.total * supply_voltage
    }
}

/// Mean synaptic current of each crossbar per image.
///
/// Layer 1 draws `X_i |W_ij| / W_max * I_s,max` per synapse; the analog
/// layers draw `|W_ij| I_i` with input current `I_i = X_i I_in,max / X_max`.
/// Convolutions count every output position as one crossbar evaluation.
pub fn power_report(
    state: &NetworkState,
    data: &Dataset,
    currents: &CurrentConfig,
    batch_size: usize,
) -> Result<PowerReport> {
    currents.validate()?;
    if data.is_empty() {
        return Err(Error::data("calibration set is empty"));
    }
    let clean = NoiseConfig::none();
    let opts = ForwardOptions::eval(&clean).with_taps();
    let mut unused = rng::stream(0, 0);
    let mut sums = [0.0; LAYERS];
    for idx in data.sequential_batches(batch_size) {
        let x = data.images.select_rows(&idx);
        let pass = model::forward(state, &x, &opts, &mut unused)?;
        let taps = pass.taps.expect("taps requested");
        for (l, sum) in sums.iter_mut().enumerate() {
            let w = &state.layers[l].weight;
            let vmm = if l < 2 { Vmm::Conv(w) } else { Vmm::Dense(w) };
            let input = &taps.inputs[l];
            let abs_sum = vmm.apply_with(input, f64::abs)?.sum();
            *sum += if l == 0 {
                let w_max = w.max_abs();
                if w_max == 0.0 {
                    0.0
                } else {
                    abs_sum / w_max * currents.i_max[0]
                }
            } else {
                let x_max = state
                    .input_max(l)
                    .unwrap_or_else(|| stats::percentile(input.data(), RANGE_PERCENTILE));
                if x_max > 0.0 {
                    abs_sum * currents.i_max[l] / x_max
                } else {
                    0.0
                }
            };
        }
    }
    let n = data.len() as f64;
    let layer_current = sums.map(|s| s / n);
    let total: f64 = layer_current.iter().sum();
    let share = layer_current.map(|c| if total > 0.0 { 100.0 * c / total } else { 0.0 });
    Ok(PowerReport {
        layer_current,
        share,
        total,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub i_max: f64,
    pub mean: f64,
    pub std: f64,
    /// Total synaptic current at this budget.
    pub current: f64,
}

/// Accuracy and total current across a grid of uniform maximum currents.
pub fn current_sweep(
    state: &NetworkState,
    data: &Dataset,
    eval: &EvalConfig,
    grid: &[f64],
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    let base = CurrentConfig {
        i_max: [1.0; LAYERS],
        i_res: 0.0,
    };
    let unit = power_report(state, data, &base, eval.batch_size)?.total;
    grid.iter()
        .map(|&i| {
            let mut cfg = eval.clone();
            cfg.noise.currents = CurrentConfig {
                i_max: [i; LAYERS],
                i_res: eval.noise.currents.i_res,
            };
            let r = evaluate(state, data, &cfg, seed)?;
            Ok(SweepPoint {
                i_max: i,
                mean: r.mean,
                std: r.std,
                current: unit * i,
            })
        })
        .collect()
}
