//! Hardware noise models.
//!
//! Shot noise of a subthreshold device conducting current `I` has spectral
//! density `2qI`. Integrated over the equivalent noise bandwidth `B0` and
//! referred back to software units, the pre-activation variance is
//!
//! ```text
//! layer 1 (digital-input merged-DAC VMM):
//!     sigma_j^2 = 2 q B0 * (W_max / I_s,max) * sum_i X_i |W_ij|
//! layers 2-4 (analog current-mode VMM):
//!     sigma_j^2 = 2 q B0 * (X_max / I_in,max) * sum_i X_i (|W_ij| + |W_ij|^2)
//! ```
//!
//! and the noisy pre-activation is `Y_j + N(0, sigma_j^2)`. This module also
//! carries the surrogate training-noise families used for comparison and the
//! weight-programming distortion applied at inference.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{kernels, Tensor};

/// Number of analog layers (conv1, conv2, fc1, fc2).
pub const LAYERS: usize = 4;

pub const ELECTRON_CHARGE: f64 = 1.602176634e-19;
pub const NOISE_BANDWIDTH: f64 = 2.5e8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicalConstants {
    /// Electron charge, coulomb.
    pub q: f64,
    /// Equivalent noise bandwidth, hertz.
    pub b0: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        PhysicalConstants {
            q: ELECTRON_CHARGE,
            b0: NOISE_BANDWIDTH,
        }
    }
}

impl PhysicalConstants {
    /// `2 q B0`, the shot-noise variance per ampere of device current.
    pub fn shot_factor(&self) -> f64 {
        2.0 * self.q * self.b0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.b0 > 0.0) {
            return Err(Error::config("q and b0 must be strictly positive"));
        }
        Ok(())
    }
}

/// Designated maximum currents per layer, in amperes.
///
/// Layer 1 reads its entry as `I_s,max` (maximum synapse current); the analog
/// layers read theirs as `I_in,max` (maximum input current).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurrentConfig {
    pub i_max: [f64; LAYERS],
    /// Weight programming resolution current.
    pub i_res: f64,
}

pub const NANOAMP: f64 = 1e-9;

impl CurrentConfig {
    pub fn uniform(i_max: f64) -> Self {
        CurrentConfig {
            i_max: [i_max; LAYERS],
            i_res: 0.1 * NANOAMP,
        }
    }

    /// The hand-tuned per-layer budget of 1.8 / 1.4 / 5 / 40 nA.
    pub fn sec6_preset() -> Self {
        CurrentConfig {
            i_max: [1.8 * NANOAMP, 1.4 * NANOAMP, 5.0 * NANOAMP, 40.0 * NANOAMP],
            i_res: 0.1 * NANOAMP,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        CurrentConfig {
            i_max: self.i_max.map(|i| i * factor),
            i_res: self.i_res,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.i_max.iter().any(|&i| !(i > 0.0 && i.is_finite())) {
            return Err(Error::config(format!(
                "every maximum current must be positive, got {:?}",
                self.i_max
            )));
        }
        let min = self.i_max.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(self.i_res >= 0.0 && self.i_res <= min) {
            return Err(Error::config(format!(
                "i_res {} must lie in [0, min(i_max) = {min}]",
                self.i_res
            )));
        }
        Ok(())
    }
}

impl Default for CurrentConfig {
    fn default() -> Self {
        Self::uniform(NANOAMP)
    }
}

/// Noise family injected into pre-activations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseKind {
    None,
    /// Shot-noise model of the hardware.
    Accurate,
    /// Shot-noise model with every variance multiplied by a factor.
    AccurateScaled(f64),
    /// `U(-sR, sR)`, `R` the layer's P99 - P1 range.
    UniformRange,
    /// `N(0, (sR)^2)`.
    NormalRange,
    /// `N(0, s |y|)`.
    NormalMagnitude,
    /// `y` replaced by a uniform draw on `[0.5y, 2y]`.
    StochM,
}

impl NoiseKind {
    pub fn is_none(&self) -> bool {
        matches!(self, NoiseKind::None)
    }

    /// Variance multiplier applied to the shot-noise closed forms.
    pub fn accurate_factor(&self) -> Option<f64> {
        match *self {
            NoiseKind::Accurate => Some(1.0),
            NoiseKind::AccurateScaled(f) => Some(f),
            _ => None,
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseKind::None => write!(f, "none"),
            NoiseKind::Accurate => write!(f, "accurate"),
            NoiseKind::AccurateScaled(s) => write!(f, "accurate_scaled:{s}"),
            NoiseKind::UniformRange => write!(f, "uniform_range"),
            NoiseKind::NormalRange => write!(f, "normal_range"),
            NoiseKind::NormalMagnitude => write!(f, "normal_magnitude"),
            NoiseKind::StochM => write!(f, "stoch_m"),
        }
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s.trim() {
            "none" => NoiseKind::None,
            "accurate" => NoiseKind::Accurate,
            "uniform_range" => NoiseKind::UniformRange,
            "normal_range" => NoiseKind::NormalRange,
            "normal_magnitude" => NoiseKind::NormalMagnitude,
            "stoch_m" => NoiseKind::StochM,
            other => match other.strip_prefix("accurate_scaled:") {
                Some(f) => {
                    let f: f64 = f
                        .parse()
                        .map_err(|_| Error::config(format!("bad scale factor in {other:?}")))?;
                    if !(f > 0.0) {
                        return Err(Error::config("accurate_scaled factor must be positive"));
                    }
                    NoiseKind::AccurateScaled(f)
                }
                None => return Err(Error::config(format!("unknown noise kind {other:?}"))),
            },
        };
        Ok(kind)
    }
}

impl Serialize for NoiseKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NoiseKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything needed to decide the noise added to each layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseConfig {
    pub constants: PhysicalConstants,
    pub currents: CurrentConfig,
    pub kind: NoiseKind,
    /// Multiplier for the surrogate kinds (`s` above).
    pub scale: f64,
    /// Which layers receive noise.
    pub layers: [bool; LAYERS],
}

impl NoiseConfig {
    pub fn none() -> Self {
        NoiseConfig {
            constants: PhysicalConstants::default(),
            currents: CurrentConfig::default(),
            kind: NoiseKind::None,
            scale: 1.0,
            layers: [true; LAYERS],
        }
    }

    pub fn accurate(currents: CurrentConfig) -> Self {
        NoiseConfig {
            currents,
            kind: NoiseKind::Accurate,
            ..Self::none()
        }
    }

    pub fn with_kind(mut self, kind: NoiseKind, scale: f64) -> Self {
        self.kind = kind;
        self.scale = scale;
        self
    }

    /// Restrict injection to a single layer.
    pub fn only_layer(mut self, layer: usize) -> Self {
        self.layers = [false; LAYERS];
        self.layers[layer] = true;
        self
    }

    pub fn is_active(&self, layer: usize) -> bool {
        !self.kind.is_none() && self.layers[layer]
    }

    pub fn validate(&self) -> Result<()> {
        self.constants.validate()?;
        self.currents.validate()?;
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::config("noise scale must be non-negative"));
        }
        Ok(())
    }
}

/// Synapse array of one layer, used for the auxiliary current passes.
#[derive(Clone, Copy, Debug)]
pub enum Vmm<'a> {
    /// Convolution weight `[F, C, k, k]`.
    Conv(&'a Tensor),
    /// Dense weight `[D, M]`.
    Dense(&'a Tensor),
}

impl<'a> Vmm<'a> {
    pub fn weight(&self) -> &'a Tensor {
        match *self {
            Vmm::Conv(w) | Vmm::Dense(w) => w,
        }
    }

    /// Apply the layer's connectivity with transformed weights (no bias).
    pub fn apply_with(&self, x: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let w = self.weight().map(f);
        match self {
            Vmm::Conv(_) => kernels::conv2d_forward(x, &w, None),
            Vmm::Dense(_) => kernels::linear_forward(x, &w, None),
        }
    }
}

fn check_inputs(x: &Tensor) -> Result<()> {
    if x.data().iter().any(|&v| v < 0.0) {
        return Err(Error::config(
            "noise model needs non-negative layer inputs",
        ));
    }
    Ok(())
}

/// Layer-1 variance from precomputed `sum_i X_i |W_ij|`.
pub fn variance_layer1_from_sums(
    abs_sums: &Tensor,
    w_max: f64,
    i_s_max: f64,
    constants: &PhysicalConstants,
) -> Result<Tensor> {
    if !(i_s_max > 0.0) {
        return Err(Error::config(format!("I_s,max must be positive, got {i_s_max}")));
    }
    if w_max == 0.0 {
        return Ok(Tensor::zeros(abs_sums.shape()));
    }
    let k = constants.shot_factor() * (w_max / i_s_max);
    Ok(abs_sums.map(|s| k * s))
}

/// Shot-noise variance of the digital-input first layer.
///
/// `W_max` is the largest absolute weight of `weights`. If every weight is
/// zero the variance is zero.
pub fn variance_layer1(
    x: &Tensor,
    weights: Vmm<'_>,
    i_s_max: f64,
    constants: &PhysicalConstants,
) -> Result<Tensor> {
    check_inputs(x)?;
    let w_max = weights.weight().max_abs();
    let sums = weights.apply_with(x, f64::abs)?;
    variance_layer1_from_sums(&sums, w_max, i_s_max, constants)
}

/// Analog-layer variance from precomputed `sum_i X_i (|W_ij| + W_ij^2)`.
pub fn variance_analog_from_sums(
    sums: &Tensor,
    x_max: f64,
    i_in_max: f64,
    constants: &PhysicalConstants,
) -> Result<Tensor> {
    if !(i_in_max > 0.0) {
        return Err(Error::config(format!("I_in,max must be positive, got {i_in_max}")));
    }
    if !(x_max >= 0.0) {
        return Err(Error::config(format!("X_max must be non-negative, got {x_max}")));
    }
    let k = constants.shot_factor() * (x_max / i_in_max);
    Ok(sums.map(|s| k * s))
}

/// Shot-noise variance of an analog current-mode layer. The `W^2` term comes
/// from the peripheral cell of the current mirror.
pub fn variance_analog(
    x: &Tensor,
    weights: Vmm<'_>,
    x_max: f64,
    i_in_max: f64,
    constants: &PhysicalConstants,
) -> Result<Tensor> {
    check_inputs(x)?;
    let sums = weights.apply_with(x, |w| w.abs() + w * w)?;
    variance_analog_from_sums(&sums, x_max, i_in_max, constants)
}

/// Independent `N(0, variance)` draws, one per element. Zero-variance
/// elements are exactly zero.
pub fn gaussian_offsets(variance: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    let mut out = Vec::with_capacity(variance.len());
    for &v in variance.data() {
        if v < 0.0 || v.is_nan() {
            return Err(Error::numeric("noise", format!("invalid variance {v}")));
        }
        if v == 0.0 {
            out.push(0.0);
        } else {
            let z: f64 = rng.sample(StandardNormal);
            out.push(v.sqrt() * z);
        }
    }
    Tensor::new(variance.shape().to_vec(), out)
}

/// `Y + N(0, sigma^2)` elementwise.
pub fn inject(y: &Tensor, variance: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    y.expect_shape(variance.shape())?;
    let offsets = gaussian_offsets(variance, rng)?;
    let mut out = y.clone();
    for ((o, &d), &v) in out.data_mut().iter_mut().zip(offsets.data()).zip(variance.data()) {
        if v != 0.0 {
            *o += d;
        }
    }
    Ok(out)
}

/// Perturbation `Y_n - Y` for the surrogate kinds.
pub fn alt_offsets(
    y: &Tensor,
    kind: NoiseKind,
    layer_range: f64,
    scale: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    let sr = scale * layer_range;
    let offsets = match kind {
        NoiseKind::None => Tensor::zeros(y.shape()),
        NoiseKind::UniformRange => {
            if sr == 0.0 {
                Tensor::zeros(y.shape())
            } else {
                y.map(|_| sr * (2.0 * rng.random::<f64>() - 1.0))
            }
        }
        NoiseKind::NormalRange => {
            if sr == 0.0 {
                Tensor::zeros(y.shape())
            } else {
                y.map(|_| sr * rng.sample::<f64, _>(StandardNormal))
            }
        }
        NoiseKind::NormalMagnitude => y.map(|v| {
            let var = scale * v.abs();
            if var == 0.0 {
                0.0
            } else {
                var.sqrt() * rng.sample::<f64, _>(StandardNormal)
            }
        }),
        // y * u with u ~ U[0.5, 2] lands in [min(0.5y, 2y), max(0.5y, 2y)].
        NoiseKind::StochM => y.map(|v| v * (0.5 + 1.5 * rng.random::<f64>()) - v),
        NoiseKind::Accurate | NoiseKind::AccurateScaled(_) => {
            return Err(Error::config(
                "accurate noise is computed from synapse currents, not alt_noise",
            ))
        }
    };
    Ok(offsets)
}

/// Surrogate training noise applied to `y`.
pub fn alt_noise(
    y: &Tensor,
    kind: NoiseKind,
    layer_range: f64,
    scale: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    let d = alt_offsets(y, kind, layer_range, scale, rng)?;
    y.zip_map(&d, |a, b| a + b)
}

/// Weights as realised on the chip: each nominal value lands uniformly within
/// `+-i_res / i_max`. The bound is guaranteed after floating-point rounding.
pub fn program_weights(w_nominal: &Tensor, i_res: f64, i_max: f64, rng: &mut Rng) -> Tensor {
    let delta = if i_max > 0.0 { i_res / i_max } else { 0.0 };
    if delta == 0.0 {
        return w_nominal.clone();
    }
    w_nominal.map(|w| {
        let mut p = w + delta * (2.0 * rng.random::<f64>() - 1.0);
        while p - w > delta {
            p = p.next_down();
        }
        while w - p > delta {
            p = p.next_up();
        }
        p
    })
}
