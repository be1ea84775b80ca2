//! Signal-range clipping and noise-tolerance regularizers.
//!
//! * Weight clipping projects the first-layer weights into `[-t, t]` after
//!   every optimizer step, which bounds `W_max` in the layer-1 noise model.
//! * Activation clipping computes `min(Y, Y_thr)` with a learnable `Y_thr`
//!   per hidden layer. The threshold gradient is the sum of the upstream
//!   gradients at clipped positions, and an L2 penalty
//!   `alpha * sum_l (Y_thr^l / I_max^l)^2` pushes all thresholds down.
//! * `E1` penalizes weight magnitude, `E2` the squared weight-gradient norm,
//!   and `E'3` the squared derivative of the summed gradient. The last two are
//!   evaluated with finite-difference Hessian-vector products.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Hidden layers carrying an activation threshold (conv1, conv2, fc1).
pub const CLIPPED_LAYERS: usize = 3;

/// Placeholder threshold before calibration; large enough to be an identity.
pub const UNSET_THRESHOLD: f64 = 1e30;

/// Floor applied when re-projecting thresholds after an update.
pub const MIN_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipState {
    /// Activation clipping on hidden layers.
    pub enabled: bool,
    pub y_thr: [f64; CLIPPED_LAYERS],
    /// Set once the thresholds have been calibrated from data.
    pub initialized: bool,
    /// Symmetric first-layer weight range.
    pub w_clip_t: Option<f64>,
    /// Threshold penalty strength.
    pub alpha: f64,
    /// Threshold learning rate; the weight learning rate when absent.
    pub thr_lr: Option<f64>,
}

impl Default for ClipState {
    fn default() -> Self {
        ClipState {
            enabled: false,
            y_thr: [UNSET_THRESHOLD; CLIPPED_LAYERS],
            initialized: false,
            w_clip_t: None,
            alpha: 0.0,
            thr_lr: None,
        }
    }
}

impl ClipState {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.w_clip_t {
            if !(t > 0.0) {
                return Err(Error::config(format!("weight clip range must be positive, got {t}")));
            }
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::config("threshold penalty alpha must be non-negative"));
        }
        if self.y_thr.iter().any(|&y| !(y > 0.0)) {
            return Err(Error::config("activation thresholds must be positive"));
        }
        Ok(())
    }

    /// Keep every threshold strictly positive.
    pub fn reproject(&mut self) {
        for y in &mut self.y_thr {
            if !(*y >= MIN_THRESHOLD) {
                *y = MIN_THRESHOLD;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegConfig {
    pub lambda_e1: f64,
    /// Layers E1 applies to (conv1, conv2, fc1, fc2).
    pub e1_layers: [bool; 4],
    pub lambda_e2: f64,
    pub lambda_e3: f64,
    /// Elementwise gradient clip magnitude.
    pub grad_clip: Option<f64>,
    /// Norm of the finite-difference step used for Hessian-vector products.
    pub hvp_epsilon: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            lambda_e1: 0.0,
            e1_layers: [true, false, false, false],
            lambda_e2: 0.0,
            lambda_e3: 0.0,
            grad_clip: None,
            hvp_epsilon: 1e-3,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_e1, self.lambda_e2, self.lambda_e3]
            .iter()
            .any(|&l| !(l >= 0.0))
        {
            return Err(Error::config("regularizer strengths must be non-negative"));
        }
        if !(self.hvp_epsilon > 0.0) {
            return Err(Error::config("hvp_epsilon must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("grad_clip must be positive"));
            }
        }
        Ok(())
    }
}

/// Project weights into `[-t, t]`.
pub fn clip_weights(w: &mut Tensor, t: f64) {
    for v in w.data_mut() {
        *v = v.clamp(-t, t);
    }
}

/// Taped `min(y, threshold)`; see [`Tape::clip_max`] for the backward rule.
pub fn clip_activations(tape: &mut Tape, y: Var, threshold: Var) -> Result<Var> {
    tape.clip_max(y, threshold)
}

/// Threshold penalty value and its gradient with respect to each threshold.
///
/// Currents are normalized to the first layer's value so the terms are
/// dimensionless.
pub fn threshold_penalty(y_thr: &[f64], i_max: &[f64], alpha: f64) -> (f64, Vec<f64>) {
    let reference = i_max[0];
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(y_thr.len());
    for (&y, &i) in y_thr.iter().zip(i_max) {
        let unit = i / reference;
        value += alpha * (y / unit) * (y / unit);
        grad.push(2.0 * alpha * y / (unit * unit));
    }
    (value, grad)
}

/// `lambda * sum W^2` over the masked layers.
pub fn penalty_e1(weights: &[&Tensor], lambda: f64, mask: &[bool]) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    weights
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(w, _)| w.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        * lambda
}

/// Gradient of [`penalty_e1`] for a single layer: `2 lambda W`.
pub fn grad_e1(w: &[f64], lambda: f64) -> Vec<f64> {
    w.iter().map(|v| 2.0 * lambda * v).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Central finite-difference Hessian-vector product `H v`.
///
/// `grad_at` must evaluate the loss gradient at the given parameter vector
/// with everything else (batch, noise draws) held fixed. The step is scaled so
/// the perturbation has norm `epsilon`.
pub fn hvp<F>(grad_at: &mut F, w: &[f64], v: &[f64], epsilon: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let vn = norm(v);
    if vn == 0.0 {
        return Ok(vec![0.0; w.len()]);
    }
    let h = epsilon / (vn + 1e-12);
    let plus: Vec<f64> = w.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let minus: Vec<f64> = w.iter().zip(v).map(|(a, b)| a - h * b).collect();
    let gp = grad_at(&plus)?;
    let gm = grad_at(&minus)?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
}

fn finite_or_skip(name: &str, v: Vec<f64>) -> Option<Vec<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Some(v)
    } else {
        log::warn!("{name}: non-finite Hessian-vector product, skipping contribution");
        None
    }
}

/// Gradient contribution of `lambda * E2`, `E2 = ||dC/dW||^2`: `2 lambda H g`.
///
/// Returns `None` when the product is not finite; the caller skips it.
pub fn grad_e2<F>(
    grad_at: &mut F,
    w: &[f64],
    g: &[f64],
    lambda: f64,
    epsilon: f64,
) -> Result<Option<Vec<f64>>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if lambda == 0.0 {
        return Ok(Some(vec![0.0; w.len()]));
    }
    let hg = hvp(grad_at, w, g, epsilon)?;
    Ok(finite_or_skip("E2", hg).map(|hg| hg.into_iter().map(|x| 2.0 * lambda * x).collect()))
}

pub struct E3Prime {
    /// `E'3 = ||H 1||^2`.
    pub value: f64,
    /// `2 lambda H (H 1)`.
    pub gradient: Vec<f64>,
}

/// `E'3 = sum_i (d (sum_k dC/dW_k) / dW_i)^2 = ||H 1||^2` and its gradient
/// contribution, using two chained Hessian-vector products.
pub fn grad_e3prime<F>(
    grad_at: &mut F,
    w: &[f64],
    lambda: f64,
    epsilon: f64,
) -> Result<Option<E3Prime>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if lambda == 0.0 {
        return Ok(Some(E3Prime {
            value: 0.0,
            gradient: vec![0.0; w.len()],
        }));
    }
    let ones = vec![1.0; w.len()];
    let Some(h1) = finite_or_skip("E'3", hvp(grad_at, w, &ones, epsilon)?) else {
        return Ok(None);
    };
    let value = h1.iter().map(|x| x * x).sum();
    let Some(hh1) = finite_or_skip("E'3", hvp(grad_at, w, &h1, epsilon)?) else {
        return Ok(None);
    };
    Ok(Some(E3Prime {
        value,
        gradient: hh1.into_iter().map(|x| 2.0 * lambda * x).collect(),
    }))
}

/// Clamp each gradient element to `[-c, c]`.
pub fn clip_gradients(grads: &mut [f64], c: f64) {
    for g in grads {
        *g = g.clamp(-c, c);
    }
}
