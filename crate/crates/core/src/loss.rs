//! Regularized Dice loss.
//!
//! For `N` channels of `M` pixels,
//!
//! ```text
//! loss = 1/N sum_n [1 - (2 sum_i P G + eps) / (sum_i P^2 + sum_i G^2 + eps)] + lambda * R
//! ```
//!
//! where `R` is the squared error `(P - G)^2` either averaged over all
//! `N * M` entries or summed over pixels and averaged over channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MseNormalization {
    /// Mean over channels and pixels; keeps `lambda` resolution independent.
    MeanOverPixels,
    /// Sum over pixels, mean over channels.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    pub smoothing: f64,
    pub mse_normalization: MseNormalization,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.1,
            smoothing: 1e-6,
            mse_normalization: MseNormalization::MeanOverPixels,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.smoothing > 0.0 && self.smoothing.is_finite()) {
            return Err(Error::Config(format!("smoothing must be finite and > 0, got {}", self.smoothing)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Mean Dice term over channels (the part before the penalty).
    pub dice_term: f64,
    pub penalty: f64,
    /// d loss / d pred, same layout as `pred`.
    pub grad: Vec<f64>,
}

/// Loss and analytic gradient for channel-major `pred` and `truth`
/// (`channels * pixels` entries each).
pub fn dice_loss(pred: &[f64], truth: &[f64], channels: usize, config: &LossConfig) -> Result<LossOutput> {
    config.validate()?;
    if channels == 0 || pred.len() != truth.len() || !pred.len().is_multiple_of(channels) {
        return Err(Error::shape("dice_loss", (truth.len(), channels), pred.len()));
    }
    if let Some(v) = pred.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("dice_loss prediction ({v})")));
    }
    if let Some(v) = truth.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("dice_loss target ({v})")));
    }
    let pixels = pred.len() / channels;
    let n = channels as f64;
    let eps = config.smoothing;
    let mse_scale = match config.mse_normalization {
        MseNormalization::MeanOverPixels => 1.0 / (n * pixels as f64),
        MseNormalization::Sum => 1.0 / n,
    };

    let mut grad = vec![0.0; pred.len()];
    let mut dice_term = 0.0;
    let mut sq_err = 0.0;
    for c in 0..channels {
        let p = &pred[c * pixels..(c + 1) * pixels];
        let g = &truth[c * pixels..(c + 1) * pixels];
        let (mut inter, mut pp, mut gg) = (0.0, 0.0, 0.0);
        for (&pi, &gi) in p.iter().zip(g) {
            inter += pi * gi;
            pp += pi * pi;
            gg += gi * gi;
            sq_err += (pi - gi) * (pi - gi);
        }
        let num = 2.0 * inter + eps;
        let den = pp + gg + eps;
        dice_term += 1.0 - num / den;
        let dg = &mut grad[c * pixels..(c + 1) * pixels];
        for ((d, &pi), &gi) in dg.iter_mut().zip(p).zip(g) {
            let ddice = -(2.0 * gi * den - num * 2.0 * pi) / (den * den) / n;
            *d = ddice + config.lambda * mse_scale * 2.0 * (pi - gi);
        }
    }
    dice_term /= n;
    let penalty = sq_err * mse_scale;
    Ok(LossOutput {
        loss: dice_term + config.lambda * penalty,
        dice_term,
        penalty,
        grad,
    })
}
