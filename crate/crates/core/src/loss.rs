//! Class-balanced binary cross entropy for shadow masks.
//!
//! For one image with `n_pos` shadow and `n_neg` non-shadow pixels:
//!
//! ```text
//! L = -Σ_i [ n_neg/(n_pos+n_neg) · y_i · log p_i + n_pos/(n_pos+n_neg) · (1 - y_i) · log(1 - p_i) ]
//! ```
//!
//! with `p_i = sigmoid(logit_i)`. Counts are taken per image, the sum runs
//! over that image's pixels, and the batch value is the mean over images.
//! Log terms are evaluated from logits (`log p = -softplus(-x)`) and clamped
//! below at `ln(1e-12)`.

use crate::error::{Error, Result};
use crate::ops::{sigmoid, softplus};
use crate::tensor::Tensor;

const LOG_FLOOR: f64 = -27.631_021_115_928_547; // ln(1e-12)

struct Layout {
    images: usize,
    pixels: usize,
}

fn layout(logits: &Tensor, mask: &Tensor) -> Result<Layout> {
    if logits.shape() != mask.shape() {
        return Err(Error::dim(format!(
            "loss: logits {:?} vs mask {:?}",
            logits.shape(),
            mask.shape()
        )));
    }
    let images = *logits
        .shape()
        .first()
        .ok_or_else(|| Error::dim("loss needs a batch axis"))?;
    Ok(Layout {
        images,
        pixels: logits.numel() / images,
    })
}

/// Per-image class weights `(w_shadow, w_nonshadow)`.
fn class_weights(mask: &[f64]) -> (f64, f64) {
    let n_pos: f64 = mask.iter().sum();
    let total = mask.len() as f64;
    let n_neg = total - n_pos;
    (n_neg / total, n_pos / total)
}

// Unlike f64::max, keeps NaN.
fn floored(v: f64) -> f64 {
    if v < LOG_FLOOR {
        LOG_FLOOR
    } else {
        v
    }
}

fn log_p(x: f64) -> f64 {
    floored(-softplus(-x))
}

fn log_1mp(x: f64) -> f64 {
    floored(-softplus(x))
}

/// Neumaier-compensated sum; keeps the loss free of accumulation noise so
/// that finite differences of it stay meaningful.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

pub(crate) fn weighted_ce_forward(logits: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let Layout { images, pixels } = layout(logits, mask)?;
    let per_image = logits
        .data()
        .chunks_exact(pixels)
        .zip(mask.data().chunks_exact(pixels))
        .map(|(x, y)| {
            let (wp, wn) = class_weights(y);
            -compensated_sum(
                x.iter()
                    .zip(y)
                    .map(|(&xi, &yi)| wp * yi * log_p(xi) + wn * (1.0 - yi) * log_1mp(xi)),
            )
        });
    Ok(Tensor::scalar(compensated_sum(per_image) / images as f64))
}

pub(crate) fn weighted_ce_backward(logits: &Tensor, mask: &Tensor, g: f64) -> Result<Tensor> {
    let Layout { images, pixels } = layout(logits, mask)?;
    let scale = g / images as f64;
    let mut out = Vec::with_capacity(logits.numel());
    for (x, y) in logits.data().chunks_exact(pixels).zip(mask.data().chunks_exact(pixels)) {
        let (wp, wn) = class_weights(y);
        out.extend(x.iter().zip(y).map(|(&xi, &yi)| {
            // d/dx log p = 1 - p, d/dx log(1-p) = -p; zero where clamped.
            let p = sigmoid(xi);
            let dlp = if -softplus(-xi) > LOG_FLOOR { 1.0 - p } else { 0.0 };
            let dl1p = if -softplus(xi) > LOG_FLOOR { -p } else { 0.0 };
            -scale * (wp * yi * dlp + wn * (1.0 - yi) * dl1p)
        }));
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

fn check_binary(mask: &Tensor) -> Result<()> {
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Parameter("mask must be binary (0 or 1)".into()));
    }
    Ok(())
}

/// Balanced cross entropy of `pred_logits` (`[N, 1, H, W]`) against a binary
/// mask of the same shape.
pub fn weighted_ce_loss(pred_logits: &Tensor, mask: &Tensor) -> Result<f64> {
    check_binary(mask)?;
    weighted_ce_forward(pred_logits, mask)?.item()
}
