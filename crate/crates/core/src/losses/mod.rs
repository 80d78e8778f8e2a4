//! Photometric losses for the three training stages and evaluation metrics.

mod perceptual;
mod ssim;

use serde::{Deserialize, Serialize};

pub use perceptual::{PerceptualMetric, PyramidPerceptual};
pub use ssim::{dssim_loss, dssim_loss_grad, gaussian_window, ssim, ssim_with_grad, C1, C2, SIGMA, WINDOW};

use crate::error::{Error, Result};
use crate::image::Image;

pub const PSNR_CAP: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// D-SSIM weight.
    pub lambda: f64,
    /// Perceptual weight.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.2, gamma: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.gamma >= 0.0 && self.lambda.is_finite() && self.gamma.is_finite()) {
            return Err(Error::Invalid(format!("loss weights must be non-negative, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub dssim: f64,
    pub perceptual: f64,
    pub total: f64,
}

fn check_mask(img: &Image, mask: Option<&Image>) -> Result<()> {
    match mask {
        Some(m) if m.width != img.width || m.height != img.height || m.channels != 1 => Err(Error::ShapeMismatch {
            what: "loss mask",
            left: img.shape(),
            right: m.shape(),
        }),
        _ => Ok(()),
    }
}

/// Mean absolute difference over masked pixels and all channels, with its
/// gradient with respect to `a`. An empty mask yields zero.
pub fn l1_loss_grad(a: &Image, b: &Image, mask: Option<&Image>) -> Result<(f64, Image)> {
    a.check_same_shape(b, "l1 inputs")?;
    check_mask(a, mask)?;
    let ch = a.channels;
    let weight = |p: usize| mask.map_or(1.0, |m| m.data[p]);
    let denom: f64 = (0..a.pixel_count()).map(weight).sum::<f64>() * ch as f64;
    let mut grad = Image::zeros(a.width, a.height, ch);
    if denom == 0.0 {
        return Ok((0.0, grad));
    }
    let mut sum = 0.0;
    for p in 0..a.pixel_count() {
        let w = weight(p);
        if w == 0.0 {
            continue;
        }
        for c in 0..ch {
            let i = p * ch + c;
            let d = a.data[i] - b.data[i];
            sum += w * d.abs();
            grad.data[i] = if d > 0.0 {
                w / denom
            } else if d < 0.0 {
                -w / denom
            } else {
                0.0
            };
        }
    }
    Ok((sum / denom, grad))
}

pub fn l1_loss(a: &Image, b: &Image, mask: Option<&Image>) -> Result<f64> {
    Ok(l1_loss_grad(a, b, mask)?.0)
}

/// Peak signal-to-noise ratio on `[0, 1]` images, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b, "psnr inputs")?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

/// PSNR over the pixels where `mask` is set; `None` when the mask is empty.
pub fn psnr_masked(a: &Image, b: &Image, mask: &Image) -> Result<Option<f64>> {
    a.check_same_shape(b, "psnr inputs")?;
    check_mask(a, Some(mask))?;
    let ch = a.channels;
    let (mut sum, mut count) = (0.0, 0.0);
    for p in 0..a.pixel_count() {
        let w = mask.data[p];
        for c in 0..ch {
            let i = p * ch + c;
            sum += w * (a.data[i] - b.data[i]).powi(2);
            count += w;
        }
    }
    if count == 0.0 {
        return Ok(None);
    }
    let mse = sum / count;
    Ok(Some(if mse == 0.0 { PSNR_CAP } else { (-10.0 * mse.log10()).min(PSNR_CAP) }))
}

/// `L1 + λ·D-SSIM` against a branch-masked target (static and motion stages).
pub fn loss_static(render: &Image, target: &Image, mask: Option<&Image>, w: &LossWeights) -> Result<(LossBreakdown, Image)> {
    w.validate()?;
    let (l1, mut grad) = l1_loss_grad(render, target, mask)?;
    let (dssim, g_ssim) = dssim_loss_grad(render, target, mask)?;
    for (g, s) in grad.data.iter_mut().zip(&g_ssim.data) {
        *g += w.lambda * s;
    }
    let total = combine(l1, dssim, 0.0, w);
    Ok((LossBreakdown { l1, dssim, perceptual: 0.0, total }, grad))
}

/// Same form as [`loss_static`]; kept separate so stage code reads as its loss.
pub fn loss_motion(render: &Image, target: &Image, mask: Option<&Image>, w: &LossWeights) -> Result<(LossBreakdown, Image)> {
    loss_static(render, target, mask, w)
}

/// `L1 + λ·D-SSIM + γ·perceptual` on the full fused frame.
pub fn loss_finetune(
    fused: &Image,
    target: &Image,
    w: &LossWeights,
    perceptual: &dyn PerceptualMetric,
) -> Result<(LossBreakdown, Image)> {
    let (mut parts, mut grad) = loss_static(fused, target, None, w)?;
    let (p, g_p) = perceptual.loss_and_grad(fused, target)?;
    for (g, s) in grad.data.iter_mut().zip(&g_p.data) {
        *g += w.gamma * s;
    }
    parts.perceptual = p;
    parts.total = combine(parts.l1, parts.dssim, p, w);
    Ok((parts, grad))
}

/// `l1 + λ·dssim + γ·perceptual`.
pub fn combine(l1: f64, dssim: f64, perceptual: f64, w: &LossWeights) -> f64 {
    l1 + w.lambda * dssim + w.gamma * perceptual
}
