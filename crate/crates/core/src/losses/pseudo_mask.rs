use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Parameters of the binary supervision mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoMaskConfig {
    /// Added to the clean luminance before dividing.
    pub eps: f64,
    /// Side of the zero-padded box filter; odd.
    pub window: usize,
    /// Strict threshold on the box-filtered relative darkening.
    pub tau: f64,
}

impl Default for PseudoMaskConfig {
    fn default() -> Self {
        PseudoMaskConfig {
            eps: 1e-3,
            window: 7,
            tau: 0.1,
        }
    }
}

impl PseudoMaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window.is_multiple_of(2) || !(self.tau > 0.0 && self.tau < 1.0) || !(self.eps > 0.0) {
            return Err(Error::Contract(format!("invalid pseudo-mask config {self:?}")));
        }
        Ok(())
    }
}

/// BT.601 luma.
pub fn gray(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Binary `[N, 1, H, W]` mask of pixels whose neighbourhood is darker in
/// `degraded` than in `clean`.
///
/// `d = max(0, (gray(clean) - gray(degraded)) / (gray(clean) + eps))` is
/// averaged over a `window x window` box (zero padded, always divided by the
/// full window area) and thresholded with `> tau`.
pub fn build_pseudo_mask<T: Scalar>(
    degraded: &Tensor<T>,
    clean: &Tensor<T>,
    cfg: &PseudoMaskConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    if degraded.shape() != clean.shape() {
        return Err(Error::shape(format!(
            "pseudo mask: {:?} vs {:?}",
            degraded.shape(),
            clean.shape()
        )));
    }
    let [n, c, h, w] = degraded.dims4()?;
    if c != 3 {
        return Err(Error::shape(format!("pseudo mask needs RGB input, got {c} channels")));
    }
    let in_range = |t: &Tensor<T>| {
        t.data()
            .iter()
            .all(|v| (0.0..=1.0).contains(&v.to_f64_lossy()))
    };
    if !in_range(degraded) || !in_range(clean) {
        return Err(Error::Contract("pseudo mask inputs must lie in [0, 1]".into()));
    }

    let plane = h * w;
    let luma = |t: &Tensor<T>, b: usize, i: usize| {
        let d = t.data();
        let base = b * 3 * plane;
        gray(
            d[base + i].to_f64_lossy(),
            d[base + plane + i].to_f64_lossy(),
            d[base + 2 * plane + i].to_f64_lossy(),
        )
    };
    let r = (cfg.window / 2) as isize;
    let area = (cfg.window * cfg.window) as f64;
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        let diff: Vec<f64> = (0..plane)
            .map(|i| {
                let gc = luma(clean, b, i);
                let gd = luma(degraded, b, i);
                ((gc - gd) / (gc + cfg.eps)).max(0.0)
            })
            .collect();
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                    for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                        acc += diff[yy as usize * w + xx as usize];
                    }
                }
                out.push(if acc / area > cfg.tau { T::one() } else { T::zero() });
            }
        }
    }
    Tensor::from_vec(&[n, 1, h, w], out)
}
