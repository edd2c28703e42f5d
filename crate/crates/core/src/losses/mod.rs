//! Training objective.
//!
//! `total = rec + a1 * ssim + a2 * grad + a3 * perc + lambda * mask`, with every
//! L1 term reduced by the mean over elements so magnitudes do not depend on
//! resolution.

mod pseudo_mask;

pub use pseudo_mask::{build_pseudo_mask, gray, PseudoMaskConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{gaussian_window, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
use crate::tensor::{ConvSpec, Fill, Graph, Scalar, Tensor, Var};

/// Weights of the auxiliary terms relative to the reconstruction term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub lambda_mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha1: 0.2,
            alpha2: 0.1,
            alpha3: 0.01,
            lambda_mask: 0.5,
        }
    }
}

impl LossWeights {
    pub fn new(alpha1: f64, alpha2: f64, alpha3: f64, lambda_mask: f64) -> Result<Self> {
        let w = LossWeights {
            alpha1,
            alpha2,
            alpha3,
            lambda_mask,
        };
        if [alpha1, alpha2, alpha3, lambda_mask]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::Contract(format!("loss weights must be finite and >= 0: {w:?}")));
        }
        Ok(w)
    }
}

fn same_shape<T: Scalar>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

fn mean_abs_diff<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// Mean absolute error.
pub fn rec_loss<T: Scalar>(g: &mut Graph<T>, out: Var, gt: Var) -> Result<Var> {
    same_shape(g, out, gt, "rec_loss")?;
    mean_abs_diff(g, out, gt)
}

/// L1 between a predicted soft mask and its binary target.
pub fn mask_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    same_shape(g, pred, target, "mask_loss")?;
    mean_abs_diff(g, pred, target)
}

/// `1 - SSIM` with an 11x11 Gaussian window (sigma 1.5) over the valid
/// region, averaged over channels and positions.
pub fn ssim_loss<T: Scalar>(g: &mut Graph<T>, out: Var, gt: Var) -> Result<Var> {
    same_shape(g, out, gt, "ssim_loss")?;
    let [_, c, h, w] = crate::tensor::dims4(g.shape(out))?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim needs extents >= {SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let kernel: Vec<f64> = (0..c).flat_map(|_| win.iter().copied()).collect();
    let kernel = g.constant(Tensor::from_f64(&[c, 1, SSIM_WINDOW, SSIM_WINDOW], &kernel)?);
    let spec = ConvSpec {
        pad: 0,
        ..ConvSpec::depthwise(SSIM_WINDOW, c)
    };
    let blur = |g: &mut Graph<T>, v: Var| g.conv2d(v, kernel, None, spec);

    let mu_x = blur(g, out)?;
    let mu_y = blur(g, gt)?;
    let xx = g.mul(out, out)?;
    let yy = g.mul(gt, gt)?;
    let xy = g.mul(out, gt)?;
    let e_xx = blur(g, xx)?;
    let e_yy = blur(g, yy)?;
    let e_xy = blur(g, xy)?;

    let mu_xx = g.mul(mu_x, mu_x)?;
    let mu_yy = g.mul(mu_y, mu_y)?;
    let mu_xy = g.mul(mu_x, mu_y)?;
    let s_xx = g.sub(e_xx, mu_xx)?;
    let s_yy = g.sub(e_yy, mu_yy)?;
    let s_xy = g.sub(e_xy, mu_xy)?;

    let l_num = g.scale(mu_xy, 2.0);
    let l_num = g.add_scalar(l_num, SSIM_C1);
    let c_num = g.scale(s_xy, 2.0);
    let c_num = g.add_scalar(c_num, SSIM_C2);
    let l_den = g.add(mu_xx, mu_yy)?;
    let l_den = g.add_scalar(l_den, SSIM_C1);
    let c_den = g.add(s_xx, s_yy)?;
    let c_den = g.add_scalar(c_den, SSIM_C2);

    let num = g.mul(l_num, c_num)?;
    let den = g.mul(l_den, c_den)?;
    let map = g.div(num, den)?;
    let ssim = g.mean(map);
    let neg = g.scale(ssim, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Mean of the L1 differences of horizontal and vertical forward differences.
pub fn grad_loss<T: Scalar>(g: &mut Graph<T>, out: Var, gt: Var) -> Result<Var> {
    same_shape(g, out, gt, "grad_loss")?;
    let [_, _, h, w] = crate::tensor::dims4(g.shape(out))?;
    if h < 2 || w < 2 {
        return Err(Error::shape(format!("grad_loss needs extents >= 2, got {h}x{w}")));
    }
    let diffs = |g: &mut Graph<T>, v: Var| -> Result<(Var, Var)> {
        let right = g.crop(v, 0, 1, h, w - 1)?;
        let left = g.crop(v, 0, 0, h, w - 1)?;
        let down = g.crop(v, 1, 0, h - 1, w)?;
        let up = g.crop(v, 0, 0, h - 1, w)?;
        Ok((g.sub(right, left)?, g.sub(down, up)?))
    };
    let (ox, oy) = diffs(g, out)?;
    let (tx, ty) = diffs(g, gt)?;
    let lx = mean_abs_diff(g, ox, tx)?;
    let ly = mean_abs_diff(g, oy, ty)?;
    let sum = g.add(lx, ly)?;
    Ok(g.scale(sum, 0.5))
}

/// Frozen random-feature extractor standing in for a pretrained network.
///
/// Three stride-2 3x3 convolutions (3 -> 8 -> 16 -> 32) with relu. Layer `i`
/// is drawn He-normal from seed `42 + i`; biases are zero. Never trained.
#[derive(Debug, Clone)]
pub struct PerceptualExtractor<T> {
    layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> PerceptualExtractor<T> {
    pub const SEED: u64 = 42;
    pub const WIDTHS: [usize; 4] = [3, 8, 16, 32];
    pub const MIN_EXTENT: usize = 8;

    pub fn new() -> Self {
        let layers = Self::WIDTHS
            .windows(2)
            .enumerate()
            .map(|(i, io)| {
                let fan_in = io[0] * 9;
                let w = Tensor::create(
                    &[io[1], io[0], 3, 3],
                    Fill::HeNormal {
                        fan_in,
                        seed: Self::SEED + i as u64,
                    },
                )
                .expect("static shape");
                (w, Tensor::zeros(&[io[1]]).expect("static shape"))
            })
            .collect();
        PerceptualExtractor { layers }
    }

    pub fn weights(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().map(|(w, _)| w)
    }

    /// Feature maps of all three layers. Weights enter as constants.
    pub fn features(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (w, b) in &self.layers {
            let w = g.constant(w.clone());
            let b = g.constant(b.clone());
            h = g.conv2d(h, w, Some(b), ConvSpec::strided(3, 2))?;
            h = g.relu(h);
            feats.push(h);
        }
        Ok(feats)
    }
}

impl<T: Scalar> Default for PerceptualExtractor<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Mean over layers of the per-layer mean L1 feature distance.
pub fn perc_loss<T: Scalar>(g: &mut Graph<T>, out: Var, gt: Var, phi: &PerceptualExtractor<T>) -> Result<Var> {
    same_shape(g, out, gt, "perc_loss")?;
    let [_, _, h, w] = crate::tensor::dims4(g.shape(out))?;
    let min = PerceptualExtractor::<T>::MIN_EXTENT;
    if h < min || w < min {
        return Err(Error::shape(format!("perc_loss needs extents >= {min}, got {h}x{w}")));
    }
    let fo = phi.features(g, out)?;
    let ft = phi.features(g, gt)?;
    let mut acc: Option<Var> = None;
    for (a, b) in fo.into_iter().zip(ft) {
        let l = mean_abs_diff(g, a, b)?;
        acc = Some(match acc {
            Some(s) => g.add(s, l)?,
            None => l,
        });
    }
    let n = phi.layers.len() as f64;
    Ok(g.scale(acc.expect("at least one layer"), 1.0 / n))
}

/// Graph handles of each objective term.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub rec: Var,
    pub ssim: Var,
    pub grad: Var,
    pub perc: Var,
    /// Absent when the model has no mask head.
    pub mask: Option<Var>,
    pub total: Var,
}

/// Scalar values of each term, as logged per training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub lrec: f64,
    pub lssim: f64,
    pub lgrad: f64,
    pub lperc: f64,
    pub lmask: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> LossValues {
        LossValues {
            lrec: g.scalar(self.rec),
            lssim: g.scalar(self.ssim),
            lgrad: g.scalar(self.grad),
            lperc: g.scalar(self.perc),
            lmask: self.mask.map_or(0.0, |m| g.scalar(m)),
            total: g.scalar(self.total),
        }
    }
}

/// Weighted sum of all terms. `mask` pairs the predicted soft mask with its
/// binary target; pass `None` for models without a mask head.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    out: Var,
    gt: Var,
    mask: Option<(Var, Var)>,
    weights: &LossWeights,
    phi: &PerceptualExtractor<T>,
) -> Result<LossTerms> {
    let rec = rec_loss(g, out, gt)?;
    let ssim = ssim_loss(g, out, gt)?;
    let grad = grad_loss(g, out, gt)?;
    let perc = perc_loss(g, out, gt, phi)?;
    let mask = match mask {
        Some((pred, target)) => Some(mask_loss(g, pred, target)?),
        None => None,
    };
    let mut total = rec;
    let weighted = [
        (Some(ssim), weights.alpha1),
        (Some(grad), weights.alpha2),
        (Some(perc), weights.alpha3),
        (mask, weights.lambda_mask),
    ];
    for (term, w) in weighted {
        if let Some(t) = term {
            let s = g.scale(t, w);
            total = g.add(total, s)?;
        }
    }
    Ok(LossTerms {
        rec,
        ssim,
        grad,
        perc,
        mask,
        total,
    })
}
