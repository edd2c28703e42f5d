//! Single-level 2D Haar transform with orthonormal scaling.
//!
//! For every disjoint 2x2 block `[a b; c d]`:
//!
//! ```text
//! LL = (a + b + c + d) / 2      LH = (a - b + c - d) / 2
//! HL = (a + b - c - d) / 2      HH = (a - b - c + d) / 2
//! ```
//!
//! The basis is orthonormal, so the inverse is the transpose and the sum of
//! squares is preserved. Detail bands are stacked `[LH, HL, HH]`, each block
//! holding `C` channels; that order is also the checkpoint contract for any
//! layer consuming them.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

/// Raw analysis: `[N, C, H, W]` to `[N, 4C, H/2, W/2]` stacked `[LL, LH, HL, HH]`.
pub(crate) fn haar_analysis<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let half = T::from_f64_lossy(0.5);
    let band = c * h2 * w2;
    let mut out = vec![T::zero(); n * 4 * band];
    for i in 0..n {
        let base = i * 4 * band;
        for ch in 0..c {
            let src = &x[(i * c + ch) * h * w..][..h * w];
            for y in 0..h2 {
                for xx in 0..w2 {
                    let a = src[2 * y * w + 2 * xx];
                    let b = src[2 * y * w + 2 * xx + 1];
                    let cc = src[(2 * y + 1) * w + 2 * xx];
                    let d = src[(2 * y + 1) * w + 2 * xx + 1];
                    let o = ch * h2 * w2 + y * w2 + xx;
                    out[base + o] = (a + b + cc + d) * half;
                    out[base + band + o] = (a - b + cc - d) * half;
                    out[base + 2 * band + o] = (a + b - cc - d) * half;
                    out[base + 3 * band + o] = (a - b - cc + d) * half;
                }
            }
        }
    }
    out
}

/// Raw synthesis: `[N, 4C, h, w]` stacked bands to `[N, C, 2h, 2w]`.
pub(crate) fn haar_synthesis<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let half = T::from_f64_lossy(0.5);
    let band = c * h * w;
    let mut out = vec![T::zero(); n * c * ho * wo];
    for i in 0..n {
        let base = i * 4 * band;
        for ch in 0..c {
            let dst = &mut out[(i * c + ch) * ho * wo..][..ho * wo];
            for y in 0..h {
                for xx in 0..w {
                    let o = ch * h * w + y * w + xx;
                    let ll = x[base + o];
                    let lh = x[base + band + o];
                    let hl = x[base + 2 * band + o];
                    let hh = x[base + 3 * band + o];
                    dst[2 * y * wo + 2 * xx] = (ll + lh + hl + hh) * half;
                    dst[2 * y * wo + 2 * xx + 1] = (ll - lh + hl - hh) * half;
                    dst[(2 * y + 1) * wo + 2 * xx] = (ll + lh - hl - hh) * half;
                    dst[(2 * y + 1) * wo + 2 * xx + 1] = (ll - lh - hl + hh) * half;
                }
            }
        }
    }
    out
}

/// Low band `[N, C, H/2, W/2]` and stacked detail bands `[N, 3C, H/2, W/2]`.
#[derive(Debug, Clone, Copy)]
pub struct DwtBands {
    pub lf: Var,
    pub hf: Var,
}

pub fn dwt_haar<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<DwtBands> {
    let c = g.shape(x).get(1).copied().unwrap_or(0);
    let all = g.dwt(x)?;
    let lf = g.slice_channels(all, 0, c)?;
    let hf = g.slice_channels(all, c, 4 * c)?;
    Ok(DwtBands { lf, hf })
}

pub fn idwt_haar<T: Scalar>(g: &mut Graph<T>, bands: &DwtBands) -> Result<Var> {
    let (sl, sh) = (g.shape(bands.lf).to_vec(), g.shape(bands.hf).to_vec());
    let consistent = sl.len() == 4
        && sh.len() == 4
        && sl[0] == sh[0]
        && sh[1] == 3 * sl[1]
        && sl[2..] == sh[2..];
    if !consistent {
        return Err(Error::shape(format!(
            "inconsistent bands: lf {sl:?}, hf {sh:?}"
        )));
    }
    let stacked = g.concat_channels(bands.lf, bands.hf)?;
    g.idwt(stacked)
}
