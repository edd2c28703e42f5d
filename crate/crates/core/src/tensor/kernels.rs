//! Raw loops behind the graph operations. Everything here works on flat
//! NCHW buffers; shape validation happens in the graph layer.

use super::Scalar;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    /// Clamp out-of-range reads to the edge instead of reading zero.
    pub replicate: bool,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// 1x1, stride 1, no padding: the input plane is already the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Source row or column for a padded coordinate, `None` for a zero read.
    #[inline]
    fn source(&self, i: isize, extent: usize) -> Option<usize> {
        if i >= 0 && i < extent as isize {
            Some(i as usize)
        } else if self.replicate {
            Some(i.clamp(0, extent as isize - 1) as usize)
        } else {
            None
        }
    }
}

/// Output columns of one kernel tap along one axis: `inner` maps
/// `ox in inner.0..inner.1` to `ix = ox + shift`; `edges` lists clamped
/// replicate reads as `(ox_lo, ox_hi, ix)`.
struct TapSpan {
    inner: (usize, usize),
    shift: isize,
    edges: [(usize, usize, usize); 2],
}

impl ConvGeom {
    /// Stride-1 column span of tap `kx`.
    fn tap_span(&self, kx: usize) -> TapSpan {
        let shift = kx as isize - self.pad as isize;
        let lo = (-shift).clamp(0, self.wo as isize) as usize;
        let hi = (self.w as isize - shift).clamp(lo as isize, self.wo as isize) as usize;
        let edges = if self.replicate {
            [(0, lo, 0), (hi, self.wo, self.w - 1)]
        } else {
            [(0, 0, 0), (0, 0, 0)]
        };
        TapSpan { inner: (lo, hi), shift, edges }
    }

    /// One input plane per output plane, stride 1.
    fn is_depthwise_direct(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1 && self.stride == 1
    }
}

fn depthwise_forward<T: Scalar>(x: &[T], weight: &[T], g: &ConvGeom, out: &mut [T]) {
    let (k, plane_in, plane_out) = (g.k, g.h * g.w, g.out_plane());
    let spans: Vec<TapSpan> = (0..k).map(|kx| g.tap_span(kx)).collect();
    for n in 0..g.n {
        for c in 0..g.cout {
            let xp = &x[(n * g.cin + c) * plane_in..][..plane_in];
            let op = &mut out[(n * g.cout + c) * plane_out..][..plane_out];
            let wk = &weight[c * k * k..][..k * k];
            for ky in 0..k {
                for oy in 0..g.ho {
                    let Some(iy) = g.source((oy + ky) as isize - g.pad as isize, g.h) else { continue };
                    let src = &xp[iy * g.w..][..g.w];
                    let dst = &mut op[oy * g.wo..][..g.wo];
                    for (kx, sp) in spans.iter().enumerate() {
                        let wv = wk[ky * k + kx];
                        let (lo, hi) = sp.inner;
                        let ix0 = (lo as isize + sp.shift) as usize;
                        for (d, &v) in dst[lo..hi].iter_mut().zip(&src[ix0..ix0 + hi - lo]) {
                            *d += wv * v;
                        }
                        for &(a, b, ix) in &sp.edges {
                            let v = wv * src[ix];
                            dst[a..b].iter_mut().for_each(|d| *d += v);
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let (k, plane_in, plane_out) = (g.k, g.h * g.w, g.out_plane());
    let spans: Vec<TapSpan> = (0..k).map(|kx| g.tap_span(kx)).collect();
    for n in 0..g.n {
        for c in 0..g.cout {
            let xp = &x[(n * g.cin + c) * plane_in..][..plane_in];
            let dp = &dout[(n * g.cout + c) * plane_out..][..plane_out];
            let wk = &weight[c * k * k..][..k * k];
            for ky in 0..k {
                for oy in 0..g.ho {
                    let Some(iy) = g.source((oy + ky) as isize - g.pad as isize, g.h) else { continue };
                    let drow = &dp[oy * g.wo..][..g.wo];
                    for (kx, sp) in spans.iter().enumerate() {
                        let (lo, hi) = sp.inner;
                        let ix0 = (lo as isize + sp.shift) as usize;
                        if let Some(dw) = dw.as_deref_mut() {
                            let xrow = &xp[iy * g.w..][..g.w];
                            let mut acc = T::zero();
                            for (&d, &v) in drow[lo..hi].iter().zip(&xrow[ix0..ix0 + hi - lo]) {
                                acc += d * v;
                            }
                            for &(a, b, ix) in &sp.edges {
                                acc += drow[a..b].iter().copied().sum::<T>() * xrow[ix];
                            }
                            dw[(c * k + ky) * k + kx] += acc;
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let wv = wk[ky * k + kx];
                            let xrow = &mut dx[(n * g.cin + c) * plane_in + iy * g.w..][..g.w];
                            for (t, &d) in xrow[ix0..ix0 + hi - lo].iter_mut().zip(&drow[lo..hi]) {
                                *t += wv * d;
                            }
                            for &(a, b, ix) in &sp.edges {
                                xrow[ix] += wv * drow[a..b].iter().copied().sum::<T>();
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let plane = g.out_plane();
    let spans: Vec<TapSpan> = if s == 1 { (0..k).map(|kx| g.tap_span(kx)).collect() } else { Vec::new() };
    for ci in 0..g.cin_g() {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let Some(iy) = g.source((oy * s + ky) as isize - p, g.h) else {
                        drow.fill(T::zero());
                        continue;
                    };
                    let src = &xc[iy * g.w..(iy + 1) * g.w];
                    if let Some(sp) = spans.get(kx) {
                        let (lo, hi) = sp.inner;
                        let ix0 = (lo as isize + sp.shift) as usize;
                        drow[..lo].fill(T::zero());
                        drow[hi..].fill(T::zero());
                        drow[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                        for &(a, b, ix) in &sp.edges {
                            drow[a..b].fill(src[ix]);
                        }
                        continue;
                    }
                    for (ox, d) in drow.iter_mut().enumerate() {
                        *d = match g.source((ox * s + kx) as isize - p, g.w) {
                            Some(ix) => src[ix],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let plane = g.out_plane();
    let spans: Vec<TapSpan> = if s == 1 { (0..k).map(|kx| g.tap_span(kx)).collect() } else { Vec::new() };
    for ci in 0..g.cin_g() {
        let dxc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let Some(iy) = g.source((oy * s + ky) as isize - p, g.h) else {
                        continue;
                    };
                    let drow = &mut dxc[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    if let Some(sp) = spans.get(kx) {
                        let (lo, hi) = sp.inner;
                        let ix0 = (lo as isize + sp.shift) as usize;
                        for (d, &v) in drow[ix0..ix0 + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                            *d += v;
                        }
                        for &(a, b, ix) in &sp.edges {
                            drow[ix] += srow[a..b].iter().copied().sum::<T>();
                        }
                        continue;
                    }
                    for (ox, &v) in srow.iter().enumerate() {
                        if let Some(ix) = g.source((ox * s + kx) as isize - p, g.w) {
                            drow[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let plane = g.out_plane();
    let (cin_g, cout_g, rows) = (g.cin_g(), g.cout_g(), g.col_rows());
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    if g.is_depthwise_direct() {
        depthwise_forward(x, weight, g, &mut out);
        add_bias(&mut out, bias, g);
        return out;
    }
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * plane]
    };
    for n in 0..g.n {
        for grp in 0..g.groups {
            let xin = &x[(n * g.cin + grp * cin_g) * g.h * g.w..][..cin_g * g.h * g.w];
            let wg = &weight[grp * cout_g * rows..][..cout_g * rows];
            let dst = &mut out[(n * g.cout + grp * cout_g) * plane..][..cout_g * plane];
            if g.is_pointwise() {
                T::gemm(cout_g, rows, plane, wg, false, xin, false, dst, false);
            } else {
                im2col(xin, g, &mut col);
                T::gemm(cout_g, rows, plane, wg, false, &col, false, dst, false);
            }
        }
    }
    add_bias(&mut out, bias, g);
    out
}

fn add_bias<T: Scalar>(out: &mut [T], bias: Option<&[T]>, g: &ConvGeom) {
    let Some(b) = bias else { return };
    let plane = g.out_plane();
    for n in 0..g.n {
        for (co, &bv) in b.iter().enumerate() {
            out[(n * g.cout + co) * plane..][..plane]
                .iter_mut()
                .for_each(|v| *v += bv);
        }
    }
}

/// Accumulates input, weight and bias gradients for whichever buffers are given.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let plane = g.out_plane();
    let (cin_g, cout_g, rows) = (g.cin_g(), g.cout_g(), g.col_rows());
    let direct = g.is_depthwise_direct();
    let mut col = if g.is_pointwise() || direct {
        Vec::new()
    } else {
        vec![T::zero(); rows * plane]
    };
    if direct {
        depthwise_backward(x, weight, dout, g, dx.as_deref_mut(), dw.as_deref_mut());
    }
    for n in 0..g.n {
        if direct {
            break;
        }
        for grp in 0..g.groups {
            let xin = &x[(n * g.cin + grp * cin_g) * g.h * g.w..][..cin_g * g.h * g.w];
            let wg = &weight[grp * cout_g * rows..][..cout_g * rows];
            let dg = &dout[(n * g.cout + grp * cout_g) * plane..][..cout_g * plane];
            if let Some(dw) = dw.as_deref_mut() {
                let dwg = &mut dw[grp * cout_g * rows..][..cout_g * rows];
                if g.is_pointwise() {
                    T::gemm(cout_g, plane, rows, dg, false, xin, true, dwg, true);
                } else {
                    im2col(xin, g, &mut col);
                    T::gemm(cout_g, plane, rows, dg, false, &col, true, dwg, true);
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxg = &mut dx[(n * g.cin + grp * cin_g) * g.h * g.w..][..cin_g * g.h * g.w];
                if g.is_pointwise() {
                    T::gemm(rows, cout_g, plane, wg, true, dg, false, dxg, true);
                } else {
                    T::gemm(rows, cout_g, plane, wg, true, dg, false, &mut col, false);
                    col2im(&col, g, dxg);
                }
            }
        }
    }
    if let Some(db) = db {
        for n in 0..g.n {
            for co in 0..g.cout {
                db[co] += dout[(n * g.cout + co) * plane..][..plane]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
        }
    }
}

/// Disjoint `factor x factor` block means over every plane.
pub(crate) fn block_mean<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, factor: usize) -> Vec<T> {
    let (ho, wo) = (h / factor, w / factor);
    let inv = T::one() / T::from_usize(factor * factor).unwrap();
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for dy in 0..factor {
                    let row = &src[(oy * factor + dy) * w + ox * factor..][..factor];
                    for &v in row {
                        acc += v;
                    }
                }
                dst[oy * wo + ox] = acc * inv;
            }
        }
    }
    out
}

pub(crate) fn block_mean_backward<T: Scalar>(
    dout: &[T],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
    dx: &mut [T],
) {
    let (ho, wo) = (h / factor, w / factor);
    let inv = T::one() / T::from_usize(factor * factor).unwrap();
    for p in 0..planes {
        let src = &dout[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] += src[(y / factor) * wo + x / factor] * inv;
            }
        }
    }
}

/// Per-axis source taps for half-pixel-center bilinear resampling.
#[derive(Debug, Clone)]
pub(crate) struct Taps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Taps {
    let scale = src as f64 / dst as f64;
    let mut taps = Taps {
        lo: Vec::with_capacity(dst),
        hi: Vec::with_capacity(dst),
        frac: Vec::with_capacity(dst),
    };
    for o in 0..dst {
        let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(pos - lo as f64);
    }
    taps
}

pub(crate) fn bilinear_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let fx: Vec<T> = tx.frac.iter().map(|&f| T::from_f64_lossy(f)).collect();
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            let fy = T::from_f64_lossy(ty.frac[oy]);
            let r0 = &src[ty.lo[oy] * w..][..w];
            let r1 = &src[ty.hi[oy] * w..][..w];
            for ox in 0..wo {
                let (l, r) = (tx.lo[ox], tx.hi[ox]);
                let top = r0[l] + (r0[r] - r0[l]) * fx[ox];
                let bot = r1[l] + (r1[r] - r1[l]) * fx[ox];
                dst[oy * wo + ox] = top + (bot - top) * fy;
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward<T: Scalar>(
    dout: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    dx: &mut [T],
) {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let one = T::one();
    for p in 0..planes {
        let src = &dout[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            let fy = T::from_f64_lossy(ty.frac[oy]);
            let (y0, y1) = (ty.lo[oy], ty.hi[oy]);
            for ox in 0..wo {
                let fx = T::from_f64_lossy(tx.frac[ox]);
                let (x0, x1) = (tx.lo[ox], tx.hi[ox]);
                let gv = src[oy * wo + ox];
                dst[y0 * w + x0] += gv * (one - fy) * (one - fx);
                dst[y0 * w + x1] += gv * (one - fy) * fx;
                dst[y1 * w + x0] += gv * fy * (one - fx);
                dst[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
}
