//! Naive scalar reference implementations shared by the integration tests.
//! Everything here works on flat `f64` buffers in NCHW order and is written
//! for readability, not speed.

#![allow(dead_code)]

use uniblend::losses::{gray, PseudoMaskConfig};
use uniblend::metrics::{gaussian_window, SSIM_C1, SSIM_C2};
use uniblend::model::DecoderStage;
use uniblend::saam::Saam;
use uniblend::tensor::{Fill, Tensor};
use uniblend::ModelParams;

#[derive(Debug, Clone, PartialEq)]
pub struct Nd {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Nd {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Nd { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let s = t.shape();
        Nd { shape: [s[0], s[1], s[2], s[3]], data: t.data().to_vec() }
    }

    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cc, h, w] = self.shape;
        ((n * cc + c) * h + y) * w + x
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(n, c, y, x);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Nd {
        Nd { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip(&self, other: &Nd, f: impl Fn(f64, f64) -> f64) -> Nd {
        assert_eq!(self.shape, other.shape);
        Nd { shape: self.shape, data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() }
    }

    /// Channel concatenation.
    pub fn cat(&self, other: &Nd) -> Nd {
        let [n, ca, h, w] = self.shape;
        let cb = other.shape[1];
        let mut out = Nd::zeros([n, ca + cb, h, w]);
        for b in 0..n {
            for c in 0..ca + cb {
                for y in 0..h {
                    for x in 0..w {
                        let v = if c < ca { self.get(b, c, y, x) } else { other.get(b, c - ca, y, x) };
                        out.set(b, c, y, x, v);
                    }
                }
            }
        }
        out
    }
}

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::create(shape, Fill::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap()
}

/// Every parameter replaced by uniform noise in `[-0.5, 0.5]`, so that no
/// zero bias or zero head hides a mistake.
pub fn noisy_params(params: &mut ModelParams<f64>, seed: u64) {
    for (i, (_, t)) in params.iter_mut().enumerate() {
        let shape = t.shape().to_vec();
        let fresh: Tensor<f64> =
            Tensor::create(&shape, Fill::Uniform { lo: -0.5, hi: 0.5, seed: seed.wrapping_add(i as u64 * 7919) }).unwrap();
        t.data_mut().copy_from_slice(fresh.data());
    }
}

pub fn param(p: &ModelParams<f64>, name: &str) -> Vec<f64> {
    p.get(name).unwrap_or_else(|| panic!("missing {name}")).data().to_vec()
}

/// Direct six-loop convolution. `replicate` clamps reads to the border
/// instead of reading zeros.
#[allow(clippy::too_many_arguments)]
pub fn conv(
    x: &Nd,
    w: &[f64],
    b: Option<&[f64]>,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    replicate: bool,
) -> Nd {
    let [n, cin, h, wd] = x.shape;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let mut out = Nd::zeros([n, cout, ho, wo]);
    for bn in 0..n {
        for co in 0..cout {
            let grp = co / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b[co]);
                    for ci in 0..cin_g {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd;
                                let v = if inside {
                                    x.get(bn, grp * cin_g + ci, iy as usize, ix as usize)
                                } else if replicate {
                                    let cy = iy.clamp(0, h as isize - 1) as usize;
                                    let cx = ix.clamp(0, wd as isize - 1) as usize;
                                    x.get(bn, grp * cin_g + ci, cy, cx)
                                } else {
                                    0.0
                                };
                                acc += w[((co * cin_g + ci) * k + ky) * k + kx] * v;
                            }
                        }
                    }
                    out.set(bn, co, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// `x W^T + b` for `x: [n, din]`, `W: [dout, din]`.
pub fn linear(x: &[f64], n: usize, din: usize, w: &[f64], b: &[f64], dout: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * dout];
    for r in 0..n {
        for o in 0..dout {
            let mut acc = b[o];
            for i in 0..din {
                acc += x[r * din + i] * w[o * din + i];
            }
            out[r * dout + o] = acc;
        }
    }
    out
}

pub fn block_mean(x: &Nd, f: usize) -> Nd {
    let [n, c, h, w] = x.shape;
    let mut out = Nd::zeros([n, c, h / f, w / f]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h / f {
                for xx in 0..w / f {
                    let mut s = 0.0;
                    for dy in 0..f {
                        for dx in 0..f {
                            s += x.get(b, ch, y * f + dy, xx * f + dx);
                        }
                    }
                    out.set(b, ch, y, xx, s / (f * f) as f64);
                }
            }
        }
    }
    out
}

/// Source coordinate of output index `o` under half-pixel-centre sampling,
/// split into the two neighbours and the weight of the upper one.
fn half_pixel(o: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let s = ((o as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(src - 1);
    let i1 = (i0 + 1).min(src - 1);
    (i0, i1, s - i0 as f64)
}

pub fn bilinear(x: &Nd, ho: usize, wo: usize) -> Nd {
    let [n, c, h, w] = x.shape;
    let mut out = Nd::zeros([n, c, ho, wo]);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                let (y0, y1, fy) = half_pixel(oy, h, ho);
                for ox in 0..wo {
                    let (x0, x1, fx) = half_pixel(ox, w, wo);
                    let top = x.get(b, ch, y0, x0) * (1.0 - fx) + x.get(b, ch, y0, x1) * fx;
                    let bot = x.get(b, ch, y1, x0) * (1.0 - fx) + x.get(b, ch, y1, x1) * fx;
                    out.set(b, ch, oy, ox, top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    out
}

/// `[n, c]` spatial means.
pub fn gap(x: &Nd) -> Vec<f64> {
    let [n, c, h, w] = x.shape;
    let mut out = vec![0.0; n * c];
    for b in 0..n {
        for ch in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    s += x.get(b, ch, y, xx);
                }
            }
            out[b * c + ch] = s / (h * w) as f64;
        }
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Per-channel scaling by a `[n, c]` table.
pub fn scale_channels(x: &Nd, s: &[f64]) -> Nd {
    let [n, c, h, w] = x.shape;
    let mut out = x.clone();
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out.set(b, ch, y, xx, x.get(b, ch, y, xx) * s[b * c + ch]);
                }
            }
        }
    }
    out
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Scale-aware aggregation evaluated one named step at a time.
pub fn saam_oracle(s: &Saam, p: &ModelParams<f64>, x: &Nd) -> Nd {
    let c = s.channels;
    let [n, _, h, w] = x.shape;
    let branch = |lv: &Nd| {
        let h1 = conv(lv, &param(p, "saam.branch.conv1.weight"), Some(&param(p, "saam.branch.conv1.bias")), c, 3, 1, 1, 1, true);
        let h1 = h1.map(relu);
        conv(&h1, &param(p, "saam.branch.conv2.weight"), Some(&param(p, "saam.branch.conv2.bias")), c, 3, 1, 1, 1, true)
    };
    let y0 = branch(x);
    let y1 = bilinear(&branch(&block_mean(x, 2)), h, w);
    let y2 = bilinear(&branch(&block_mean(x, 4)), h, w);

    let (g0, g1, g2) = (gap(&y0), gap(&y1), gap(&y2));
    let mut desc = Vec::new();
    for b in 0..n {
        for g in [&g0, &g1, &g2] {
            desc.extend_from_slice(&g[b * c..(b + 1) * c]);
        }
    }
    let hidden = (3 * c).div_ceil(2);
    let z = linear(&desc, n, 3 * c, &param(p, "saam.mlp.hidden.weight"), &param(p, "saam.mlp.hidden.bias"), hidden);
    let z: Vec<f64> = z.into_iter().map(relu).collect();
    let logits = linear(&z, n, hidden, &param(p, "saam.mlp.out.weight"), &param(p, "saam.mlp.out.bias"), 3 * c);

    let mut out = x.clone();
    for (i, y) in [&y0, &y1, &y2].into_iter().enumerate() {
        let wi: Vec<f64> = (0..n)
            .flat_map(|b| (0..c).map(move |ch| (b, ch)))
            .map(|(b, ch)| sigmoid(logits[b * 3 * c + i * c + ch]))
            .collect();
        out = out.zip(&scale_channels(y, &wi), |a, b| a + b);
    }
    out
}

/// Decoder stage from its written definition.
pub fn decoder_oracle(d: &DecoderStage, p: &ModelParams<f64>, prefix: &str, feat: &Nd, skip: &Nd, hf: &Nd) -> Nd {
    let c = d.channels;
    let [n, _, h, w] = skip.shape;
    let pn = |s: &str| param(p, &format!("{prefix}.{s}"));
    let up = bilinear(feat, h, w);
    let up = conv(&up, &pn("up_conv.weight"), Some(&pn("up_conv.bias")), c, 3, 1, 1, 1, false).map(relu);
    let hfp = conv(hf, &pn("hf_proj.weight"), Some(&pn("hf_proj.bias")), c, 1, 1, 0, 1, false);
    let hfp = bilinear(&hfp, h, w);
    let fused = skip.cat(&hfp);
    let pooled = gap(&fused);
    let gate: Vec<f64> = linear(&pooled, n, 2 * c, &pn("gate.weight"), &pn("gate.bias"), c)
        .into_iter()
        .map(sigmoid)
        .collect();
    let proj = conv(&fused, &pn("fuse.weight"), Some(&pn("fuse.bias")), c, 1, 1, 0, 1, false);
    up.zip(&scale_channels(&proj, &gate), |a, b| a + b)
}

/// Per-pixel relative darkening, box sum and threshold.
pub fn pseudo_mask_oracle(degraded: &Tensor<f32>, clean: &Tensor<f32>, cfg: &PseudoMaskConfig) -> Vec<f32> {
    let [_, _, h, w] = degraded.dims4().unwrap();
    let lum = |t: &Tensor<f32>, y: usize, x: usize| {
        gray(t.at(0, 0, y, x) as f64, t.at(0, 1, y, x) as f64, t.at(0, 2, y, x) as f64)
    };
    let d = |y: usize, x: usize| {
        let (gc, gd) = (lum(clean, y, x), lum(degraded, y, x));
        ((gc - gd) / (gc + cfg.eps)).max(0.0)
    };
    let r = cfg.window as isize / 2;
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                        acc += d(yy as usize, xx as usize);
                    }
                }
            }
            out.push(if acc / (cfg.window * cfg.window) as f64 > cfg.tau { 1.0 } else { 0.0 });
        }
    }
    out
}

/// Mean SSIM over valid windows with explicitly centred second moments.
pub fn ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let [n, c, h, w] = a.dims4().unwrap();
    let k = 11;
    let win = gaussian_window(k, 1.5);
    let mut total = 0.0;
    let mut count = 0usize;
    for bn in 0..n {
        for ch in 0..c {
            for y in 0..=h - k {
                for x in 0..=w - k {
                    let m = |f: &dyn Fn(usize, usize) -> f64| {
                        let mut s = 0.0;
                        for ky in 0..k {
                            for kx in 0..k {
                                s += win[ky * k + kx] * f(y + ky, x + kx);
                            }
                        }
                        s
                    };
                    let mx = m(&|i, j| a.at(bn, ch, i, j));
                    let my = m(&|i, j| b.at(bn, ch, i, j));
                    let vx = m(&|i, j| (a.at(bn, ch, i, j) - mx).powi(2));
                    let vy = m(&|i, j| (b.at(bn, ch, i, j) - my).powi(2));
                    let cv = m(&|i, j| (a.at(bn, ch, i, j) - mx) * (b.at(bn, ch, i, j) - my));
                    total += (2.0 * mx * my + SSIM_C1) * (2.0 * cv + SSIM_C2)
                        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                    count += 1;
                }
            }
        }
    }
    total / count as f64
}

/// Default-config parameter counts of the ablation ladder, summed by hand
/// from the layer table.
pub const LADDER_COUNTS: [usize; 4] = [334_371, 336_708, 779_908, 785_684];

/// Per-layer formula for the default layout: three encoder/decoder stages at
/// widths C, 2C, 4C, an 8C bottleneck, and the optional modules.
pub fn formula_count(c: usize, cg: usize, mask: bool, saam: bool, ctx: bool) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let mut total = 0;
    for i in 0..3 {
        let ch = c << i;
        let cin = if i == 0 { 3 } else { ch };
        total += conv(cin, ch, 3) + conv(ch, ch, 3) + conv(cin, ch, 1) + conv(ch, 2 * ch, 3);
        total += conv(2 * ch, ch, 3) + conv(3 * cin, ch, 1) + (2 * ch * ch + ch) + conv(2 * ch, ch, 1);
    }
    if saam {
        let b = c << 3;
        let h = (3 * b).div_ceil(2);
        total += 2 * conv(b, b, 3) + (3 * b * h + h) + (h * 3 * b + 3 * b);
    }
    if ctx {
        total += conv(3, cg, 3) + (cg * 49 + cg) + (cg * 121 + cg) + conv(cg, cg, 1);
    }
    if mask {
        total += conv(c, c, 3) + conv(c, 1, 1);
    }
    total + conv(c + if ctx { cg } else { 0 }, c, 3) + conv(c, 3, 3)
}
