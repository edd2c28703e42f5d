//! Global context branch run on the raw input image in parallel to the
//! encoder/decoder.
//!
//! A 3x3 stem is followed by a chain of depthwise 7x7 and 11x11 kernels; the
//! three stage outputs are summed and projected by a 1x1 convolution. The
//! receptive field grows 3 -> 9 -> 19 along the chain, so the summed output
//! mixes local and wide context. This is a compact stand-in for a UniConvNet
//! block, not a reproduction of it.

use crate::error::{Error, Result};
use crate::params::{Bound, ConvLayer, ParamSpec, WeightInit};
use crate::tensor::{ConvSpec, Graph, Scalar, Var};

/// Smallest spatial extent the branch accepts: the widest kernel.
pub const MIN_EXTENT: usize = 11;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalContext {
    pub channels: usize,
    pub stem: ConvLayer,
    pub dw7: ConvLayer,
    pub dw11: ConvLayer,
    pub proj: ConvLayer,
}

impl GlobalContext {
    pub fn new(prefix: &str, channels: usize) -> Self {
        GlobalContext {
            channels,
            stem: ConvLayer::same(format!("{prefix}.stem"), 3, channels, 3),
            dw7: ConvLayer::new(
                format!("{prefix}.dw7"),
                channels,
                channels,
                7,
                ConvSpec::depthwise(7, channels).replicate(),
            )
            .with_init(WeightInit::Lecun),
            dw11: ConvLayer::new(
                format!("{prefix}.dw11"),
                channels,
                channels,
                11,
                ConvSpec::depthwise(11, channels).replicate(),
            )
            .with_init(WeightInit::Lecun),
            proj: ConvLayer::same(format!("{prefix}.proj"), channels, channels, 1).with_init(WeightInit::Lecun),
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        [
            self.stem.param_specs(),
            self.dw7.param_specs(),
            self.dw11.param_specs(),
            self.proj.param_specs(),
        ]
        .concat()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, img: Var) -> Result<Var> {
        let s = g.shape(img);
        if s.len() != 4 || s[1] != 3 || s[2] < MIN_EXTENT || s[3] < MIN_EXTENT {
            return Err(Error::shape(format!(
                "context branch needs [N, 3, H>={MIN_EXTENT}, W>={MIN_EXTENT}], got {s:?}"
            )));
        }
        let y0 = self.stem.forward(g, p, img)?;
        let y0 = g.relu(y0);
        let y1 = self.dw7.forward(g, p, y0)?;
        let y2 = self.dw11.forward(g, p, y1)?;
        let sum = g.add(y0, y1)?;
        let sum = g.add(sum, y2)?;
        self.proj.forward(g, p, sum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ModelParams;
    use crate::tensor::{Fill, Tensor};

    fn run(p: &ModelParams<f64>, ctx: &GlobalContext, img: Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let b = p.bind_frozen(&mut g);
        let x = g.constant(img);
        let y = ctx.forward(&mut g, &b, x).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn zero_params_give_zero_features() {
        let ctx = GlobalContext::new("ctx", 4);
        let mut p = ModelParams::init(&ctx.param_specs(), 1).unwrap();
        p.fill_prefix("ctx", 0.0);
        let img = Tensor::create(&[1, 3, 12, 12], Fill::Uniform { lo: 0.0, hi: 1.0, seed: 2 }).unwrap();
        let y = run(&p, &ctx, img);
        assert_eq!(y.shape(), &[1, 4, 12, 12]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_input_gives_constant_interior() {
        let ctx = GlobalContext::new("ctx", 2);
        let p = ModelParams::init(&ctx.param_specs(), 7).unwrap();
        let y = run(&p, &ctx, Tensor::full(&[1, 3, 24, 24], 0.6).unwrap());
        // interior: farther than the 9-pixel receptive radius from every border
        for c in 0..2 {
            let r = y.at(0, c, 9, 9);
            for yy in 9..15 {
                for xx in 9..15 {
                    assert!((y.at(0, c, yy, xx) - r).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn impulse_support_has_chebyshev_radius_nine() {
        let ctx = GlobalContext::new("ctx", 1);
        let mut p = ModelParams::<f64>::init(&ctx.param_specs(), 1).unwrap();
        p.fill_prefix("ctx.stem.weight", 1.0 / 27.0);
        p.fill_prefix("ctx.dw7.weight", 1.0 / 49.0);
        p.fill_prefix("ctx.dw11.weight", 1.0 / 121.0);
        p.fill_prefix("ctx.proj.weight", 1.0);
        for b in ["ctx.stem.bias", "ctx.dw7.bias", "ctx.dw11.bias", "ctx.proj.bias"] {
            p.fill_prefix(b, 0.0);
        }
        let n = 31;
        let mut img = Tensor::zeros(&[1, 3, n, n]).unwrap();
        img.data_mut()[15 * n + 15] = 1.0;
        let y = run(&p, &ctx, img);
        for yy in 0..n {
            for xx in 0..n {
                let d = (yy as isize - 15).unsigned_abs().max((xx as isize - 15).unsigned_abs());
                let v = y.at(0, 0, yy, xx);
                if d <= 9 {
                    assert!(v > 0.0, "expected support at distance {d}");
                } else {
                    assert_eq!(v, 0.0, "leak at distance {d}");
                }
            }
        }
    }

    #[test]
    fn rejects_tiny_inputs() {
        let ctx = GlobalContext::new("ctx", 2);
        let p = ModelParams::<f64>::init(&ctx.param_specs(), 7).unwrap();
        let mut g = Graph::new();
        let b = p.bind_frozen(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 3, 10, 16]).unwrap());
        assert!(matches!(ctx.forward(&mut g, &b, x), Err(Error::Shape(_))));
    }
}
