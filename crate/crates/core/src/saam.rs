//! Scale-aware aggregation at the bottleneck.
//!
//! The bottleneck map `X` is resampled into a three-level pyramid
//! (`X`, `Down2 X`, `Down4 X`). One convolutional branch, shared by all three
//! levels, produces `Y_i`; coarse outputs are upsampled back to full size.
//! A small MLP over the concatenated pooled descriptors of the `Y_i` predicts
//! per-channel, per-scale gates `w_i` in (0, 1), and the result is the
//! residual fusion `X + w0*Y0 + w1*Y1 + w2*Y2`.
//!
//! Gates are independent sigmoids rather than a softmax across scales. The
//! branch convolutions pad by edge replication: on the coarsest level of a
//! small crop a zero border dominates the map and ties the output to absolute
//! position, which does not carry over to larger images.
//! Descriptors are pooled after upsampling, which equals pooling before it
//! under block-mean resampling.

use crate::error::{Error, Result};
use crate::params::{Bound, ConvLayer, LinearLayer, ParamSpec, WeightInit};
use crate::tensor::{ConvSpec, Graph, Resize, Scalar, Var};

/// `X_0`, `X_1`, `X_2`: the input and its 2x and 4x block-mean reductions.
#[derive(Debug, Clone, Copy)]
pub struct PyramidLevels {
    pub x0: Var,
    pub x1: Var,
    pub x2: Var,
}

/// Per-scale channel gates, each `[N, C, 1, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct ScaleWeights {
    pub w0: Var,
    pub w1: Var,
    pub w2: Var,
}

pub fn build_pyramid<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<PyramidLevels> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || !s[2].is_multiple_of(4) || !s[3].is_multiple_of(4) {
        return Err(Error::shape(format!(
            "pyramid needs NCHW extents divisible by 4, got {s:?}"
        )));
    }
    let x1 = g.resize(x, Resize::Down2)?;
    let x2 = g.resize(x, Resize::Down4)?;
    Ok(PyramidLevels { x0: x, x1, x2 })
}

/// Layer layout of the aggregation module for `channels` bottleneck channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Saam {
    pub channels: usize,
    pub branch1: ConvLayer,
    pub branch2: ConvLayer,
    pub mlp_hidden: LinearLayer,
    pub mlp_out: LinearLayer,
}

impl Saam {
    pub fn new(prefix: &str, channels: usize) -> Self {
        let hidden = (3 * channels).div_ceil(2);
        let edge = ConvSpec::same(3).replicate();
        Saam {
            channels,
            branch1: ConvLayer::new(format!("{prefix}.branch.conv1"), channels, channels, 3, edge),
            branch2: ConvLayer::new(format!("{prefix}.branch.conv2"), channels, channels, 3, edge)
                .with_init(WeightInit::Lecun),
            mlp_hidden: LinearLayer::new(format!("{prefix}.mlp.hidden"), 3 * channels, hidden),
            mlp_out: LinearLayer::new(format!("{prefix}.mlp.out"), hidden, 3 * channels)
                .with_init(WeightInit::Lecun),
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        [
            self.branch1.param_specs(),
            self.branch2.param_specs(),
            self.mlp_hidden.param_specs(),
            self.mlp_out.param_specs(),
        ]
        .concat()
    }

    /// The shared branch `conv3x3 -> relu -> conv3x3`.
    pub fn branch<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.branch1.forward(g, p, x)?;
        let h = g.relu(h);
        self.branch2.forward(g, p, h)
    }

    pub fn scale_weights<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        ys: [Var; 3],
    ) -> Result<ScaleWeights> {
        let c = self.channels;
        let mut pooled = Vec::with_capacity(3);
        for y in ys {
            let s = g.shape(y);
            if s.len() != 4 || s[1] != c {
                return Err(Error::shape(format!(
                    "scale weights expect {c} channels, got {s:?}"
                )));
            }
            pooled.push(g.global_avg_pool(y)?);
        }
        let n = g.shape(ys[0])[0];
        let cat = g.concat_channels(pooled[0], pooled[1])?;
        let cat = g.concat_channels(cat, pooled[2])?;
        let flat = g.reshape(cat, &[n, 3 * c])?;
        let h = self.mlp_hidden.forward(g, p, flat)?;
        let h = g.relu(h);
        let logits = self.mlp_out.forward(g, p, h)?;
        let gates = g.sigmoid(logits);
        let gates = g.reshape(gates, &[n, 3 * c, 1, 1])?;
        Ok(ScaleWeights {
            w0: g.slice_channels(gates, 0, c)?,
            w1: g.slice_channels(gates, c, 2 * c)?,
            w2: g.slice_channels(gates, 2 * c, 3 * c)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let levels = build_pyramid(g, x)?;
        let [_, _, h, w] = [g.shape(x)[0], g.shape(x)[1], g.shape(x)[2], g.shape(x)[3]];
        let y0 = self.branch(g, p, levels.x0)?;
        let y1 = self.branch(g, p, levels.x1)?;
        let y1 = g.resize(y1, Resize::UpTo(h, w))?;
        let y2 = self.branch(g, p, levels.x2)?;
        let y2 = g.resize(y2, Resize::UpTo(h, w))?;
        let weights = self.scale_weights(g, p, [y0, y1, y2])?;
        let mut out = x;
        for (wi, yi) in [(weights.w0, y0), (weights.w1, y1), (weights.w2, y2)] {
            let term = g.mul(yi, wi)?;
            out = g.add(out, term)?;
        }
        Ok(out)
    }
}
