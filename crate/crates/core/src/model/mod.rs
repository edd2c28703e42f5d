//! The full restoration network.
//!
//! ```text
//! input ─► enc0 ─► enc1 ─► enc2 ─► [SAAM] ─► dec2 ─► dec1 ─► dec0 ─► F_d
//!            │skip,hf  │       │                ▲      ▲      ▲        │
//!            └─────────┴───────┴────────────────┴──────┴──────┘        │
//! input ─► [context branch] ─► F_g ──────────────────────────────┐     │
//!                                                                 ▼     ▼
//!                          R = H_r([F_d, F_g])     M = sigmoid(H_m(F_d))
//!                          restored = input + M * R
//! ```
//!
//! Bracketed parts are switched by [`ModelConfig`]. With the mask head off,
//! `M` is the constant 1.

pub mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::context::GlobalContext;
use crate::error::{Error, Result};
use crate::params::{self, Bound, ConvLayer, LinearLayer, ModelParams, ParamSpec, WeightInit};
use crate::saam::Saam;
use crate::tensor::{ConvSpec, Graph, Resize, Scalar, Tensor, Var};
use crate::wavelet::dwt_haar;

/// Encoder/decoder depth. Fixed; stage `i` works with `base_channels << i`.
pub const STAGES: usize = 3;

/// Input extents must be multiples of this: three stride-2 stages times the
/// 4x pyramid at the bottleneck.
pub const SIZE_MULTIPLE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub context_channels: usize,
    pub use_mask: bool,
    pub use_saam: bool,
    pub use_context: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 16,
            context_channels: 16,
            use_mask: true,
            use_saam: true,
            use_context: true,
        }
    }
}

/// The four rows of the component ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    Baseline,
    WithMask,
    WithMaskSaam,
    Full,
}

impl Ablation {
    pub const LADDER: [Ablation; 4] = [
        Ablation::Baseline,
        Ablation::WithMask,
        Ablation::WithMaskSaam,
        Ablation::Full,
    ];

    pub fn config(self, base: ModelConfig) -> ModelConfig {
        let (m, s, c) = match self {
            Ablation::Baseline => (false, false, false),
            Ablation::WithMask => (true, false, false),
            Ablation::WithMaskSaam => (true, true, false),
            Ablation::Full => (true, true, true),
        };
        ModelConfig {
            use_mask: m,
            use_saam: s,
            use_context: c,
            ..base
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::WithMask => "+mask",
            Ablation::WithMaskSaam => "+mask+saam",
            Ablation::Full => "full",
        }
    }
}

/// Outputs of one encoder stage.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub down: Var,
    pub skip: Var,
    pub hf: Var,
}

/// Compression block plus wavelet split.
///
/// `skip = relu(conv(relu(conv(x)))) + up(conv1x1(LL(x)))`, then a stride-2
/// convolution doubles the channels. The detail bands of `x` are handed to
/// the matching decoder stage untouched. The 1x1 fusion runs at band
/// resolution before upsampling; both maps are linear and per-channel, so the
/// order does not change the result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderStage {
    pub cin: usize,
    pub channels: usize,
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub lf_fuse: ConvLayer,
    pub down: ConvLayer,
}

impl EncoderStage {
    pub fn new(prefix: &str, cin: usize, channels: usize) -> Self {
        EncoderStage {
            cin,
            channels,
            conv1: ConvLayer::same(format!("{prefix}.conv1"), cin, channels, 3),
            conv2: ConvLayer::same(format!("{prefix}.conv2"), channels, channels, 3),
            lf_fuse: ConvLayer::same(format!("{prefix}.lf_fuse"), cin, channels, 1).with_init(WeightInit::Lecun),
            down: ConvLayer::new(
                format!("{prefix}.down"),
                channels,
                2 * channels,
                3,
                ConvSpec::strided(3, 2),
            )
            .with_init(WeightInit::Lecun),
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        [
            self.conv1.param_specs(),
            self.conv2.param_specs(),
            self.lf_fuse.param_specs(),
            self.down.param_specs(),
        ]
        .concat()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, feat: Var) -> Result<EncoderOutput> {
        let [_, _, h, w] = crate::tensor::dims4(g.shape(feat))?;
        let x = self.conv1.forward(g, p, feat)?;
        let x = g.relu(x);
        let x = self.conv2.forward(g, p, x)?;
        let x = g.relu(x);
        let bands = dwt_haar(g, feat)?;
        let lf = self.lf_fuse.forward(g, p, bands.lf)?;
        let lf = g.resize(lf, Resize::UpTo(h, w))?;
        let skip = g.add(x, lf)?;
        let down = self.down.forward(g, p, skip)?;
        Ok(EncoderOutput {
            down,
            skip,
            hf: bands.hf,
        })
    }
}

/// Upsampling stage with gated skip/detail fusion.
///
/// `up = relu(conv(Up(x)))`; `f = [skip, Up(conv1x1(hf))]`;
/// `gate = sigmoid(linear(gap(f)))`; `out = up + gate * conv1x1(f)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderStage {
    pub channels: usize,
    pub hf_channels: usize,
    pub up_conv: ConvLayer,
    pub hf_proj: ConvLayer,
    pub gate: LinearLayer,
    pub fuse: ConvLayer,
}

impl DecoderStage {
    pub fn new(prefix: &str, channels: usize, hf_channels: usize) -> Self {
        DecoderStage {
            channels,
            hf_channels,
            up_conv: ConvLayer::same(format!("{prefix}.up_conv"), 2 * channels, channels, 3),
            hf_proj: ConvLayer::same(format!("{prefix}.hf_proj"), hf_channels, channels, 1)
                .with_init(WeightInit::Lecun),
            gate: LinearLayer::new(format!("{prefix}.gate"), 2 * channels, channels).with_init(WeightInit::Lecun),
            fuse: ConvLayer::same(format!("{prefix}.fuse"), 2 * channels, channels, 1).with_init(WeightInit::Lecun),
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        [
            self.up_conv.param_specs(),
            self.hf_proj.param_specs(),
            self.gate.param_specs(),
            self.fuse.param_specs(),
        ]
        .concat()
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        feat: Var,
        skip: Var,
        hf: Var,
    ) -> Result<Var> {
        let [n, _, fh, fw] = crate::tensor::dims4(g.shape(feat))?;
        let [_, _, h, w] = crate::tensor::dims4(g.shape(skip))?;
        if (h, w) != (2 * fh, 2 * fw) {
            return Err(Error::shape(format!(
                "decoder skip must be twice the feature extent: {fh}x{fw} vs {h}x{w}"
            )));
        }
        let up = g.resize(feat, Resize::UpTo(h, w))?;
        let up = self.up_conv.forward(g, p, up)?;
        let up = g.relu(up);
        let hf = self.hf_proj.forward(g, p, hf)?;
        let hf = g.resize(hf, Resize::UpTo(h, w))?;
        let fused = g.concat_channels(skip, hf)?;
        let pooled = g.global_avg_pool(fused)?;
        let pooled = g.reshape(pooled, &[n, 2 * self.channels])?;
        let gate = self.gate.forward(g, p, pooled)?;
        let gate = g.sigmoid(gate);
        let gate = g.reshape(gate, &[n, self.channels, 1, 1])?;
        let proj = self.fuse.forward(g, p, fused)?;
        let gated = g.mul(proj, gate)?;
        g.add(up, gated)
    }
}

/// `H_m`: conv3x3 -> relu -> conv1x1 to one channel; sigmoid applied by
/// [`predict_mask`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskHead {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
}

/// `H_r`: conv3x3 -> relu -> conv3x3 to three channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResidualHead {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
}

pub fn predict_mask<T: Scalar>(g: &mut Graph<T>, p: &Bound, head: &MaskHead, f_d: Var) -> Result<Var> {
    let x = head.conv1.forward(g, p, f_d)?;
    let x = g.relu(x);
    let x = head.conv2.forward(g, p, x)?;
    Ok(g.sigmoid(x))
}

pub fn predict_residual<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    head: &ResidualHead,
    f_d: Var,
    f_g: Option<Var>,
) -> Result<Var> {
    let x = match f_g {
        Some(f_g) => g.concat_channels(f_d, f_g)?,
        None => f_d,
    };
    let x = head.conv1.forward(g, p, x)?;
    let x = g.relu(x);
    head.conv2.forward(g, p, x)
}

/// `input + mask * residual`, the mask broadcast over colour channels.
pub fn compose_output<T: Scalar>(g: &mut Graph<T>, input: Var, mask: Var, residual: Var) -> Result<Var> {
    let gated = g.mul(residual, mask)?;
    g.add(input, gated)
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub restored: Var,
    /// Soft guidance mask `[N, 1, H, W]`; constant 1 when the head is off.
    pub mask: Var,
    pub residual: Var,
}

/// Layer layout derived from a [`ModelConfig`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UniBlendNet {
    pub config: ModelConfig,
    pub encoders: Vec<EncoderStage>,
    pub decoders: Vec<DecoderStage>,
    pub saam: Option<Saam>,
    pub context: Option<GlobalContext>,
    pub mask_head: Option<MaskHead>,
    pub residual_head: ResidualHead,
}

impl UniBlendNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let c = config.base_channels;
        if c == 0 || (config.use_context && config.context_channels == 0) {
            return Err(Error::Contract("channel counts must be positive".into()));
        }
        let mut encoders = Vec::with_capacity(STAGES);
        let mut decoders = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            let ch = c << i;
            let cin = if i == 0 { 3 } else { ch };
            encoders.push(EncoderStage::new(&format!("enc.{i}"), cin, ch));
            decoders.push(DecoderStage::new(&format!("dec.{i}"), ch, 3 * cin));
        }
        let bottleneck = c << STAGES;
        let cg = if config.use_context { config.context_channels } else { 0 };
        Ok(UniBlendNet {
            config,
            encoders,
            decoders,
            saam: config.use_saam.then(|| Saam::new("saam", bottleneck)),
            context: config
                .use_context
                .then(|| GlobalContext::new("ctx", config.context_channels)),
            mask_head: config.use_mask.then(|| MaskHead {
                conv1: ConvLayer::same("mask_head.conv1", c, c, 3),
                conv2: ConvLayer::same("mask_head.conv2", c, 1, 1).with_init(WeightInit::Lecun),
            }),
            residual_head: ResidualHead {
                conv1: ConvLayer::same("res_head.conv1", c + cg, c, 3),
                conv2: ConvLayer::same("res_head.conv2", c, 3, 3).with_init(WeightInit::Zero),
            },
        })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for e in &self.encoders {
            specs.extend(e.param_specs());
        }
        if let Some(s) = &self.saam {
            specs.extend(s.param_specs());
        }
        for d in &self.decoders {
            specs.extend(d.param_specs());
        }
        if let Some(ctx) = &self.context {
            specs.extend(ctx.param_specs());
        }
        if let Some(m) = &self.mask_head {
            specs.extend(m.conv1.param_specs());
            specs.extend(m.conv2.param_specs());
        }
        specs.extend(self.residual_head.conv1.param_specs());
        specs.extend(self.residual_head.conv2.param_specs());
        specs
    }

    pub fn param_count(&self) -> usize {
        params::count(&self.param_specs())
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ModelParams<T>> {
        ModelParams::init(&self.param_specs(), seed)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, input: Var) -> Result<ForwardOutput> {
        let [n, c, h, w] = crate::tensor::dims4(g.shape(input))?;
        if c != 3 {
            return Err(Error::shape(format!("model input needs 3 channels, got {c}")));
        }
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::shape(format!(
                "model input extents must be multiples of {SIZE_MULTIPLE}, got {h}x{w}"
            )));
        }

        let mut feat = input;
        let mut skips = Vec::with_capacity(STAGES);
        for enc in &self.encoders {
            let out = enc.forward(g, p, feat)?;
            skips.push((out.skip, out.hf));
            feat = out.down;
        }
        if let Some(saam) = &self.saam {
            feat = saam.forward(g, p, feat)?;
        }
        for (dec, &(skip, hf)) in self.decoders.iter().zip(&skips).rev() {
            feat = dec.forward(g, p, feat, skip, hf)?;
        }
        let f_d = feat;

        let f_g = match &self.context {
            Some(ctx) => Some(ctx.forward(g, p, input)?),
            None => None,
        };
        let mask = match &self.mask_head {
            Some(head) => predict_mask(g, p, head, f_d)?,
            None => g.constant(Tensor::full(&[n, 1, h, w], 1.0)?),
        };
        let residual = predict_residual(g, p, &self.residual_head, f_d, f_g)?;
        let restored = compose_output(g, input, mask, residual)?;
        Ok(ForwardOutput {
            restored,
            mask,
            residual,
        })
    }
}

/// Restored image, mask and residual of one inference pass as plain tensors.
#[derive(Debug, Clone)]
pub struct Inference<T> {
    pub restored: Tensor<T>,
    pub mask: Tensor<T>,
    pub residual: Tensor<T>,
}

/// Runs the network without recording gradients for the parameters.
pub fn infer<T: Scalar>(net: &UniBlendNet, params: &ModelParams<T>, input: &Tensor<T>) -> Result<Inference<T>> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let x = g.constant(input.clone());
    let out = net.forward(&mut g, &bound, x)?;
    Ok(Inference {
        restored: g.value(out.restored).clone(),
        mask: g.value(out.mask).clone(),
        residual: g.value(out.residual).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    fn small() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            context_channels: 4,
            ..ModelConfig::default()
        }
    }

    fn image(n: usize, size: usize, seed: u64) -> Tensor<f32> {
        Tensor::create(&[n, 3, size, size], Fill::Uniform { lo: 0.0, hi: 1.0, seed }).unwrap()
    }

    #[test]
    fn shape_contract() {
        let net = UniBlendNet::new(small()).unwrap();
        let p = net.init_params::<f32>(1).unwrap();
        let out = infer(&net, &p, &image(1, 32, 2)).unwrap();
        assert_eq!(out.restored.shape(), &[1, 3, 32, 32]);
        assert_eq!(out.mask.shape(), &[1, 1, 32, 32]);
        assert_eq!(out.residual.shape(), &[1, 3, 32, 32]);
        assert!(out.mask.data().iter().all(|&m| m > 0.0 && m < 1.0));
    }

    #[test]
    fn rejects_indivisible_extent() {
        let net = UniBlendNet::new(small()).unwrap();
        let p = net.init_params::<f32>(1).unwrap();
        let err = infer(&net, &p, &image(1, 48, 2)).unwrap_err();
        assert!(err.to_string().contains("multiples of 32"), "{err}");
    }

    #[test]
    fn recomposition_law() {
        let net = UniBlendNet::new(small()).unwrap();
        let p = net.init_params::<f32>(3).unwrap();
        let x = image(2, 32, 4);
        let out = infer(&net, &p, &x).unwrap();
        let [n, _, h, w] = x.dims4().unwrap();
        for b in 0..n {
            for c in 0..3 {
                for yy in 0..h {
                    for xx in 0..w {
                        let want = x.at(b, c, yy, xx) + out.mask.at(b, 0, yy, xx) * out.residual.at(b, c, yy, xx);
                        assert!((out.restored.at(b, c, yy, xx) - want).abs() <= 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_residual_head_reproduces_input() {
        let net = UniBlendNet::new(small()).unwrap();
        let mut p = net.init_params::<f32>(3).unwrap();
        p.fill_prefix("res_head", 0.0);
        let x = image(1, 32, 4);
        let out = infer(&net, &p, &x).unwrap();
        assert_eq!(out.restored.data(), x.data());
    }

    #[test]
    fn mask_off_means_unit_gate() {
        let cfg = Ablation::Baseline.config(small());
        let net = UniBlendNet::new(cfg).unwrap();
        let p = net.init_params::<f32>(5).unwrap();
        let x = image(1, 32, 6);
        let out = infer(&net, &p, &x).unwrap();
        assert!(out.mask.data().iter().all(|&m| m == 1.0));
        for ((&r, &i), &d) in out.restored.data().iter().zip(x.data()).zip(out.residual.data()) {
            assert_eq!(r, i + d);
        }
    }

    #[test]
    fn mask_head_extremes() {
        let net = UniBlendNet::new(small()).unwrap();
        let mut p = net.init_params::<f64>(5).unwrap();
        p.fill_prefix("mask_head", 0.0);
        let x: Tensor<f64> = image(1, 32, 6).cast();
        let out = infer(&net, &p, &x).unwrap();
        assert!(out.mask.data().iter().all(|&m| m == 0.5));
        p.fill_prefix("mask_head.conv2.bias", -20.0);
        let out = infer(&net, &p, &x).unwrap();
        assert!(out.mask.data().iter().all(|&m| m > 0.0 && m < 1e-8));
    }

    #[test]
    fn forward_is_deterministic() {
        let net = UniBlendNet::new(small()).unwrap();
        let a = infer(&net, &net.init_params::<f32>(8).unwrap(), &image(1, 32, 1)).unwrap();
        let b = infer(&net, &net.init_params::<f32>(8).unwrap(), &image(1, 32, 1)).unwrap();
        assert_eq!(a.restored.data(), b.restored.data());
        assert_eq!(a.mask.data(), b.mask.data());
    }

    #[test]
    fn residual_head_width_depends_on_context() {
        let full = UniBlendNet::new(small()).unwrap();
        let no_ctx = UniBlendNet::new(ModelConfig { use_context: false, ..small() }).unwrap();
        let w = |net: &UniBlendNet| params::count(&net.residual_head.conv1.param_specs());
        assert_eq!(w(&full) - w(&no_ctx), 4 * 4 * 9);
    }

    #[test]
    fn parameter_names_are_unique() {
        let net = UniBlendNet::new(ModelConfig::default()).unwrap();
        let specs = net.param_specs();
        let mut names: Vec<_> = specs.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), specs.len());
    }
}
