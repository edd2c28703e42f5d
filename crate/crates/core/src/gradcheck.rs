//! Finite-difference verification of every differentiable graph operation
//! and of composite modules up to the full network.
//!
//! Each probe builds a small graph, projects its output onto a fixed random
//! tensor so the check sees a scalar, and compares reverse-mode gradients
//! with central differences taken in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::context::GlobalContext;
use crate::error::{Error, Result};
use crate::losses::{grad_loss, mask_loss, perc_loss, ssim_loss, total_loss, LossWeights, PerceptualExtractor};
use crate::model::{ModelConfig, UniBlendNet};
use crate::params::{Bound, ModelParams, ParamSpec};
use crate::saam::Saam;
use crate::tensor::{Activation, BinaryOp, ConvSpec, Padding, Fill, Graph, Precision, Resize, Scalar, Tensor, Var};

/// Central difference step.
pub const FD_STEP: f64 = 1e-5;
/// Maximum accepted relative error when gradients are computed in f64.
pub const TOL_F64: f64 = 1e-4;
/// Maximum accepted relative error when gradients are computed in f32.
pub const TOL_F32: f64 = 2e-3;
/// Scalar entries sampled per composite module.
pub const COMPOSITE_SAMPLES: usize = 20;
const ELEMENT_SAMPLES: usize = 12;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Probe {
    Add,
    Sub,
    Mul,
    Div,
    Broadcast,
    Scale,
    AddScalar,
    Relu,
    Sigmoid,
    Abs,
    Conv,
    ConvStrided,
    ConvDepthwise,
    ConvGrouped,
    ConvReplicate,
    ConvPointwise,
    Down2,
    Down4,
    Upsample,
    GlobalAvgPool,
    Linear,
    Concat,
    Slice,
    Crop,
    Reshape,
    Dwt,
    Idwt,
    Sum,
    Mean,
    Saam,
    Context,
    SsimLoss,
    GradLoss,
    PercLoss,
    MaskLoss,
    Model,
}

const ALL: [Probe; 36] = [
    Probe::Add,
    Probe::Sub,
    Probe::Mul,
    Probe::Div,
    Probe::Broadcast,
    Probe::Scale,
    Probe::AddScalar,
    Probe::Relu,
    Probe::Sigmoid,
    Probe::Abs,
    Probe::Conv,
    Probe::ConvStrided,
    Probe::ConvDepthwise,
    Probe::ConvGrouped,
    Probe::ConvReplicate,
    Probe::ConvPointwise,
    Probe::Down2,
    Probe::Down4,
    Probe::Upsample,
    Probe::GlobalAvgPool,
    Probe::Linear,
    Probe::Concat,
    Probe::Slice,
    Probe::Crop,
    Probe::Reshape,
    Probe::Dwt,
    Probe::Idwt,
    Probe::Sum,
    Probe::Mean,
    Probe::Saam,
    Probe::Context,
    Probe::SsimLoss,
    Probe::GradLoss,
    Probe::PercLoss,
    Probe::MaskLoss,
    Probe::Model,
];

/// Inputs and parameters of one probe, held in f64.
#[derive(Clone)]
struct Setup {
    inputs: Vec<Tensor<f64>>,
    params: ModelParams<f64>,
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Input(usize),
    Param(usize),
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::create(shape, Fill::Uniform { lo, hi, seed: rng.gen() }).unwrap()
}

/// Uniform in `[-1, 1]` but at least `0.1` from zero, clear of relu and abs kinks.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    t.data_mut().iter_mut().for_each(|v| {
        if rng.gen_bool(0.5) {
            *v = -*v
        }
    });
    t
}

/// Seeded parameters with every entry jittered so biases are not all zero.
fn jittered(specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::init(specs, rng.gen()).unwrap();
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    p
}

fn small_model() -> UniBlendNet {
    UniBlendNet::new(ModelConfig::default()).unwrap()
}

impl Probe {
    fn name(self) -> String {
        format!("{self:?}")
            .chars()
            .enumerate()
            .flat_map(|(i, c)| {
                let sep = (i > 0 && c.is_ascii_uppercase()).then_some('_');
                sep.into_iter().chain(std::iter::once(c.to_ascii_lowercase()))
            })
            .collect()
    }

    fn is_composite(self) -> bool {
        matches!(self, Probe::Saam | Probe::Context | Probe::Model)
    }

    fn setup(self, rng: &mut ChaCha8Rng) -> Setup {
        let s4 = [2, 3, 4, 4];
        let none = ModelParams::empty();
        let inputs = match self {
            Probe::Add | Probe::Sub | Probe::Mul => vec![uniform(rng, &s4, -1.0, 1.0), uniform(rng, &s4, -1.0, 1.0)],
            Probe::Div => vec![uniform(rng, &s4, -1.0, 1.0), uniform(rng, &s4, 0.5, 1.5)],
            Probe::Broadcast => vec![uniform(rng, &s4, -1.0, 1.0), uniform(rng, &[2, 3, 1, 1], 0.5, 1.5)],
            Probe::Relu | Probe::Abs => vec![off_zero(rng, &s4)],
            Probe::Conv | Probe::ConvStrided | Probe::ConvReplicate => {
                vec![uniform(rng, &[2, 3, 6, 6], -1.0, 1.0), uniform(rng, &[4, 3, 3, 3], -1.0, 1.0), uniform(rng, &[4], -1.0, 1.0)]
            }
            Probe::ConvDepthwise => {
                vec![uniform(rng, &[1, 4, 6, 6], -1.0, 1.0), uniform(rng, &[4, 1, 3, 3], -1.0, 1.0), uniform(rng, &[4], -1.0, 1.0)]
            }
            Probe::ConvGrouped => {
                vec![uniform(rng, &[1, 4, 5, 5], -1.0, 1.0), uniform(rng, &[6, 2, 3, 3], -1.0, 1.0), uniform(rng, &[6], -1.0, 1.0)]
            }
            Probe::ConvPointwise => {
                vec![uniform(rng, &[2, 3, 4, 4], -1.0, 1.0), uniform(rng, &[5, 3, 1, 1], -1.0, 1.0), uniform(rng, &[5], -1.0, 1.0)]
            }
            Probe::Down2 | Probe::Down4 => vec![uniform(rng, &[1, 2, 8, 8], -1.0, 1.0)],
            Probe::Upsample => vec![uniform(rng, &[1, 2, 3, 4], -1.0, 1.0)],
            Probe::Linear => vec![uniform(rng, &[3, 5], -1.0, 1.0), uniform(rng, &[4, 5], -1.0, 1.0), uniform(rng, &[4], -1.0, 1.0)],
            Probe::Concat => vec![uniform(rng, &[2, 2, 3, 3], -1.0, 1.0), uniform(rng, &[2, 3, 3, 3], -1.0, 1.0)],
            Probe::Slice | Probe::Crop => vec![uniform(rng, &[2, 4, 5, 5], -1.0, 1.0)],
            Probe::Dwt | Probe::Idwt => vec![uniform(rng, &[1, 4, 4, 6], -1.0, 1.0)],
            Probe::Scale
            | Probe::AddScalar
            | Probe::Sigmoid
            | Probe::GlobalAvgPool
            | Probe::Reshape
            | Probe::Sum
            | Probe::Mean => vec![uniform(rng, &s4, -2.0, 2.0)],
            Probe::SsimLoss | Probe::GradLoss | Probe::PercLoss => {
                vec![uniform(rng, &[1, 3, 16, 16], 0.0, 1.0), uniform(rng, &[1, 3, 16, 16], 0.0, 1.0)]
            }
            Probe::MaskLoss => {
                let mut target = uniform(rng, &[1, 1, 4, 4], 0.0, 1.0);
                target.data_mut().iter_mut().for_each(|v| *v = v.round());
                vec![uniform(rng, &[1, 1, 4, 4], 0.1, 0.9), target]
            }
            Probe::Saam => vec![uniform(rng, &[1, 4, 8, 8], -1.0, 1.0)],
            Probe::Context => vec![uniform(rng, &[1, 3, 12, 12], 0.0, 1.0)],
            Probe::Model => vec![uniform(rng, &[1, 3, 32, 32], 0.0, 1.0), uniform(rng, &[1, 3, 32, 32], 0.0, 1.0)],
        };
        let params = match self {
            Probe::Saam => jittered(&Saam::new("saam", 4).param_specs(), rng),
            Probe::Context => jittered(&GlobalContext::new("ctx", 3).param_specs(), rng),
            Probe::Model => jittered(&small_model().param_specs(), rng),
            _ => none,
        };
        Setup { inputs, params }
    }

    fn build<T: Scalar>(self, g: &mut Graph<T>, x: &[Var], p: &Bound) -> Result<Var> {
        match self {
            Probe::Add => g.add(x[0], x[1]),
            Probe::Sub => g.sub(x[0], x[1]),
            Probe::Mul => g.mul(x[0], x[1]),
            Probe::Div => g.div(x[0], x[1]),
            Probe::Broadcast => {
                let m = g.binary(BinaryOp::Mul, x[0], x[1])?;
                g.binary(BinaryOp::Div, m, x[1]).and_then(|d| g.add(d, m))
            }
            Probe::Scale => Ok(g.scale(x[0], -1.7)),
            Probe::AddScalar => Ok(g.add_scalar(x[0], 0.3)),
            Probe::Relu => Ok(g.activation(x[0], Activation::Relu)),
            Probe::Sigmoid => Ok(g.activation(x[0], Activation::Sigmoid)),
            Probe::Abs => Ok(g.abs(x[0])),
            Probe::Conv => g.conv2d(x[0], x[1], Some(x[2]), ConvSpec::same(3)),
            Probe::ConvStrided => g.conv2d(x[0], x[1], Some(x[2]), ConvSpec::strided(3, 2)),
            Probe::ConvDepthwise => g.conv2d(x[0], x[1], Some(x[2]), ConvSpec::depthwise(3, 4)),
            Probe::ConvGrouped => g.conv2d(x[0], x[1], Some(x[2]), ConvSpec { stride: 1, pad: 1, groups: 2, padding: Padding::Zeros }),
            Probe::ConvReplicate => g.conv2d(x[0], x[1], Some(x[2]), ConvSpec::strided(3, 2).replicate()),
            Probe::ConvPointwise => g.conv2d(x[0], x[1], Some(x[2]), ConvSpec::same(1)),
            Probe::Down2 => g.resize(x[0], Resize::Down2),
            Probe::Down4 => g.resize(x[0], Resize::Down4),
            Probe::Upsample => g.resize(x[0], Resize::UpTo(7, 9)),
            Probe::GlobalAvgPool => g.global_avg_pool(x[0]),
            Probe::Linear => g.linear(x[0], x[1], Some(x[2])),
            Probe::Concat => g.concat_channels(x[0], x[1]),
            Probe::Slice => g.slice_channels(x[0], 1, 3),
            Probe::Crop => g.crop(x[0], 1, 2, 3, 2),
            Probe::Reshape => g.reshape(x[0], &[6, 16]),
            Probe::Dwt => g.dwt(x[0]),
            Probe::Idwt => g.idwt(x[0]),
            Probe::Sum => Ok(g.sum(x[0])),
            Probe::Mean => Ok(g.mean(x[0])),
            Probe::Saam => Saam::new("saam", 4).forward(g, p, x[0]),
            Probe::Context => GlobalContext::new("ctx", 3).forward(g, p, x[0]),
            Probe::SsimLoss => ssim_loss(g, x[0], x[1]),
            Probe::GradLoss => grad_loss(g, x[0], x[1]),
            Probe::PercLoss => perc_loss(g, x[0], x[1], &PerceptualExtractor::new()),
            Probe::MaskLoss => mask_loss(g, x[0], x[1]),
            Probe::Model => {
                let out = small_model().forward(g, p, x[0])?;
                let target = g.constant(Tensor::full(&[1, 1, 32, 32], 0.0)?);
                let terms = total_loss(
                    g,
                    out.restored,
                    x[1],
                    Some((out.mask, target)),
                    &LossWeights::default(),
                    &PerceptualExtractor::new(),
                )?;
                Ok(terms.total)
            }
        }
    }

    /// Which inputs are differentiated. Targets of loss probes are not.
    fn differentiable_inputs(self) -> usize {
        match self {
            Probe::SsimLoss | Probe::GradLoss | Probe::PercLoss | Probe::MaskLoss | Probe::Model => 1,
            Probe::Saam | Probe::Context => 1,
            _ => usize::MAX,
        }
    }
}

/// Builds the probe graph in `T`, projected onto a seeded random tensor.
fn scalar_objective<T: Scalar>(
    probe: Probe,
    setup: &Setup,
    proj_seed: u64,
    track: bool,
) -> Result<(Graph<T>, Var, Vec<Var>, Bound)> {
    let mut g = Graph::<T>::new();
    let n_diff = probe.differentiable_inputs();
    let xs: Vec<Var> = setup
        .inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let t = t.cast::<T>();
            if track && i < n_diff {
                g.param(t)
            } else {
                g.constant(t)
            }
        })
        .collect();
    let params = setup.params.cast::<T>();
    let bound = if track { params.bind(&mut g) } else { params.bind_frozen(&mut g) };
    let out = probe.build(&mut g, &xs, &bound)?;
    let shape = g.shape(out).to_vec();
    let r = g.constant(Tensor::create(&shape, Fill::Uniform { lo: -1.0, hi: 1.0, seed: proj_seed })?);
    let prod = g.mul(out, r)?;
    let loss = g.sum(prod);
    Ok((g, loss, xs, bound))
}

fn objective_f64(probe: Probe, setup: &Setup, proj_seed: u64) -> Result<f64> {
    let (g, loss, _, _) = scalar_objective::<f64>(probe, setup, proj_seed, false)?;
    Ok(g.scalar(loss))
}

fn perturb(setup: &mut Setup, slot: Slot, idx: usize, delta: f64) {
    let t = match slot {
        Slot::Input(i) => &mut setup.inputs[i],
        Slot::Param(i) => setup.params.iter_mut().nth(i).unwrap().1,
    };
    t.data_mut()[idx] += delta;
}

/// Outcome of one probe.
#[derive(Debug, Clone, Serialize)]
pub struct OpReport {
    pub op: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Outcome of the whole suite.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub precision: Precision,
    pub tolerance: f64,
    pub ops: Vec<OpReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed)
    }

    pub fn worst(&self) -> Option<&OpReport> {
        self.ops.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn check_probe<T: Scalar>(probe: Probe, seed: u64, tol: f64, floor: f64) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (probe as u64).wrapping_mul(0x9E37_79B9));
    let setup = probe.setup(&mut rng);
    let proj_seed = rng.gen();

    let (mut g, loss, xs, bound) = scalar_objective::<T>(probe, &setup, proj_seed, true)?;
    g.backward(loss)?;

    let mut coords: Vec<(Slot, usize, f64)> = Vec::new();
    let analytic_of = |slot: Slot, var: Var, idx: usize, g: &Graph<T>| -> Result<f64> {
        let grad = g
            .grad(var)
            .ok_or_else(|| Error::MissingGradient(format!("{} {slot:?}", probe.name())))?;
        Ok(grad[idx].to_f64_lossy())
    };
    if probe.is_composite() {
        let names: Vec<(usize, Var, usize)> = bound
            .iter()
            .enumerate()
            .map(|(i, (name, v))| (i, v, setup.params.get(name).unwrap().numel()))
            .collect();
        for _ in 0..COMPOSITE_SAMPLES {
            let (i, var, n) = names[rng.gen_range(0..names.len())];
            let idx = rng.gen_range(0..n);
            coords.push((Slot::Param(i), idx, analytic_of(Slot::Param(i), var, idx, &g)?));
        }
        let n = setup.inputs[0].numel();
        for _ in 0..4 {
            let idx = rng.gen_range(0..n);
            coords.push((Slot::Input(0), idx, analytic_of(Slot::Input(0), xs[0], idx, &g)?));
        }
    } else {
        for (i, &var) in xs.iter().enumerate().take(probe.differentiable_inputs()) {
            let n = setup.inputs[i].numel();
            let picks: Vec<usize> = if n <= ELEMENT_SAMPLES {
                (0..n).collect()
            } else {
                (0..ELEMENT_SAMPLES).map(|_| rng.gen_range(0..n)).collect()
            };
            for idx in picks {
                coords.push((Slot::Input(i), idx, analytic_of(Slot::Input(i), var, idx, &g)?));
            }
        }
    }

    let mut worst: f64 = 0.0;
    for &(slot, idx, analytic) in &coords {
        let mut s = setup.clone();
        perturb(&mut s, slot, idx, FD_STEP);
        let plus = objective_f64(probe, &s, proj_seed)?;
        perturb(&mut s, slot, idx, -2.0 * FD_STEP);
        let minus = objective_f64(probe, &s, proj_seed)?;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic, numeric, floor));
    }
    Ok(OpReport {
        op: probe.name(),
        entries: coords.len(),
        max_rel_err: worst,
        passed: worst <= tol,
    })
}

/// Runs every probe. Gradients are computed in `precision`; numeric
/// references are always f64.
pub fn run_grad_suite(seed: u64, precision: Precision) -> Result<GradCheckReport> {
    let (tol, floor) = match precision {
        Precision::F64 => (TOL_F64, 1e-6),
        Precision::F32 => (TOL_F32, 1e-3),
    };
    let ops = ALL
        .iter()
        .map(|&p| match precision {
            Precision::F64 => check_probe::<f64>(p, seed, tol, floor),
            Precision::F32 => check_probe::<f32>(p, seed, tol, floor),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport { precision, tolerance: tol, ops })
}
