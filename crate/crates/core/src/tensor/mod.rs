//! Dense NCHW tensors and a reverse-mode differentiation graph.
//!
//! Tensors are plain contiguous buffers. All differentiable computation goes
//! through a [`Graph`], which records every executed operation in order and
//! replays their vector-Jacobian products in reverse on [`Graph::backward`].
//!
//! The scalar type is a type parameter: `f32` is the training precision and
//! `f64` the verification precision. A single graph never mixes the two.

mod graph;
pub(crate) mod kernels;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use graph::{Activation, BinaryOp, ConvSpec, Graph, Padding, Resize, Var};

/// Compute precision of an engine instantiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

/// Floating point element type usable by the engine.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const PRECISION: Precision;

    /// `c (+)= op(a) * op(b)` on row-major buffers, where `op(a)` is `m x k`
    /// and `op(b)` is `k x n`. A transposed operand is stored in its
    /// untransposed layout (`k x m` for `a`, `n x k` for `b`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64_lossy(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("finite conversion")
    }
}

struct GemmLayout {
    rsa: isize,
    csa: isize,
    rsb: isize,
    csb: isize,
}

fn gemm_layout(m: usize, k: usize, n: usize, a_trans: bool, b_trans: bool) -> GemmLayout {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    GemmLayout { rsa, csa, rsb, csb }
}

fn check_gemm<T>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &[T]) {
    assert!(a.len() >= m * k, "gemm: lhs buffer too small");
    assert!(b.len() >= k * n, "gemm: rhs buffer too small");
    assert!(c.len() >= m * n, "gemm: output buffer too small");
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_trans: bool,
        b: &[f32],
        b_trans: bool,
        c: &mut [f32],
        accumulate: bool,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        check_gemm(m, k, n, a, b, c);
        let l = gemm_layout(m, k, n, a_trans, b_trans);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: buffer extents were checked against the strides above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                l.rsa,
                l.csa,
                b.as_ptr(),
                l.rsb,
                l.csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_trans: bool,
        b: &[f64],
        b_trans: bool,
        c: &mut [f64],
        accumulate: bool,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        check_gemm(m, k, n, a, b, c);
        let l = gemm_layout(m, k, n, a_trans, b_trans);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: buffer extents were checked against the strides above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                l.rsa,
                l.csa,
                b.as_ptr(),
                l.rsb,
                l.csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// How [`Tensor::create`] fills a new buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fill {
    Zeros,
    Constant(f64),
    Uniform { lo: f64, hi: f64, seed: u64 },
    /// Draws from N(0, 2 / fan_in).
    HeNormal { fan_in: usize, seed: u64 },
    Normal { std: f64, seed: u64 },
}

/// A dense tensor of up to four extents in canonical N x C x H x W layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::shape(format!(
            "tensor rank must be 1..=4, got {shape:?}"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::shape(format!("zero extent in {shape:?}")));
    }
    Ok(shape.iter().product())
}

fn normal_fill<T: Scalar>(numel: usize, std: f64, seed: u64) -> Result<Vec<T>> {
    let normal = Normal::new(0.0, std)
        .map_err(|_| Error::Contract(format!("normal fill needs a finite std >= 0, got {std}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..numel).map(|_| T::from_f64_lossy(normal.sample(&mut rng))).collect())
}

impl<T: Scalar> Tensor<T> {
    pub fn create(shape: &[usize], fill: Fill) -> Result<Self> {
        let numel = check_shape(shape)?;
        let data = match fill {
            Fill::Zeros => vec![T::zero(); numel],
            Fill::Constant(c) => vec![T::from_f64_lossy(c); numel],
            Fill::Uniform { lo, hi, seed } => {
                if !(lo < hi) {
                    return Err(Error::Contract(format!(
                        "uniform fill needs lo < hi, got [{lo}, {hi})"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..numel)
                    .map(|_| T::from_f64_lossy(rng.gen_range(lo..hi)))
                    .collect()
            }
            Fill::HeNormal { fan_in, seed } => {
                if fan_in == 0 {
                    return Err(Error::Contract("he_normal needs fan_in >= 1".into()));
                }
                normal_fill(numel, (2.0 / fan_in as f64).sqrt(), seed)?
            }
            Fill::Normal { std, seed } => normal_fill(numel, std, seed)?,
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::create(shape, Fill::Zeros)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        Self::create(shape, Fill::Constant(value))
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel = check_shape(shape)?;
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    /// Converts to another precision. Gradients are dropped.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Extents as `[n, c, h, w]`; fails unless the tensor has rank 4.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        dims4(&self.shape)
    }

    /// Element at `[n, c, y, x]` of a rank-4 tensor.
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let [_, cc, h, w] = dims4(&self.shape).expect("rank-4 tensor");
        self.data[((n * cc + c) * h + y) * w + x]
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().to_f64_lossy())
            .fold(0.0, f64::max)
    }

    /// Sets the gradient buffer to zeros of matching length.
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = T::zero()),
            None => self.grad = Some(vec![T::zero(); self.data.len()]),
        }
    }
}

pub(crate) fn dims4(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::shape(format!("expected rank-4 NCHW tensor, got {shape:?}"))),
    }
}

/// Left-pads a shape with unit extents up to rank 4.
pub(crate) fn pad4(shape: &[usize]) -> [usize; 4] {
    let mut out = [1; 4];
    let off = 4 - shape.len();
    out[off..].copy_from_slice(shape);
    out
}
