use super::kernels::{self, ConvGeom};
use super::{check_shape, dims4, pad4, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::wavelet;

/// Handle to a tensor recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resize {
    Down2,
    Down4,
    UpTo(usize, usize),
}

/// Values read outside the input by a padded convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    #[default]
    Zeros,
    /// Nearest edge value.
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub padding: Padding,
}

impl ConvSpec {
    /// Stride 1 with `pad = k / 2`, which preserves spatial extent.
    pub fn same(k: usize) -> Self {
        ConvSpec {
            stride: 1,
            pad: k / 2,
            groups: 1,
            padding: Padding::Zeros,
        }
    }

    pub fn depthwise(k: usize, channels: usize) -> Self {
        ConvSpec {
            stride: 1,
            pad: k / 2,
            groups: channels,
            padding: Padding::Zeros,
        }
    }

    pub fn replicate(self) -> Self {
        ConvSpec { padding: Padding::Replicate, ..self }
    }

    pub fn strided(k: usize, stride: usize) -> Self {
        ConvSpec {
            stride,
            pad: k / 2,
            groups: 1,
            padding: Padding::Zeros,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary { op: BinaryOp, a: Var, b: Var },
    Scale { x: Var, s: f64 },
    Shift { x: Var },
    Act { kind: Activation, x: Var },
    Abs { x: Var },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Down { x: Var, factor: usize },
    Up { x: Var },
    Gap { x: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Concat { a: Var, b: Var },
    Slice { x: Var, start: usize },
    Crop { x: Var, top: usize, left: usize },
    Reshape { x: Var },
    Dwt { x: Var },
    Idwt { x: Var },
    Sum { x: Var },
    Mean { x: Var },
}

#[derive(Debug)]
struct Node<T> {
    tensor: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of executed operations.
///
/// Node order is execution order, so it is also a topological order. Each
/// operation validates shapes eagerly and returns a shape error instead of
/// recording anything on mismatch.
#[derive(Debug)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Broadcast iteration over `a`'s index space with `b` indices mapped through
/// singleton axes.
fn for_each_bcast(a4: [usize; 4], b4: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let dense = [b4[1] * b4[2] * b4[3], b4[2] * b4[3], b4[3], 1];
    let mut bs = [0usize; 4];
    for i in 0..4 {
        bs[i] = if b4[i] == 1 { 0 } else { dense[i] };
    }
    let mut ai = 0;
    for i0 in 0..a4[0] {
        for i1 in 0..a4[1] {
            for i2 in 0..a4[2] {
                let base = i0 * bs[0] + i1 * bs[1] + i2 * bs[2];
                for i3 in 0..a4[3] {
                    f(ai, base + i3 * bs[3]);
                    ai += 1;
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(adj: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    adj[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, tensor: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = tensor.requires_grad || inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: &[usize], data: Vec<T>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let t = Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        };
        self.push(t, op, inputs)
    }

    /// Records an input tensor. Its `requires_grad` flag decides whether
    /// [`Graph::backward`] stores a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, &[])
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].tensor.shape
    }

    fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].tensor.data
    }

    /// Accumulated gradient of a `requires_grad` tensor after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].tensor.grad.take()
    }

    /// Single scalar value of a one-element tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        let d = self.data(v);
        assert_eq!(d.len(), 1, "scalar() on a tensor with {} elements", d.len());
        d[0].to_f64_lossy()
    }

    // ---- elementwise -------------------------------------------------------

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && sa.iter().zip(&sb).all(|(&x, &y)| y == x || y == 1);
        if !compatible {
            return Err(Error::shape(format!(
                "{op:?}: cannot broadcast {sb:?} over {sa:?}"
            )));
        }
        let f = |x: T, y: T| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let (da, db) = (self.data(a), self.data(b));
        let out: Vec<T> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![T::zero(); da.len()];
            for_each_bcast(pad4(&sa), pad4(&sb), |i, j| out[i] = f(da[i], db[j]));
            out
        };
        Ok(self.derived(&sa, out, Op::Binary { op, a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let st = T::from_f64_lossy(s);
        let out = self.data(x).iter().map(|&v| v * st).collect();
        let shape = self.shape(x).to_vec();
        self.derived(&shape, out, Op::Scale { x, s }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let ct = T::from_f64_lossy(c);
        let out = self.data(x).iter().map(|&v| v + ct).collect();
        let shape = self.shape(x).to_vec();
        self.derived(&shape, out, Op::Shift { x }, &[x])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = self
            .data(x)
            .iter()
            .map(|&t| match kind {
                Activation::Relu => {
                    if t > T::zero() {
                        t
                    } else {
                        T::zero()
                    }
                }
                Activation::Sigmoid => T::one() / (T::one() + (-t).exp()),
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.derived(&shape, out, Op::Act { kind, x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|v| v.abs()).collect();
        let shape = self.shape(x).to_vec();
        self.derived(&shape, out, Op::Abs { x }, &[x])
    }

    // ---- convolution and resampling ----------------------------------------

    /// Zero-padded cross-correlation with square odd kernels.
    ///
    /// Output extent is `(H + 2 pad - k) / stride + 1`, rounded down.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let [n, cin, h, wd] = dims4(self.shape(x))?;
        let [cout, cin_g, k, k2] = dims4(self.shape(w))?;
        if k != k2 || k % 2 == 0 {
            return Err(Error::shape(format!("conv2d kernel must be square and odd, got {k}x{k2}")));
        }
        if spec.groups == 0 || spec.stride == 0 {
            return Err(Error::shape("conv2d needs stride >= 1 and groups >= 1"));
        }
        if cin % spec.groups != 0 || cout % spec.groups != 0 || cin / spec.groups != cin_g {
            return Err(Error::shape(format!(
                "conv2d: {cin} input channels, weight {:?}, groups {}",
                self.shape(w),
                spec.groups
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(format!(
                    "conv2d bias must be [{cout}], got {:?}",
                    self.shape(b)
                )));
            }
        }
        if h + 2 * spec.pad < k || wd + 2 * spec.pad < k {
            return Err(Error::shape(format!(
                "conv2d: {k}x{k} kernel does not fit {h}x{wd} input with pad {}",
                spec.pad
            )));
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            k,
            stride: spec.stride,
            pad: spec.pad,
            groups: spec.groups,
            replicate: spec.padding == Padding::Replicate,
            ho: (h + 2 * spec.pad - k) / spec.stride + 1,
            wo: (wd + 2 * spec.pad - k) / spec.stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.data(x),
            self.data(w),
            b.map(|b| self.data(b)),
            &geom,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.derived(
            &[n, cout, geom.ho, geom.wo],
            out,
            Op::Conv { x, w, b, geom },
            &inputs,
        ))
    }

    pub fn resize(&mut self, x: Var, mode: Resize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x))?;
        match mode {
            Resize::Down2 | Resize::Down4 => {
                let factor = if mode == Resize::Down2 { 2 } else { 4 };
                if h % factor != 0 || w % factor != 0 {
                    return Err(Error::shape(format!(
                        "downsample by {factor} needs extents divisible by {factor}, got {h}x{w}"
                    )));
                }
                let out = kernels::block_mean(self.data(x), n * c, h, w, factor);
                Ok(self.derived(
                    &[n, c, h / factor, w / factor],
                    out,
                    Op::Down { x, factor },
                    &[x],
                ))
            }
            Resize::UpTo(ho, wo) => {
                check_shape(&[ho, wo])?;
                let out = kernels::bilinear_forward(self.data(x), n * c, (h, w), (ho, wo));
                Ok(self.derived(&[n, c, ho, wo], out, Op::Up { x }, &[x]))
            }
        }
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x))?;
        let inv = T::one() / T::from_usize(h * w).unwrap();
        let out = self
            .data(x)
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.derived(&[n, c, 1, 1], out, Op::Gap { x }, &[x]))
    }

    /// `y = x W^T + b` for `x: [N, Din]`, `W: [Dout, Din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let (&[n, din], &[dout, din_w]) = (sx, sw) else {
            return Err(Error::shape(format!("linear needs rank-2 operands, got {sx:?} and {sw:?}")));
        };
        if din != din_w {
            return Err(Error::shape(format!("linear: input {sx:?} vs weight {sw:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape(format!("linear bias must be [{dout}], got {:?}", self.shape(b))));
            }
        }
        let mut out = vec![T::zero(); n * dout];
        T::gemm(n, din, dout, self.data(x), false, self.data(w), true, &mut out, false);
        if let Some(b) = b {
            let bd = self.data(b);
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bd).for_each(|(v, &bv)| *v += bv);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.derived(&[n, dout], out, Op::Linear { x, w, b }, &inputs))
    }

    // ---- layout ------------------------------------------------------------

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = dims4(self.shape(a))?;
        let [nb, cb, hb, wb] = dims4(self.shape(b))?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(format!(
                "concat_channels: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            out.extend_from_slice(&self.data(a)[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&self.data(b)[i * cb * plane..(i + 1) * cb * plane]);
        }
        Ok(self.derived(&[n, ca + cb, h, w], out, Op::Concat { a, b }, &[a, b]))
    }

    /// Channels `[start, end)` of a rank-4 tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x))?;
        if start >= end || end > c {
            return Err(Error::shape(format!("channel slice {start}..{end} of {c}")));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (end - start) * plane);
        for i in 0..n {
            out.extend_from_slice(&self.data(x)[(i * c + start) * plane..(i * c + end) * plane]);
        }
        Ok(self.derived(&[n, end - start, h, w], out, Op::Slice { x, start }, &[x]))
    }

    /// Spatial window `[top, top + height) x [left, left + width)`.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x))?;
        if height == 0 || width == 0 || top + height > h || left + width > w {
            return Err(Error::shape(format!(
                "crop {height}x{width} at ({top},{left}) outside {h}x{w}"
            )));
        }
        let mut out = Vec::with_capacity(n * c * height * width);
        let d = self.data(x);
        for p in 0..n * c {
            for y in top..top + height {
                out.extend_from_slice(&d[(p * h + y) * w + left..][..width]);
            }
        }
        Ok(self.derived(&[n, c, height, width], out, Op::Crop { x, top, left }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel = check_shape(shape)?;
        if numel != self.data(x).len() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.shape(x)
            )));
        }
        let out = self.data(x).to_vec();
        Ok(self.derived(shape, out, Op::Reshape { x }, &[x]))
    }

    /// One-level orthonormal Haar analysis, bands stacked `[LL, LH, HL, HH]`
    /// along channels. See [`crate::wavelet`].
    pub fn dwt(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("dwt needs even extents, got {h}x{w}")));
        }
        let out = wavelet::haar_analysis(self.data(x), n, c, h, w);
        Ok(self.derived(&[n, 4 * c, h / 2, w / 2], out, Op::Dwt { x }, &[x]))
    }

    /// Inverse of [`Graph::dwt`].
    pub fn idwt(&mut self, x: Var) -> Result<Var> {
        let [n, c4, h, w] = dims4(self.shape(x))?;
        if c4 % 4 != 0 {
            return Err(Error::shape(format!("idwt needs 4k stacked channels, got {c4}")));
        }
        let c = c4 / 4;
        let out = wavelet::haar_synthesis(self.data(x), n, c, h, w);
        Ok(self.derived(&[n, c, 2 * h, 2 * w], out, Op::Idwt { x }, &[x]))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum::<T>();
        self.derived(&[1], vec![s], Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().copied().sum::<T>() / T::from_usize(d.len()).unwrap();
        self.derived(&[1], vec![s], Op::Mean { x }, &[x])
    }

    // ---- reverse pass ------------------------------------------------------

    /// Propagates d(loss)/d(node) to every `requires_grad` tensor reachable
    /// from `loss`, adding into any gradient already stored there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != [1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar [1] loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            let t = &mut self.nodes[i].tensor;
            if t.requires_grad {
                match &mut t.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                    None => t.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match node.op {
            Op::Leaf => {}
            Op::Binary { op, a, b } => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (va, vb) = (self.data(a), self.data(b));
                let same = sa == sb;
                if self.wants(a) {
                    let da = accumulate(adj, a, va.len());
                    match op {
                        BinaryOp::Add => da.iter_mut().zip(g).for_each(|(d, &v)| *d += v),
                        BinaryOp::Sub => da.iter_mut().zip(g).for_each(|(d, &v)| *d += v),
                        BinaryOp::Mul | BinaryOp::Div if same => {
                            for ((d, &gv), &y) in da.iter_mut().zip(g).zip(vb) {
                                *d += if op == BinaryOp::Mul { gv * y } else { gv / y };
                            }
                        }
                        BinaryOp::Mul | BinaryOp::Div => {
                            for_each_bcast(pad4(sa), pad4(sb), |ia, ib| {
                                da[ia] += if op == BinaryOp::Mul { g[ia] * vb[ib] } else { g[ia] / vb[ib] };
                            });
                        }
                    }
                }
                if self.wants(b) {
                    let db = accumulate(adj, b, vb.len());
                    let term = |ia: usize, ib: usize| match op {
                        BinaryOp::Add => g[ia],
                        BinaryOp::Sub => -g[ia],
                        BinaryOp::Mul => g[ia] * va[ia],
                        BinaryOp::Div => -g[ia] * va[ia] / (vb[ib] * vb[ib]),
                    };
                    if same {
                        for (j, d) in db.iter_mut().enumerate() {
                            *d += term(j, j);
                        }
                    } else {
                        for_each_bcast(pad4(sa), pad4(sb), |ia, ib| db[ib] += term(ia, ib));
                    }
                }
            }
            Op::Scale { x, s } => {
                let st = T::from_f64_lossy(s);
                let dx = accumulate(adj, x, g.len());
                dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * st);
            }
            Op::Shift { x } | Op::Reshape { x } => {
                let dx = accumulate(adj, x, g.len());
                dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
            Op::Act { kind, x } => {
                let xin = self.data(x);
                let y = &node.tensor.data;
                let dx = accumulate(adj, x, g.len());
                match kind {
                    Activation::Relu => {
                        for ((d, &gv), &t) in dx.iter_mut().zip(g).zip(xin) {
                            if t > T::zero() {
                                *d += gv;
                            }
                        }
                    }
                    Activation::Sigmoid => {
                        for ((d, &gv), &s) in dx.iter_mut().zip(g).zip(y) {
                            *d += gv * s * (T::one() - s);
                        }
                    }
                }
            }
            Op::Abs { x } => {
                let xin = self.data(x);
                let dx = accumulate(adj, x, g.len());
                for ((d, &gv), &t) in dx.iter_mut().zip(g).zip(xin) {
                    if t > T::zero() {
                        *d += gv;
                    } else if t < T::zero() {
                        *d -= gv;
                    }
                }
            }
            Op::Conv { x, w, b, geom } => {
                let (xv, wv) = (self.data(x), self.data(w));
                let mut dx = self.wants(x).then(|| adj[x.0].take().unwrap_or_else(|| vec![T::zero(); xv.len()]));
                let mut dw = self.wants(w).then(|| adj[w.0].take().unwrap_or_else(|| vec![T::zero(); wv.len()]));
                let mut db = b
                    .filter(|&b| self.wants(b))
                    .map(|b| adj[b.0].take().unwrap_or_else(|| vec![T::zero(); geom.cout]));
                kernels::conv2d_backward(
                    xv,
                    wv,
                    g,
                    &geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    adj[x.0] = Some(d);
                }
                if let Some(d) = dw {
                    adj[w.0] = Some(d);
                }
                if let (Some(b), Some(d)) = (b, db) {
                    adj[b.0] = Some(d);
                }
            }
            Op::Down { x, factor } => {
                let [n, c, h, w] = pad4(self.shape(x));
                let dx = accumulate(adj, x, n * c * h * w);
                kernels::block_mean_backward(g, n * c, h, w, factor, dx);
            }
            Op::Up { x } => {
                let [n, c, h, w] = pad4(self.shape(x));
                let [_, _, ho, wo] = pad4(&node.tensor.shape);
                let dx = accumulate(adj, x, n * c * h * w);
                kernels::bilinear_backward(g, n * c, (h, w), (ho, wo), dx);
            }
            Op::Gap { x } => {
                let [_, _, h, w] = pad4(self.shape(x));
                let len = self.data(x).len();
                let inv = T::one() / T::from_usize(h * w).unwrap();
                let dx = accumulate(adj, x, len);
                for (plane, &gv) in dx.chunks_mut(h * w).zip(g) {
                    plane.iter_mut().for_each(|d| *d += gv * inv);
                }
            }
            Op::Linear { x, w, b } => {
                let [n, din] = [self.shape(x)[0], self.shape(x)[1]];
                let dout = self.shape(w)[0];
                if self.wants(x) {
                    let wv = self.data(w);
                    let dx = accumulate(adj, x, n * din);
                    T::gemm(n, dout, din, g, false, wv, false, dx, true);
                }
                if self.wants(w) {
                    let xv = self.data(x);
                    let dw = accumulate(adj, w, dout * din);
                    T::gemm(dout, n, din, g, true, xv, false, dw, true);
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    let db = accumulate(adj, b, dout);
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = pad4(self.shape(a));
                let cb = self.shape(b)[1];
                let plane = h * w;
                let c = ca + cb;
                for (v, off, cc) in [(a, 0, ca), (b, ca, cb)] {
                    if self.wants(v) {
                        let dv = accumulate(adj, v, n * cc * plane);
                        for i in 0..n {
                            let src = &g[(i * c + off) * plane..][..cc * plane];
                            dv[i * cc * plane..][..cc * plane]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &s)| *d += s);
                        }
                    }
                }
            }
            Op::Slice { x, start } => {
                let [n, c, h, w] = pad4(self.shape(x));
                let cs = node.tensor.shape[1];
                let plane = h * w;
                let dx = accumulate(adj, x, n * c * plane);
                for i in 0..n {
                    dx[(i * c + start) * plane..][..cs * plane]
                        .iter_mut()
                        .zip(&g[i * cs * plane..][..cs * plane])
                        .for_each(|(d, &s)| *d += s);
                }
            }
            Op::Crop { x, top, left } => {
                let [n, c, h, w] = pad4(self.shape(x));
                let [_, _, ch, cw] = pad4(&node.tensor.shape);
                let dx = accumulate(adj, x, n * c * h * w);
                for p in 0..n * c {
                    for y in 0..ch {
                        dx[(p * h + top + y) * w + left..][..cw]
                            .iter_mut()
                            .zip(&g[(p * ch + y) * cw..][..cw])
                            .for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Dwt { x } => {
                let [n, c4, h2, w2] = pad4(&node.tensor.shape);
                let back = wavelet::haar_synthesis(g, n, c4 / 4, h2, w2);
                let dx = accumulate(adj, x, back.len());
                dx.iter_mut().zip(&back).for_each(|(d, &s)| *d += s);
            }
            Op::Idwt { x } => {
                let [n, c, h, w] = pad4(&node.tensor.shape);
                let back = wavelet::haar_analysis(g, n, c, h, w);
                let dx = accumulate(adj, x, back.len());
                dx.iter_mut().zip(&back).for_each(|(d, &s)| *d += s);
            }
            Op::Sum { x } => {
                let len = self.data(x).len();
                let dx = accumulate(adj, x, len);
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean { x } => {
                let len = self.data(x).len();
                let gv = g[0] / T::from_usize(len).unwrap();
                let dx = accumulate(adj, x, len);
                dx.iter_mut().for_each(|d| *d += gv);
            }
        }
    }
}
