//! Reverse-mode computation record.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to produce input adjoints. Nodes are created in topological order, so
//! the backward sweep is a single reverse scan over the node list.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::param::{ParamId, ParamStore};
use super::tensor::{Shape, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output length equals input length; zero padding split evenly with the
    /// extra element on the right for even kernels.
    Same,
    Valid,
}

/// Behaviour of [`Graph::l1_normalize`] on an all-zero slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ZeroSlice {
    Error,
    Keep,
}

pub const L1_EPS: f64 = 1e-12;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Sigmoid,
    Tanh,
}

enum Op {
    Leaf,
    Reshape(Var),
    Gather {
        x: Var,
        map: Vec<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    LnClamped(Var, f64),
    MaskMul(Var, Arc<[f64]>),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
        pad_left: usize,
    },
    ArgSelect {
        x: Var,
        src: Vec<usize>,
    },
    SumAxis(Var, usize),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    L1Normalize {
        x: Var,
        axis: usize,
        norms: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat(Vec<Var>, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A single-threaded computation record.
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
    fault_injection: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn row_strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// Source offset for every output element given per-output-axis source strides.
fn gather_map(out_dims: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n: usize = out_dims.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_dims.len()];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for ax in (0..out_dims.len()).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            off -= src_strides[ax] * out_dims[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// C (m x n) = op(A) (m x k) * op(B) (k x n) + beta * C, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover every index reachable through the strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
            fault_injection: false,
        }
    }

    /// Test hook: perturbs the sigmoid adjoint so gradient checks must fail.
    pub fn with_fault_injection(mut self, on: bool) -> Self {
        self.fault_injection = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, op_name: &'static str, dims: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(op_name));
        }
        let shape = Shape::new(dims)?;
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter. Repeated calls with the same id return
    /// the same node, so every use sums into one adjoint.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let v = self.constant(store.value(id).clone());
        self.param_leaves.insert(id, v);
        v
    }

    pub fn reshape(&mut self, x: Var, dims: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).reshaped(dims)?;
        self.nodes.push(Node {
            value: t,
            op: Op::Reshape(x),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn gather(&mut self, op_name: &'static str, x: Var, out_dims: Vec<usize>, map: Vec<usize>) -> Result<Var> {
        let src = self.data(x);
        let data = map.iter().map(|&i| src[i]).collect();
        self.push(op_name, out_dims, data, Op::Gather { x, map })
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        let mut seen = vec![false; dims.len()];
        if perm.len() != dims.len() || perm.iter().any(|&p| p >= dims.len() || std::mem::replace(&mut seen[p], true)) {
            return dim_err(format!("invalid permutation {perm:?} for shape {dims:?}"));
        }
        let strides = row_strides(&dims);
        let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
        let map = gather_map(&out_dims, &src_strides);
        self.gather("permute", x, out_dims, map)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.dims(x).len();
        if r < 2 {
            return dim_err("transpose needs rank >= 2");
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// Numpy-style broadcast: trailing alignment, extents must match or be 1.
    pub fn broadcast_to(&mut self, x: Var, dims: impl Into<Vec<usize>>) -> Result<Var> {
        let out_dims: Vec<usize> = dims.into();
        let in_dims = self.dims(x).to_vec();
        if in_dims == out_dims {
            return Ok(x);
        }
        if in_dims.len() > out_dims.len() {
            return dim_err(format!("cannot broadcast {in_dims:?} to {out_dims:?}"));
        }
        let in_strides = row_strides(&in_dims);
        let lead = out_dims.len() - in_dims.len();
        let mut src_strides = vec![0; out_dims.len()];
        for (i, &d) in in_dims.iter().enumerate() {
            let od = out_dims[lead + i];
            if d == od {
                src_strides[lead + i] = in_strides[i];
            } else if d != 1 {
                return dim_err(format!("cannot broadcast {in_dims:?} to {out_dims:?}"));
            }
        }
        let map = gather_map(&out_dims, &src_strides);
        self.gather("broadcast_to", x, out_dims, map)
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if axis >= dims.len() || len == 0 || start + len > dims[axis] {
            return dim_err(format!("slice axis {axis} [{start}, {}) out of range for {dims:?}", start + len));
        }
        let strides = row_strides(&dims);
        let mut out_dims = dims.clone();
        out_dims[axis] = len;
        let base = start * strides[axis];
        let map = gather_map(&out_dims, &strides).into_iter().map(|o| o + base).collect();
        self.gather("slice", x, out_dims, map)
    }

    /// Index `idx` along `axis`, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, idx: usize) -> Result<Var> {
        let s = self.slice(x, axis, idx, 1)?;
        let mut dims = self.dims(x).to_vec();
        dims.remove(axis);
        if dims.is_empty() {
            dims.push(1);
        }
        self.reshape(s, dims)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return dim_err("concat of zero tensors");
        };
        let base = self.dims(first).to_vec();
        if axis >= base.len() {
            return dim_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in xs {
            let d = self.dims(v);
            let compatible = d.len() == base.len() && d.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return dim_err(format!("concat shape mismatch: {base:?} vs {d:?} on axis {axis}"));
            }
            total += d[axis];
        }
        let mut out_dims = base.clone();
        out_dims[axis] = total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.dims(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * n..(o + 1) * n]);
            }
        }
        self.push("concat", out_dims, data, Op::Concat(xs.to_vec(), axis))
    }

    /// Stack equally shaped tensors along a new axis.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let mut expanded = Vec::with_capacity(xs.len());
        for &v in xs {
            let mut dims = self.dims(v).to_vec();
            if axis > dims.len() {
                return dim_err(format!("stack axis {axis} out of range for {dims:?}"));
            }
            dims.insert(axis, 1);
            expanded.push(self.reshape(v, dims)?);
        }
        self.concat(&expanded, axis)
    }

    fn binary_operands(&mut self, a: Var, b: Var, name: &str) -> Result<(Var, Var)> {
        let (da, db) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if da == db {
            return Ok((a, b));
        }
        if self.value(b).numel() == 1 {
            let b = self.broadcast_to(b, da)?;
            return Ok((a, b));
        }
        if self.value(a).numel() == 1 {
            let a = self.broadcast_to(a, db)?;
            return Ok((a, b));
        }
        dim_err(format!("{name}: shape mismatch {da:?} vs {db:?}"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.binary_operands(a, b, "add")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        self.push("add", self.dims(a).to_vec(), data, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.binary_operands(a, b, "sub")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        self.push("sub", self.dims(a).to_vec(), data, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.binary_operands(a, b, "mul")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        self.push("mul", self.dims(a).to_vec(), data, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v * c).collect();
        self.push("scale", self.dims(x).to_vec(), data, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v + c).collect();
        self.push("add_scalar", self.dims(x).to_vec(), data, Op::AddScalar(x))
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let n = self.scale(x, -1.0)?;
        self.add_scalar(n, 1.0)
    }

    fn unary(&mut self, x: Var, u: Unary) -> Result<Var> {
        let f: fn(f64) -> f64 = match u {
            Unary::Relu => |v| v.max(0.0),
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => f64::tanh,
        };
        let name = match u {
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
        };
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        self.push(name, self.dims(x).to_vec(), data, Op::Unary(x, u))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    /// `ln(max(x, eps))`; zero adjoint where the clamp is active.
    pub fn ln_clamped(&mut self, x: Var, eps: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| v.max(eps).ln()).collect();
        self.push("ln", self.dims(x).to_vec(), data, Op::LnClamped(x, eps))
    }

    fn mask_mul(&mut self, name: &'static str, x: Var, mask: Vec<f64>) -> Result<Var> {
        let data = self.data(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        self.push(name, self.dims(x).to_vec(), data, Op::MaskMul(x, mask.into()))
    }

    /// Zero every entry strictly below `tau`; survivors pass unchanged.
    pub fn mask_below(&mut self, x: Var, tau: f64) -> Result<Var> {
        let mask = self.data(x).iter().map(|&v| if v < tau { 0.0 } else { 1.0 }).collect();
        self.mask_mul("mask_below", x, mask)
    }

    /// Inverted dropout. Identity (same node) when not training or `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).numel();
        let mask = (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        self.mask_mul("dropout", x, mask)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.len() != 2 || db.len() != 2 || da[1] != db[0] {
            return dim_err(format!("matmul: {da:?} x {db:?}"));
        }
        let (m, k, n) = (da[0], da[1], db[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, 0.0);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    /// Matrix product over the last two axes of `a` (.. x m x k), with `b`
    /// either a matrix (k x n) applied to every leading index or a batch of
    /// matrices with the same leading dims.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let dx = self.dims(x).to_vec();
        let dw = self.dims(w).to_vec();
        if dw.len() != 2 || dx[dx.len() - 1] != dw[0] {
            return dim_err(format!("linear: {dx:?} x {dw:?}"));
        }
        let k = dw[0];
        let rows = self.value(x).numel() / k;
        let flat = self.reshape(x, vec![rows, k])?;
        let y = self.matmul(flat, w)?;
        let mut out_dims = dx;
        *out_dims.last_mut().unwrap() = dw[1];
        self.reshape(y, out_dims)
    }

    /// `linear` followed by a broadcast bias add.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.linear(x, w)?;
        let dims = self.dims(y).to_vec();
        let bb = self.broadcast_to(b, dims)?;
        self.add(y, bb)
    }

    /// Batched product: a (B x m x k) * b (B x k x n) -> B x m x n.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.len() != 3 || db.len() != 3 || da[0] != db[0] || da[2] != db[1] {
            return dim_err(format!("bmm: {da:?} x {db:?}"));
        }
        let (bs, m, k, n) = (da[0], da[1], da[2], db[2]);
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..bs {
            gemm(m, k, n, &ad[i * m * k..], false, &bd[i * k * n..], false, &mut out[i * m * n..], 0.0);
        }
        self.push("bmm", vec![bs, m, n], out, Op::Bmm(a, b))
    }

    /// Stride-1 cross-correlation over the last axis.
    /// x: (B x) c_in x L, kernel: c_out x c_in x k, bias: c_out.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var, padding: Padding) -> Result<Var> {
        let dx = self.dims(x).to_vec();
        let dk = self.dims(kernel).to_vec();
        let dbias = self.dims(bias).to_vec();
        let batched = dx.len() == 3;
        if !(dx.len() == 2 || batched) || dk.len() != 3 || dk[1] != dx[dx.len() - 2] || dbias != [dk[0]] {
            return dim_err(format!("conv1d: input {dx:?}, kernel {dk:?}, bias {dbias:?}"));
        }
        let (c_out, c_in, kw) = (dk[0], dk[1], dk[2]);
        let len = dx[dx.len() - 1];
        let (pad_left, pad_total) = match padding {
            Padding::Same => ((kw - 1) / 2, kw - 1),
            Padding::Valid => (0, 0),
        };
        if kw > len + pad_total {
            return dim_err(format!("conv1d: kernel length {kw} exceeds padded input length {}", len + pad_total));
        }
        let out_len = len + pad_total - kw + 1;
        let bs = if batched { dx[0] } else { 1 };
        let xd = self.data(x);
        let kd = self.data(kernel);
        let bd = self.data(bias);
        let mut out = vec![0.0; bs * c_out * out_len];
        let mut cols = vec![0.0; c_in * kw * out_len];
        for b in 0..bs {
            im2col(&xd[b * c_in * len..(b + 1) * c_in * len], c_in, len, kw, pad_left, out_len, &mut cols);
            let ob = &mut out[b * c_out * out_len..(b + 1) * c_out * out_len];
            for (o, row) in ob.chunks_mut(out_len).enumerate() {
                row.iter_mut().for_each(|v| *v = bd[o]);
            }
            gemm(c_out, c_in * kw, out_len, kd, false, &cols, false, ob, 1.0);
        }
        let out_dims = if batched { vec![bs, c_out, out_len] } else { vec![c_out, out_len] };
        self.push("conv1d", out_dims, out, Op::Conv1d { x, kernel, bias, pad_left })
    }

    /// Window 2, stride 2 max pooling over the last axis; ties go to the
    /// earlier element.
    pub fn maxpool1d(&mut self, x: Var) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        let len = dims[dims.len() - 1];
        if len < 2 {
            return dim_err(format!("maxpool1d: length {len} shorter than window 2"));
        }
        let out_len = len / 2;
        let rows = self.value(x).numel() / len;
        let xd = self.data(x);
        let mut src = Vec::with_capacity(rows * out_len);
        for r in 0..rows {
            for i in 0..out_len {
                let a = r * len + 2 * i;
                src.push(if xd[a] >= xd[a + 1] { a } else { a + 1 });
            }
        }
        let data = src.iter().map(|&i| xd[i]).collect();
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = out_len;
        self.push("maxpool1d", out_dims, data, Op::ArgSelect { x, src })
    }

    fn reduced_dims(dims: &[usize], axis: usize) -> Vec<usize> {
        let mut out = dims.to_vec();
        out.remove(axis);
        if out.is_empty() {
            out.push(1);
        }
        out
    }

    fn check_axis(&self, x: Var, axis: usize, name: &str) -> Result<()> {
        let r = self.dims(x).len();
        if axis >= r {
            return dim_err(format!("{name}: axis {axis} out of range for rank {r}"));
        }
        Ok(())
    }

    /// Maximum along `axis` (axis removed); ties go to the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "max_axis")?;
        let shape = self.value(x).shape().clone();
        let (outer, n, inner) = shape.split_at_axis(axis);
        let xd = self.data(x);
        let mut src = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for j in 0..inner {
                let mut best = o * n * inner + j;
                for i in 1..n {
                    let idx = (o * n + i) * inner + j;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                src.push(best);
            }
        }
        let data = src.iter().map(|&i| xd[i]).collect();
        self.push("max_axis", Self::reduced_dims(shape.dims(), axis), data, Op::ArgSelect { x, src })
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "sum_axis")?;
        let shape = self.value(x).shape().clone();
        let (outer, n, inner) = shape.split_at_axis(axis);
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let row = &xd[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        self.push("sum_axis", Self::reduced_dims(shape.dims(), axis), out, Op::SumAxis(x, axis))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "mean_axis")?;
        let n = self.dims(x)[axis] as f64;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, vec![n])?;
        self.sum_axis(flat, 0)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    fn for_each_slice(shape: &Shape, axis: usize, mut f: impl FnMut(&[usize])) {
        let (outer, n, inner) = shape.split_at_axis(axis);
        let mut idx = vec![0usize; n];
        for o in 0..outer {
            for j in 0..inner {
                for (i, slot) in idx.iter_mut().enumerate() {
                    *slot = (o * n + i) * inner + j;
                }
                f(&idx);
            }
        }
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let shape = self.value(x).shape().clone();
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        Self::for_each_slice(&shape, axis, |idx| {
            let m = idx.iter().map(|&i| xd[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &i in idx {
                out[i] = (xd[i] - m).exp();
                z += out[i];
            }
            for &i in idx {
                out[i] /= z;
            }
        });
        self.push("softmax", shape.dims().to_vec(), out, Op::Softmax(x, axis))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "log_softmax")?;
        let shape = self.value(x).shape().clone();
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        Self::for_each_slice(&shape, axis, |idx| {
            let m = idx.iter().map(|&i| xd[i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + idx.iter().map(|&i| (xd[i] - m).exp()).sum::<f64>().ln();
            for &i in idx {
                out[i] = xd[i] - lse;
            }
        });
        self.push("log_softmax", shape.dims().to_vec(), out, Op::LogSoftmax(x, axis))
    }

    /// Divide each slice along `axis` by its l1 norm.
    pub fn l1_normalize(&mut self, x: Var, axis: usize, zero: ZeroSlice) -> Result<Var> {
        self.check_axis(x, axis, "l1_normalize")?;
        let shape = self.value(x).shape().clone();
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        let mut norms = Vec::new();
        let mut degenerate = false;
        Self::for_each_slice(&shape, axis, |idx| {
            let n: f64 = idx.iter().map(|&i| xd[i].abs()).sum();
            if n > L1_EPS {
                for &i in idx {
                    out[i] = xd[i] / n;
                }
                norms.push(n);
            } else {
                degenerate = true;
                norms.push(0.0);
            }
        });
        if degenerate && zero == ZeroSlice::Error {
            return Err(Error::Degenerate(format!(
                "l1_normalize: slice with l1 norm <= {L1_EPS:e} along axis {axis} of {shape}"
            )));
        }
        self.push("l1_normalize", shape.dims().to_vec(), out, Op::L1Normalize { x, axis, norms })
    }

    /// Normalize the last axis to zero mean / unit variance, then apply
    /// per-feature gain and shift.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        let n = dims[dims.len() - 1];
        if self.dims(gain) != [n] || self.dims(shift) != [n] {
            return dim_err(format!(
                "layer_norm: input {dims:?}, gain {:?}, shift {:?}",
                self.dims(gain),
                self.dims(shift)
            ));
        }
        let xd = self.data(x);
        let (gd, sd) = (self.data(gain), self.data(shift));
        let rows = xd.len() / n;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = gd[j] * h + sd[j];
            }
        }
        self.push("layer_norm", dims, out, Op::LayerNorm { x, gain, shift, xhat, inv_std })
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    /// Add the adjoints of every parameter leaf into the store's accumulators.
    pub fn accumulate_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (&pid, &v) in &self.param_leaves {
            if let Some(g) = grads.wrt(v) {
                store.add_grad(pid, g);
            }
        }
    }

    fn backprop_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) => {
                for (a, g) in slot(grads, *x, gy.len()).iter_mut().zip(gy) {
                    *a += g;
                }
            }
            Op::Gather { x, map } => {
                let gx = slot(grads, *x, self.value(*x).numel());
                for (&src, g) in map.iter().zip(gy) {
                    gx[src] += g;
                }
            }
            Op::Add(a, b) => {
                for (s, g) in slot(grads, *a, gy.len()).iter_mut().zip(gy) {
                    *s += g;
                }
                for (s, g) in slot(grads, *b, gy.len()).iter_mut().zip(gy) {
                    *s += g;
                }
            }
            Op::Sub(a, b) => {
                for (s, g) in slot(grads, *a, gy.len()).iter_mut().zip(gy) {
                    *s += g;
                }
                for (s, g) in slot(grads, *b, gy.len()).iter_mut().zip(gy) {
                    *s -= g;
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let ga = slot(grads, *a, gy.len());
                for ((s, g), v) in ga.iter_mut().zip(gy).zip(bd) {
                    *s += g * v;
                }
                let gb = slot(grads, *b, gy.len());
                for ((s, g), v) in gb.iter_mut().zip(gy).zip(ad) {
                    *s += g * v;
                }
            }
            Op::Scale(x, c) => {
                for (s, g) in slot(grads, *x, gy.len()).iter_mut().zip(gy) {
                    *s += g * c;
                }
            }
            Op::AddScalar(x) => {
                for (s, g) in slot(grads, *x, gy.len()).iter_mut().zip(gy) {
                    *s += g;
                }
            }
            Op::Unary(x, u) => {
                let xd = self.data(*x);
                let fault = if self.fault_injection { 1.001 } else { 1.0 };
                let gx = slot(grads, *x, gy.len());
                for j in 0..gy.len() {
                    let d = match u {
                        Unary::Relu => {
                            if xd[j] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Sigmoid => y[j] * (1.0 - y[j]) * fault,
                        Unary::Tanh => 1.0 - y[j] * y[j],
                    };
                    gx[j] += gy[j] * d;
                }
            }
            Op::LnClamped(x, eps) => {
                let xd = self.data(*x);
                let gx = slot(grads, *x, gy.len());
                for j in 0..gy.len() {
                    if xd[j] > *eps {
                        gx[j] += gy[j] / xd[j];
                    }
                }
            }
            Op::MaskMul(x, mask) => {
                for ((s, g), m) in slot(grads, *x, gy.len()).iter_mut().zip(gy).zip(mask.iter()) {
                    *s += g * m;
                }
            }
            Op::MatMul(a, b) => {
                let (da, db) = (self.dims(*a), self.dims(*b));
                let (m, k, n) = (da[0], da[1], db[1]);
                let bd = self.data(*b);
                gemm(m, n, k, gy, false, bd, true, slot(grads, *a, m * k), 1.0);
                let ad = self.data(*a);
                gemm(k, m, n, ad, true, gy, false, slot(grads, *b, k * n), 1.0);
            }
            Op::Bmm(a, b) => {
                let (da, db) = (self.dims(*a), self.dims(*b));
                let (bs, m, k, n) = (da[0], da[1], da[2], db[2]);
                let (ad, bd) = (self.data(*a), self.data(*b));
                let ga = slot(grads, *a, bs * m * k);
                for i in 0..bs {
                    gemm(m, n, k, &gy[i * m * n..], false, &bd[i * k * n..], true, &mut ga[i * m * k..], 1.0);
                }
                let gb = slot(grads, *b, bs * k * n);
                for i in 0..bs {
                    gemm(k, m, n, &ad[i * m * k..], true, &gy[i * m * n..], false, &mut gb[i * k * n..], 1.0);
                }
            }
            Op::Conv1d { x, kernel, bias, pad_left } => {
                let dx = self.dims(*x);
                let dk = self.dims(*kernel);
                let (c_out, c_in, kw) = (dk[0], dk[1], dk[2]);
                let len = dx[dx.len() - 1];
                let out_len = node.value.dims()[node.value.dims().len() - 1];
                let bs = if dx.len() == 3 { dx[0] } else { 1 };
                let xd = self.data(*x);
                let kd = self.data(*kernel);
                let mut cols = vec![0.0; c_in * kw * out_len];
                let mut dcols = vec![0.0; c_in * kw * out_len];
                {
                    let gb = slot(grads, *bias, c_out);
                    for b in 0..bs {
                        for o in 0..c_out {
                            let base = (b * c_out + o) * out_len;
                            gb[o] += gy[base..base + out_len].iter().sum::<f64>();
                        }
                    }
                }
                for b in 0..bs {
                    let gyb = &gy[b * c_out * out_len..(b + 1) * c_out * out_len];
                    im2col(&xd[b * c_in * len..(b + 1) * c_in * len], c_in, len, kw, *pad_left, out_len, &mut cols);
                    gemm(c_out, out_len, c_in * kw, gyb, false, &cols, true, slot(grads, *kernel, c_out * c_in * kw), 1.0);
                    gemm(c_in * kw, c_out, out_len, kd, true, gyb, false, &mut dcols, 0.0);
                    let gx = slot(grads, *x, bs * c_in * len);
                    col2im(&dcols, c_in, len, kw, *pad_left, out_len, &mut gx[b * c_in * len..(b + 1) * c_in * len]);
                }
            }
            Op::ArgSelect { x, src } => {
                let gx = slot(grads, *x, self.value(*x).numel());
                for (&s, g) in src.iter().zip(gy) {
                    gx[s] += g;
                }
            }
            Op::SumAxis(x, axis) => {
                let shape = self.value(*x).shape();
                let (outer, n, inner) = shape.split_at_axis(*axis);
                let gx = slot(grads, *x, outer * n * inner);
                for o in 0..outer {
                    for i in 0..n {
                        let row = &mut gx[(o * n + i) * inner..(o * n + i + 1) * inner];
                        for (s, g) in row.iter_mut().zip(&gy[o * inner..(o + 1) * inner]) {
                            *s += g;
                        }
                    }
                }
            }
            Op::Softmax(x, axis) => {
                let shape = self.value(*x).shape().clone();
                let gx = slot(grads, *x, y.len());
                Self::for_each_slice(&shape, *axis, |idx| {
                    let dot: f64 = idx.iter().map(|&i| gy[i] * y[i]).sum();
                    for &i in idx {
                        gx[i] += y[i] * (gy[i] - dot);
                    }
                });
            }
            Op::LogSoftmax(x, axis) => {
                let shape = self.value(*x).shape().clone();
                let gx = slot(grads, *x, y.len());
                Self::for_each_slice(&shape, *axis, |idx| {
                    let total: f64 = idx.iter().map(|&i| gy[i]).sum();
                    for &i in idx {
                        gx[i] += gy[i] - y[i].exp() * total;
                    }
                });
            }
            Op::L1Normalize { x, axis, norms } => {
                let shape = self.value(*x).shape().clone();
                let xd = self.data(*x);
                let gx = slot(grads, *x, y.len());
                let mut k = 0;
                Self::for_each_slice(&shape, *axis, |idx| {
                    let n = norms[k];
                    k += 1;
                    if n == 0.0 {
                        return;
                    }
                    let dot: f64 = idx.iter().map(|&i| gy[i] * xd[i]).sum();
                    for &i in idx {
                        gx[i] += gy[i] / n - xd[i].signum() * dot / (n * n);
                    }
                });
            }
            Op::LayerNorm { x, gain, shift, xhat, inv_std } => {
                let n = self.dims(*gain)[0];
                let rows = y.len() / n;
                let gd = self.data(*gain);
                {
                    let gg = slot(grads, *gain, n);
                    for r in 0..rows {
                        for j in 0..n {
                            gg[j] += gy[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                {
                    let gs = slot(grads, *shift, n);
                    for r in 0..rows {
                        for j in 0..n {
                            gs[j] += gy[r * n + j];
                        }
                    }
                }
                let gx = slot(grads, *x, y.len());
                let nf = n as f64;
                for r in 0..rows {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..n {
                        let d = gy[r * n + j] * gd[j];
                        sum_d += d;
                        sum_dx += d * xhat[r * n + j];
                    }
                    for j in 0..n {
                        let d = gy[r * n + j] * gd[j];
                        gx[r * n + j] += inv_std[r] / nf * (nf * d - sum_d - xhat[r * n + j] * sum_dx);
                    }
                }
            }
            Op::Concat(xs, axis) => {
                let out_dims = node.value.dims();
                let outer: usize = out_dims[..*axis].iter().product();
                let inner: usize = out_dims[axis + 1..].iter().product();
                let total = out_dims[*axis] * inner;
                let mut off = 0;
                for &v in xs {
                    let w = self.dims(v)[*axis] * inner;
                    let gx = slot(grads, v, outer * w);
                    for o in 0..outer {
                        for (s, g) in gx[o * w..(o + 1) * w].iter_mut().zip(&gy[o * total + off..o * total + off + w]) {
                            *s += g;
                        }
                    }
                    off += w;
                }
            }
        }
    }
}

/// cols[(c*kw + j), t] = x[c, t + j - pad_left] (zero outside the input).
fn im2col(x: &[f64], c_in: usize, len: usize, kw: usize, pad_left: usize, out_len: usize, cols: &mut [f64]) {
    for c in 0..c_in {
        for j in 0..kw {
            let row = &mut cols[(c * kw + j) * out_len..(c * kw + j + 1) * out_len];
            for (t, v) in row.iter_mut().enumerate() {
                let src = t + j;
                *v = if src >= pad_left && src - pad_left < len { x[c * len + src - pad_left] } else { 0.0 };
            }
        }
    }
}

fn col2im(dcols: &[f64], c_in: usize, len: usize, kw: usize, pad_left: usize, out_len: usize, gx: &mut [f64]) {
    for c in 0..c_in {
        for j in 0..kw {
            let row = &dcols[(c * kw + j) * out_len..(c * kw + j + 1) * out_len];
            for (t, v) in row.iter().enumerate() {
                let src = t + j;
                if src >= pad_left && src - pad_left < len {
                    gx[c * len + src - pad_left] += v;
                }
            }
        }
    }
}
