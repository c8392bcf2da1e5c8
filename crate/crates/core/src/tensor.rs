//! Dense tensors and a reverse-mode differentiation tape.
//!
//! Every operation on a [`Tape`] evaluates eagerly, appends a node holding the
//! result, and remembers what it needs for the backward sweep. Nodes are only
//! ever appended, so the node list is already in topological order and
//! [`Tape::backward`] is a single reverse pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;


use crate::{Error, Result};

/// Row-major dense array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows (leading extent); 1 for scalars.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Elements per row (product of all trailing extents).
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    /// Element `(r, c)` of a 2-D tensor.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Abs(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    SegmentSoftmax(Var, Vec<usize>),
    Conv2d { input: Var, kernels: Var, bias: Var },
    Dropout(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    SumLastAxis(Var),
    L1NormLastAxis(Var),
    ScaleRows(Var, Var),
    AddRowBroadcast(Var, Var),
    PairwiseL1(Var, Var),
    Bce { probs: Var, labels: Vec<f64>, eps: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Recorded computation supporting reverse-mode differentiation.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    training: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Tape {
    /// Tape in evaluation mode: dropout is the identity.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            training: false,
        }
    }

    /// Tape in training mode: dropout masks are sampled.
    pub fn training() -> Self {
        Tape {
            nodes: Vec::new(),
            training: true,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let av = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    /// Joins 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (rows, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks tensors with identical trailing extents along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let tail: Vec<usize> = self.shape(first).iter().skip(1).copied().collect();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err("concat_rows", self.shape(first), s));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let t = Tensor::new(shape.to_vec(), self.value(a).data().to_vec())?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if src.shape().is_empty() {
            return Err(shape_err("gather_rows", src.shape(), &[index.len()]));
        }
        let rows = src.rows();
        let w = src.row_len();
        let mut out = Vec::with_capacity(index.len() * w);
        for &i in index {
            if i >= rows {
                return Err(Error::Contract(format!(
                    "gather_rows index {i} out of range for {rows} rows"
                )));
            }
            out.extend_from_slice(src.row(i));
        }
        let mut shape = src.shape().to_vec();
        shape[0] = index.len();
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::GatherRows(a, index.to_vec()), &[a]))
    }

    /// Sums row `k` of `a` into output row `index[k]` of an `out_rows`-row tensor.
    pub fn scatter_add_rows(&mut self, a: Var, index: &[usize], out_rows: usize) -> Result<Var> {
        let src = self.value(a);
        if src.shape().is_empty() || src.rows() != index.len() {
            return Err(shape_err("scatter_add_rows", src.shape(), &[index.len()]));
        }
        let w = src.row_len();
        let mut out = vec![0.0; out_rows * w];
        for (k, &i) in index.iter().enumerate() {
            if i >= out_rows {
                return Err(Error::Contract(format!(
                    "scatter_add_rows index {i} out of range for {out_rows} rows"
                )));
            }
            for (o, x) in out[i * w..(i + 1) * w].iter_mut().zip(src.row(k)) {
                *o += x;
            }
        }
        let mut shape = src.shape().to_vec();
        shape[0] = out_rows;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::ScatterAddRows(a, index.to_vec()), &[a]))
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(name, x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor {
            shape: x.shape().to_vec(),
            data: x.data().iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |p, q| p + q)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let t = self.map(a, |v| -v);
        self.push(t, Op::Neg(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.map(a, libm::fabs);
        self.push(t, Op::Abs(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, libm::tanh);
        self.push(t, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |v| if v > 0.0 { v } else { 0.0 });
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.map(a, libm::exp);
        self.push(t, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.map(a, libm::log);
        self.push(t, Op::Log(a), &[a])
    }

    /// Softmax of a 1-D tensor within groups given by `segments[i]`.
    pub fn segment_softmax(&mut self, a: Var, segments: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 1 || x.len() != segments.len() {
            return Err(shape_err("segment_softmax", x.shape(), &[segments.len()]));
        }
        let out = segment_softmax_values(x.data(), segments);
        let t = Tensor::vector(out);
        Ok(self.push(t, Op::SegmentSoftmax(a, segments.to_vec()), &[a]))
    }

    /// Valid 2-D cross-correlation plus per-channel bias.
    ///
    /// `input` is `c_in×H×W` or batched `B×c_in×H×W`; `kernels` is
    /// `c_out×c_in×kh×kw`; `bias` has `c_out` entries.
    pub fn conv2d_valid(&mut self, input: Var, kernels: Var, bias: Var) -> Result<Var> {
        let g = self.conv_geometry(input, kernels, bias)?;
        let x = self.value(input).data();
        let k = self.value(kernels).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; g.batch * g.c_out * g.oh * g.ow];
        for n in 0..g.batch {
            for o in 0..g.c_out {
                let obase = (n * g.c_out + o) * g.oh * g.ow;
                for y in 0..g.oh {
                    for xx in 0..g.ow {
                        let mut acc = b[o];
                        for c in 0..g.c_in {
                            let ibase = (n * g.c_in + c) * g.h * g.w;
                            let kbase = (o * g.c_in + c) * g.kh * g.kw;
                            for u in 0..g.kh {
                                for v in 0..g.kw {
                                    acc += x[ibase + (y + u) * g.w + xx + v]
                                        * k[kbase + u * g.kw + v];
                                }
                            }
                        }
                        out[obase + y * g.ow + xx] = acc;
                    }
                }
            }
        }
        let shape = if g.batched {
            vec![g.batch, g.c_out, g.oh, g.ow]
        } else {
            vec![g.c_out, g.oh, g.ow]
        };
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                kernels,
                bias,
            },
            &[input, kernels, bias],
        ))
    }

    fn conv_geometry(&self, input: Var, kernels: Var, bias: Var) -> Result<ConvGeometry> {
        let is = self.shape(input);
        let ks = self.shape(kernels);
        let (batched, batch, c_in, h, w) = match *is {
            [c, h, w] => (false, 1, c, h, w),
            [n, c, h, w] => (true, n, c, h, w),
            _ => return Err(shape_err("conv2d_valid", is, ks)),
        };
        let [c_out, kc, kh, kw] = *ks else {
            return Err(shape_err("conv2d_valid", is, ks));
        };
        if kc != c_in || kh > h || kw > w || kh == 0 || kw == 0 {
            return Err(shape_err("conv2d_valid", is, ks));
        }
        if self.shape(bias) != [c_out] {
            return Err(shape_err("conv2d_valid", ks, self.shape(bias)));
        }
        Ok(ConvGeometry {
            batched,
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            oh: h - kh + 1,
            ow: w - kw + 1,
        })
    }

    /// Inverted dropout. Identity when the tape is not training or `rate` is 0.
    pub fn dropout<R: rand::Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let x = self.value(a);
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Dropout(a, mask), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    fn reduce_last(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let x = self.value(a);
        let Some((&d, lead)) = x.shape().split_last() else {
            return Err(shape_err("last-axis reduction", x.shape(), &[]));
        };
        let data = if d == 0 {
            vec![0.0; lead.iter().product()]
        } else {
            x.data().chunks(d).map(|c| c.iter().map(|v| f(*v)).sum()).collect()
        };
        Tensor::new(lead.to_vec(), data)
    }

    pub fn sum_last_axis(&mut self, a: Var) -> Result<Var> {
        let t = self.reduce_last(a, |v| v)?;
        Ok(self.push(t, Op::SumLastAxis(a), &[a]))
    }

    pub fn l1_norm_last_axis(&mut self, a: Var) -> Result<Var> {
        let t = self.reduce_last(a, libm::fabs)?;
        Ok(self.push(t, Op::L1NormLastAxis(a), &[a]))
    }

    /// Multiplies row `i` of `m` by `s[i]`.
    pub fn scale_rows(&mut self, m: Var, s: Var) -> Result<Var> {
        let (x, sv) = (self.value(m), self.value(s));
        if x.shape().is_empty() || sv.shape() != [x.rows()] {
            return Err(shape_err("scale_rows", x.shape(), sv.shape()));
        }
        let w = x.row_len();
        let mut data = x.data().to_vec();
        if w > 0 {
            for (row, f) in data.chunks_mut(w).zip(sv.data()) {
                row.iter_mut().for_each(|v| *v *= f);
            }
        }
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(t, Op::ScaleRows(m, s), &[m, s]))
    }

    /// Adds the `d`-vector `b` to every row of the `n×d` tensor `m`.
    pub fn add_row_broadcast(&mut self, m: Var, b: Var) -> Result<Var> {
        let (n, d) = self.dims2(m, "add_row_broadcast")?;
        if self.shape(b) != [d] {
            return Err(shape_err("add_row_broadcast", self.shape(m), self.shape(b)));
        }
        let bv = self.value(b).data();
        let mut data = self.value(m).data().to_vec();
        if d > 0 {
            for row in data.chunks_mut(d) {
                row.iter_mut().zip(bv).for_each(|(v, x)| *v += x);
            }
        }
        let t = Tensor::new(vec![n, d], data)?;
        Ok(self.push(t, Op::AddRowBroadcast(m, b), &[m, b]))
    }

    /// `out[b, i] = Σ_m |q[b, m] − c[i, m]|` for `q: B×d`, `c: N×d`.
    pub fn pairwise_l1(&mut self, q: Var, c: Var) -> Result<Var> {
        let (bq, d) = self.dims2(q, "pairwise_l1")?;
        let (nc, d2) = self.dims2(c, "pairwise_l1")?;
        if d != d2 {
            return Err(shape_err("pairwise_l1", self.shape(q), self.shape(c)));
        }
        let qv = self.value(q).data();
        let cv = self.value(c).data();
        let mut out = Vec::with_capacity(bq * nc);
        for b in 0..bq {
            let qr = &qv[b * d..(b + 1) * d];
            for i in 0..nc {
                let cr = &cv[i * d..(i + 1) * d];
                out.push(qr.iter().zip(cr).map(|(x, y)| libm::fabs(x - y)).sum());
            }
        }
        let t = Tensor::new(vec![bq, nc], out)?;
        Ok(self.push(t, Op::PairwiseL1(q, c), &[q, c]))
    }

    /// Mean binary cross-entropy with probabilities clamped to `[eps, 1 − eps]`.
    pub fn bce(&mut self, probs: Var, labels: &Tensor, eps: f64) -> Result<Var> {
        let p = self.value(probs);
        if p.shape() != labels.shape() {
            return Err(shape_err("bce", p.shape(), labels.shape()));
        }
        let loss = bce_value(p.data(), labels.data(), eps);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                probs,
                labels: labels.data().to_vec(),
                eps,
            },
            &[probs],
        ))
    }

    /// Propagates d(loss)/d(node) back to every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = out.shape()[0];
                let total = out.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if let Some(gp) = self.acc(grads, p) {
                        for i in 0..rows {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut().zip(&g[offset..offset + n]).for_each(|(o, x)| *o += x);
                    }
                    offset += n;
                }
            }
            &Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
            }
            Op::GatherRows(a, index) => {
                let w = self.value(*a).row_len();
                if let Some(ga) = self.acc(grads, *a) {
                    for (k, &i) in index.iter().enumerate() {
                        for j in 0..w {
                            ga[i * w + j] += g[k * w + j];
                        }
                    }
                }
            }
            Op::ScatterAddRows(a, index) => {
                let w = self.value(*a).row_len();
                if let Some(ga) = self.acc(grads, *a) {
                    for (k, &i) in index.iter().enumerate() {
                        for j in 0..w {
                            ga[k * w + j] += g[i * w + j];
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                if let Some(gb) = self.acc(grads, b) {
                    gb.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                if let Some(gb) = self.acc(grads, b) {
                    gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x);
                }
            }
            &Op::Mul(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if let Some(ga) = self.acc(grads, a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            &Op::Neg(a) => self.unary(grads, a, g, |_, _| -1.0),
            &Op::Abs(a) => self.unary(grads, a, g, |x, _| sign(x)),
            &Op::Sigmoid(a) => self.unary_out(grads, a, g, out, |y| y * (1.0 - y)),
            &Op::Tanh(a) => self.unary_out(grads, a, g, out, |y| 1.0 - y * y),
            &Op::Relu(a) => self.unary(grads, a, g, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            &Op::Exp(a) => self.unary_out(grads, a, g, out, |y| y),
            &Op::Log(a) => self.unary(grads, a, g, |x, _| 1.0 / x),
            Op::SegmentSoftmax(a, segments) => {
                let y = out.data();
                let nseg = segments.iter().max().map_or(0, |m| m + 1);
                let mut dots = vec![0.0; nseg];
                for ((s, gi), yi) in segments.iter().zip(g).zip(y) {
                    dots[*s] += gi * yi;
                }
                if let Some(ga) = self.acc(grads, *a) {
                    for (k, s) in segments.iter().enumerate() {
                        ga[k] += y[k] * (g[k] - dots[*s]);
                    }
                }
            }
            &Op::Conv2d {
                input,
                kernels,
                bias,
            } => self.conv_backward(grads, g, input, kernels, bias),
            Op::Dropout(a, mask) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, x), m) in ga.iter_mut().zip(g).zip(mask) {
                        *o += x * m;
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            &Op::Mean(a) => {
                let n = self.value(a).len().max(1) as f64;
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().for_each(|o| *o += g[0] / n);
                }
            }
            &Op::SumLastAxis(a) | &Op::L1NormLastAxis(a) => {
                let abs = matches!(node.op, Op::L1NormLastAxis(_));
                let d = *self.shape(a).last().unwrap_or(&0);
                let av = self.value(a).data();
                if d == 0 {
                    return;
                }
                if let Some(ga) = self.acc(grads, a) {
                    for (k, gk) in g.iter().enumerate() {
                        for j in 0..d {
                            let f = if abs { sign(av[k * d + j]) } else { 1.0 };
                            ga[k * d + j] += gk * f;
                        }
                    }
                }
            }
            &Op::ScaleRows(m, s) => {
                let mv = self.value(m).data();
                let sv = self.value(s).data();
                let w = self.value(m).row_len();
                if let Some(gm) = self.acc(grads, m) {
                    for (i, f) in sv.iter().enumerate() {
                        for j in 0..w {
                            gm[i * w + j] += g[i * w + j] * f;
                        }
                    }
                }
                if let Some(gs) = self.acc(grads, s) {
                    for (i, o) in gs.iter_mut().enumerate() {
                        *o += (0..w).map(|j| g[i * w + j] * mv[i * w + j]).sum::<f64>();
                    }
                }
            }
            &Op::AddRowBroadcast(m, b) => {
                let d = self.shape(b)[0];
                if let Some(gm) = self.acc(grads, m) {
                    gm.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                if d > 0 {
                    if let Some(gb) = self.acc(grads, b) {
                        for row in g.chunks(d) {
                            gb.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                        }
                    }
                }
            }
            &Op::PairwiseL1(q, c) => {
                let (bq, d) = (self.shape(q)[0], self.shape(q)[1]);
                let nc = self.shape(c)[0];
                let qv = self.value(q).data();
                let cv = self.value(c).data();
                let mut gq = vec![0.0; bq * d];
                let mut gc = vec![0.0; nc * d];
                for b in 0..bq {
                    for i in 0..nc {
                        let gi = g[b * nc + i];
                        if gi == 0.0 {
                            continue;
                        }
                        for m in 0..d {
                            let s = sign(qv[b * d + m] - cv[i * d + m]) * gi;
                            gq[b * d + m] += s;
                            gc[i * d + m] -= s;
                        }
                    }
                }
                if let Some(o) = self.acc(grads, q) {
                    o.iter_mut().zip(&gq).for_each(|(o, x)| *o += x);
                }
                if let Some(o) = self.acc(grads, c) {
                    o.iter_mut().zip(&gc).for_each(|(o, x)| *o += x);
                }
            }
            Op::Bce { probs, labels, eps } => {
                let p = self.value(*probs).data();
                let n = p.len().max(1) as f64;
                if let Some(gp) = self.acc(grads, *probs) {
                    for ((o, &pi), &qi) in gp.iter_mut().zip(p).zip(labels) {
                        if pi > *eps && pi < 1.0 - eps {
                            *o += g[0] * (-qi / pi + (1.0 - qi) / (1.0 - pi)) / n;
                        }
                    }
                }
            }
        }
    }

    fn unary(&self, grads: &mut [Option<Vec<f64>>], a: Var, g: &[f64], d: impl Fn(f64, f64) -> f64) {
        let av = self.value(a).data();
        if let Some(ga) = self.acc(grads, a) {
            for ((o, x), gi) in ga.iter_mut().zip(av).zip(g) {
                *o += gi * d(*x, 0.0);
            }
        }
    }

    fn unary_out(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        g: &[f64],
        out: &Tensor,
        d: impl Fn(f64) -> f64,
    ) {
        if let Some(ga) = self.acc(grads, a) {
            for ((o, y), gi) in ga.iter_mut().zip(out.data()).zip(g) {
                *o += gi * d(*y);
            }
        }
    }

    fn conv_backward(
        &self,
        grads: &mut [Option<Vec<f64>>],
        g: &[f64],
        input: Var,
        kernels: Var,
        bias: Var,
    ) {
        let Ok(geo) = self.conv_geometry(input, kernels, bias) else {
            return;
        };
        let x = self.value(input).data();
        let k = self.value(kernels).data();
        let mut gx = vec![0.0; x.len()];
        let mut gk = vec![0.0; k.len()];
        let mut gb = vec![0.0; geo.c_out];
        for n in 0..geo.batch {
            for o in 0..geo.c_out {
                let obase = (n * geo.c_out + o) * geo.oh * geo.ow;
                for y in 0..geo.oh {
                    for xx in 0..geo.ow {
                        let go = g[obase + y * geo.ow + xx];
                        if go == 0.0 {
                            continue;
                        }
                        gb[o] += go;
                        for c in 0..geo.c_in {
                            let ibase = (n * geo.c_in + c) * geo.h * geo.w;
                            let kbase = (o * geo.c_in + c) * geo.kh * geo.kw;
                            for u in 0..geo.kh {
                                for v in 0..geo.kw {
                                    let ii = ibase + (y + u) * geo.w + xx + v;
                                    let ki = kbase + u * geo.kw + v;
                                    gx[ii] += go * k[ki];
                                    gk[ki] += go * x[ii];
                                }
                            }
                        }
                    }
                }
            }
        }
        for (v, acc) in [(input, gx), (kernels, gk), (bias, gb)] {
            if let Some(o) = self.acc(grads, v) {
                o.iter_mut().zip(&acc).for_each(|(o, x)| *o += x);
            }
        }
    }
}

struct ConvGeometry {
    batched: bool,
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

/// Max-shifted softmax within each segment.
pub fn segment_softmax_values(x: &[f64], segments: &[usize]) -> Vec<f64> {
    let nseg = segments.iter().max().map_or(0, |m| m + 1);
    let mut max = vec![f64::NEG_INFINITY; nseg];
    for (v, s) in x.iter().zip(segments) {
        if *v > max[*s] {
            max[*s] = *v;
        }
    }
    let mut out: Vec<f64> = x
        .iter()
        .zip(segments)
        .map(|(v, s)| libm::exp(v - max[*s]))
        .collect();
    let mut total = vec![0.0; nseg];
    for (e, s) in out.iter().zip(segments) {
        total[*s] += e;
    }
    for (e, s) in out.iter_mut().zip(segments) {
        *e /= total[*s];
    }
    out
}

/// Logistic function, stable for large magnitudes.
pub fn logistic(x: f64) -> f64 {
    sigmoid(x)
}

/// `−(1/N) Σ (q ln p + (1 − q) ln(1 − p))` with `p` clamped to `[eps, 1 − eps]`.
pub fn bce_value(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let n = p.len().max(1) as f64;
    let total: f64 = p
        .iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            let pc = pi.clamp(eps, 1.0 - eps);
            qi * libm::log(pc) + (1.0 - qi) * libm::log(1.0 - pc)
        })
        .sum();
    -total / n
}
