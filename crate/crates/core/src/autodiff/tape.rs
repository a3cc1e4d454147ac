use std::rc::Rc;

use super::tensor::{matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SliceCols {
        src: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceAxis0 {
        src: Var,
        offset: usize,
    },
    ConcatAxis0(Vec<Var>),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    SoftmaxRows(Var),
    MaskedFill {
        src: Var,
        mask: Rc<[bool]>,
    },
    LayerNormRows {
        src: Var,
        inv_std: Vec<f64>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    AvgPool2x(Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a computation for reverse-mode differentiation.
///
/// Every operation appends a node, so node order is already a topological
/// order and the backward pass is a single reverse sweep.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every recorded value.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `var` does not influence the root.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, materialised as zeros when unreachable.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Parameters and constants are both leaves; the
    /// caller decides which gradients to read back.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_same("add", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_same("sub", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_same("mul", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    /// Adds a vector to every row (broadcast over the last axis).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", a, row, |x, r| x + r)?;
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Multiplies every row elementwise by a vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", a, row, |x, r| x * r)?;
        Ok(self.push(out, Op::MulRow(a, row)))
    }

    fn row_broadcast(&self, op: &'static str, a: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, r) = (self.value(a), self.value(row));
        let n = r.len();
        if x.shape().last() != Some(&n) || r.rank() != 1 {
            return Err(Error::shape(op, format!("{:?} by {:?}", x.shape(), r.shape())));
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, r.data()[i % n]))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Columns `start..end` of a rank-2 value.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        check_rank("slice_cols", x, 2)?;
        let (rows, cols) = (x.rows(), x.cols());
        if start >= end || end > cols {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {cols}")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&x.row(r)[start..end]);
        }
        let out = Tensor::new(vec![rows, w], data)?;
        Ok(self.push(out, Op::SliceCols { src: a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat_cols inputs"))?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            check_rank("concat_cols", t, 2)?;
            if t.rows() != rows {
                return Err(Error::shape("concat_cols", "row counts differ"));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Indices `start..end` along the leading axis (rows of a matrix,
    /// channels of a `[C, H, W]` image).
    pub fn slice_axis0(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let lead = *x.shape().first().ok_or(Error::shape("slice_axis0", "rank 0"))?;
        if start >= end || end > lead {
            return Err(Error::shape("slice_axis0", format!("{start}..{end} of {lead}")));
        }
        let inner = x.len() / lead;
        let mut shape = x.shape().to_vec();
        shape[0] = end - start;
        let data = x.data()[start * inner..end * inner].to_vec();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::SliceAxis0 {
                src: a,
                offset: start * inner,
            },
        ))
    }

    pub fn concat_axis0(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat_axis0 inputs"))?;
        let tail = self.value(*first).shape().get(1..).unwrap_or(&[]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() == 0 || t.shape()[1..] != tail[..] {
                return Err(Error::shape(
                    "concat_axis0",
                    format!("trailing dims {:?} vs {tail:?}", t.shape()),
                ));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::ConcatAxis0(parts.to_vec())))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// Rectifier; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    /// Row-wise softmax of a rank-2 value. Entries equal to `-inf` are
    /// excluded from the normalisation and receive exactly zero weight.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        check_rank("softmax_rows", x, 2)?;
        let cols = x.cols();
        let mut data = vec![0.0; x.len()];
        for (r, out) in data.chunks_mut(cols.max(1)).enumerate() {
            let row = x.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::shape("softmax_rows", format!("row {r} has no unmasked entry")));
            }
            let mut total = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                if v != f64::NEG_INFINITY {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    /// Replaces entries where `mask` is set by `value`; those entries pass
    /// no gradient back.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var> {
        let x = self.value(a);
        if mask.len() != x.len() {
            return Err(Error::shape(
                "masked_fill",
                format!("mask of {} for {} elements", mask.len(), x.len()),
            ));
        }
        let data = x
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::MaskedFill {
                src: a,
                mask: mask.into(),
            },
        ))
    }

    /// Normalises each row to zero mean and unit (population) variance.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let n = *x.shape().last().ok_or(Error::shape("layer_norm_rows", "rank 0"))?;
        let rows = x.len() / n;
        let mut data = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, v) in data[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::LayerNormRows { src: a, inv_std }))
    }

    /// 2D cross-correlation of a `[C_in, H, W]` image with a
    /// `[C_out, C_in, K, K]` kernel, zero padding `pad` on every side.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(weight));
        check_rank("conv2d", x, 3)?;
        check_rank("conv2d", w, 4)?;
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, wcin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if wcin != cin || kh != kw || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, kernel {:?}, stride {stride}", x.shape(), w.shape()),
            ));
        }
        let (oh, ow) = match (conv_out(h, kh, stride, pad), conv_out(wd, kw, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::shape("conv2d", "kernel larger than padded input")),
        };
        let mut out = vec![0.0; cout * oh * ow];
        if let Some(b) = bias {
            let b = self.value(b);
            if b.shape() != [cout] {
                return Err(Error::shape("conv2d", format!("bias {:?}", b.shape())));
            }
            for (co, plane) in out.chunks_mut(oh * ow).enumerate() {
                plane.fill(b.data()[co]);
            }
        }
        let geo = ConvGeometry {
            h,
            w: wd,
            oh,
            ow,
            k: kh,
            stride,
            pad,
        };
        for co in 0..cout {
            let oplane = &mut out[co * oh * ow..(co + 1) * oh * ow];
            for ci in 0..cin {
                let iplane = &x.data()[ci * h * wd..(ci + 1) * h * wd];
                let kern = &w.data()[(co * cin + ci) * kh * kw..(co * cin + ci + 1) * kh * kw];
                geo.for_each_tap(kern, |ky, kx, wv| {
                    geo.for_each_row(ky, kx, |oy, iy, ox0, ox1, ix0| {
                        let orow = &mut oplane[oy * ow..];
                        let irow = &iplane[iy * wd..];
                        for (j, ox) in (ox0..ox1).enumerate() {
                            orow[ox] += wv * irow[ix0 + j * stride];
                        }
                    });
                });
            }
        }
        let out = Tensor::new(vec![cout, oh, ow], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
        ))
    }

    /// Nearest-neighbour 2x upsampling of a `[C, H, W]` image.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        check_rank("upsample2x", x, 3)?;
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = x.data()[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new(vec![c, 2 * h, 2 * w], out)?;
        Ok(self.push(out, Op::Upsample2x(a)))
    }

    /// 2x2 box filter with stride 2 over a `[C, H, W]` image with even H, W.
    pub fn avg_pool2x(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        check_rank("avg_pool2x", x, 3)?;
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::shape("avg_pool2x", format!("odd size {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        let d = x.data();
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let i = (ch * h + 2 * y) * w + 2 * xx;
                    out[(ch * oh + y) * ow + xx] = 0.25 * (d[i] + d[i + 1] + d[i + w] + d[i + w + 1]);
                }
            }
        }
        let out = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(out, Op::AvgPool2x(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Empty("mean input"));
        }
        let out = Tensor::scalar(x.sum() / x.len() as f64);
        Ok(self.push(out, Op::Mean(a)))
    }

    /// Reverse sweep from a one-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got shape {:?}", rv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (x, z) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, zip_map(g, z, |g, z| g * z));
                accumulate(grads, *b, zip_map(g, x, |g, x| g * x));
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.map(|v| v * c)),
            Op::AddRow(a, r) => {
                accumulate(grads, *a, g.clone());
                let n = self.value(*r).len();
                let mut gr = vec![0.0; n];
                for (i, v) in gd.iter().enumerate() {
                    gr[i % n] += v;
                }
                accumulate(grads, *r, tensor(vec![n], gr));
            }
            Op::MulRow(a, r) => {
                let (x, row) = (self.value(*a), self.value(*r));
                let n = row.len();
                let ga = gd.iter().enumerate().map(|(i, v)| v * row.data()[i % n]).collect();
                let mut gr = vec![0.0; n];
                for (i, (v, xv)) in gd.iter().zip(x.data()).enumerate() {
                    gr[i % n] += v * xv;
                }
                accumulate(grads, *a, tensor(x.shape().to_vec(), ga));
                accumulate(grads, *r, tensor(vec![n], gr));
            }
            Op::MatMul(a, b) => {
                let (x, z) = (self.value(*a), self.value(*b));
                let (m, k, n) = (x.rows(), x.cols(), z.cols());
                // dA = G·Bᵀ, dB = Aᵀ·G
                let zt = z.transpose().expect("rank-2");
                let mut ga = vec![0.0; m * k];
                matmul_into(gd, zt.data(), &mut ga, m, n, k);
                let xt = x.transpose().expect("rank-2");
                let mut gb = vec![0.0; k * n];
                matmul_into(xt.data(), gd, &mut gb, k, m, n);
                accumulate(grads, *a, tensor(vec![m, k], ga));
                accumulate(grads, *b, tensor(vec![k, n], gb));
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose().expect("rank-2")),
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                accumulate(grads, *a, g.clone().reshape(&shape).expect("same size"));
            }
            Op::SliceCols { src, start } => {
                let x = self.value(*src);
                let (rows, cols, w) = (x.rows(), x.cols(), y.cols());
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
                }
                accumulate(grads, *src, tensor(x.shape().to_vec(), gx));
            }
            Op::ConcatCols(parts) => {
                let rows = y.rows();
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let w = shape[1];
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    offset += w;
                    accumulate(grads, p, tensor(shape, gp));
                }
            }
            Op::SliceAxis0 { src, offset } => {
                let x = self.value(*src);
                let mut gx = vec![0.0; x.len()];
                gx[*offset..offset + g.len()].copy_from_slice(gd);
                accumulate(grads, *src, tensor(x.shape().to_vec(), gx));
            }
            Op::ConcatAxis0(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let n = self.value(p).len();
                    accumulate(grads, p, tensor(shape, gd[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::Tanh(a) => accumulate(grads, *a, zip_map(g, y, |g, t| g * (1.0 - t * t))),
            Op::Relu(a) => {
                let x = self.value(*a);
                accumulate(grads, *a, zip_map(g, x, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Sigmoid(a) => accumulate(grads, *a, zip_map(g, y, |g, s| g * s * (1.0 - s))),
            Op::Abs(a) => {
                let x = self.value(*a);
                let sign = |x: f64| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                accumulate(grads, *a, zip_map(g, x, |g, x| g * sign(x)));
            }
            Op::Square(a) => {
                let x = self.value(*a);
                accumulate(grads, *a, zip_map(g, x, |g, x| 2.0 * g * x));
            }
            Op::SoftmaxRows(a) => {
                let cols = y.cols();
                let mut gx = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        gx[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                accumulate(grads, *a, tensor(y.shape().to_vec(), gx));
            }
            Op::MaskedFill { src, mask } => {
                let gx = gd
                    .iter()
                    .zip(mask.iter())
                    .map(|(&v, &m)| if m { 0.0 } else { v })
                    .collect();
                accumulate(grads, *src, tensor(y.shape().to_vec(), gx));
            }
            Op::LayerNormRows { src, inv_std } => {
                let n = *y.shape().last().expect("rank >= 1");
                let mut gx = vec![0.0; y.len()];
                for (r, inv) in inv_std.iter().enumerate() {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &gd[r * n..(r + 1) * n];
                    let gsum: f64 = gr.iter().sum();
                    let gdot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        gx[r * n + c] = inv / n as f64 * (n as f64 * gr[c] - gsum - yr[c] * gdot);
                    }
                }
                accumulate(grads, *src, tensor(y.shape().to_vec(), gx));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => self.conv2d_backward(g, *input, *weight, *bias, *stride, *pad, grads),
            Op::Upsample2x(a) => {
                let x = self.value(*a);
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut gx = vec![0.0; x.len()];
                for ch in 0..c {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            gx[(ch * h + yy / 2) * w + xx / 2] += gd[(ch * 2 * h + yy) * 2 * w + xx];
                        }
                    }
                }
                accumulate(grads, *a, tensor(x.shape().to_vec(), gx));
            }
            Op::AvgPool2x(a) => {
                let x = self.value(*a);
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = vec![0.0; x.len()];
                for ch in 0..c {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let v = 0.25 * gd[(ch * oh + yy) * ow + xx];
                            let i = (ch * h + 2 * yy) * w + 2 * xx;
                            gx[i] += v;
                            gx[i + 1] += v;
                            gx[i + w] += v;
                            gx[i + w + 1] += v;
                        }
                    }
                }
                accumulate(grads, *a, tensor(x.shape().to_vec(), gx));
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                accumulate(grads, *a, Tensor::full(x.shape(), gd[0]));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                accumulate(grads, *a, Tensor::full(x.shape(), gd[0] / x.len() as f64));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        g: &Tensor,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Tensor>],
    ) {
        let (x, w) = (self.value(input), self.value(weight));
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let (oh, ow) = (g.shape()[1], g.shape()[2]);
        let geo = ConvGeometry {
            h,
            w: wd,
            oh,
            ow,
            k,
            stride,
            pad,
        };
        let gd = g.data();
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; w.len()];
        for co in 0..cout {
            let gplane = &gd[co * oh * ow..(co + 1) * oh * ow];
            for ci in 0..cin {
                let iplane = &x.data()[ci * h * wd..(ci + 1) * h * wd];
                let gxplane = &mut gx[ci * h * wd..(ci + 1) * h * wd];
                let base = (co * cin + ci) * k * k;
                let kern = &w.data()[base..base + k * k];
                let gkern = &mut gw[base..base + k * k];
                geo.for_each_tap(kern, |ky, kx, wv| {
                    let mut acc = 0.0;
                    geo.for_each_row(ky, kx, |oy, iy, ox0, ox1, ix0| {
                        let grow = &gplane[oy * ow..];
                        let irow = &iplane[iy * wd..];
                        let gxrow = &mut gxplane[iy * wd..];
                        for (j, ox) in (ox0..ox1).enumerate() {
                            let ix = ix0 + j * stride;
                            acc += grow[ox] * irow[ix];
                            gxrow[ix] += wv * grow[ox];
                        }
                    });
                    gkern[ky * k + kx] += acc;
                });
            }
        }
        accumulate(grads, input, tensor(x.shape().to_vec(), gx));
        accumulate(grads, weight, tensor(w.shape().to_vec(), gw));
        if let Some(b) = bias {
            let gb = (0..cout)
                .map(|co| gd[co * oh * ow..(co + 1) * oh * ow].iter().sum())
                .collect();
            accumulate(grads, b, tensor(vec![cout], gb));
        }
    }
}

/// Index bookkeeping shared by the convolution forward and backward loops.
struct ConvGeometry {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn for_each_tap(&self, kern: &[f64], mut f: impl FnMut(usize, usize, f64)) {
        for ky in 0..self.k {
            for kx in 0..self.k {
                f(ky, kx, kern[ky * self.k + kx]);
            }
        }
    }

    /// Calls `f(oy, iy, ox_start, ox_end, ix_start)` for every output row
    /// that reads a valid input row at tap `(ky, kx)`; the output columns
    /// `ox_start..ox_end` read input columns `ix_start + j * stride`.
    fn for_each_row(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        // first ox with ox*s + kx - p >= 0
        let lo = ((p - kx as isize).max(0) + s - 1) / s;
        // last ox with ox*s + kx - p <= w - 1
        let hi_num = self.w as isize - 1 + p - kx as isize;
        if hi_num < 0 {
            return;
        }
        let hi = (hi_num / s + 1).min(self.ow as isize);
        if lo >= hi {
            return;
        }
        let ix0 = (lo * s + kx as isize - p) as usize;
        for oy in 0..self.oh {
            let iy = (oy * self.stride + ky) as isize - p;
            if iy < 0 || iy >= self.h as isize {
                continue;
            }
            f(oy, iy as usize, lo as usize, hi as usize, ix0);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("gradient shape matches value shape")
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    tensor(g.shape().to_vec(), data)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
