use std::collections::HashMap;

use super::kernels::{self, ConvGeom, MatRef};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, f64),
    Gelu(Var),
    Relu(Var),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    PadTail {
        x: Var,
        axis: usize,
    },
    Softmax(Var),
    LogSoftmax(Var),
    MaskedSoftmax(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    LayerNorm {
        x: Var,
        rstd: Vec<f64>,
    },
    Conv {
        x: Var,
        k: Var,
        geom: ConvGeom,
        c_out: usize,
    },
    IndexSelect {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScaleRows(Var, Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | ScaleRows(a, b) => vec![*a, *b],
            Conv { x, k, .. } => vec![*x, *k],
            Scale(a, _)
            | AddScalar(a)
            | Exp(a)
            | Log(a)
            | Powf(a, _)
            | Gelu(a)
            | Relu(a)
            | Reshape(a)
            | Permute(a, _)
            | Softmax(a)
            | LogSoftmax(a)
            | MaskedSoftmax(a)
            | SumAll(a)
            | MeanAll(a)
            | SumAxis(a, _)
            | MeanAxis(a, _) => vec![*a],
            Narrow { x, .. }
            | PadTail { x, .. }
            | LayerNorm { x, .. }
            | IndexSelect { x, .. }
            | ScatterRows { x, .. } => vec![*x],
            Concat(xs, _) => xs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Define-by-run computation graph. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    backward_done: bool,
    debug_numerics: bool,
}

const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// When enabled, every op checks its output for NaN/Inf and fails with
    /// [`Error::NonFinite`] instead of propagating it.
    pub fn with_debug_numerics(mut self, on: bool) -> Self {
        self.debug_numerics = on;
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if self.debug_numerics && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|&v| self.needs(v));
        let value = Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        };
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Inserts a tensor as a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.grad = None;
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Leaf for a model parameter. Repeated calls within one graph return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let mut t = store.get(id).clone();
        t.requires_grad = true;
        let v = self.leaf(t);
        self.params.insert(id, v);
        v
    }

    /// Parameters that took part in this graph, with their gradient after backward.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, Option<&[f64]>)> + '_ {
        self.params.iter().map(|(&id, &v)| (id, self.grad(v)))
    }

    // ---- elementwise -------------------------------------------------------

    fn suffix_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// `a + b`, where `b`'s shape is a suffix of `a`'s (broadcast over leading dims).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.suffix_check("add", a, b)?;
        let bd = self.data(b);
        let nb = bd.len();
        let data = self.data(a).iter().enumerate().map(|(i, x)| x + bd[i % nb]).collect();
        self.push("add", self.shape(a).to_vec(), data, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.suffix_check("sub", a, b)?;
        let bd = self.data(b);
        let nb = bd.len();
        let data = self.data(a).iter().enumerate().map(|(i, x)| x - bd[i % nb]).collect();
        self.push("sub", self.shape(a).to_vec(), data, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.suffix_check("mul", a, b)?;
        let bd = self.data(b);
        let nb = bd.len();
        let data = self.data(a).iter().enumerate().map(|(i, x)| x * bd[i % nb]).collect();
        self.push("mul", self.shape(a).to_vec(), data, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x * s).collect();
        self.push("scale", self.shape(a).to_vec(), data, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x + s).collect();
        self.push("add_scalar", self.shape(a).to_vec(), data, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x.exp()).collect();
        self.push("exp", self.shape(a).to_vec(), data, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x.ln()).collect();
        self.push("log", self.shape(a).to_vec(), data, Op::Log(a))
    }

    /// `a^p` for nonnegative `a`.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x.powf(p)).collect();
        self.push("powf", self.shape(a).to_vec(), data, Op::Powf(a, p))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| kernels::gelu(x)).collect();
        self.push("gelu", self.shape(a).to_vec(), data, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x.max(0.0)).collect();
        self.push("relu", self.shape(a).to_vec(), data, Op::Relu(a))
    }

    // ---- linear algebra ----------------------------------------------------

    /// Batched matrix product `[.., m, k] x [.., k, n]`. Batch extents must be
    /// equal, or one operand must be a plain matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (ad, bd) = (self.data(a), self.data(b));
        let (out_shape, data) = if bb.is_empty() {
            let rows = ad.len() / k;
            let mut out = vec![0.0; rows * n];
            kernels::gemm(MatRef::new(ad, rows, k), MatRef::new(bd, k, n), &mut out, 0.0);
            let mut shape = ba.to_vec();
            shape.extend([m, n]);
            (shape, out)
        } else if ba.is_empty() || ba == bb {
            let batches: usize = bb.iter().product();
            let mut out = vec![0.0; batches * m * n];
            for i in 0..batches {
                let a_off = if ba.is_empty() { 0 } else { i * m * k };
                kernels::gemm(
                    MatRef::new(&ad[a_off..], m, k),
                    MatRef::new(&bd[i * k * n..], k, n),
                    &mut out[i * m * n..],
                    0.0,
                );
            }
            let mut shape = bb.to_vec();
            shape.extend([m, n]);
            (shape, out)
        } else {
            return Err(mismatch());
        };
        self.push("matmul", out_shape, data, Op::MatMul(a, b))
    }

    // ---- shape manipulation ------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(a).to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(a))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.value(a).rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::dim(
                "permute",
                format!("{axes:?} is not a permutation of rank {rank}"),
            ));
        }
        let (data, shape) = kernels::permute(self.data(a), self.shape(a), axes);
        self.push("permute", shape, data, Op::Permute(a, axes.to_vec()))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.value(a).rank();
        if rank < 2 {
            return Err(Error::dim("transpose", format!("rank {rank} < 2")));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    fn axis_check(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        let rank = self.value(a).rank();
        if axis >= rank {
            return Err(Error::dim(op, format!("axis {axis} out of range for rank {rank}")));
        }
        Ok(())
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        self.axis_check("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let same_rank = s.len() == base.len();
            if !same_rank || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::around_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                let d = self.data(x);
                data.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push("concat", shape, data, Op::Concat(xs.to_vec(), axis))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.axis_check("narrow", a, axis)?;
        let shape = self.shape(a).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::dim(
                "narrow",
                format!("range {start}..{} outside axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, alen, inner) = kernels::around_axis(&shape, axis);
        let d = self.data(a);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            data.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push("narrow", out_shape, data, Op::Narrow { x: a, axis, start })
    }

    /// Zero-pads the end of `axis` up to `len`.
    pub fn pad_tail(&mut self, a: Var, axis: usize, len: usize) -> Result<Var> {
        self.axis_check("pad_tail", a, axis)?;
        let shape = self.shape(a).to_vec();
        if len < shape[axis] {
            return Err(Error::dim(
                "pad_tail",
                format!("target {len} shorter than axis {axis} of {shape:?}"),
            ));
        }
        let (outer, alen, inner) = kernels::around_axis(&shape, axis);
        let d = self.data(a);
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            data[o * len * inner..(o * len + alen) * inner]
                .copy_from_slice(&d[o * alen * inner..(o + 1) * alen * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push("pad_tail", out_shape, data, Op::PadTail { x: a, axis })
    }

    // ---- normalisation -----------------------------------------------------

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let last = *shape
            .last()
            .ok_or_else(|| Error::dim("softmax", "scalar input has no last dimension"))?;
        let x = self.data(a);
        let mut data = vec![0.0; x.len()];
        for (xr, yr) in x.chunks(last).zip(data.chunks_mut(last)) {
            kernels::softmax_row(xr, yr);
        }
        self.push("softmax", shape, data, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let last = *shape
            .last()
            .ok_or_else(|| Error::dim("log_softmax", "scalar input has no last dimension"))?;
        let x = self.data(a);
        let mut data = Vec::with_capacity(x.len());
        for row in x.chunks(last) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        self.push("log_softmax", shape, data, Op::LogSoftmax(a))
    }

    /// Softmax over the unmasked entries of each last-axis row; masked entries
    /// are exactly zero and receive no gradient. `keep` has one flag per element.
    pub fn masked_softmax(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let last = *shape
            .last()
            .ok_or_else(|| Error::dim("masked_softmax", "scalar input has no last dimension"))?;
        let x = self.data(a);
        if keep.len() != x.len() {
            return Err(Error::dim(
                "masked_softmax",
                format!("mask has {} flags for {} values", keep.len(), x.len()),
            ));
        }
        let mut data = vec![0.0; x.len()];
        for ((xr, kr), yr) in x.chunks(last).zip(keep.chunks(last)).zip(data.chunks_mut(last)) {
            if !kr.contains(&true) {
                return Err(Error::dim("masked_softmax", "row with every entry masked"));
            }
            // NaN scores stay NaN so the caller sees a non-finite loss.
            let max = xr
                .iter()
                .zip(kr)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, |m, v| {
                    if v.is_nan() || m.is_nan() {
                        f64::NAN
                    } else {
                        m.max(v)
                    }
                });
            let mut sum = 0.0;
            for ((y, &v), &k) in yr.iter_mut().zip(xr).zip(kr) {
                if k {
                    *y = (v - max).exp();
                    sum += *y;
                }
            }
            yr.iter_mut().for_each(|y| *y /= sum);
        }
        self.push("masked_softmax", shape, data, Op::MaskedSoftmax(a))
    }

    /// Normalises each last-axis row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let last = *shape.last().ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
        let x = self.data(a);
        let mut data = Vec::with_capacity(x.len());
        let mut rstd = Vec::with_capacity(x.len() / last);
        for row in x.chunks(last) {
            let mean = row.iter().sum::<f64>() / last as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / last as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            data.extend(row.iter().map(|v| (v - mean) * r));
        }
        self.push("layer_norm", shape, data, Op::LayerNorm { x: a, rstd })
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.push("sum", vec![], vec![s], Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push("mean", vec![], vec![s], Op::MeanAll(a))
    }

    fn reduce_axis(&self, a: Var, axis: usize, scale: f64) -> (Vec<usize>, Vec<f64>) {
        let shape = self.shape(a);
        let (outer, len, inner) = kernels::around_axis(shape, axis);
        let d = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(y, x)| *y += x);
            }
            dst.iter_mut().for_each(|y| *y *= scale);
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        (out_shape, out)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.axis_check("sum_axis", a, axis)?;
        let (shape, data) = self.reduce_axis(a, axis, 1.0);
        self.push("sum_axis", shape, data, Op::SumAxis(a, axis))
    }

    /// Arithmetic mean over `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.axis_check("mean_axis", a, axis)?;
        let len = self.shape(a)[axis] as f64;
        let (shape, data) = self.reduce_axis(a, axis, 1.0 / len);
        self.push("mean_axis", shape, data, Op::MeanAxis(a, axis))
    }

    // ---- convolution -------------------------------------------------------

    /// Same-padded 2D convolution, `x: [b, c_in, h, w]`, `kernel: [c_out, c_in, kh, kw]`.
    pub fn conv2d_same(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d_same",
                lhs: sx,
                rhs: sk,
            });
        }
        let geom = ConvGeom {
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            kh: sk[2],
            kw: sk[3],
        };
        self.conv(x, kernel, geom, sk[0], "conv2d_same")
    }

    /// Same-padded 1D convolution, `x: [b, c_in, t]`, `kernel: [c_out, c_in, ks]`.
    pub fn conv1d_same(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 3 || sk.len() != 3 || sx[1] != sk[1] {
            return Err(Error::ShapeMismatch {
                op: "conv1d_same",
                lhs: sx,
                rhs: sk,
            });
        }
        let geom = ConvGeom {
            c_in: sx[1],
            h: 1,
            w: sx[2],
            kh: 1,
            kw: sk[2],
        };
        self.conv(x, kernel, geom, sk[0], "conv1d_same")
    }

    fn conv(&mut self, x: Var, k: Var, geom: ConvGeom, c_out: usize, name: &'static str) -> Result<Var> {
        if geom.kh.is_multiple_of(2) || geom.kw.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "{name}: kernel extent {}x{} must be odd",
                geom.kh, geom.kw
            )));
        }
        let mut shape = self.shape(x).to_vec();
        shape[1] = c_out;
        let batch = shape[0];
        let (xd, kd) = (self.data(x), self.data(k));
        let (rows, hw) = (geom.col_rows(), geom.spatial());
        let per_in = geom.c_in * hw;
        let mut out = vec![0.0; batch * c_out * hw];
        let mut cols = vec![0.0; rows * hw];
        for b in 0..batch {
            let xb = &xd[b * per_in..(b + 1) * per_in];
            let colsref = if geom.kh * geom.kw == 1 {
                xb
            } else {
                kernels::im2col(xb, geom, &mut cols);
                &cols[..]
            };
            kernels::gemm(
                MatRef::new(kd, c_out, rows),
                MatRef::new(colsref, rows, hw),
                &mut out[b * c_out * hw..],
                0.0,
            );
        }
        self.push(name, shape, out, Op::Conv { x, k, geom, c_out })
    }

    // ---- row routing -------------------------------------------------------

    /// Gathers rows (axis 0) at `idx`.
    pub fn index_select(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rows = *shape
            .first()
            .ok_or_else(|| Error::dim("index_select", "scalar input"))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::dim("index_select", format!("row {bad} >= {rows}")));
        }
        let width = self.value(a).numel() / rows;
        let d = self.data(a);
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(&d[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        self.push(
            "index_select",
            out_shape,
            data,
            Op::IndexSelect {
                x: a,
                idx: idx.to_vec(),
            },
        )
    }

    /// Places row `j` of `a` at row `idx[j]` of a zero tensor with `rows` rows.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.first() != Some(&idx.len()) || idx.iter().any(|&i| i >= rows) {
            return Err(Error::dim(
                "scatter_rows",
                format!("{} target rows for input {shape:?} into {rows} rows", idx.len()),
            ));
        }
        let width = self.value(a).numel() / idx.len();
        let d = self.data(a);
        let mut data = vec![0.0; rows * width];
        for (j, &i) in idx.iter().enumerate() {
            data[i * width..(i + 1) * width].copy_from_slice(&d[j * width..(j + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows;
        self.push(
            "scatter_rows",
            out_shape,
            data,
            Op::ScatterRows {
                x: a,
                idx: idx.to_vec(),
            },
        )
    }

    /// Multiplies row `r` (axis 0) of `a` by the scalar `w[r]`.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let (sa, sw) = (self.shape(a).to_vec(), self.shape(w).to_vec());
        if sw.len() != 1 || sa.first() != Some(&sw[0]) {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: sa,
                rhs: sw,
            });
        }
        let width = self.value(a).numel() / sw[0];
        let wd = self.data(w);
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x * wd[i / width])
            .collect();
        self.push("scale_rows", sa, data, Op::ScaleRows(a, w))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode sweep from a scalar root. Fan-out contributions add up.
    /// Afterwards every differentiable node, leaves included, holds a gradient
    /// (zeros where the root does not depend on it).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this graph; call reset_grads first".into(),
            ));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad {
                let g = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.set_grad(g);
            }
        }
        self.backward_done = true;
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        self.backward_done = false;
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backward_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = self.nodes[i].value.data();
        let out_shape = self.nodes[i].value.shape();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if self.needs(*a) {
                    self.acc(grads, *a, gy.to_vec());
                }
                if self.needs(*b) {
                    let nb = self.value(*b).numel();
                    let mut gb = vec![0.0; nb];
                    for chunk in gy.chunks(nb) {
                        gb.iter_mut().zip(chunk).for_each(|(g, c)| *g += sign * c);
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let nb = bd.len();
                if self.needs(*a) {
                    let ga = gy.iter().enumerate().map(|(k, g)| g * bd[k % nb]).collect();
                    self.acc(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; nb];
                    for (k, (g, x)) in gy.iter().zip(ad).enumerate() {
                        gb[k % nb] += g * x;
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, gy.iter().map(|g| g * s).collect()),
            Op::AddScalar(a) => self.acc(grads, *a, gy.to_vec()),
            Op::Exp(a) => self.acc(grads, *a, gy.iter().zip(y).map(|(g, e)| g * e).collect()),
            Op::Log(a) => {
                let x = self.data(*a);
                self.acc(grads, *a, gy.iter().zip(x).map(|(g, x)| g / x).collect());
            }
            Op::Powf(a, p) => {
                let x = self.data(*a);
                let ga = gy.iter().zip(x).map(|(g, &x)| g * pow_derivative(x, *p)).collect();
                self.acc(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let x = self.data(*a);
                let ga = gy.iter().zip(x).map(|(g, &x)| g * kernels::gelu_grad(x)).collect();
                self.acc(grads, *a, ga);
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                let ga = gy.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                self.acc(grads, *a, ga);
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, gy, grads),
            Op::Reshape(a) => self.acc(grads, *a, gy.to_vec()),
            Op::Permute(a, axes) => {
                let (ga, _) = kernels::permute(gy, out_shape, &kernels::inverse_axes(axes));
                self.acc(grads, *a, ga);
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = kernels::around_axis(out_shape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if self.needs(x) {
                        let mut gx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gx.extend_from_slice(&gy[base..base + len * inner]);
                        }
                        self.acc(grads, x, gx);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, len, inner) = kernels::around_axis(out_shape, *axis);
                let full = self.shape(*x)[*axis];
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&gy[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, *x, gx);
            }
            Op::PadTail { x, axis } => {
                let (outer, padded, inner) = kernels::around_axis(out_shape, *axis);
                let len = self.shape(*x)[*axis];
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    gx.extend_from_slice(&gy[o * padded * inner..(o * padded + len) * inner]);
                }
                self.acc(grads, *x, gx);
            }
            Op::Softmax(a) | Op::MaskedSoftmax(a) => {
                let last = *out_shape.last().unwrap();
                let mut ga = vec![0.0; gy.len()];
                for ((g, yr), gr) in gy.chunks(last).zip(y.chunks(last)).zip(ga.chunks_mut(last)) {
                    let dot: f64 = g.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gi), yi) in gr.iter_mut().zip(g).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let last = *out_shape.last().unwrap();
                let mut ga = vec![0.0; gy.len()];
                for ((g, yr), gr) in gy.chunks(last).zip(y.chunks(last)).zip(ga.chunks_mut(last)) {
                    let total: f64 = g.iter().sum();
                    for ((o, gi), yi) in gr.iter_mut().zip(g).zip(yr) {
                        *o = gi - yi.exp() * total;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, vec![gy[0]; n]);
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, vec![gy[0] / n as f64; n]);
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let (outer, len, inner) = kernels::around_axis(self.shape(*a), *axis);
                let scale = if matches!(self.nodes[i].op, Op::MeanAxis(..)) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut ga = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let src = &gy[o * inner..(o + 1) * inner];
                    for _ in 0..len {
                        ga.extend(src.iter().map(|g| g * scale));
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::LayerNorm { x, rstd } => {
                let last = *out_shape.last().unwrap();
                let n = last as f64;
                let mut gx = vec![0.0; gy.len()];
                for (r, ((g, yr), gr)) in gy.chunks(last).zip(y.chunks(last)).zip(gx.chunks_mut(last)).enumerate() {
                    let mean_g = g.iter().sum::<f64>() / n;
                    let mean_gy = g.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, gi), yi) in gr.iter_mut().zip(g).zip(yr) {
                        *o = rstd[r] * (gi - mean_g - yi * mean_gy);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Conv { x, k, geom, c_out } => self.conv_backward(*x, *k, *geom, *c_out, gy, grads),
            Op::IndexSelect { x, idx } => {
                let rows = self.shape(*x)[0];
                let width = self.value(*x).numel() / rows;
                let mut gx = vec![0.0; rows * width];
                for (j, &r) in idx.iter().enumerate() {
                    gx[r * width..(r + 1) * width]
                        .iter_mut()
                        .zip(&gy[j * width..(j + 1) * width])
                        .for_each(|(a, b)| *a += b);
                }
                self.acc(grads, *x, gx);
            }
            Op::ScatterRows { x, idx } => {
                let width = self.value(*x).numel() / idx.len();
                let mut gx = Vec::with_capacity(idx.len() * width);
                for &r in idx {
                    gx.extend_from_slice(&gy[r * width..(r + 1) * width]);
                }
                self.acc(grads, *x, gx);
            }
            Op::ScaleRows(a, w) => {
                let wd = self.data(*w);
                let width = gy.len() / wd.len();
                if self.needs(*a) {
                    let ga = gy.iter().enumerate().map(|(k, g)| g * wd[k / width]).collect();
                    self.acc(grads, *a, ga);
                }
                if self.needs(*w) {
                    let ad = self.data(*a);
                    let gw = gy
                        .chunks(width)
                        .zip(ad.chunks(width))
                        .map(|(g, x)| g.iter().zip(x).map(|(p, q)| p * q).sum())
                        .collect();
                    self.acc(grads, *w, gw);
                }
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (ad, bd) = (self.data(a), self.data(b));
        if bb.is_empty() {
            let rows = ad.len() / k;
            if self.needs(a) {
                let mut ga = vec![0.0; rows * k];
                kernels::gemm(MatRef::new(gy, rows, n), MatRef::new(bd, k, n).t(), &mut ga, 0.0);
                self.acc(grads, a, ga);
            }
            if self.needs(b) {
                let mut gb = vec![0.0; k * n];
                kernels::gemm(MatRef::new(ad, rows, k).t(), MatRef::new(gy, rows, n), &mut gb, 0.0);
                self.acc(grads, b, gb);
            }
            return;
        }
        let batches: usize = bb.iter().product();
        let shared_a = ba.is_empty();
        if self.needs(a) {
            let mut ga = vec![0.0; ad.len()];
            for i in 0..batches {
                let off = if shared_a { 0 } else { i * m * k };
                let beta = if shared_a && i > 0 { 1.0 } else { 0.0 };
                kernels::gemm(
                    MatRef::new(&gy[i * m * n..], m, n),
                    MatRef::new(&bd[i * k * n..], k, n).t(),
                    &mut ga[off..off + m * k],
                    beta,
                );
            }
            self.acc(grads, a, ga);
        }
        if self.needs(b) {
            let mut gb = vec![0.0; bd.len()];
            for i in 0..batches {
                let off = if shared_a { 0 } else { i * m * k };
                kernels::gemm(
                    MatRef::new(&ad[off..], m, k).t(),
                    MatRef::new(&gy[i * m * n..], m, n),
                    &mut gb[i * k * n..(i + 1) * k * n],
                    0.0,
                );
            }
            self.acc(grads, b, gb);
        }
    }

    fn conv_backward(&self, x: Var, k: Var, geom: ConvGeom, c_out: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (xd, kd) = (self.data(x), self.data(k));
        let (rows, hw) = (geom.col_rows(), geom.spatial());
        let per_in = geom.c_in * hw;
        let batch = xd.len() / per_in;
        let pointwise = geom.kh * geom.kw == 1;
        let (need_x, need_k) = (self.needs(x), self.needs(k));
        let mut gk = vec![0.0; if need_k { kd.len() } else { 0 }];
        let mut gx = vec![0.0; if need_x { xd.len() } else { 0 }];
        let mut cols = vec![0.0; rows * hw];
        let mut gcols = vec![0.0; rows * hw];
        for b in 0..batch {
            let gyb = &gy[b * c_out * hw..(b + 1) * c_out * hw];
            if need_k {
                let xb = &xd[b * per_in..(b + 1) * per_in];
                let colsref = if pointwise {
                    xb
                } else {
                    kernels::im2col(xb, geom, &mut cols);
                    &cols[..]
                };
                kernels::gemm(
                    MatRef::new(gyb, c_out, hw),
                    MatRef::new(colsref, rows, hw).t(),
                    &mut gk,
                    1.0,
                );
            }
            if need_x {
                let gxb = &mut gx[b * per_in..(b + 1) * per_in];
                if pointwise {
                    kernels::gemm(MatRef::new(kd, c_out, rows).t(), MatRef::new(gyb, c_out, hw), gxb, 0.0);
                } else {
                    kernels::gemm(
                        MatRef::new(kd, c_out, rows).t(),
                        MatRef::new(gyb, c_out, hw),
                        &mut gcols,
                        0.0,
                    );
                    kernels::col2im_add(&gcols, geom, gxb);
                }
            }
        }
        if need_k {
            self.acc(grads, k, gk);
        }
        if need_x {
            self.acc(grads, x, gx);
        }
    }
}

/// d/dx x^p, with the removable singularity at x = 0 resolved for p >= 1.
fn pow_derivative(x: f64, p: f64) -> f64 {
    if x == 0.0 && p > 1.0 {
        0.0
    } else {
        p * x.powf(p - 1.0)
    }
}
