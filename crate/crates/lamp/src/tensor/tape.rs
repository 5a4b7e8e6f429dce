//! Reverse-mode tape over `Tensor`.
//!
//! Broadcasting in `add`/`sub`/`mul` is suffix-only: the right operand must
//! have the same shape, a trailing-axes suffix of it, or be a scalar. That
//! covers bias rows and scalar gates without a general broadcast lattice.
//!
//! `replay_f64` re-evaluates the recorded graph in f64 with substituted leaf
//! values. Finite-difference checks run against that replay, so they probe
//! the true derivative of the smooth function instead of f32 quantization
//! noise.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddColumn { t: Var, col: Var },
    AddScalar { t: Var, c: f32 },
    MulScalar { t: Var, c: f32 },
    Concat { parts: Vec<Var> },
    SliceCols { t: Var, start: usize, end: usize },
    GatherRows { t: Var, idx: Vec<usize> },
    ScatterSum { src: Var, idx: Vec<usize>, rows: usize },
    GatherWeighted { feat: Var, arity: usize, idx: Vec<usize>, w: Vec<f32> },
    ScaleRows { t: Var, s: Vec<f32> },
    Sum { t: Var },
    Mean { t: Var },
    Silu { t: Var },
    Elu { t: Var },
    Relu { t: Var },
    Softmax { t: Var },
    LogSoftmax { t: Var },
    Square { t: Var },
    Sqrt { t: Var },
    StopGrad { t: Var },
    Reshape { t: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by tape id. Vars that never influenced the loss hold no
/// entry; `grad_or_zeros` materializes zeros for them.
pub struct Grads {
    g: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.g[v.0].as_ref()
    }

    pub fn grad_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        match &self.g[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(tape.nodes[v.0].value.shape()),
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// rhs broadcasts over lhs when its shape is a suffix of lhs's (or scalar).
fn broadcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    if rhs == [1] {
        return true;
    }
    rhs.len() <= lhs.len() && &lhs[lhs.len() - rhs.len()..] == rhs
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(
            value.is_finite(),
            "non-finite value produced by {:?}",
            op_name(&op)
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf: participates in backward.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0f32; m * n];
        mm_accum(ta.data(), m, k, tb.data(), n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::Matmul { a, b },
            needs,
        ))
    }

    fn binary_elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !broadcast_ok(ta.shape(), tb.shape()) {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let rn = tb.numel();
        let data: Vec<f32> = if rn == 1 {
            let c = tb.data()[0];
            ta.data().iter().map(|&x| f(x, c)).collect()
        } else {
            ta.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, tb.data()[i % rn]))
                .collect()
        };
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds a `[rows, 1]` column to every column of `t`.
    pub fn add_column(&mut self, t: Var, col: Var) -> Result<Var> {
        let (tt, tc) = (&self.nodes[t.0].value, &self.nodes[col.0].value);
        let rows = tt.rows();
        if tc.shape() != [rows, 1] {
            return Err(Error::ShapeMismatch {
                op: "add_column",
                lhs: tt.shape().to_vec(),
                rhs: tc.shape().to_vec(),
            });
        }
        let w = tt.row_width();
        let mut data = tt.data().to_vec();
        for i in 0..rows {
            let c = tc.data()[i];
            for x in &mut data[i * w..(i + 1) * w] {
                *x += c;
            }
        }
        let shape = tt.shape().to_vec();
        let needs = self.needs(t) || self.needs(col);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddColumn { t, col }, needs))
    }

    pub fn add_scalar(&mut self, t: Var, c: f32) -> Var {
        let v = &self.nodes[t.0].value;
        let out = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&x| x + c).collect(),
        };
        let needs = self.needs(t);
        self.push(out, Op::AddScalar { t, c }, needs)
    }

    pub fn mul_scalar(&mut self, t: Var, c: f32) -> Var {
        let v = &self.nodes[t.0].value;
        let out = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&x| x * c).collect(),
        };
        let needs = self.needs(t);
        self.push(out, Op::MulScalar { t, c }, needs)
    }

    pub fn neg(&mut self, t: Var) -> Var {
        self.mul_scalar(t, -1.0)
    }

    /// Concatenates along the last axis. All parts must agree on the leading
    /// dimensions.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product::<usize>().max(1);
        let total_w: usize = widths.iter().sum();
        let mut data = vec![0.0f32; rows * total_w];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = self.nodes[p.0].value.data();
            for r in 0..rows {
                data[r * total_w + off..r * total_w + off + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total_w);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_cols(&mut self, t: Var, start: usize, end: usize) -> Result<Var> {
        let v = &self.nodes[t.0].value;
        let s = v.shape();
        let w = s[s.len() - 1];
        if start >= end || end > w {
            return Err(Error::invalid(format!(
                "slice_cols {}..{} out of width {}",
                start, end, w
            )));
        }
        let rows = v.numel() / w;
        let nw = end - start;
        let mut data = vec![0.0f32; rows * nw];
        for r in 0..rows {
            data[r * nw..(r + 1) * nw].copy_from_slice(&v.data()[r * w + start..r * w + end]);
        }
        let mut shape = s[..s.len() - 1].to_vec();
        shape.push(nw);
        let needs = self.needs(t);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::SliceCols { t, start, end },
            needs,
        ))
    }

    /// Rows of `t` at `idx` (with repetition allowed).
    pub fn gather_rows(&mut self, t: Var, idx: &[usize]) -> Result<Var> {
        let v = &self.nodes[t.0].value;
        let rows = v.rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!(
                "gather_rows index {} out of {} rows",
                bad, rows
            )));
        }
        let w = v.row_width();
        let mut data = vec![0.0f32; idx.len() * w];
        for (o, &i) in idx.iter().enumerate() {
            data[o * w..(o + 1) * w].copy_from_slice(&v.data()[i * w..(i + 1) * w]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = idx.len();
        let needs = self.needs(t);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::GatherRows {
                t,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    /// Sums rows of `src` into `rows` bins given by `idx`, accumulating in
    /// source order. The fixed order keeps f32 sums reproducible.
    pub fn scatter_sum(&mut self, src: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let v = &self.nodes[src.0].value;
        if idx.len() != v.rows() {
            return Err(Error::invalid(format!(
                "scatter_sum: {} indices for {} rows",
                idx.len(),
                v.rows()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!(
                "scatter_sum index {} out of {} bins",
                bad, rows
            )));
        }
        let w = v.row_width();
        let mut data = vec![0.0f32; rows * w];
        for (r, &bin) in idx.iter().enumerate() {
            let src_row = &v.data()[r * w..(r + 1) * w];
            let dst = &mut data[bin * w..(bin + 1) * w];
            for (d, s) in dst.iter_mut().zip(src_row) {
                *d += s;
            }
        }
        let mut shape = v.shape().to_vec();
        shape[0] = rows;
        let needs = self.needs(src);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::ScatterSum {
                src,
                idx: idx.to_vec(),
                rows,
            },
            needs,
        ))
    }

    /// Fixed-arity weighted gather: `out[g] = sum_k w[g*arity+k] * feat[idx[g*arity+k]]`.
    /// This is the tape form of mesh-to-mesh interpolation with constant
    /// weights.
    pub fn gather_weighted(
        &mut self,
        feat: Var,
        arity: usize,
        idx: &[usize],
        w: &[f32],
    ) -> Result<Var> {
        let v = &self.nodes[feat.0].value;
        if arity == 0 || idx.len() != w.len() || idx.len() % arity != 0 {
            return Err(Error::invalid(
                "gather_weighted: index/weight lists must be a multiple of arity",
            ));
        }
        let rows = v.rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!(
                "gather_weighted index {} out of {} rows",
                bad, rows
            )));
        }
        let width = v.row_width();
        let out_rows = idx.len() / arity;
        let mut data = vec![0.0f32; out_rows * width];
        for g in 0..out_rows {
            let dst = &mut data[g * width..(g + 1) * width];
            for k in 0..arity {
                let src = &v.data()[idx[g * arity + k] * width..];
                let wk = w[g * arity + k];
                for (d, s) in dst.iter_mut().zip(&src[..width]) {
                    *d += wk * s;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[0] = out_rows;
        let needs = self.needs(feat);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::GatherWeighted {
                feat,
                arity,
                idx: idx.to_vec(),
                w: w.to_vec(),
            },
            needs,
        ))
    }

    /// Multiplies row `i` by the constant `s[i]`.
    pub fn scale_rows(&mut self, t: Var, s: &[f32]) -> Result<Var> {
        let v = &self.nodes[t.0].value;
        if s.len() != v.rows() {
            return Err(Error::invalid(format!(
                "scale_rows: {} factors for {} rows",
                s.len(),
                v.rows()
            )));
        }
        let w = v.row_width();
        let mut data = v.data().to_vec();
        for (i, &f) in s.iter().enumerate() {
            for x in &mut data[i * w..(i + 1) * w] {
                *x *= f;
            }
        }
        let shape = v.shape().to_vec();
        let needs = self.needs(t);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::ScaleRows {
                t,
                s: s.to_vec(),
            },
            needs,
        ))
    }

    pub fn sum(&mut self, t: Var) -> Var {
        let v = &self.nodes[t.0].value;
        let mut acc = 0.0f64;
        for &x in v.data() {
            acc += x as f64;
        }
        let needs = self.needs(t);
        self.push(Tensor::scalar(acc as f32), Op::Sum { t }, needs)
    }

    pub fn mean(&mut self, t: Var) -> Var {
        let v = &self.nodes[t.0].value;
        let n = v.numel();
        let mut acc = 0.0f64;
        for &x in v.data() {
            acc += x as f64;
        }
        let needs = self.needs(t);
        self.push(
            Tensor::scalar((acc / n as f64) as f32),
            Op::Mean { t },
            needs,
        )
    }

    fn unary(&mut self, t: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let v = &self.nodes[t.0].value;
        let out = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&x| f(x)).collect(),
        };
        let needs = self.needs(t);
        self.push(out, op, needs)
    }

    pub fn silu(&mut self, t: Var) -> Var {
        self.unary(t, |x| x * sigmoid(x), Op::Silu { t })
    }

    pub fn elu(&mut self, t: Var) -> Var {
        self.unary(
            t,
            |x| if x > 0.0 { x } else { x.exp() - 1.0 },
            Op::Elu { t },
        )
    }

    pub fn relu(&mut self, t: Var) -> Var {
        self.unary(t, |x| x.max(0.0), Op::Relu { t })
    }

    pub fn square(&mut self, t: Var) -> Var {
        self.unary(t, |x| x * x, Op::Square { t })
    }

    pub fn sqrt(&mut self, t: Var) -> Var {
        self.unary(t, |x| x.sqrt(), Op::Sqrt { t })
    }

    /// Identity forward, zero backward.
    pub fn stop_gradient(&mut self, t: Var) -> Var {
        let v = self.nodes[t.0].value.clone();
        self.push(v, Op::StopGrad { t }, false)
    }

    /// Same data under a new shape; gradients pass through untouched.
    pub fn reshape(&mut self, t: Var, shape: Vec<usize>) -> Result<Var> {
        let v = &self.nodes[t.0].value;
        if shape.iter().product::<usize>() != v.numel() || shape.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape,
            });
        }
        let out = Tensor::new(shape, v.data().to_vec())?;
        let needs = self.needs(t);
        Ok(self.push(out, Op::Reshape { t }, needs))
    }

    /// Softmax over the last axis, max-shifted per row.
    pub fn softmax(&mut self, t: Var) -> Var {
        let v = &self.nodes[t.0].value;
        let w = *v.shape().last().unwrap();
        let rows = v.numel() / w;
        let mut data = vec![0.0f32; v.numel()];
        for r in 0..rows {
            let row = &v.data()[r * w..(r + 1) * w];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for (o, &x) in data[r * w..(r + 1) * w].iter_mut().zip(row) {
                *o = (x - m).exp();
                z += *o;
            }
            for o in &mut data[r * w..(r + 1) * w] {
                *o /= z;
            }
        }
        let out = Tensor {
            shape: v.shape().to_vec(),
            data,
        };
        let needs = self.needs(t);
        self.push(out, Op::Softmax { t }, needs)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, t: Var) -> Var {
        let v = &self.nodes[t.0].value;
        let w = *v.shape().last().unwrap();
        let rows = v.numel() / w;
        let mut data = vec![0.0f32; v.numel()];
        for r in 0..rows {
            let row = &v.data()[r * w..(r + 1) * w];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let z: f32 = row.iter().map(|&x| (x - m).exp()).sum();
            let lz = z.ln() + m;
            for (o, &x) in data[r * w..(r + 1) * w].iter_mut().zip(row) {
                *o = x - lz;
            }
        }
        let out = Tensor {
            shape: v.shape().to_vec(),
            data,
        };
        let needs = self.needs(t);
        self.push(out, Op::LogSoftmax { t }, needs)
    }

    /// Reverse pass from a scalar loss. Returns one gradient per reachable
    /// trainable node; everything else stays `None`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward from non-scalar shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut g: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            if g[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let dout = g[id].clone().unwrap();
            self.propagate(id, &dout, &mut g);
        }
        Ok(Grads { g })
    }

    fn accum(&self, g: &mut Vec<Option<Tensor>>, v: Var, delta_shape: &[usize], delta: Vec<f32>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut g[v.0] {
            Some(t) => {
                for (a, b) in t.data.iter_mut().zip(&delta) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor {
                    shape: delta_shape.to_vec(),
                    data: delta,
                });
            }
        }
    }

    /// Sums `d` over leading axes down to `rhs` numel (broadcast backward).
    fn reduce_broadcast(d: &[f32], rn: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; rn];
        for (i, &x) in d.iter().enumerate() {
            out[i % rn] += x;
        }
        out
    }

    fn propagate(&self, id: usize, dout: &Tensor, g: &mut Vec<Option<Tensor>>) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf | Op::StopGrad { .. } => {}
            Op::Reshape { t } => {
                if self.needs(*t) {
                    self.accum(g, *t, self.nodes[t.0].value.shape(), dout.data().to_vec());
                }
            }
            Op::Matmul { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    // dA = dC . B^T
                    let mut da = vec![0.0f32; m * k];
                    mm_bt_accum(dout.data(), m, n, tb.data(), k, &mut da);
                    self.accum(g, *a, ta.shape(), da);
                }
                if self.needs(*b) {
                    // dB = A^T . dC
                    let mut db = vec![0.0f32; k * n];
                    mm_at_accum(ta.data(), m, k, dout.data(), n, &mut db);
                    self.accum(g, *b, tb.shape(), db);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    self.accum(g, *a, self.nodes[a.0].value.shape(), dout.data().to_vec());
                }
                if self.needs(*b) {
                    let rn = self.nodes[b.0].value.numel();
                    let db = Self::reduce_broadcast(dout.data(), rn);
                    self.accum(g, *b, self.nodes[b.0].value.shape(), db);
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    self.accum(g, *a, self.nodes[a.0].value.shape(), dout.data().to_vec());
                }
                if self.needs(*b) {
                    let rn = self.nodes[b.0].value.numel();
                    let mut db = Self::reduce_broadcast(dout.data(), rn);
                    for x in &mut db {
                        *x = -*x;
                    }
                    self.accum(g, *b, self.nodes[b.0].value.shape(), db);
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let rn = tb.numel();
                if self.needs(*a) {
                    let da: Vec<f32> = dout
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &d)| d * tb.data()[i % rn])
                        .collect();
                    self.accum(g, *a, ta.shape(), da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0f32; rn];
                    for (i, &d) in dout.data().iter().enumerate() {
                        db[i % rn] += d * ta.data()[i];
                    }
                    self.accum(g, *b, tb.shape(), db);
                }
            }
            Op::AddColumn { t, col } => {
                let tt = &self.nodes[t.0].value;
                let (rows, w) = (tt.rows(), tt.row_width());
                if self.needs(*t) {
                    self.accum(g, *t, tt.shape(), dout.data().to_vec());
                }
                if self.needs(*col) {
                    let mut dc = vec![0.0f32; rows];
                    for i in 0..rows {
                        dc[i] = dout.data()[i * w..(i + 1) * w].iter().sum();
                    }
                    self.accum(g, *col, &[rows, 1], dc);
                }
            }
            Op::AddScalar { t, .. } => {
                self.accum(g, *t, self.nodes[t.0].value.shape(), dout.data().to_vec());
            }
            Op::MulScalar { t, c } => {
                let dt: Vec<f32> = dout.data().iter().map(|&d| d * c).collect();
                self.accum(g, *t, self.nodes[t.0].value.shape(), dt);
            }
            Op::Concat { parts } => {
                let total_w = *node.value.shape().last().unwrap();
                let rows = node.value.numel() / total_w;
                let mut off = 0;
                for p in parts {
                    let ps = self.nodes[p.0].value.shape();
                    let w = *ps.last().unwrap();
                    if self.needs(*p) {
                        let mut dp = vec![0.0f32; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w].copy_from_slice(
                                &dout.data()[r * total_w + off..r * total_w + off + w],
                            );
                        }
                        self.accum(g, *p, ps, dp);
                    }
                    off += w;
                }
            }
            Op::SliceCols { t, start, end } => {
                let tv = &self.nodes[t.0].value;
                let w = *tv.shape().last().unwrap();
                let rows = tv.numel() / w;
                let nw = end - start;
                let mut dt = vec![0.0f32; tv.numel()];
                for r in 0..rows {
                    dt[r * w + start..r * w + end]
                        .copy_from_slice(&dout.data()[r * nw..(r + 1) * nw]);
                }
                self.accum(g, *t, tv.shape(), dt);
            }
            Op::GatherRows { t, idx } => {
                let tv = &self.nodes[t.0].value;
                let w = tv.row_width();
                let mut dt = vec![0.0f32; tv.numel()];
                for (o, &i) in idx.iter().enumerate() {
                    let src = &dout.data()[o * w..(o + 1) * w];
                    let dst = &mut dt[i * w..(i + 1) * w];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                self.accum(g, *t, tv.shape(), dt);
            }
            Op::ScatterSum { src, idx, .. } => {
                let sv = &self.nodes[src.0].value;
                let w = sv.row_width();
                let mut ds = vec![0.0f32; sv.numel()];
                for (r, &bin) in idx.iter().enumerate() {
                    ds[r * w..(r + 1) * w]
                        .copy_from_slice(&dout.data()[bin * w..(bin + 1) * w]);
                }
                self.accum(g, *src, sv.shape(), ds);
            }
            Op::GatherWeighted { feat, arity, idx, w } => {
                let fv = &self.nodes[feat.0].value;
                let width = fv.row_width();
                let mut df = vec![0.0f32; fv.numel()];
                let out_rows = idx.len() / arity;
                for gi in 0..out_rows {
                    let d = &dout.data()[gi * width..(gi + 1) * width];
                    for k in 0..*arity {
                        let j = idx[gi * arity + k];
                        let wk = w[gi * arity + k];
                        let dst = &mut df[j * width..(j + 1) * width];
                        for (a, b) in dst.iter_mut().zip(d) {
                            *a += wk * b;
                        }
                    }
                }
                self.accum(g, *feat, fv.shape(), df);
            }
            Op::ScaleRows { t, s } => {
                let tv = &self.nodes[t.0].value;
                let w = tv.row_width();
                let mut dt = dout.data().to_vec();
                for (i, &f) in s.iter().enumerate() {
                    for x in &mut dt[i * w..(i + 1) * w] {
                        *x *= f;
                    }
                }
                self.accum(g, *t, tv.shape(), dt);
            }
            Op::Sum { t } => {
                let tv = &self.nodes[t.0].value;
                let d = dout.data()[0];
                self.accum(g, *t, tv.shape(), vec![d; tv.numel()]);
            }
            Op::Mean { t } => {
                let tv = &self.nodes[t.0].value;
                let d = dout.data()[0] / tv.numel() as f32;
                self.accum(g, *t, tv.shape(), vec![d; tv.numel()]);
            }
            Op::Silu { t } => {
                let x = &self.nodes[t.0].value;
                let dt: Vec<f32> = x
                    .data()
                    .iter()
                    .zip(dout.data())
                    .map(|(&x, &d)| {
                        let s = sigmoid(x);
                        d * (s + x * s * (1.0 - s))
                    })
                    .collect();
                self.accum(g, *t, x.shape(), dt);
            }
            Op::Elu { t } => {
                let x = &self.nodes[t.0].value;
                let dt: Vec<f32> = x
                    .data()
                    .iter()
                    .zip(dout.data())
                    .map(|(&x, &d)| if x > 0.0 { d } else { d * x.exp() })
                    .collect();
                self.accum(g, *t, x.shape(), dt);
            }
            Op::Relu { t } => {
                let x = &self.nodes[t.0].value;
                let dt: Vec<f32> = x
                    .data()
                    .iter()
                    .zip(dout.data())
                    .map(|(&x, &d)| if x > 0.0 { d } else { 0.0 })
                    .collect();
                self.accum(g, *t, x.shape(), dt);
            }
            Op::Square { t } => {
                let x = &self.nodes[t.0].value;
                let dt: Vec<f32> = x
                    .data()
                    .iter()
                    .zip(dout.data())
                    .map(|(&x, &d)| d * 2.0 * x)
                    .collect();
                self.accum(g, *t, x.shape(), dt);
            }
            Op::Sqrt { t } => {
                let y = &node.value;
                let x = &self.nodes[t.0].value;
                let dt: Vec<f32> = y
                    .data()
                    .iter()
                    .zip(dout.data())
                    .map(|(&y, &d)| d * 0.5 / y)
                    .collect();
                self.accum(g, *t, x.shape(), dt);
            }
            Op::Softmax { t } => {
                // dx = y * (d - sum(d * y)) per row
                let y = &node.value;
                let w = *y.shape().last().unwrap();
                let rows = y.numel() / w;
                let mut dt = vec![0.0f32; y.numel()];
                for r in 0..rows {
                    let yr = &y.data()[r * w..(r + 1) * w];
                    let dr = &dout.data()[r * w..(r + 1) * w];
                    let dot: f32 = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                    for j in 0..w {
                        dt[r * w + j] = yr[j] * (dr[j] - dot);
                    }
                }
                self.accum(g, *t, y.shape(), dt);
            }
            Op::LogSoftmax { t } => {
                // dx = d - softmax(x) * sum(d) per row
                let y = &node.value;
                let w = *y.shape().last().unwrap();
                let rows = y.numel() / w;
                let mut dt = vec![0.0f32; y.numel()];
                for r in 0..rows {
                    let yr = &y.data()[r * w..(r + 1) * w];
                    let dr = &dout.data()[r * w..(r + 1) * w];
                    let dsum: f32 = dr.iter().sum();
                    for j in 0..w {
                        dt[r * w + j] = dr[j] - yr[j].exp() * dsum;
                    }
                }
                self.accum(g, *t, y.shape(), dt);
            }
        }
    }

    /// Re-evaluates node values in f64, substituting `overrides` for leaf
    /// values, and returns the (scalar) value at `target`. Used by
    /// finite-difference oracles; the graph itself is unchanged.
    pub fn replay_f64(&self, target: Var, overrides: &[(Var, Vec<f64>)]) -> Result<f64> {
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(target.0 + 1);
        for id in 0..=target.0 {
            let node = &self.nodes[id];
            let v = match &node.op {
                Op::Leaf => {
                    if let Some((_, o)) = overrides.iter().find(|(v, _)| v.0 == id) {
                        if o.len() != node.value.numel() {
                            return Err(Error::invalid("replay override length mismatch"));
                        }
                        o.clone()
                    } else {
                        node.value.data().iter().map(|&x| x as f64).collect()
                    }
                }
                Op::Matmul { a, b } => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    let (va, vb) = (&vals[a.0], &vals[b.0]);
                    let mut out = vec![0.0f64; m * n];
                    for i in 0..m {
                        for kk in 0..k {
                            let aik = va[i * k + kk];
                            for j in 0..n {
                                out[i * n + j] += aik * vb[kk * n + j];
                            }
                        }
                    }
                    out
                }
                Op::Add { a, b } => bcast64(&vals[a.0], &vals[b.0], |x, y| x + y),
                Op::Sub { a, b } => bcast64(&vals[a.0], &vals[b.0], |x, y| x - y),
                Op::Mul { a, b } => bcast64(&vals[a.0], &vals[b.0], |x, y| x * y),
                Op::AddColumn { t, col } => {
                    let w = self.nodes[t.0].value.row_width();
                    vals[t.0]
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x + vals[col.0][i / w])
                        .collect()
                }
                Op::AddScalar { t, c } => vals[t.0].iter().map(|&x| x + *c as f64).collect(),
                Op::MulScalar { t, c } => vals[t.0].iter().map(|&x| x * *c as f64).collect(),
                Op::Concat { parts } => {
                    let total_w = *node.value.shape().last().unwrap();
                    let rows = node.value.numel() / total_w;
                    let mut out = vec![0.0f64; rows * total_w];
                    let mut off = 0;
                    for p in parts {
                        let w = *self.nodes[p.0].value.shape().last().unwrap();
                        for r in 0..rows {
                            out[r * total_w + off..r * total_w + off + w]
                                .copy_from_slice(&vals[p.0][r * w..(r + 1) * w]);
                        }
                        off += w;
                    }
                    out
                }
                Op::SliceCols { t, start, end } => {
                    let tv = &self.nodes[t.0].value;
                    let w = *tv.shape().last().unwrap();
                    let rows = tv.numel() / w;
                    let nw = end - start;
                    let mut out = vec![0.0f64; rows * nw];
                    for r in 0..rows {
                        out[r * nw..(r + 1) * nw]
                            .copy_from_slice(&vals[t.0][r * w + start..r * w + end]);
                    }
                    out
                }
                Op::GatherRows { t, idx } => {
                    let w = self.nodes[t.0].value.row_width();
                    let mut out = vec![0.0f64; idx.len() * w];
                    for (o, &i) in idx.iter().enumerate() {
                        out[o * w..(o + 1) * w].copy_from_slice(&vals[t.0][i * w..(i + 1) * w]);
                    }
                    out
                }
                Op::ScatterSum { src, idx, rows } => {
                    let w = self.nodes[src.0].value.row_width();
                    let mut out = vec![0.0f64; rows * w];
                    for (r, &bin) in idx.iter().enumerate() {
                        for j in 0..w {
                            out[bin * w + j] += vals[src.0][r * w + j];
                        }
                    }
                    out
                }
                Op::GatherWeighted { feat, arity, idx, w } => {
                    let width = self.nodes[feat.0].value.row_width();
                    let out_rows = idx.len() / arity;
                    let mut out = vec![0.0f64; out_rows * width];
                    for gi in 0..out_rows {
                        for k in 0..*arity {
                            let j = idx[gi * arity + k];
                            let wk = w[gi * arity + k] as f64;
                            for c in 0..width {
                                out[gi * width + c] += wk * vals[feat.0][j * width + c];
                            }
                        }
                    }
                    out
                }
                Op::ScaleRows { t, s } => {
                    let w = self.nodes[t.0].value.row_width();
                    vals[t.0]
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x * s[i / w] as f64)
                        .collect()
                }
                Op::Sum { t } => vec![vals[t.0].iter().sum()],
                Op::Mean { t } => {
                    vec![vals[t.0].iter().sum::<f64>() / vals[t.0].len() as f64]
                }
                Op::Silu { t } => vals[t.0].iter().map(|&x| x * sigmoid64(x)).collect(),
                Op::Elu { t } => vals[t.0]
                    .iter()
                    .map(|&x| if x > 0.0 { x } else { x.exp() - 1.0 })
                    .collect(),
                Op::Relu { t } => vals[t.0].iter().map(|&x| x.max(0.0)).collect(),
                Op::Square { t } => vals[t.0].iter().map(|&x| x * x).collect(),
                Op::Sqrt { t } => vals[t.0].iter().map(|&x| x.sqrt()).collect(),
                Op::StopGrad { t } => vals[t.0].clone(),
                Op::Reshape { t } => vals[t.0].clone(),
                Op::Softmax { t } => {
                    let w = *node.value.shape().last().unwrap();
                    softmax_rows64(&vals[t.0], w, false)
                }
                Op::LogSoftmax { t } => {
                    let w = *node.value.shape().last().unwrap();
                    softmax_rows64(&vals[t.0], w, true)
                }
            };
            vals.push(v);
        }
        let out = &vals[target.0];
        if out.len() != 1 {
            return Err(Error::invalid("replay_f64 target must be scalar"));
        }
        Ok(out[0])
    }
}

fn bcast64(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let rn = b.len();
    a.iter().enumerate().map(|(i, &x)| f(x, b[i % rn])).collect()
}

fn softmax_rows64(x: &[f64], w: usize, log: bool) -> Vec<f64> {
    let rows = x.len() / w;
    let mut out = vec![0.0f64; x.len()];
    for r in 0..rows {
        let row = &x[r * w..(r + 1) * w];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        for (o, &v) in out[r * w..(r + 1) * w].iter_mut().zip(row) {
            *o = if log {
                v - m - z.ln()
            } else {
                (v - m).exp() / z
            };
        }
    }
    out
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::AddColumn { .. } => "add_column",
        Op::AddScalar { .. } => "add_scalar",
        Op::MulScalar { .. } => "mul_scalar",
        Op::Concat { .. } => "concat",
        Op::SliceCols { .. } => "slice_cols",
        Op::GatherRows { .. } => "gather_rows",
        Op::ScatterSum { .. } => "scatter_sum",
        Op::GatherWeighted { .. } => "gather_weighted",
        Op::ScaleRows { .. } => "scale_rows",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::Silu { .. } => "silu",
        Op::Elu { .. } => "elu",
        Op::Relu { .. } => "relu",
        Op::Softmax { .. } => "softmax",
        Op::LogSoftmax { .. } => "log_softmax",
        Op::Square { .. } => "square",
        Op::Sqrt { .. } => "sqrt",
        Op::StopGrad { .. } => "stop_gradient",
        Op::Reshape { .. } => "reshape",
    }
}

/// out[m,n] += a[m,k] . b[k,n], row-major. The k-major inner loop keeps both
/// reads contiguous so the compiler can vectorize the accumulation.
fn mm_accum(a: &[f32], m: usize, k: usize, b: &[f32], n: usize, out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// out[k,n] += a^T[k,m] . d[m,n] where a is [m,k].
fn mm_at_accum(a: &[f32], m: usize, k: usize, d: &[f32], n: usize, out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let drow = &d[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &dv) in orow.iter_mut().zip(drow) {
                *o += aik * dv;
            }
        }
    }
}

/// out[m,k] += d[m,n] . b^T[n,k] where b is [k,n].
fn mm_bt_accum(d: &[f32], m: usize, n: usize, b: &[f32], k: usize, out: &mut [f32]) {
    for i in 0..m {
        let drow = &d[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (kk, o) in orow.iter_mut().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0f32;
            for (&dv, &bv) in drow.iter().zip(brow) {
                acc += dv * bv;
            }
            *o += acc;
        }
    }
}
