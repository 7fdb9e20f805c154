//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an append-only computation record. Every primitive pushes
//! one node holding its output value and whatever it needs for the backward
//! pass; nodes therefore appear in topological order by construction, and
//! [`Tape::backward`] walks them once in reverse.
//!
//! Values are owned by the tape. Parameters are copied in as leaves, so a
//! tape never borrows model state and can be moved to another thread.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

type Result<T> = std::result::Result<T, TensorError>;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Batch-normalisation epsilon.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a node of a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs holds one row that is repeated over the leading batch axis.
    Rows,
    Scalar,
}

/// Statistics source for [`Tape::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a, S> {
    /// Normalise with the statistics of the current batch.
    Batch,
    /// Normalise with stored running statistics.
    Running { mean: &'a [S], var: &'a [S] },
}

/// Per-feature statistics of a batch, as needed for running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Unbiased variance.
    pub var: Vec<S>,
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, S),
    Shift(Var),
    Relu(Var),
    Softmax(Var),
    Log(Var),
    Exp(Var),
    ClampMin(Var, S),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
    },
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        batch_stats: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<S>,
    },
    LstmCell {
        inputs: [Var; 6],
        gates: Vec<S>,
        tanh_c: Vec<S>,
    },
    SliceLast {
        x: Var,
        start: usize,
    },
    SelectTime {
        x: Var,
        t: usize,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// The computation record.
pub struct Tape<S> {
    id: u64,
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn accumulate<S: Scalar>(adj: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
    match &mut adj[v.index] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<S>> {
        if v.tape != self.id {
            return Err(TensorError::NoActiveRecord);
        }
        self.nodes.get(v.index).ok_or(TensorError::NoActiveRecord)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Adds an input tensor to the record.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.node(v).expect("variable from another tape").value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<S>> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    /// Accumulated gradient of a leaf, populated by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        if v.tape != self.id {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn ids(&self, vars: &[Var]) -> Result<()> {
        for &v in vars {
            self.node(v)?;
        }
        Ok(())
    }

    // ----------------------------------------------------------------- linear

    /// `(m, k) × (k, n) → (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ids(&[a, b])?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::ZERO; m * n];
        S::gemm(
            false,
            false,
            m,
            n,
            k,
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            false,
        );
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Bcast::Same);
        }
        let nb: usize = sb.iter().product();
        if nb == 1 {
            return Ok(Bcast::Scalar);
        }
        let row: usize = sa[1..].iter().product();
        let lead_ones = sb.iter().take_while(|&&d| d == 1).count();
        let tail = &sb[lead_ones..];
        if sa.len() >= 2 && nb == row && (tail == &sa[1..] || sb == &sa[1..]) {
            return Ok(Bcast::Rows);
        }
        Err(mismatch(op, format!("cannot broadcast {sb:?} onto {sa:?}")))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        make: impl FnOnce(Var, Var, Bcast) -> Op<S>,
    ) -> Result<Var> {
        self.ids(&[a, b])?;
        let bc = self.broadcast(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let nb = vb.numel();
        let data: Vec<S> = match bc {
            Bcast::Same => va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Rows => va
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, vb.data()[i % nb]))
                .collect(),
            Bcast::Scalar => {
                let y = vb.item();
                va.data().iter().map(|&x| f(x, y)).collect()
            }
        };
        let shape = va.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), make(a, b, bc), &[a, b]))
    }

    /// Element-wise sum; `b` may broadcast over the leading batch axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.ids(&[a])?;
        let c = S::from_f64(c);
        let v = self.value(a);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| x * c).collect());
        Ok(self.push(out, Op::Scale(a, c), &[a]))
    }

    /// Addition of a constant.
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.ids(&[a])?;
        let c = S::from_f64(c);
        let v = self.value(a);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| x + c).collect());
        Ok(self.push(out, Op::Shift(a), &[a]))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    // ------------------------------------------------------------ elementwise

    fn unary(&mut self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        self.ids(&[a])?;
        let v = self.value(a);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect());
        Ok(self.push(out, op, &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > S::ZERO { x } else { S::ZERO }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    /// Natural logarithm; every input must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.ids(&[a])?;
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > S::ZERO)) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let m = S::from_f64(floor);
        self.unary(a, |x| if x > m { x } else { m }, Op::ClampMin(a, m))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.ids(&[a])?;
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x < S::ZERO || x.is_nan()) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: format!("negative input {bad}"),
            });
        }
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.ids(&[a])?;
        let v = self.value(a);
        let l = *v.shape().last().unwrap();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(l) {
            let m = row.iter().fold(row[0], |acc, &x| acc.max(x));
            let mut total = S::ZERO;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x = *x / total;
            }
        }
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    // ------------------------------------------------------------- reductions

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.ids(&[a])?;
        let s = self.value(a).data().iter().fold(S::ZERO, |acc, &x| acc + x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.ids(&[a])?;
        let v = self.value(a);
        let s = v.data().iter().fold(S::ZERO, |acc, &x| acc + x) / S::from_usize(v.numel());
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), &[a]))
    }

    /// Sum over the last axis, which is dropped.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        self.ids(&[a])?;
        let v = self.value(a);
        let l = *v.shape().last().unwrap();
        let data: Vec<S> = v
            .data()
            .chunks(l)
            .map(|r| r.iter().fold(S::ZERO, |acc, &x| acc + x))
            .collect();
        let mut shape = v.shape()[..v.ndim() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.push(Tensor::from_parts(shape, data), Op::SumLast(a), &[a]))
    }

    // ------------------------------------------------------------------ shape

    /// Concatenation along the last (feature) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.ids(parts)?;
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument("concat of nothing".into()));
        }
        let lead = {
            let s = self.shape(parts[0]);
            s[..s.len() - 1].to_vec()
        };
        let outer: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(mismatch(
                    "concat",
                    format!("leading dims {:?} vs {:?}", &s[..s.len() - 1], lead),
                ));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for r in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.ids(&[a])?;
        let v = self.value(a).clone();
        let from = v.shape().to_vec();
        let out = v
            .reshape(shape)
            .map_err(|_| mismatch("reshape", format!("{from:?} -> {shape:?}")))?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let rest: usize = s[1..].iter().product();
        let n = s[0];
        self.reshape(a, &[n, rest])
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.ids(&[a])?;
        let v = self.value(a);
        let s = v.shape();
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(mismatch("slice", format!("[{start}, {}) of {s:?}", start + len)));
        }
        let w = s[1];
        let data: Vec<S> = v.data().chunks(w).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let out = Tensor::from_parts(vec![s[0], len], data);
        Ok(self.push(out, Op::SliceLast { x: a, start }, &[a]))
    }

    /// Time step `t` of a `(n, c, T)` sequence, giving `(n, c)`.
    pub fn select_time(&mut self, a: Var, t: usize) -> Result<Var> {
        self.ids(&[a])?;
        let v = self.value(a);
        let s = v.shape();
        if s.len() != 3 || t >= s[2] {
            return Err(mismatch("select_time", format!("step {t} of {s:?}")));
        }
        let (n, c, len) = (s[0], s[1], s[2]);
        let data: Vec<S> = (0..n * c).map(|r| v.data()[r * len + t]).collect();
        let out = Tensor::from_parts(vec![n, c], data);
        Ok(self.push(out, Op::SelectTime { x: a, t }, &[a]))
    }

    /// `out[i] = x[i, idx[i]]` for a 2-D `x`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.ids(&[a])?;
        let v = self.value(a);
        let s = v.shape();
        if s.len() != 2 || idx.len() != s[0] {
            return Err(mismatch("pick", format!("{} indices into {s:?}", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&k| k >= s[1]) {
            return Err(mismatch("pick", format!("index {bad} out of range for {s:?}")));
        }
        let k = s[1];
        let data: Vec<S> = idx.iter().enumerate().map(|(i, &j)| v.data()[i * k + j]).collect();
        let out = Tensor::from_parts(vec![idx.len()], data);
        Ok(self.push(out, Op::Pick { x: a, idx: idx.to_vec() }, &[a]))
    }

    /// Rows of `x` in the order given by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.ids(&[a])?;
        let v = self.value(a);
        if idx.is_empty() {
            return Err(TensorError::InvalidArgument("gather_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&r| r >= v.shape()[0]) {
            return Err(mismatch("gather_rows", format!("row {bad} of {:?}", v.shape())));
        }
        let out = v.select_rows(idx);
        Ok(self.push(out, Op::GatherRows { x: a, idx: idx.to_vec() }, &[a]))
    }

    // ------------------------------------------------------------ convolution

    /// 1-D convolution over time. `x: (n, c, t)`, `w: (f, c, k)`, `b: (f)`,
    /// stride 1 with `pad` zeros on both ends.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        self.ids(&[x, w, b])?;
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || sb != [sw[0]] {
            return Err(mismatch("conv1d", format!("input {sx:?}, weight {sw:?}, bias {sb:?}")));
        }
        let (n, c, t) = (sx[0], sx[1], sx[2]);
        let (f, k) = (sw[0], sw[2]);
        if t + 2 * pad < k {
            return Err(mismatch("conv1d", format!("kernel {k} longer than padded length {}", t + 2 * pad)));
        }
        let to = t + 2 * pad - k + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![S::ZERO; n * f * to];
        let mut cols = vec![S::ZERO; c * k * to];
        for i in 0..n {
            im2col(&xv[i * c * t..(i + 1) * c * t], c, t, k, pad, &mut cols);
            let o = &mut out[i * f * to..(i + 1) * f * to];
            for (fi, row) in o.chunks_mut(to).enumerate() {
                row.iter_mut().for_each(|v| *v = bv[fi]);
            }
            S::gemm(false, false, f, to, c * k, wv, &cols, o, true);
        }
        let out = Tensor::from_parts(vec![n, f, to], out);
        Ok(self.push(out, Op::Conv1d { x, w, b, pad }, &[x, w, b]))
    }

    /// Non-overlapping max pooling over time; trailing remainder is dropped.
    pub fn max_pool1d(&mut self, x: Var, size: usize) -> Result<Var> {
        self.ids(&[x])?;
        let s = self.shape(x);
        if s.len() != 3 || size == 0 || s[2] < size {
            return Err(mismatch("max_pool1d", format!("window {size} over {s:?}")));
        }
        let (n, c, t) = (s[0], s[1], s[2]);
        let to = t / size;
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * to);
        let mut argmax = Vec::with_capacity(n * c * to);
        for r in 0..n * c {
            for j in 0..to {
                let base = r * t + j * size;
                let mut best = base;
                for p in base + 1..base + size {
                    if v[p] > v[best] {
                        best = p;
                    }
                }
                out.push(v[best]);
                argmax.push(best);
            }
        }
        let out = Tensor::from_parts(vec![n, c, to], out);
        Ok(self.push(out, Op::MaxPool1d { x, argmax }, &[x]))
    }

    // ---------------------------------------------------------- normalisation

    /// Batch normalisation of `(n, d)` features. In [`NormStats::Batch`] mode
    /// the batch statistics are returned so the caller can maintain running
    /// averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, S>,
    ) -> Result<(Var, Option<BatchStats<S>>)> {
        self.ids(&[x, gamma, beta])?;
        let (sx, sg, sb) = (self.shape(x), self.shape(gamma), self.shape(beta));
        if sx.len() != 2 || sg != [sx[1]] || sb != [sx[1]] {
            return Err(mismatch("batch_norm", format!("input {sx:?}, gamma {sg:?}, beta {sb:?}")));
        }
        let (n, d) = (sx[0], sx[1]);
        let eps = S::from_f64(BN_EPS);
        let xv = self.value(x).data();
        let (mean, var, returned) = match stats {
            NormStats::Batch => {
                if n < 2 {
                    return Err(TensorError::InvalidArgument(
                        "batch_norm needs at least 2 samples in training mode".into(),
                    ));
                }
                let mut mean = vec![S::ZERO; d];
                for row in xv.chunks(d) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                let nn = S::from_usize(n);
                mean.iter_mut().for_each(|m| *m = *m / nn);
                let mut var = vec![S::ZERO; d];
                for row in xv.chunks(d) {
                    for j in 0..d {
                        let dv = row[j] - mean[j];
                        var[j] += dv * dv;
                    }
                }
                let unbiased: Vec<S> = var.iter().map(|&v| v / S::from_usize(n - 1)).collect();
                let biased: Vec<S> = var.iter().map(|&v| v / nn).collect();
                let ret = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, biased, Some(ret))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != d || var.len() != d {
                    return Err(mismatch("batch_norm", format!("running stats for {} features, input has {d}", mean.len())));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::ONE / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = Vec::with_capacity(n * d);
        let mut out = Vec::with_capacity(n * d);
        for row in xv.chunks(d) {
            for j in 0..d {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(gv[j] * h + bv[j]);
            }
        }
        let out = Tensor::from_parts(vec![n, d], out);
        let var = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: returned.is_some(),
            },
            &[x, gamma, beta],
        );
        Ok((var, returned))
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        self.ids(&[x])?;
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = S::from_f64(1.0 / (1.0 - rate));
        let v = self.value(x);
        let mask: Vec<S> = (0..v.numel())
            .map(|_| if rng.random::<f64>() < rate { S::ZERO } else { keep })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    // -------------------------------------------------------------- recurrent

    /// One LSTM step with gate order (input, forget, cell, output).
    ///
    /// `x: (n, in)`, `h, c: (n, H)`, `w_ih: (in, 4H)`, `w_hh: (H, 4H)`,
    /// `b: (4H)`. Returns `(n, 2H)` holding `[h' | c']`; split it with
    /// [`Tape::slice_last`].
    pub fn lstm_cell(&mut self, x: Var, h: Var, c: Var, w_ih: Var, w_hh: Var, b: Var) -> Result<Var> {
        let inputs = [x, h, c, w_ih, w_hh, b];
        self.ids(&inputs)?;
        let (sx, sh, sc) = (self.shape(x), self.shape(h), self.shape(c));
        let (swi, swh, sb) = (self.shape(w_ih), self.shape(w_hh), self.shape(b));
        let ok = sx.len() == 2
            && sh.len() == 2
            && sh == sc
            && sx[0] == sh[0]
            && swi.len() == 2
            && swh.len() == 2
            && swi[0] == sx[1]
            && swi[1] == 4 * sh[1]
            && swh[0] == sh[1]
            && swh[1] == 4 * sh[1]
            && sb == [4 * sh[1]];
        if !ok {
            return Err(mismatch(
                "lstm_cell",
                format!("x {sx:?}, h {sh:?}, c {sc:?}, w_ih {swi:?}, w_hh {swh:?}, b {sb:?}"),
            ));
        }
        let (n, input, hid) = (sx[0], sx[1], sh[1]);
        let g4 = 4 * hid;
        let mut gates = vec![S::ZERO; n * g4];
        for row in gates.chunks_mut(g4) {
            row.copy_from_slice(self.value(b).data());
        }
        S::gemm(false, false, n, g4, input, self.value(x).data(), self.value(w_ih).data(), &mut gates, true);
        S::gemm(false, false, n, g4, hid, self.value(h).data(), self.value(w_hh).data(), &mut gates, true);
        let cv = self.value(c).data();
        let mut out = vec![S::ZERO; n * 2 * hid];
        let mut tanh_c = vec![S::ZERO; n * hid];
        for i in 0..n {
            let g = &mut gates[i * g4..(i + 1) * g4];
            for j in 0..hid {
                g[j] = g[j].sigmoid();
                g[hid + j] = g[hid + j].sigmoid();
                g[2 * hid + j] = g[2 * hid + j].tanh();
                g[3 * hid + j] = g[3 * hid + j].sigmoid();
                let c_new = g[hid + j] * cv[i * hid + j] + g[j] * g[2 * hid + j];
                let tc = c_new.tanh();
                tanh_c[i * hid + j] = tc;
                out[i * 2 * hid + j] = g[3 * hid + j] * tc;
                out[i * 2 * hid + hid + j] = c_new;
            }
        }
        let out = Tensor::from_parts(vec![n, 2 * hid], out);
        Ok(self.push(out, Op::LstmCell { inputs, gates, tanh_c }, &inputs))
    }

    // --------------------------------------------------------------- backward

    /// Back-propagates from a scalar root. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_node = self.node(root)?;
        if root_node.value.numel() != 1 {
            return Err(TensorError::NotScalar(root_node.value.shape().to_vec()));
        }
        if !root_node.requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Tensor<S>>> = (0..=root.index).map(|_| None).collect();
        adj[root.index] = Some(Tensor::ones(root_node.value.shape()));
        for i in (0..=root.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if let Op::Leaf = node.op {
                match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, g, &mut adj);
        }
        Ok(())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.index].value
    }

    fn reduce_bcast(&self, g: Vec<S>, target: Var, bc: Bcast) -> Tensor<S> {
        let shape = self.val(target).shape().to_vec();
        match bc {
            Bcast::Same => Tensor::from_parts(shape, g),
            Bcast::Scalar => {
                let s = g.iter().fold(S::ZERO, |a, &x| a + x);
                Tensor::from_parts(shape, vec![s])
            }
            Bcast::Rows => {
                let nb = self.val(target).numel();
                let mut out = vec![S::ZERO; nb];
                for row in g.chunks(nb) {
                    for (o, &x) in out.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                Tensor::from_parts(shape, out)
            }
        }
    }

    fn bval(&self, b: Var, bc: Bcast, i: usize) -> S {
        let v = self.val(b).data();
        match bc {
            Bcast::Same => v[i],
            Bcast::Rows => v[i % v.len()],
            Bcast::Scalar => v[0],
        }
    }

    fn propagate(&self, i: usize, g: Tensor<S>, adj: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        let like = |v: Var, data: Vec<S>| Tensor::from_parts(self.val(v).shape().to_vec(), data);
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.val(*a).shape(), self.val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let mut da = vec![S::ZERO; m * k];
                    S::gemm(false, true, m, k, n, gd, self.val(*b).data(), &mut da, false);
                    accumulate(adj, *a, like(*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![S::ZERO; k * n];
                    S::gemm(true, false, k, n, m, self.val(*a).data(), gd, &mut db, false);
                    accumulate(adj, *b, like(*b, db));
                }
            }
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -S::ONE } else { S::ONE };
                if self.rg(*a) {
                    accumulate(adj, *a, g.clone());
                }
                if self.rg(*b) {
                    let gb = gd.iter().map(|&x| x * sign).collect();
                    let t = self.reduce_bcast(gb, *b, *bc);
                    accumulate(adj, *b, t);
                }
            }
            Op::Mul(a, b, bc) => {
                if self.rg(*a) {
                    let da = gd.iter().enumerate().map(|(j, &x)| x * self.bval(*b, *bc, j)).collect();
                    accumulate(adj, *a, like(*a, da));
                }
                if self.rg(*b) {
                    let av = self.val(*a).data();
                    let gb = gd.iter().zip(av).map(|(&x, &y)| x * y).collect();
                    let t = self.reduce_bcast(gb, *b, *bc);
                    accumulate(adj, *b, t);
                }
            }
            Op::Scale(a, c) => {
                accumulate(adj, *a, like(*a, gd.iter().map(|&x| x * *c).collect()));
            }
            Op::Shift(a) | Op::Reshape(a) => {
                accumulate(adj, *a, like(*a, g.into_data()));
            }
            Op::Relu(a) => {
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&x, &y)| if y > S::ZERO { x } else { S::ZERO })
                    .collect();
                accumulate(adj, *a, like(*a, d));
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(out.data()).map(|(&x, &y)| x * y).collect();
                accumulate(adj, *a, like(*a, d));
            }
            Op::Log(a) => {
                let d = gd.iter().zip(self.val(*a).data()).map(|(&x, &y)| x / y).collect();
                accumulate(adj, *a, like(*a, d));
            }
            Op::ClampMin(a, m) => {
                let d = gd
                    .iter()
                    .zip(self.val(*a).data())
                    .map(|(&x, &y)| if y > *m { x } else { S::ZERO })
                    .collect();
                accumulate(adj, *a, like(*a, d));
            }
            Op::Square(a) => {
                let two = S::from_f64(2.0);
                let d = gd.iter().zip(self.val(*a).data()).map(|(&x, &y)| two * x * y).collect();
                accumulate(adj, *a, like(*a, d));
            }
            Op::Sqrt(a) => {
                // Subgradient 0 at the kink.
                let half = S::from_f64(0.5);
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&x, &y)| if y > S::ZERO { x * half / y } else { S::ZERO })
                    .collect();
                accumulate(adj, *a, like(*a, d));
            }
            Op::Softmax(a) => {
                let l = *out.shape().last().unwrap();
                let mut d = Vec::with_capacity(out.numel());
                for (yr, gr) in out.data().chunks(l).zip(gd.chunks(l)) {
                    let dot = yr.iter().zip(gr).fold(S::ZERO, |acc, (&y, &x)| acc + y * x);
                    d.extend(yr.iter().zip(gr).map(|(&y, &x)| y * (x - dot)));
                }
                accumulate(adj, *a, like(*a, d));
            }
            Op::Sum(a) => {
                let n = self.val(*a).numel();
                accumulate(adj, *a, like(*a, vec![gd[0]; n]));
            }
            Op::Mean(a) => {
                let n = self.val(*a).numel();
                accumulate(adj, *a, like(*a, vec![gd[0] / S::from_usize(n); n]));
            }
            Op::SumLast(a) => {
                let l = *self.val(*a).shape().last().unwrap();
                let d = gd.iter().flat_map(|&x| std::iter::repeat(x).take(l)).collect();
                accumulate(adj, *a, like(*a, d));
            }
            Op::Concat(parts) => {
                let total = *out.shape().last().unwrap();
                let outer = out.numel() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = *self.val(p).shape().last().unwrap();
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(outer * w);
                        for r in 0..outer {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(adj, p, like(p, d));
                    }
                    offset += w;
                }
            }
            Op::SliceLast { x, start } => {
                let s = self.val(*x).shape();
                let (n, w) = (s[0], s[1]);
                let len = out.shape()[1];
                let mut d = vec![S::ZERO; n * w];
                for r in 0..n {
                    d[r * w + start..r * w + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                accumulate(adj, *x, like(*x, d));
            }
            Op::SelectTime { x, t } => {
                let s = self.val(*x).shape();
                let len = s[2];
                let mut d = vec![S::ZERO; self.val(*x).numel()];
                for (r, &v) in gd.iter().enumerate() {
                    d[r * len + t] = v;
                }
                accumulate(adj, *x, like(*x, d));
            }
            Op::Pick { x, idx } => {
                let k = self.val(*x).shape()[1];
                let mut d = vec![S::ZERO; self.val(*x).numel()];
                for (r, &j) in idx.iter().enumerate() {
                    d[r * k + j] += gd[r];
                }
                accumulate(adj, *x, like(*x, d));
            }
            Op::GatherRows { x, idx } => {
                let xv = self.val(*x);
                let row: usize = xv.shape()[1..].iter().product();
                let mut d = vec![S::ZERO; xv.numel()];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..row {
                        d[src * row + j] += gd[r * row + j];
                    }
                }
                accumulate(adj, *x, like(*x, d));
            }
            Op::Conv1d { x, w, b, pad } => {
                let (sx, sw) = (self.val(*x).shape(), self.val(*w).shape());
                let (n, c, t) = (sx[0], sx[1], sx[2]);
                let (f, k) = (sw[0], sw[2]);
                let to = out.shape()[2];
                let xv = self.val(*x).data();
                let wv = self.val(*w).data();
                if self.rg(*b) {
                    let mut db = vec![S::ZERO; f];
                    for i in 0..n {
                        for fi in 0..f {
                            let row = &gd[(i * f + fi) * to..(i * f + fi + 1) * to];
                            db[fi] += row.iter().fold(S::ZERO, |a, &v| a + v);
                        }
                    }
                    accumulate(adj, *b, like(*b, db));
                }
                let need_w = self.rg(*w);
                let need_x = self.rg(*x);
                let mut dw = vec![S::ZERO; if need_w { f * c * k } else { 0 }];
                let mut dx = vec![S::ZERO; if need_x { n * c * t } else { 0 }];
                let mut cols = vec![S::ZERO; c * k * to];
                let mut dcols = vec![S::ZERO; c * k * to];
                for i in 0..n {
                    let go = &gd[i * f * to..(i + 1) * f * to];
                    if need_w {
                        im2col(&xv[i * c * t..(i + 1) * c * t], c, t, k, *pad, &mut cols);
                        S::gemm(false, true, f, c * k, to, go, &cols, &mut dw, true);
                    }
                    if need_x {
                        S::gemm(true, false, c * k, to, f, wv, go, &mut dcols, false);
                        col2im(&dcols, c, t, k, *pad, &mut dx[i * c * t..(i + 1) * c * t]);
                    }
                }
                if need_w {
                    accumulate(adj, *w, like(*w, dw));
                }
                if need_x {
                    accumulate(adj, *x, like(*x, dx));
                }
            }
            Op::MaxPool1d { x, argmax } => {
                let mut d = vec![S::ZERO; self.val(*x).numel()];
                for (&src, &v) in argmax.iter().zip(gd) {
                    d[src] += v;
                }
                accumulate(adj, *x, like(*x, d));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let d = inv_std.len();
                let n = gd.len() / d;
                if self.rg(*beta) {
                    let mut db = vec![S::ZERO; d];
                    for row in gd.chunks(d) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(adj, *beta, like(*beta, db));
                }
                if self.rg(*gamma) {
                    let mut dg = vec![S::ZERO; d];
                    for (row, hrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += row[j] * hrow[j];
                        }
                    }
                    accumulate(adj, *gamma, like(*gamma, dg));
                }
                if self.rg(*x) {
                    let gv = self.val(*gamma).data();
                    let mut dx = vec![S::ZERO; n * d];
                    if *batch_stats {
                        let mut sum_dh = vec![S::ZERO; d];
                        let mut sum_dh_h = vec![S::ZERO; d];
                        for (row, hrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                let dh = row[j] * gv[j];
                                sum_dh[j] += dh;
                                sum_dh_h[j] += dh * hrow[j];
                            }
                        }
                        let nn = S::from_usize(n);
                        for r in 0..n {
                            for j in 0..d {
                                let dh = gd[r * d + j] * gv[j];
                                dx[r * d + j] =
                                    inv_std[j] / nn * (nn * dh - sum_dh[j] - xhat[r * d + j] * sum_dh_h[j]);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for j in 0..d {
                                dx[r * d + j] = gd[r * d + j] * gv[j] * inv_std[j];
                            }
                        }
                    }
                    accumulate(adj, *x, like(*x, dx));
                }
            }
            Op::Dropout { x, mask } => {
                let d = gd.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                accumulate(adj, *x, like(*x, d));
            }
            Op::LstmCell { inputs, gates, tanh_c } => {
                let [x, h, c, w_ih, w_hh, b] = *inputs;
                let hid = out.shape()[1] / 2;
                let n = out.shape()[0];
                let input = self.val(x).shape()[1];
                let g4 = 4 * hid;
                let cv = self.val(c).data();
                let one = S::ONE;
                let mut dgates = vec![S::ZERO; n * g4];
                let mut dc_prev = vec![S::ZERO; n * hid];
                for r in 0..n {
                    let gr = &gates[r * g4..(r + 1) * g4];
                    for j in 0..hid {
                        let (ig, fg, cg, og) = (gr[j], gr[hid + j], gr[2 * hid + j], gr[3 * hid + j]);
                        let tc = tanh_c[r * hid + j];
                        let dh = gd[r * 2 * hid + j];
                        let dc = gd[r * 2 * hid + hid + j] + dh * og * (one - tc * tc);
                        let d_o = dh * tc;
                        let d_i = dc * cg;
                        let d_g = dc * ig;
                        let d_f = dc * cv[r * hid + j];
                        dc_prev[r * hid + j] = dc * fg;
                        let dg = &mut dgates[r * g4..(r + 1) * g4];
                        dg[j] = d_i * ig * (one - ig);
                        dg[hid + j] = d_f * fg * (one - fg);
                        dg[2 * hid + j] = d_g * (one - cg * cg);
                        dg[3 * hid + j] = d_o * og * (one - og);
                    }
                }
                if self.rg(c) {
                    accumulate(adj, c, like(c, dc_prev));
                }
                if self.rg(x) {
                    let mut dx = vec![S::ZERO; n * input];
                    S::gemm(false, true, n, input, g4, &dgates, self.val(w_ih).data(), &mut dx, false);
                    accumulate(adj, x, like(x, dx));
                }
                if self.rg(h) {
                    let mut dh = vec![S::ZERO; n * hid];
                    S::gemm(false, true, n, hid, g4, &dgates, self.val(w_hh).data(), &mut dh, false);
                    accumulate(adj, h, like(h, dh));
                }
                if self.rg(w_ih) {
                    let mut dw = vec![S::ZERO; input * g4];
                    S::gemm(true, false, input, g4, n, self.val(x).data(), &dgates, &mut dw, false);
                    accumulate(adj, w_ih, like(w_ih, dw));
                }
                if self.rg(w_hh) {
                    let mut dw = vec![S::ZERO; hid * g4];
                    S::gemm(true, false, hid, g4, n, self.val(h).data(), &dgates, &mut dw, false);
                    accumulate(adj, w_hh, like(w_hh, dw));
                }
                if self.rg(b) {
                    let mut db = vec![S::ZERO; g4];
                    for row in dgates.chunks(g4) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(adj, b, like(b, db));
                }
            }
        }
    }
}

/// Unfolds one `(c, t)` sample into a `(c·k, t_out)` column matrix.
fn im2col<S: Scalar>(x: &[S], c: usize, t: usize, k: usize, pad: usize, cols: &mut [S]) {
    let to = t + 2 * pad - k + 1;
    for ci in 0..c {
        let src = &x[ci * t..(ci + 1) * t];
        for j in 0..k {
            let dst = &mut cols[(ci * k + j) * to..(ci * k + j + 1) * to];
            for (o, v) in dst.iter_mut().enumerate() {
                let p = o + j;
                *v = if p >= pad && p - pad < t { src[p - pad] } else { S::ZERO };
            }
        }
    }
}

fn col2im<S: Scalar>(cols: &[S], c: usize, t: usize, k: usize, pad: usize, dx: &mut [S]) {
    let to = t + 2 * pad - k + 1;
    for ci in 0..c {
        for j in 0..k {
            let src = &cols[(ci * k + j) * to..(ci * k + j + 1) * to];
            for (o, &v) in src.iter().enumerate() {
                let p = o + j;
                if p >= pad && p - pad < t {
                    dx[ci * t + p - pad] += v;
                }
            }
        }
    }
}
