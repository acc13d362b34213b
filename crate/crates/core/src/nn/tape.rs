//! Reverse-mode differentiation over 2-D f64 tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes created from
//! parameters remember the parameter slot they came from; [`Tape::backward`]
//! returns the gradient for each such slot. Nodes that do not depend on any
//! parameter are never differentiated.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Compressed sparse rows with explicit row ids per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub n: usize,
    /// `offsets[i]..offsets[i + 1]` indexes the entries of row `i`
    pub offsets: Vec<usize>,
    pub rows: Arc<[usize]>,
    pub cols: Arc<[usize]>,
}

impl Csr {
    /// Builds the neighbourhood structure from neighbour lists, adding a
    /// self-loop to every row.
    pub fn with_self_loops(adj: &[Vec<usize>]) -> Self {
        let n = adj.len();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        offsets.push(0);
        for (i, nb) in adj.iter().enumerate() {
            let mut row: Vec<usize> = nb.iter().copied().filter(|&j| j != i).collect();
            row.push(i);
            row.sort_unstable();
            row.dedup();
            for j in row {
                rows.push(i);
                cols.push(j);
            }
            offsets.push(cols.len());
        }
        Self { n, offsets, rows: rows.into(), cols: cols.into() }
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulBt(Var, Var),
    Add(Var, Var),
    /// `a + b` with `b` a single row broadcast over `a`'s rows
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Vec<Var>),
    Sigmoid(Var),
    Tanh(Var),
    Elu(Var, f64),
    LeakyRelu(Var, f64),
    /// `out[e] = x[idx[e]]` on column vectors
    Gather(Var, Arc<[usize]>),
    SegmentSoftmax(Var, Arc<Csr>),
    /// `out[i] = sum_{e in row i} alpha[e] * z[cols[e]]`
    SpAggregate(Var, Var, Arc<Csr>),
    /// one attention head over projected features `z`, see [`Tape::gat_attend`]
    GatAttend { z: Var, a: Var, alpha: Var, csr: Arc<Csr>, slope: f64, s_self: Vec<f64>, s_nb: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRow(Var, usize),
    Reshape(Var),
    MeanRows(Var),
    LogSoftmaxRows(Var),
    /// mean negative log-likelihood of the labelled entries
    Nll(Var, Arc<[usize]>),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    param: Option<usize>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by parameter slot.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads {
    pub grads: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn get(&self, slot: usize) -> Option<&[f64]> {
        self.grads.get(slot).and_then(|g| g.as_deref())
    }
}

/// Runs `f` compiled for AVX2 when the CPU has it. No FMA: every product
/// and sum is rounded exactly as in the baseline build, so results do not
/// depend on the machine.
#[inline(always)]
fn wide<R>(f: impl FnOnce() -> R) -> R {
    #[cfg(target_arch = "x86_64")]
    {
        #[target_feature(enable = "avx2")]
        fn avx2<R>(f: impl FnOnce() -> R) -> R {
            f()
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { avx2(f) };
        }
    }
    f()
}

fn matmul_into(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    wide(
        #[inline(always)]
        || matmul_kernel(a, b, n, k, m, out),
    )
}

#[inline(always)]
fn matmul_kernel(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            axpy(av, &b[p * m..(p + 1) * m], orow);
        }
    }
}

#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // independent partial sums so the loop is not bound by add latency
    let n = a.len().min(b.len());
    let (ca, ta) = a[..n].as_chunks::<4>();
    let (cb, tb) = b[..n].as_chunks::<4>();
    let mut acc = [0.0; 4];
    for (x, y) in ca.iter().zip(cb) {
        acc = [acc[0] + x[0] * y[0], acc[1] + x[1] * y[1], acc[2] + x[2] * y[2], acc[3] + x[3] * y[3]];
    }
    let tail: f64 = ta.iter().zip(tb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

/// `y += s * x`
#[inline(always)]
fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    let n = x.len().min(y.len());
    let (x, y) = (&x[..n], &mut y[..n]);
    for i in 0..n {
        y[i] += s * x[i];
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

type Attended = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);

/// Scores, coefficients and aggregate of one attention head. Returns
/// `(a_l . z_i, a_r . z_i, alpha, out)`.
#[inline(always)]
fn attend_forward(zv: &[f64], av: &[f64], csr: &Csr, slope: f64) -> Attended {
    match av.len() / 2 {
        8 => attend_forward_n::<8>(zv, av, csr, slope),
        16 => attend_forward_n::<16>(zv, av, csr, slope),
        32 => attend_forward_n::<32>(zv, av, csr, slope),
        _ => attend_forward_n::<0>(zv, av, csr, slope),
    }
}

/// `F` is the head width when known at compile time, 0 otherwise.
#[inline(always)]
fn attend_forward_n<const F: usize>(zv: &[f64], av: &[f64], csr: &Csr, slope: f64) -> Attended {
    let f = if F == 0 { av.len() / 2 } else { F };
    let (al, ar) = av.split_at(f);
    let s_self: Vec<f64> = zv.chunks_exact(f).map(|r| dot(r, al)).collect();
    let s_nb: Vec<f64> = zv.chunks_exact(f).map(|r| dot(r, ar)).collect();
    let mut alpha = vec![0.0; csr.nnz()];
    let mut out = vec![0.0; csr.n * f];
    for (i, orow) in out.chunks_exact_mut(f).enumerate() {
        let r = csr.row_range(i);
        if r.is_empty() {
            continue;
        }
        let cols = &csr.cols[r.clone()];
        let ar = &mut alpha[r];
        let mut max = f64::NEG_INFINITY;
        for (x, &j) in ar.iter_mut().zip(cols) {
            let pre = s_self[i] + s_nb[j];
            *x = if pre > 0.0 { pre } else { slope * pre };
            max = max.max(*x);
        }
        let mut sum = 0.0;
        for x in ar.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        let inv = 1.0 / sum;
        for (x, &j) in ar.iter_mut().zip(cols) {
            *x *= inv;
            axpy(*x, &zv[j * f..(j + 1) * f], orow);
        }
    }
    (s_self, s_nb, alpha, out)
}

struct AttendBackward<'a> {
    g: &'a [f64],
    z: &'a [f64],
    a: &'a [f64],
    alpha: &'a [f64],
    csr: &'a Csr,
    slope: f64,
    s_self: &'a [f64],
    s_nb: &'a [f64],
}

impl AttendBackward<'_> {
    /// Adds the gradients with respect to `z` (when wanted) and `a`.
    #[inline(always)]
    fn run(&self, gz: Option<&mut [f64]>, ga: &mut [f64]) {
        match self.a.len() / 2 {
            8 => self.run_n::<8>(gz, ga),
            16 => self.run_n::<16>(gz, ga),
            32 => self.run_n::<32>(gz, ga),
            _ => self.run_n::<0>(gz, ga),
        }
    }

    #[inline(always)]
    fn run_n<const F: usize>(&self, mut gz: Option<&mut [f64]>, ga: &mut [f64]) {
        let Self { g, z, a, alpha, csr, slope, s_self, s_nb } = *self;
        let f = if F == 0 { a.len() / 2 } else { F };
        let mut g_self = vec![0.0; csr.n];
        let mut g_nb = vec![0.0; csr.n];
        let mut g_alpha = Vec::new();
        for (i, gi) in g.chunks_exact(f).enumerate() {
            let r = csr.row_range(i);
            let cols = &csr.cols[r.clone()];
            let al = &alpha[r];
            g_alpha.clear();
            let mut s = 0.0;
            for (&w, &j) in al.iter().zip(cols) {
                let gw = dot(gi, &z[j * f..(j + 1) * f]);
                s += w * gw;
                g_alpha.push(gw);
            }
            if let Some(gz) = gz.as_deref_mut() {
                for (&w, &j) in al.iter().zip(cols) {
                    axpy(w, gi, &mut gz[j * f..(j + 1) * f]);
                }
            }
            for ((&w, &j), &gw) in al.iter().zip(cols).zip(&g_alpha) {
                let ge = w * (gw - s);
                let ge = if s_self[i] + s_nb[j] > 0.0 { ge } else { slope * ge };
                g_self[i] += ge;
                g_nb[j] += ge;
            }
        }
        let (al, ar) = a.split_at(f);
        if let Some(gz) = gz {
            for (i, row) in gz.chunks_exact_mut(f).enumerate() {
                axpy(g_self[i], al, row);
                axpy(g_nb[i], ar, row);
            }
        }
        let (gl, gr) = ga.split_at_mut(f);
        for (i, zi) in z.chunks_exact(f).enumerate() {
            axpy(g_self[i], zi, gl);
            axpy(g_nb[i], zi, gr);
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { rows, cols, value, op, needs_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.constant_raw(t.rows(), t.cols(), t.values.clone())
    }

    pub fn constant_raw(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        self.nodes.push(Node { rows, cols, value, op: Op::Leaf, needs_grad: false, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable tensor under parameter slot `slot`.
    pub fn param(&mut self, t: &Tensor, slot: usize) -> Var {
        self.nodes.push(Node {
            rows: t.rows(),
            cols: t.cols(),
            value: t.values.clone(),
            op: Op::Leaf,
            needs_grad: t.requires_grad,
            param: Some(slot),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor { shape: [n.rows, n.cols], values: n.value.clone(), grad: None, requires_grad: false }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul {n}x{k} by {k2}x{m}")));
        }
        let mut out = vec![0.0; n * m];
        matmul_into(self.value(a), self.value(b), n, k, m, &mut out);
        Ok(self.push(n, m, out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (m, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul_bt {n}x{k} by ({m}x{k2})^T")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = dot(&av[i * k..(i + 1) * k], &bv[j * k..(j + 1) * k]);
            }
        }
        Ok(self.push(n, m, out, Op::MatMulBt(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(r, c, out, Op::Add(a, b), &[a, b]))
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(b) != (1, c) {
            return Err(Error::Shape(format!("add_row: {:?} onto {r}x{c}", self.shape(b))));
        }
        let bv = self.value(b);
        let out = self.value(a).iter().enumerate().map(|(i, x)| x + bv[i % c]).collect();
        Ok(self.push(r, c, out, Op::AddRow(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(r, c, out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.push(r, c, out, Op::Scale(a, s), &[a])
    }

    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Shape("sum of nothing".into()));
        };
        let (r, c) = self.shape(first);
        let mut out = vec![0.0; r * c];
        for &x in xs {
            if self.shape(x) != (r, c) {
                return Err(Error::Shape("sum of mismatched shapes".into()));
            }
            for (o, v) in out.iter_mut().zip(self.value(x)) {
                *o += v;
            }
        }
        Ok(self.push(r, c, out, Op::Sum(xs.to_vec()), xs))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(r, c, out, op, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn elu(&mut self, a: Var, alpha: f64) -> Var {
        self.unary(a, Op::Elu(a, alpha), move |x| if x > 0.0 { x } else { alpha * x.exp_m1() })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), move |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn gather(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let (n, c) = self.shape(x);
        if c != 1 {
            return Err(Error::Shape("gather expects a column vector".into()));
        }
        if idx.iter().any(|&i| i >= n) {
            return Err(Error::Shape("gather index out of range".into()));
        }
        let xv = self.value(x);
        let out = idx.iter().map(|&i| xv[i]).collect();
        Ok(self.push(idx.len(), 1, out, Op::Gather(x, idx), &[x]))
    }

    /// Softmax within each CSR row of a per-entry column vector.
    pub fn segment_softmax(&mut self, x: Var, csr: Arc<Csr>) -> Result<Var> {
        if self.shape(x) != (csr.nnz(), 1) {
            return Err(Error::Shape("segment_softmax length mismatch".into()));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; csr.nnz()];
        for i in 0..csr.n {
            let r = csr.row_range(i);
            if r.is_empty() {
                continue;
            }
            let max = xv[r.clone()].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in r.clone() {
                out[e] = (xv[e] - max).exp();
                z += out[e];
            }
            for e in r {
                out[e] /= z;
            }
        }
        Ok(self.push(csr.nnz(), 1, out, Op::SegmentSoftmax(x, csr), &[x]))
    }

    pub fn sp_aggregate(&mut self, alpha: Var, z: Var, csr: Arc<Csr>) -> Result<Var> {
        let (n, f) = self.shape(z);
        if self.shape(alpha) != (csr.nnz(), 1) || n != csr.n {
            return Err(Error::Shape("sp_aggregate shape mismatch".into()));
        }
        let (av, zv) = (self.value(alpha), self.value(z));
        let mut out = vec![0.0; n * f];
        for i in 0..n {
            let orow = &mut out[i * f..(i + 1) * f];
            for e in csr.row_range(i) {
                let a = av[e];
                let j = csr.cols[e];
                for (o, &zz) in orow.iter_mut().zip(&zv[j * f..(j + 1) * f]) {
                    *o += a * zz;
                }
            }
        }
        Ok(self.push(n, f, out, Op::SpAggregate(alpha, z, csr), &[alpha, z]))
    }

    /// Attention-weighted neighbourhood sum for one head:
    /// `e = LeakyReLU(a_l . z_i + a_r . z_j)`, `alpha = softmax_row(e)`,
    /// `out_i = sum_j alpha_ij z_j`. Equivalent to the chain of
    /// slice/matmul_bt/gather/add/leaky_relu/segment_softmax/sp_aggregate
    /// but with one pass over the entries in each direction. The returned
    /// `alpha` node is a constant view of the coefficients.
    pub fn gat_attend(&mut self, z: Var, a: Var, csr: Arc<Csr>, slope: f64) -> Result<(Var, Var)> {
        let (n, f) = self.shape(z);
        if n != csr.n {
            return Err(Error::Shape(format!("gat_attend: {n} rows for {} nodes", csr.n)));
        }
        if self.shape(a) != (1, 2 * f) {
            return Err(Error::Shape(format!("attention vector {:?}, expected (1, {})", self.shape(a), 2 * f)));
        }
        let (zv, av) = (self.value(z), self.value(a));
        let (s_self, s_nb, alpha, out) = wide(
            #[inline(always)]
            || attend_forward(zv, av, &csr, slope),
        );
        let nnz = csr.nnz();
        let alpha = self.constant_raw(nnz, 1, alpha);
        let op = Op::GatAttend { z, a, alpha, csr, slope, s_self, s_nb };
        Ok((self.push(n, f, out, op, &[z, a]), alpha))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Shape("concat of nothing".into()));
        };
        let r = self.shape(first).0;
        if xs.iter().any(|&x| self.shape(x).0 != r) {
            return Err(Error::Shape("concat_cols row mismatch".into()));
        }
        let c: usize = xs.iter().map(|&x| self.shape(x).1).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &x in xs {
                let w = self.shape(x).1;
                out.extend_from_slice(&self.value(x)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(r, c, out, Op::ConcatCols(xs.to_vec()), xs))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return Err(Error::Shape(format!("slice_cols {start}+{len} of {c}")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        Ok(self.push(r, len, out, Op::SliceCols(x, start), &[x]))
    }

    pub fn slice_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if row >= r {
            return Err(Error::Shape(format!("row {row} of {r}")));
        }
        let out = self.value(x)[row * c..(row + 1) * c].to_vec();
        Ok(self.push(1, c, out, Op::SliceRow(x, row), &[x]))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r * c != rows * cols {
            return Err(Error::Shape(format!("reshape {r}x{c} to {rows}x{cols}")));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(rows, cols, out, Op::Reshape(x), &[x]))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r == 0 {
            return Err(Error::Argument("mean over zero rows".into()));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(&xv[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        Ok(self.push(1, c, out, Op::MeanRows(x), &[x]))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        self.push(r, c, out, Op::LogSoftmaxRows(x), &[x])
    }

    pub fn nll(&mut self, logp: Var, labels: Arc<[usize]>) -> Result<Var> {
        let (r, c) = self.shape(logp);
        if labels.len() != r {
            return Err(Error::Shape(format!("{} labels for {r} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Argument(format!("label {bad} outside 0..{c}")));
        }
        let lv = self.value(logp);
        let loss = -labels.iter().enumerate().map(|(b, &l)| lv[b * c + l]).sum::<f64>() / r as f64;
        Ok(self.push(1, 1, vec![loss], Op::Nll(logp, labels), &[logp]))
    }

    /// Back-propagates from a scalar node. Returns gradients for every
    /// parameter slot reachable from it.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before any forward pass".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::State("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = ParamGrads::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Some(slot) = node.param {
                if out.grads.len() <= slot {
                    out.grads.resize(slot + 1, None);
                }
                match &mut out.grads[slot] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    none => *none = Some(g),
                }
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.wants(v) {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (_, k) = self.shape(*a);
                let m = node.cols;
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |ga| {
                    wide(
                        #[inline(always)]
                        || {
                            for (gi, gai) in g.chunks_exact(m).zip(ga.chunks_exact_mut(k)) {
                                for (p, o) in gai.iter_mut().enumerate() {
                                    *o += dot(gi, &bv[p * m..(p + 1) * m]);
                                }
                            }
                        },
                    )
                });
                self.acc(grads, *b, |gb| {
                    wide(
                        #[inline(always)]
                        || {
                            for (gi, ai) in g.chunks_exact(m).zip(av.chunks_exact(k)) {
                                for (p, &a_ip) in ai.iter().enumerate() {
                                    if a_ip != 0.0 {
                                        axpy(a_ip, gi, &mut gb[p * m..(p + 1) * m]);
                                    }
                                }
                            }
                        },
                    )
                });
            }
            Op::MatMulBt(a, b) => {
                let (n, k) = self.shape(*a);
                let m = node.cols;
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |ga| {
                    for i in 0..n {
                        for j in 0..m {
                            axpy(g[i * m + j], &bv[j * k..(j + 1) * k], &mut ga[i * k..(i + 1) * k]);
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..n {
                        for j in 0..m {
                            axpy(g[i * m + j], &av[i * k..(i + 1) * k], &mut gb[j * k..(j + 1) * k]);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    self.acc(grads, *v, |gv| gv.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                }
            }
            Op::AddRow(a, b) => {
                let c = node.cols;
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                self.acc(grads, *b, |gb| {
                    for (i, x) in g.iter().enumerate() {
                        gb[i % c] += x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += s * x)),
            Op::Sum(xs) => {
                for v in xs {
                    self.acc(grads, *v, |gv| gv.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                }
            }
            Op::Sigmoid(a) => self.acc(grads, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * val[i] * (1.0 - val[i]);
                }
            }),
            Op::Tanh(a) => self.acc(grads, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - val[i] * val[i]);
                }
            }),
            Op::Elu(a, alpha) => {
                let av = self.value(*a);
                self.acc(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * if av[i] > 0.0 { 1.0 } else { val[i] + alpha };
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let av = self.value(*a);
                self.acc(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * if av[i] > 0.0 { 1.0 } else { *slope };
                    }
                });
            }
            Op::Gather(x, idx) => self.acc(grads, *x, |gx| {
                for (e, &i) in idx.iter().enumerate() {
                    gx[i] += g[e];
                }
            }),
            Op::SegmentSoftmax(x, csr) => self.acc(grads, *x, |gx| {
                for i in 0..csr.n {
                    let r = csr.row_range(i);
                    let s: f64 = r.clone().map(|e| val[e] * g[e]).sum();
                    for e in r {
                        gx[e] += val[e] * (g[e] - s);
                    }
                }
            }),
            Op::SpAggregate(alpha, z, csr) => {
                let f = node.cols;
                let (alv, zv) = (self.value(*alpha), self.value(*z));
                self.acc(grads, *alpha, |ga| {
                    for i in 0..csr.n {
                        let gi = &g[i * f..(i + 1) * f];
                        for e in csr.row_range(i) {
                            let j = csr.cols[e];
                            ga[e] += dot(gi, &zv[j * f..(j + 1) * f]);
                        }
                    }
                });
                self.acc(grads, *z, |gz| {
                    for i in 0..csr.n {
                        let gi = &g[i * f..(i + 1) * f];
                        for e in csr.row_range(i) {
                            let j = csr.cols[e];
                            let a = alv[e];
                            for (o, &gg) in gz[j * f..(j + 1) * f].iter_mut().zip(gi) {
                                *o += a * gg;
                            }
                        }
                    }
                });
            }
            Op::GatAttend { z, a, alpha, csr, slope, s_self, s_nb } => {
                let zv = self.value(*z);
                let mut gz = match self.wants(*z) {
                    true => Some(grads[z.0].take().unwrap_or_else(|| vec![0.0; zv.len()])),
                    false => None,
                };
                let mut ga = vec![0.0; self.value(*a).len()];
                let back = AttendBackward {
                    g,
                    z: zv,
                    a: self.value(*a),
                    alpha: self.value(*alpha),
                    csr,
                    slope: *slope,
                    s_self,
                    s_nb,
                };
                wide(
                    #[inline(always)]
                    || back.run(gz.as_deref_mut(), &mut ga),
                );
                if gz.is_some() {
                    grads[z.0] = gz;
                }
                self.acc(grads, *a, |gv| gv.iter_mut().zip(&ga).for_each(|(o, x)| *o += x));
            }
            Op::ConcatCols(xs) => {
                let (r, c) = (node.rows, node.cols);
                let mut off = 0;
                for v in xs {
                    let w = self.shape(*v).1;
                    self.acc(grads, *v, |gv| {
                        for i in 0..r {
                            for (o, x) in gv[i * w..(i + 1) * w].iter_mut().zip(&g[i * c + off..i * c + off + w]) {
                                *o += x;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols(x, start) => {
                let c = self.shape(*x).1;
                let w = node.cols;
                self.acc(grads, *x, |gx| {
                    for i in 0..node.rows {
                        for (o, v) in gx[i * c + start..i * c + start + w].iter_mut().zip(&g[i * w..(i + 1) * w]) {
                            *o += v;
                        }
                    }
                });
            }
            Op::SliceRow(x, row) => {
                let c = node.cols;
                self.acc(grads, *x, |gx| {
                    for (o, v) in gx[row * c..(row + 1) * c].iter_mut().zip(g) {
                        *o += v;
                    }
                });
            }
            Op::Reshape(x) => self.acc(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += v)),
            Op::MeanRows(x) => {
                let (r, c) = self.shape(*x);
                self.acc(grads, *x, |gx| {
                    for i in 0..r {
                        for (o, v) in gx[i * c..(i + 1) * c].iter_mut().zip(g) {
                            *o += v / r as f64;
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let c = node.cols;
                self.acc(grads, *x, |gx| {
                    for i in 0..node.rows {
                        let gs: f64 = g[i * c..(i + 1) * c].iter().sum();
                        for j in 0..c {
                            gx[i * c + j] += g[i * c + j] - val[i * c + j].exp() * gs;
                        }
                    }
                });
            }
            Op::Nll(logp, labels) => {
                let c = self.shape(*logp).1;
                let scale = g[0] / labels.len() as f64;
                self.acc(grads, *logp, |gl| {
                    for (b, &l) in labels.iter().enumerate() {
                        gl[b * c + l] -= scale;
                    }
                });
            }
        }
    }
}
