//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node whose inputs already exist on the tape, so
//! node ids are a topological order and the backward sweep simply walks them
//! in reverse.

use std::cell::RefCell;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sparse::CsrMatrix;
use super::tensor::{gemm, Layout, Tensor};
use crate::error::{Result, SencaError};

/// Variance guard used by [`Var::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

const NORM_FLOOR: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul(usize, usize),
    SparseMatMul(Rc<CsrMatrix>, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    MulConst(usize, Rc<Tensor>),
    Elu(usize),
    SoftmaxRows(usize),
    LogSoftmaxOffDiag(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Transpose(usize),
    ConcatCols(usize, usize),
    ConcatRows(usize, usize),
    GatherRows(usize, Rc<Vec<usize>>),
    Sum(usize),
    Mean(usize),
    Mse(usize, usize),
    L2NormalizeRows(usize, Vec<f64>),
    Select(usize, Vec<(usize, usize)>),
    NeighborAttention {
        q: usize,
        k: usize,
        v: usize,
        neighbors: Rc<Vec<usize>>,
        width: usize,
        scale: f64,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recording of a forward computation.
///
/// A tape is single-threaded; build a fresh one per training step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when `var` did not
    /// participate in the loss.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.grads[var.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a trainable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(SencaError::Parameter(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::filled(nodes[loss.id].value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let mut acc = Accumulator {
                nodes: &nodes,
                grads: &mut grads,
            };
            propagate(&node.op, &node.value, &g, &mut acc);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }
}

struct Accumulator<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Tensor>],
}

impl Accumulator<'_> {
    fn wants(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn add(&mut self, id: usize, g: Tensor) {
        if !self.wants(id) {
            return;
        }
        match &mut self.grads[id] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Adds into the gradient slot of `id` through a closure over its buffer.
    fn with_slot(&mut self, id: usize, f: impl FnOnce(&mut [f64])) {
        if !self.wants(id) {
            return;
        }
        let shape = self.nodes[id].value.shape().to_vec();
        let slot = self.grads[id].get_or_insert_with(|| Tensor::zeros(&shape));
        f(slot.data_mut());
    }
}

fn propagate(op: &Op, out: &Tensor, g: &Tensor, acc: &mut Accumulator<'_>) {
    let nodes = acc.nodes;
    let value = |id: usize| -> &Tensor { &nodes[id].value };
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = value(*a).dims2();
            let n = value(*b).cols();
            if acc.wants(*a) {
                let bv = value(*b).data();
                acc.with_slot(*a, |ga| {
                    gemm(m, n, k, g.data(), Layout::Normal, bv, Layout::Transposed, ga, true)
                });
            }
            if acc.wants(*b) {
                let av = value(*a).data();
                acc.with_slot(*b, |gb| {
                    gemm(k, m, n, av, Layout::Transposed, g.data(), Layout::Normal, gb, true)
                });
            }
        }
        Op::SparseMatMul(m, x) => {
            acc.with_slot(*x, |gx| m.transpose_matmul_into(g, gx));
        }
        Op::Add(a, b) => {
            acc.add(*a, g.clone());
            acc.add(*b, g.clone());
        }
        Op::Sub(a, b) => {
            acc.add(*a, g.clone());
            acc.add(*b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let av = value(*a);
            let bv = value(*b);
            acc.add(*a, zip_map(g, bv, |x, y| x * y));
            acc.add(*b, zip_map(g, av, |x, y| x * y));
        }
        Op::AddRow(a, bias) => {
            acc.add(*a, g.clone());
            let cols = g.cols();
            acc.with_slot(*bias, |gb| {
                for row in g.data().chunks(cols) {
                    for (s, v) in gb.iter_mut().zip(row) {
                        *s += v;
                    }
                }
            });
        }
        Op::Scale(a, c) => acc.add(*a, g.map(|v| v * c)),
        Op::MulConst(a, c) => acc.add(*a, zip_map(g, c, |x, y| x * y)),
        Op::Elu(a) => {
            let x = value(*a);
            acc.add(*a, zip_map(g, x, |gv, xv| if xv >= 0.0 { gv } else { gv * xv.exp() }));
        }
        Op::SoftmaxRows(a) => {
            let cols = out.cols();
            let mut gx = g.clone();
            for (grow, yrow) in gx.data_mut().chunks_mut(cols).zip(out.data().chunks(cols)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for (gv, y) in grow.iter_mut().zip(yrow) {
                    *gv = y * (*gv - dot);
                }
            }
            acc.add(*a, gx);
        }
        Op::LogSoftmaxOffDiag(a) => {
            let n = out.cols();
            let mut gx = Tensor::zeros(out.shape());
            for i in 0..n {
                let grow = g.row(i);
                let yrow = out.row(i);
                let gsum: f64 = (0..n).filter(|&j| j != i).map(|j| grow[j]).sum();
                let xrow = gx.row_mut(i);
                for j in (0..n).filter(|&j| j != i) {
                    xrow[j] = grow[j] - yrow[j].exp() * gsum;
                }
            }
            acc.add(*a, gx);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let cols = g.cols();
            let gain_v = value(*gain);
            if acc.wants(*x) {
                let mut gx = Tensor::zeros(g.shape());
                for (r, &istd) in inv_std.iter().enumerate() {
                    let grow = g.row(r);
                    let hrow = xhat.row(r);
                    let gh: Vec<f64> = grow.iter().zip(gain_v.data()).map(|(a, b)| a * b).collect();
                    let mean_gh = gh.iter().sum::<f64>() / cols as f64;
                    let mean_ghh =
                        gh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for ((o, &ghj), &hj) in gx.row_mut(r).iter_mut().zip(&gh).zip(hrow) {
                        *o = istd * (ghj - mean_gh - hj * mean_ghh);
                    }
                }
                acc.add(*x, gx);
            }
            acc.with_slot(*gain, |gg| {
                for (grow, hrow) in g.data().chunks(cols).zip(xhat.data().chunks(cols)) {
                    for ((s, a), b) in gg.iter_mut().zip(grow).zip(hrow) {
                        *s += a * b;
                    }
                }
            });
            acc.with_slot(*bias, |gb| {
                for grow in g.data().chunks(cols) {
                    for (s, a) in gb.iter_mut().zip(grow) {
                        *s += a;
                    }
                }
            });
        }
        Op::Transpose(a) => acc.add(*a, g.transpose()),
        Op::ConcatCols(a, b) => {
            let ca = value(*a).cols();
            let cb = value(*b).cols();
            let rows = g.rows();
            let mut ga = Vec::with_capacity(rows * ca);
            let mut gb = Vec::with_capacity(rows * cb);
            for row in g.data().chunks(ca + cb) {
                ga.extend_from_slice(&row[..ca]);
                gb.extend_from_slice(&row[ca..]);
            }
            let sa = value(*a).shape().to_vec();
            let sb = value(*b).shape().to_vec();
            acc.add(*a, Tensor::new(sa, ga).expect("concat grad shape"));
            acc.add(*b, Tensor::new(sb, gb).expect("concat grad shape"));
        }
        Op::ConcatRows(a, b) => {
            let na = value(*a).numel();
            let sa = value(*a).shape().to_vec();
            let sb = value(*b).shape().to_vec();
            acc.add(*a, Tensor::new(sa, g.data()[..na].to_vec()).expect("concat grad shape"));
            acc.add(*b, Tensor::new(sb, g.data()[na..].to_vec()).expect("concat grad shape"));
        }
        Op::GatherRows(a, idx) => {
            let cols = g.cols();
            acc.with_slot(*a, |ga| {
                for (r, &src) in idx.iter().enumerate() {
                    let grow = &g.data()[r * cols..(r + 1) * cols];
                    for (s, v) in ga[src * cols..(src + 1) * cols].iter_mut().zip(grow) {
                        *s += v;
                    }
                }
            });
        }
        Op::Sum(a) => {
            let shape = value(*a).shape().to_vec();
            acc.add(*a, Tensor::filled(&shape, g.item()));
        }
        Op::Mean(a) => {
            let shape = value(*a).shape().to_vec();
            let n = value(*a).numel() as f64;
            acc.add(*a, Tensor::filled(&shape, g.item() / n));
        }
        Op::Mse(a, b) => {
            let av = value(*a);
            let n = av.numel() as f64;
            let c = 2.0 * g.item() / n;
            let diff = zip_map(av, value(*b), |x, y| c * (x - y));
            acc.add(*b, diff.map(|v| -v));
            acc.add(*a, diff);
        }
        Op::L2NormalizeRows(a, norms) => {
            let cols = out.cols();
            let mut gx = g.clone();
            for ((grow, yrow), &norm) in gx
                .data_mut()
                .chunks_mut(cols)
                .zip(out.data().chunks(cols))
                .zip(norms)
            {
                if norm <= NORM_FLOOR {
                    grow.iter_mut().for_each(|v| *v /= NORM_FLOOR);
                    continue;
                }
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for (gv, y) in grow.iter_mut().zip(yrow) {
                    *gv = (*gv - y * dot) / norm;
                }
            }
            acc.add(*a, gx);
        }
        Op::Select(a, idx) => {
            let cols = value(*a).cols();
            acc.with_slot(*a, |ga| {
                for (gv, &(r, c)) in g.data().iter().zip(idx) {
                    ga[r * cols + c] += gv;
                }
            });
        }
        Op::NeighborAttention {
            q,
            k,
            v,
            neighbors,
            width,
            scale,
            weights,
        } => {
            let e = value(*q).cols();
            let dv = value(*v).cols();
            let qv = value(*q);
            let kv = value(*k);
            let vv = value(*v);
            let n = qv.rows();
            let mut gq = Tensor::zeros(qv.shape());
            let mut gk = Tensor::zeros(kv.shape());
            let mut gvv = Tensor::zeros(vv.shape());
            let mut gw = vec![0.0; *width];
            for i in 0..n {
                let nb = &neighbors[i * width..(i + 1) * width];
                let w = &weights[i * width..(i + 1) * width];
                let gi = g.row(i);
                for (j, &src) in nb.iter().enumerate() {
                    gw[j] = dot(gi, vv.row(src));
                    for (s, x) in gvv.row_mut(src).iter_mut().zip(gi) {
                        *s += w[j] * x;
                    }
                }
                let wgw: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
                let qi = qv.row(i).to_vec();
                for (j, &src) in nb.iter().enumerate() {
                    let gs = w[j] * (gw[j] - wgw) * scale;
                    if gs == 0.0 {
                        continue;
                    }
                    for (s, x) in gq.row_mut(i).iter_mut().zip(kv.row(src)) {
                        *s += gs * x;
                    }
                    for (s, x) in gk.row_mut(src).iter_mut().zip(&qi) {
                        *s += gs * x;
                    }
                }
            }
            debug_assert_eq!(gq.cols(), e);
            debug_assert_eq!(gvv.cols(), dv);
            acc.add(*q, gq);
            acc.add(*k, gk);
            acc.add(*v, gvv);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map preserves shape")
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(SencaError::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Inverted-dropout keep mask, already scaled by `1 / (1 - p)`.
pub fn dropout_mask(shape: &[usize], p: f64, seed: u64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(SencaError::Parameter(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - p);
    let mut mask = Tensor::zeros(shape);
    for m in mask.data_mut() {
        *m = if rng.random::<f64>() < p { 0.0 } else { keep };
    }
    Ok(mask)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, op, needs)
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let needs = self.tape.needs(&[self.id, other.id]);
        self.tape.push(value, op, needs)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().matmul(&other.value())?;
        Ok(self.binary(other, out, Op::MatMul(self.id, other.id)))
    }

    /// `m · self` for a constant sparse `m`.
    pub fn sparse_lmul(self, m: Rc<CsrMatrix>) -> Result<Var<'t>> {
        let out = m.matmul(&self.value())?;
        Ok(self.unary(out, Op::SparseMatMul(m, self.id)))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let out = zip_map(&a, &b, |x, y| x + y);
        Ok(self.binary(other, out, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let out = zip_map(&a, &b, |x, y| x - y);
        Ok(self.binary(other, out, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let out = zip_map(&a, &b, |x, y| x * y);
        Ok(self.binary(other, out, Op::Mul(self.id, other.id)))
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), bias.value());
        let cols = a.cols();
        if b.numel() != cols {
            return Err(SencaError::shape("add_row", a.shape(), b.shape()));
        }
        let mut out = (*a).clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (x, y) in row.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        Ok(self.binary(bias, out, Op::AddRow(self.id, bias.id)))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v * c);
        self.unary(out, Op::Scale(self.id, c))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(self, c: Tensor) -> Result<Var<'t>> {
        let a = self.value();
        same_shape("mul_const", &a, &c)?;
        let out = zip_map(&a, &c, |x, y| x * y);
        Ok(self.unary(out, Op::MulConst(self.id, Rc::new(c))))
    }

    pub fn elu(self) -> Var<'t> {
        let out = self.value().map(|x| if x >= 0.0 { x } else { x.exp_m1() });
        self.unary(out, Op::Elu(self.id))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(self) -> Var<'t> {
        let a = self.value();
        let cols = a.cols();
        let mut out = (*a).clone();
        for row in out.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
        self.unary(out, Op::SoftmaxRows(self.id))
    }

    /// Row-wise log-softmax of a square matrix that ignores the diagonal.
    /// Diagonal outputs are 0 and carry no gradient.
    pub fn log_softmax_off_diag(self) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = a.dims2();
        if r != c || r < 2 {
            return Err(SencaError::shape("log_softmax_off_diag", a.shape(), &[r, r]));
        }
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let row = a.row(i);
            let max = (0..c)
                .filter(|&j| j != i)
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + (0..c)
                    .filter(|&j| j != i)
                    .map(|j| (row[j] - max).exp())
                    .sum::<f64>()
                    .ln();
            let orow = out.row_mut(i);
            for j in (0..c).filter(|&j| j != i) {
                orow[j] = row[j] - lse;
            }
        }
        Ok(self.unary(out, Op::LogSoftmaxOffDiag(self.id)))
    }

    /// Per-row normalisation to zero mean and unit variance followed by an
    /// elementwise affine map.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = x.dims2();
        let (gv, bv) = (gain.value(), bias.value());
        if gv.numel() != cols || bv.numel() != cols {
            return Err(SencaError::shape("layer_norm", x.shape(), gv.shape()));
        }
        let mut xhat = Tensor::zeros(&[rows, cols]);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (h, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *h = (v - mean) * istd;
            }
            inv_std.push(istd);
        }
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for ((o, g), b) in row.iter_mut().zip(gv.data()).zip(bv.data()) {
                *o = *o * g + b;
            }
        }
        let needs = self.tape.needs(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout(self, p: f64, seed: u64, training: bool) -> Result<Var<'t>> {
        let mask = dropout_mask(&self.shape(), p, seed)?;
        if !training || p == 0.0 {
            return Ok(self);
        }
        self.mul_const(mask)
    }

    pub fn transpose(self) -> Var<'t> {
        let out = self.value().transpose();
        self.unary(out, Op::Transpose(self.id))
    }

    pub fn concat_cols(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (ra, ca) = a.dims2();
        let (rb, cb) = b.dims2();
        if ra != rb {
            return Err(SencaError::shape("concat_cols", a.shape(), b.shape()));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(a.row(r));
            data.extend_from_slice(b.row(r));
        }
        let out = Tensor::matrix(ra, ca + cb, data)?;
        Ok(self.binary(other, out, Op::ConcatCols(self.id, other.id)))
    }

    pub fn concat_rows(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (ra, ca) = a.dims2();
        let (rb, cb) = b.dims2();
        if ca != cb {
            return Err(SencaError::shape("concat_rows", a.shape(), b.shape()));
        }
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        let out = Tensor::matrix(ra + rb, ca, data)?;
        Ok(self.binary(other, out, Op::ConcatRows(self.id, other.id)))
    }

    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if let Some(&bad) = idx.iter().find(|&&i| i >= a.rows()) {
            return Err(SencaError::Bounds(format!(
                "row {bad} of a {}-row matrix",
                a.rows()
            )));
        }
        let out = a.select_rows(idx);
        Ok(self.unary(out, Op::GatherRows(self.id, Rc::new(idx.to_vec()))))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let a = self.value();
        let m = a.sum() / a.numel() as f64;
        self.unary(Tensor::scalar(m), Op::Mean(self.id))
    }

    /// Mean squared difference over all elements.
    pub fn mse(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mse", &a, &b)?;
        let m = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / a.numel() as f64;
        Ok(self.binary(other, Tensor::scalar(m), Op::Mse(self.id, other.id)))
    }

    pub fn l2_normalize_rows(self) -> Var<'t> {
        let a = self.value();
        let cols = a.cols();
        let mut out = (*a).clone();
        let mut norms = Vec::with_capacity(a.rows());
        for row in out.data_mut().chunks_mut(cols) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = norm.max(NORM_FLOOR);
            row.iter_mut().for_each(|v| *v /= d);
            norms.push(norm);
        }
        self.unary(out, Op::L2NormalizeRows(self.id, norms))
    }

    /// Picks individual entries into an `len × 1` column.
    pub fn select(self, idx: &[(usize, usize)]) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = a.dims2();
        let mut data = Vec::with_capacity(idx.len());
        for &(i, j) in idx {
            if i >= r || j >= c {
                return Err(SencaError::Bounds(format!("entry ({i}, {j}) of {r}x{c}")));
            }
            data.push(a.get(i, j));
        }
        let out = Tensor::matrix(idx.len(), 1, data)?;
        Ok(self.unary(out, Op::Select(self.id, idx.to_vec())))
    }

    /// Attention of each query row over a fixed-width list of key/value rows.
    ///
    /// `neighbors` holds `width` row indices per query, row-major. Output row
    /// `i` is `softmax_j(q_i · k_{n(i,j)} · scale) v_{n(i,j)}` summed over `j`.
    pub fn neighbor_attention(
        self,
        keys: Var<'t>,
        values: Var<'t>,
        neighbors: Rc<Vec<usize>>,
        width: usize,
        scale: f64,
    ) -> Result<Var<'t>> {
        let (q, k, v) = (self.value(), keys.value(), values.value());
        let n = q.rows();
        if q.cols() != k.cols() || k.rows() != v.rows() {
            return Err(SencaError::shape("neighbor_attention", q.shape(), k.shape()));
        }
        if width == 0 || neighbors.len() != n * width {
            return Err(SencaError::shape(
                "neighbor_attention",
                &[n, width],
                &[neighbors.len()],
            ));
        }
        if let Some(&bad) = neighbors.iter().find(|&&j| j >= k.rows()) {
            return Err(SencaError::Bounds(format!("neighbor index {bad}")));
        }
        let dv = v.cols();
        let mut out = Tensor::zeros(&[n, dv]);
        let mut weights = vec![0.0; n * width];
        for i in 0..n {
            let nb = &neighbors[i * width..(i + 1) * width];
            let w = &mut weights[i * width..(i + 1) * width];
            for (wj, &src) in w.iter_mut().zip(nb) {
                *wj = dot(q.row(i), k.row(src)) * scale;
            }
            softmax_in_place(w);
            let orow = out.row_mut(i);
            for (&wj, &src) in w.iter().zip(nb) {
                for (o, x) in orow.iter_mut().zip(v.row(src)) {
                    *o += wj * x;
                }
            }
        }
        let needs = self.tape.needs(&[self.id, keys.id, values.id]);
        Ok(self.tape.push(
            out,
            Op::NeighborAttention {
                q: self.id,
                k: keys.id,
                v: values.id,
                neighbors,
                width,
                scale,
                weights,
            },
            needs,
        ))
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
