//! Define-by-run compute tape with reverse-mode differentiation.
//!
//! Operations are evaluated eagerly as they are recorded; the tape keeps
//! every node in construction order, which is also a topological order.
//! `backward` runs reverse accumulation from a scalar loss. Leaves can be
//! re-assigned (`set_leaf`, `nudge_leaf`) and the whole tape re-evaluated
//! with `replay`, which is what the finite-difference checker relies on.
//! Stochastic nodes (dropout) freeze their mask at recording time, so a
//! replay reproduces the forward pass exactly.
//!
//! Storage is three parallel vectors (ops, values, gradients) so the
//! backward pass can read input values while accumulating into earlier
//! gradients without copying tensors.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

use super::tensor::Tensor;
use super::Real;

/// Variance guard for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    /// Elementwise add; rhs may be a `1 x c` row broadcast over rows.
    Add(Var, Var),
    Mul(Var, Var),
    /// `y = mul * x + add` with recording-time constants.
    AffineConst {
        x: Var,
        mul: f64,
        add: f64,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
        end: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
        end: usize,
    },
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    /// Row-wise softmax over the last axis.
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    /// Inverted dropout; mask entries are 0 or 1/(1-rate), frozen at
    /// recording time.
    Dropout {
        x: Var,
        mask: Vec<S>,
    },
    /// Per-row negative log-likelihood of the target id under
    /// softmax(logits); output shape is `rows x 1`.
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
    },
    SumAll(Var),
    MeanRows(Var),
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "multiply",
            Op::AffineConst { .. } => "affine_const",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Transpose(..) => "transpose",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding_lookup",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy_with_logits",
            Op::SumAll(..) => "sum_all",
            Op::MeanRows(..) => "mean_rows",
        }
    }
}

pub struct Tape<S: Real> {
    ops: Vec<Op<S>>,
    values: Vec<Tensor<S>>,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.ops.len()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.ops.push(Op::Leaf);
        self.values.push(value);
        self.grads.push(None);
        Var(self.ops.len() - 1)
    }

    /// Replaces a leaf value; the new tensor must keep the shape.
    pub fn set_leaf(&mut self, v: Var, value: Tensor<S>) -> Result<()> {
        if !matches!(self.ops[v.0], Op::Leaf) {
            return Err(Error::Domain(format!("node {} is not a leaf", v.0)));
        }
        if self.values[v.0].shape() != value.shape() {
            return Err(Error::Domain(format!(
                "leaf {} has shape {:?}, refusing {:?}",
                v.0,
                self.values[v.0].shape(),
                value.shape()
            )));
        }
        self.values[v.0] = value;
        Ok(())
    }

    /// Adds `delta` to one component of a leaf (finite differences).
    pub fn nudge_leaf(&mut self, v: Var, index: usize, delta: f64) {
        debug_assert!(matches!(self.ops[v.0], Op::Leaf));
        let d = self.values[v.0].data_mut();
        d[index] = S::from_f64(d[index].as_f64() + delta);
    }

    /// Recomputes every non-leaf value in topological (recording) order.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.ops.len() {
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let value = compute(&self.ops[i], &self.values).map_err(|msg| Error::Shape {
                node: i,
                op: self.ops[i].name(),
                msg,
            })?;
            self.values[i] = value;
        }
        Ok(())
    }

    fn push(&mut self, op: Op<S>) -> Result<Var> {
        let value = compute(&op, &self.values).map_err(|msg| Error::Shape {
            node: self.ops.len(),
            op: op.name(),
            msg,
        })?;
        self.ops.push(op);
        self.values.push(value);
        self.grads.push(None);
        Ok(Var(self.ops.len() - 1))
    }

    // ---- operation constructors -----------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn affine_const(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        self.push(Op::AffineConst { x, mul, add })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine_const(x, c, 0.0)
    }

    /// `1 - x`, used for GRU state interpolation.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.affine_const(x, -1.0, 1.0)
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Result<Var> {
        self.push(Op::ConcatRows(parts))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::ConcatCols(a, b))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceRows { x, start, end })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceCols { x, start, end })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Transpose(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Tanh(x))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Softmax(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.push(Op::LayerNorm { x, gain, bias })
    }

    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        self.push(Op::Embedding {
            table,
            ids: ids.to_vec(),
        })
    }

    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut SplitMix64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Domain(format!("dropout rate {rate} outside [0,1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = S::from_f64(1.0 / (1.0 - rate));
        let mask = (0..self.value(x).len())
            .map(|_| {
                if rng.next_f64() < rate {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        self.push(Op::Dropout { x, mask })
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        self.push(Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
        })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.push(Op::SumAll(x))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.push(Op::MeanRows(x))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse-mode accumulation from a scalar loss into every reachable
    /// node. Previous gradients are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].shape() != [1, 1] {
            return Err(Error::Domain(format!(
                "loss must be scalar, has shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::scalar(S::one()));

        let ops = &self.ops;
        let values = &self.values;
        for i in (0..ops.len()).rev() {
            // Ops reference only earlier nodes; the split lets us read the
            // output gradient while accumulating into input gradients.
            let (earlier, later) = self.grads.split_at_mut(i);
            let Some(g) = later[0].as_ref() else { continue };
            match &ops[i] {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&values[a.0], &values[b.0]);
                    {
                        // ga[r][k] += dot(g.row(r), b.row(k))
                        let ga = slot(earlier, values, *a);
                        for r in 0..ga.rows() {
                            let grow = g.row(r);
                            let garow = ga.row_mut(r);
                            for (k, o) in garow.iter_mut().enumerate() {
                                let mut acc = S::zero();
                                for (gv, bvk) in grow.iter().zip(bv.row(k)) {
                                    acc = acc + *gv * *bvk;
                                }
                                *o = *o + acc;
                            }
                        }
                    }
                    {
                        // gb[k][j] += sum_r a[r][k] * g[r][j]
                        let gb = slot(earlier, values, *b);
                        for r in 0..av.rows() {
                            let arow = av.row(r);
                            let grow = g.row(r);
                            for (k, &ak) in arow.iter().enumerate() {
                                if ak == S::zero() {
                                    continue;
                                }
                                for (o, &gv) in gb.row_mut(k).iter_mut().zip(grow) {
                                    *o = *o + ak * gv;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(slot(earlier, values, *a), g.data());
                    let gb = slot(earlier, values, *b);
                    if gb.shape() == g.shape() {
                        accumulate(gb, g.data());
                    } else {
                        // Row-broadcast bias: reduce over rows.
                        for r in 0..g.rows() {
                            for (o, &gv) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                                *o = *o + gv;
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&values[a.0], &values[b.0]);
                    {
                        let ga = slot(earlier, values, *a);
                        for ((o, &gv), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data())
                        {
                            *o = *o + gv * x;
                        }
                    }
                    {
                        let gb = slot(earlier, values, *b);
                        for ((o, &gv), &x) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data())
                        {
                            *o = *o + gv * x;
                        }
                    }
                }
                Op::AffineConst { x, mul, .. } => {
                    let m = S::from_f64(*mul);
                    let gx = slot(earlier, values, *x);
                    for (o, &gv) in gx.data_mut().iter_mut().zip(g.data()) {
                        *o = *o + gv * m;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut row = 0;
                    for p in parts {
                        let rows = values[p.0].rows();
                        let gp = slot(earlier, values, *p);
                        for r in 0..rows {
                            for (o, &gv) in gp.row_mut(r).iter_mut().zip(g.row(row + r)) {
                                *o = *o + gv;
                            }
                        }
                        row += rows;
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ac = values[a.0].cols();
                    {
                        let ga = slot(earlier, values, *a);
                        for r in 0..ga.rows() {
                            for (o, &gv) in ga.row_mut(r).iter_mut().zip(&g.row(r)[..ac]) {
                                *o = *o + gv;
                            }
                        }
                    }
                    {
                        let gb = slot(earlier, values, *b);
                        for r in 0..gb.rows() {
                            for (o, &gv) in gb.row_mut(r).iter_mut().zip(&g.row(r)[ac..]) {
                                *o = *o + gv;
                            }
                        }
                    }
                }
                Op::SliceRows { x, start, .. } => {
                    let gx = slot(earlier, values, *x);
                    for r in 0..g.rows() {
                        for (o, &gv) in gx.row_mut(start + r).iter_mut().zip(g.row(r)) {
                            *o = *o + gv;
                        }
                    }
                }
                Op::SliceCols { x, start, .. } => {
                    let gx = slot(earlier, values, *x);
                    for r in 0..g.rows() {
                        let grow = g.row(r);
                        let xrow = gx.row_mut(r);
                        for (j, &gv) in grow.iter().enumerate() {
                            xrow[start + j] = xrow[start + j] + gv;
                        }
                    }
                }
                Op::Transpose(x) => {
                    let gx = slot(earlier, values, *x);
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            let cur = gx.get(c, r);
                            gx.set(c, r, cur + g.get(r, c));
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let y = &values[i];
                    let gx = slot(earlier, values, *x);
                    for ((o, &gv), &yv) in gx.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o = *o + gv * yv * (S::one() - yv);
                    }
                }
                Op::Tanh(x) => {
                    let y = &values[i];
                    let gx = slot(earlier, values, *x);
                    for ((o, &gv), &yv) in gx.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o = *o + gv * (S::one() - yv * yv);
                    }
                }
                Op::Softmax(x) => {
                    let y = &values[i];
                    let gx = slot(earlier, values, *x);
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let mut dot = S::zero();
                        for (&yv, &gv) in yr.iter().zip(gr) {
                            dot = dot + yv * gv;
                        }
                        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = *o + yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let xv = &values[x.0];
                    let gainv = &values[gain.0];
                    let eps = S::from_f64(LAYER_NORM_EPS);
                    let d = xv.cols();
                    let inv_d = S::from_f64(1.0 / d as f64);
                    // Per-row standardized values and inverse deviations.
                    let mut xhat = xv.clone();
                    let mut invs = Vec::with_capacity(xv.rows());
                    for r in 0..xv.rows() {
                        let row = xhat.row_mut(r);
                        let (mean, var) = mean_var(row);
                        let inv = S::one() / (var + eps).sqrt();
                        invs.push(inv);
                        for v in row.iter_mut() {
                            *v = (*v - mean) * inv;
                        }
                    }
                    {
                        let gg = slot(earlier, values, *gain);
                        for r in 0..xv.rows() {
                            for (j, o) in gg.row_mut(0).iter_mut().enumerate() {
                                *o = *o + g.get(r, j) * xhat.get(r, j);
                            }
                        }
                    }
                    {
                        let gb = slot(earlier, values, *bias);
                        for r in 0..xv.rows() {
                            for (o, &x) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                                *o = *o + x;
                            }
                        }
                    }
                    {
                        let gx = slot(earlier, values, *x);
                        for r in 0..xv.rows() {
                            let inv = invs[r];
                            let mut mean_dxhat = S::zero();
                            let mut mean_dxhat_xhat = S::zero();
                            for j in 0..d {
                                let dxh = g.get(r, j) * gainv.data()[j];
                                mean_dxhat = mean_dxhat + dxh;
                                mean_dxhat_xhat = mean_dxhat_xhat + dxh * xhat.get(r, j);
                            }
                            mean_dxhat = mean_dxhat * inv_d;
                            mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
                            for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                                let dxh = g.get(r, j) * gainv.data()[j];
                                *o = *o
                                    + inv * (dxh - mean_dxhat - xhat.get(r, j) * mean_dxhat_xhat);
                            }
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    let gt = slot(earlier, values, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &gv) in gt.row_mut(id as usize).iter_mut().zip(g.row(r)) {
                            *o = *o + gv;
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    let gx = slot(earlier, values, *x);
                    for ((o, &gv), &m) in gx.data_mut().iter_mut().zip(g.data()).zip(mask) {
                        *o = *o + gv * m;
                    }
                }
                Op::CrossEntropy { logits, targets } => {
                    let lv = &values[logits.0];
                    let gl = slot(earlier, values, *logits);
                    let mut probs: Vec<S> = Vec::new();
                    for (r, &target) in targets.iter().enumerate() {
                        let gr = g.data()[r];
                        probs.clear();
                        probs.extend_from_slice(lv.row(r));
                        softmax_row(&mut probs);
                        for (j, o) in gl.row_mut(r).iter_mut().enumerate() {
                            let indicator = if j == target as usize {
                                S::one()
                            } else {
                                S::zero()
                            };
                            *o = *o + gr * (probs[j] - indicator);
                        }
                    }
                }
                Op::SumAll(x) => {
                    let gs = g.item();
                    let gx = slot(earlier, values, *x);
                    for o in gx.data_mut() {
                        *o = *o + gs;
                    }
                }
                Op::MeanRows(x) => {
                    let gx = slot(earlier, values, *x);
                    let inv = S::from_f64(1.0 / gx.rows() as f64);
                    for r in 0..gx.rows() {
                        for (o, &gv) in gx.row_mut(r).iter_mut().zip(g.row(0)) {
                            *o = *o + gv * inv;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Gradient accumulator of an input node, allocated on first touch.
fn slot<'a, S: Real>(
    grads: &'a mut [Option<Tensor<S>>],
    values: &[Tensor<S>],
    v: Var,
) -> &'a mut Tensor<S> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(values[v.0].shape()))
}

// ---- forward ------------------------------------------------------------

fn compute<S: Real>(op: &Op<S>, values: &[Tensor<S>]) -> std::result::Result<Tensor<S>, String> {
    let val = |v: &Var| &values[v.0];
    match op {
        Op::Leaf => unreachable!("leaves are never recomputed"),
        Op::MatMul(a, b) => {
            let (a, b) = (val(a), val(b));
            if a.cols() != b.rows() {
                return Err(format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()));
            }
            Ok(matmul(a, b))
        }
        Op::Add(a, b) => {
            let (a, b) = (val(a), val(b));
            if a.shape() == b.shape() {
                let mut out = a.clone();
                for (o, &x) in out.data_mut().iter_mut().zip(b.data()) {
                    *o = *o + x;
                }
                Ok(out)
            } else if b.rows() == 1 && b.cols() == a.cols() {
                let mut out = a.clone();
                let bias = b.row(0);
                for r in 0..out.rows() {
                    for (o, &x) in out.row_mut(r).iter_mut().zip(bias) {
                        *o = *o + x;
                    }
                }
                Ok(out)
            } else {
                Err(format!("cannot add {:?} and {:?}", a.shape(), b.shape()))
            }
        }
        Op::Mul(a, b) => {
            let (a, b) = (val(a), val(b));
            if a.shape() != b.shape() {
                return Err(format!(
                    "cannot multiply elementwise {:?} and {:?}",
                    a.shape(),
                    b.shape()
                ));
            }
            let mut out = a.clone();
            for (o, &x) in out.data_mut().iter_mut().zip(b.data()) {
                *o = *o * x;
            }
            Ok(out)
        }
        Op::AffineConst { x, mul, add } => {
            let (m, a) = (S::from_f64(*mul), S::from_f64(*add));
            Ok(val(x).map(|v| v * m + a))
        }
        Op::ConcatRows(parts) => {
            if parts.is_empty() {
                return Err("concat of zero parts".into());
            }
            let cols = val(&parts[0]).cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let t = val(p);
                if t.cols() != cols {
                    return Err(format!(
                        "row concat needs equal widths, got {} and {}",
                        cols,
                        t.cols()
                    ));
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Ok(Tensor::from_vec(&[rows, cols], data).expect("sized above"))
        }
        Op::ConcatCols(a, b) => {
            let (a, b) = (val(a), val(b));
            if a.rows() != b.rows() {
                return Err(format!(
                    "column concat needs equal heights, got {} and {}",
                    a.rows(),
                    b.rows()
                ));
            }
            let cols = a.cols() + b.cols();
            let mut out = Tensor::zeros(&[a.rows(), cols]);
            for r in 0..a.rows() {
                out.row_mut(r)[..a.cols()].copy_from_slice(a.row(r));
                out.row_mut(r)[a.cols()..].copy_from_slice(b.row(r));
            }
            Ok(out)
        }
        Op::SliceRows { x, start, end } => {
            let t = val(x);
            if *end > t.rows() || start >= end {
                return Err(format!(
                    "row slice {}..{} out of bounds for {:?}",
                    start,
                    end,
                    t.shape()
                ));
            }
            let mut data = Vec::with_capacity((end - start) * t.cols());
            for r in *start..*end {
                data.extend_from_slice(t.row(r));
            }
            Ok(Tensor::from_vec(&[end - start, t.cols()], data).expect("sized above"))
        }
        Op::SliceCols { x, start, end } => {
            let t = val(x);
            if *end > t.cols() || start >= end {
                return Err(format!(
                    "column slice {}..{} out of bounds for {:?}",
                    start,
                    end,
                    t.shape()
                ));
            }
            let mut out = Tensor::zeros(&[t.rows(), end - start]);
            for r in 0..t.rows() {
                out.row_mut(r).copy_from_slice(&t.row(r)[*start..*end]);
            }
            Ok(out)
        }
        Op::Transpose(x) => {
            let t = val(x);
            let mut out = Tensor::zeros(&[t.cols(), t.rows()]);
            for r in 0..t.rows() {
                for c in 0..t.cols() {
                    out.set(c, r, t.get(r, c));
                }
            }
            Ok(out)
        }
        Op::Sigmoid(x) => Ok(val(x).map(|v| {
            let one = S::one();
            one / (one + (-v).exp())
        })),
        Op::Tanh(x) => Ok(val(x).map(|v| v.tanh())),
        Op::Softmax(x) => {
            let mut out = val(x).clone();
            for r in 0..out.rows() {
                softmax_row(out.row_mut(r));
            }
            Ok(out)
        }
        Op::LayerNorm { x, gain, bias } => {
            let (t, g, b) = (val(x), val(gain), val(bias));
            if g.shape() != [1, t.cols()] || b.shape() != [1, t.cols()] {
                return Err(format!(
                    "layer_norm over {:?} needs 1x{} gain/bias, got {:?}/{:?}",
                    t.shape(),
                    t.cols(),
                    g.shape(),
                    b.shape()
                ));
            }
            let mut out = t.clone();
            let eps = S::from_f64(LAYER_NORM_EPS);
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let (mean, var) = mean_var(row);
                let inv = S::one() / (var + eps).sqrt();
                for (i, v) in row.iter_mut().enumerate() {
                    *v = g.data()[i] * (*v - mean) * inv + b.data()[i];
                }
            }
            Ok(out)
        }
        Op::Embedding { table, ids } => {
            let t = val(table);
            let mut out = Tensor::zeros(&[ids.len(), t.cols()]);
            for (r, &id) in ids.iter().enumerate() {
                if id as usize >= t.rows() {
                    return Err(format!(
                        "embedding id {} outside table with {} rows",
                        id,
                        t.rows()
                    ));
                }
                out.row_mut(r).copy_from_slice(t.row(id as usize));
            }
            Ok(out)
        }
        Op::Dropout { x, mask } => {
            let t = val(x);
            if t.len() != mask.len() {
                return Err("dropout mask length mismatch".into());
            }
            let mut out = t.clone();
            for (o, &m) in out.data_mut().iter_mut().zip(mask) {
                *o = *o * m;
            }
            Ok(out)
        }
        Op::CrossEntropy { logits, targets } => {
            let t = val(logits);
            if t.rows() != targets.len() {
                return Err(format!(
                    "{} logit rows for {} targets",
                    t.rows(),
                    targets.len()
                ));
            }
            let mut out = Tensor::zeros(&[targets.len(), 1]);
            for (r, &target) in targets.iter().enumerate() {
                if target as usize >= t.cols() {
                    return Err(format!(
                        "target id {} outside vocabulary of {}",
                        target,
                        t.cols()
                    ));
                }
                let row = t.row(r);
                let lse = log_sum_exp(row);
                out.data_mut()[r] = lse - row[target as usize];
            }
            Ok(out)
        }
        Op::SumAll(x) => {
            let mut acc = S::zero();
            for &v in val(x).data() {
                acc = acc + v;
            }
            Ok(Tensor::scalar(acc))
        }
        Op::MeanRows(x) => {
            let t = val(x);
            let inv = S::from_f64(1.0 / t.rows() as f64);
            let mut out = Tensor::zeros(&[1, t.cols()]);
            for r in 0..t.rows() {
                for (o, &v) in out.row_mut(0).iter_mut().zip(t.row(r)) {
                    *o = *o + v;
                }
            }
            for o in out.data_mut() {
                *o = *o * inv;
            }
            Ok(out)
        }
    }
}

fn accumulate<S: Real>(dst: &mut Tensor<S>, src: &[S]) {
    for (o, &v) in dst.data_mut().iter_mut().zip(src) {
        *o = *o + v;
    }
}

pub(crate) fn matmul<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, n) = (a.rows(), b.cols());
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (k, &av) in arow.iter().enumerate() {
            let brow = b.row(k);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// In-place row softmax with max subtraction.
pub(crate) fn softmax_row<S: Real>(row: &mut [S]) {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub(crate) fn log_sum_exp<S: Real>(row: &[S]) -> S {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for &v in row {
        sum = sum + (v - max).exp();
    }
    max + sum.ln()
}

fn mean_var<S: Real>(row: &[S]) -> (S, S) {
    let inv = S::from_f64(1.0 / row.len() as f64);
    let mut mean = S::zero();
    for &v in row {
        mean = mean + v;
    }
    mean = mean * inv;
    let mut var = S::zero();
    for &v in row {
        let d = v - mean;
        var = var + d * d;
    }
    (mean, var * inv)
}
