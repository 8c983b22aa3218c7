//! Dynamic reverse-mode tape.
//!
//! Every forward operation appends a node holding its output value and the
//! operand references needed by its backward rule. `backward` walks the
//! nodes in reverse insertion order exactly once.

use super::tensor::{matmul_at_acc, matmul_bt_acc, matmul_into, Tensor};
use crate::error::{contract_err, shape_err, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics mode for [`Tape::batch_norm`].
#[derive(Clone, Debug)]
pub enum NormStats<'a> {
    /// Normalize with the statistics of the valid rows in this call.
    Batch,
    /// Normalize with fixed (running) statistics.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    AddRow(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    MulConst {
        x: Var,
        factors: Vec<f64>,
    },
    MatMul(Var, Var),
    Transpose(Var),
    OuterSum(Var, Var),
    Softmax {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    MaskedSoftmaxRows {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log {
        x: Var,
        floor: f64,
    },
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Concat {
        parts: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
        inner: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        axis_len: usize,
        start: usize,
        inner: usize,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    Reshape(Var),
    BatchNorm(Box<BatchNormCache>),
    IouLoss {
        pred: Var,
        gt: Vec<(f64, f64)>,
    },
}

#[derive(Debug)]
struct BatchNormCache {
    x: Var,
    gamma: Var,
    beta: Var,
    rows: Vec<bool>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Result of a batch-norm forward pass: the output and, in batch mode, the
/// per-feature mean and population variance used.
pub struct NormOutput {
    pub out: Var,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    kink_margin: f64,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest distance of any differentiable-path operand to a point where
    /// the op is not smooth (relu kink, min/max tie, interval boundary).
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    fn note_kink(&mut self, needs_grad: bool, margin: f64) {
        if needs_grad && margin < self.kink_margin {
            self.kink_margin = margin;
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Copy of `x` with no path back to its inputs.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Rows and columns of a matrix-valued node.
    pub fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, op, ng))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        let ng = self.ng(x);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "minimum", f64::min, Op::Minimum(a, b))?;
        self.note_pair_margin(a, b, out);
        Ok(out)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "maximum", f64::max, Op::Maximum(a, b))?;
        self.note_pair_margin(a, b, out);
        Ok(out)
    }

    fn note_pair_margin(&mut self, a: Var, b: Var, out: Var) {
        let m = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y).abs())
            .fold(f64::INFINITY, f64::min);
        self.note_kink(self.ng(out), m);
    }

    /// Adds a length-`d` vector to every row of an `n×d` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, d) = self.dims2(x)?;
        if self.value(row).numel() != d {
            return Err(shape_err!(
                "add_row: row of {} values for {d} columns",
                self.value(row).numel()
            ));
        }
        let r = self.data(row);
        let mut out = self.data(x).to_vec();
        for i in 0..n {
            for (o, b) in out[i * d..(i + 1) * d].iter_mut().zip(r) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(Tensor::from_parts(vec![n, d], out), Op::AddRow(x, row), ng))
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    /// Elementwise product with a constant array (dropout and row masks).
    pub fn mul_const(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        if factors.len() != self.value(x).numel() {
            return Err(shape_err!(
                "mul_const: {} factors for {} values",
                factors.len(),
                self.value(x).numel()
            ));
        }
        let data = self
            .data(x)
            .iter()
            .zip(&factors)
            .map(|(a, b)| a * b)
            .collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        let ng = self.ng(x);
        Ok(self.push(value, Op::MulConst { x, factors }, ng))
    }

    /// Zeroes the rows of an `n×d` matrix whose mask entry is false.
    pub fn mask_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (n, d) = self.dims2(x)?;
        if mask.len() != n {
            return Err(shape_err!("mask_rows: mask of {} for {n} rows", mask.len()));
        }
        if mask.iter().all(|&m| m) {
            return Ok(x);
        }
        let factors = mask
            .iter()
            .flat_map(|&m| std::iter::repeat(if m { 1.0 } else { 0.0 }).take(d))
            .collect();
        self.mul_const(x, factors)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(shape_err!("matmul: {m}x{k} · {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(a), self.data(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        let src = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), ng))
    }

    /// `out[i][j] = col[i] + row[j]` for vectors of length n and m.
    pub fn outer_sum(&mut self, col: Var, row: Var) -> Var {
        let n = self.value(col).numel();
        let m = self.value(row).numel();
        let (c, r) = (self.data(col), self.data(row));
        let mut out = Vec::with_capacity(n * m);
        for &ci in c {
            out.extend(r.iter().map(|&rj| ci + rj));
        }
        let ng = self.ng(col) || self.ng(row);
        self.push(
            Tensor::from_parts(vec![n, m], out),
            Op::OuterSum(col, row),
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= shape.len() {
            return Err(shape_err!("axis {axis} out of range for shape {shape:?}"));
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        Ok((outer, shape[axis], inner))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = Self::axis_split(self.shape(x), axis)?;
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let max = (0..len)
                    .map(|a| src[idx(a)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..len {
                    let e = (src[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    out[idx(a)] /= total;
                }
            }
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        let ng = self.ng(x);
        Ok(self.push(
            value,
            Op::Softmax {
                x,
                outer,
                axis_len: len,
                inner,
            },
            ng,
        ))
    }

    /// Row-wise softmax of an `n×m` matrix over the columns whose mask is
    /// true; excluded columns get probability exactly 0.
    pub fn masked_softmax_rows(&mut self, x: Var, col_mask: Option<&[bool]>) -> Result<Var> {
        let (n, m) = self.dims2(x)?;
        if let Some(mask) = col_mask {
            if mask.len() != m {
                return Err(shape_err!("softmax mask of {} for {m} columns", mask.len()));
            }
            if !mask.iter().any(|&b| b) {
                return Err(contract_err!("softmax row has no valid entries"));
            }
        }
        let keep = |j: usize| col_mask.map_or(true, |mk| mk[j]);
        let src = self.data(x);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &src[i * m..(i + 1) * m];
            let max = (0..m)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in (0..m).filter(|&j| keep(j)) {
                let e = (row[j] - max).exp();
                out[i * m + j] = e;
                total += e;
            }
            for v in &mut out[i * m..(i + 1) * m] {
                *v /= total;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, m], out),
            Op::MaskedSoftmaxRows { x },
            ng,
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.unary(
            x,
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu { x, slope },
        );
        self.note_abs_margin(x);
        out
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.unary(x, |v| v.max(0.0), Op::Relu(x));
        self.note_abs_margin(x);
        out
    }

    fn note_abs_margin(&mut self, x: Var) {
        let m = self
            .data(x)
            .iter()
            .map(|v| v.abs())
            .fold(f64::INFINITY, f64::min);
        self.note_kink(self.ng(x), m);
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// Natural log with inputs clamped from below at `floor`.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, |v| v.max(floor).ln(), Op::Log { x, floor })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.unary(x, f64::abs, Op::Abs(x));
        self.note_abs_margin(x);
        out
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    pub fn l1_norm(&mut self, x: Var) -> Var {
        let a = self.abs(x);
        self.sum(a)
    }

    /// Concatenation along `axis`; other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err!("concat of nothing"))?;
        let base = self.shape(first).to_vec();
        let (outer, _, inner) = Self::axis_split(&base, axis)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err!("concat: {s:?} vs {base:?} on axis {axis}"));
            }
            widths.push(s[axis]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                widths,
                inner,
            },
            ng,
        ))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (outer, axis_len, inner) = Self::axis_split(self.shape(x), axis)?;
        if len == 0 || start + len > axis_len {
            return Err(shape_err!(
                "slice {start}..{} of axis length {axis_len}",
                start + len
            ));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Slice {
                x,
                outer,
                axis_len,
                start,
                inner,
            },
            ng,
        ))
    }

    /// Picks flat elements of `x` into a 1-D tensor.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let src = self.data(x);
        if indices.is_empty() {
            return Err(shape_err!("gather of no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(shape_err!("gather index {bad} out of {}", src.len()));
        }
        let out = indices.iter().map(|&i| src[i]).collect();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::vector(out),
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    /// Per-feature normalization of an `n×d` matrix treating rows as the
    /// batch axis; rows with a false mask entry are excluded from the
    /// statistics and produce zeros.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        rows: &[bool],
        stats: NormStats<'_>,
        eps: f64,
    ) -> Result<NormOutput> {
        let (n, d) = self.dims2(x)?;
        if rows.len() != n {
            return Err(shape_err!(
                "batch_norm: mask of {} for {n} rows",
                rows.len()
            ));
        }
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(shape_err!(
                "batch_norm: affine parameters must have {d} entries"
            ));
        }
        let count = rows.iter().filter(|&&r| r).count();
        if count == 0 {
            return Err(shape_err!("batch_norm over zero rows"));
        }
        let src = self.data(x);
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0; d];
                for i in (0..n).filter(|&i| rows[i]) {
                    for (m, v) in mean.iter_mut().zip(&src[i * d..(i + 1) * d]) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                let mut var = vec![0.0; d];
                for i in (0..n).filter(|&i| rows[i]) {
                    for ((s, v), m) in var.iter_mut().zip(&src[i * d..(i + 1) * d]).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= count as f64);
                (mean, var, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != d || var.len() != d {
                    return Err(shape_err!(
                        "batch_norm: running statistics must have {d} entries"
                    ));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; n * d];
        let mut out = vec![0.0; n * d];
        for i in (0..n).filter(|&i| rows[i]) {
            for j in 0..d {
                let h = (src[i * d + j] - mean[j]) * inv_std[j];
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let cache = BatchNormCache {
            x,
            gamma,
            beta,
            rows: rows.to_vec(),
            xhat,
            inv_std,
            batch_stats,
        };
        let out = self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::BatchNorm(Box::new(cache)),
            ng,
        );
        Ok(NormOutput { out, mean, var })
    }

    /// Per-row interval IoU loss `1 − |p∩g|/|p∪g|` between predicted
    /// intervals (rows of a `G×2` matrix, canonicalized by min/max) and
    /// fixed ground-truth intervals.
    pub fn iou_loss(&mut self, pred: Var, gt: &[(f64, f64)]) -> Result<Var> {
        let (g, two) = self.dims2(pred)?;
        if two != 2 || g != gt.len() {
            return Err(shape_err!(
                "iou_loss: prediction {g}x{two} for {} targets",
                gt.len()
            ));
        }
        let p = self.data(pred);
        let mut out = Vec::with_capacity(g);
        let mut margin = f64::INFINITY;
        for (i, &(gs, ge)) in gt.iter().enumerate() {
            let (a, b) = (p[2 * i], p[2 * i + 1]);
            let parts = interval_parts(a.min(b), a.max(b), gs, ge);
            out.push(parts.loss);
            margin = margin
                .min((a - b).abs())
                .min((a.max(b) - ge).abs())
                .min((a.min(b) - gs).abs())
                .min((parts.hi - parts.lo).abs());
        }
        let ng = self.ng(pred);
        self.note_kink(ng, margin);
        Ok(self.push(
            Tensor::vector(out),
            Op::IouLoss {
                pred,
                gt: gt.to_vec(),
            },
            ng,
        ))
    }

    /// Gradient recorded by the last [`Tape::backward`] call. Leaves that
    /// require gradients but were unreachable report zeros.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[idx].is_none() {
                grads[idx] = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |s| {
                    s.iter_mut()
                        .zip(g)
                        .zip(db)
                        .for_each(|((s, g), y)| *s += g * y)
                });
                acc(*b, &mut |s| {
                    s.iter_mut()
                        .zip(g)
                        .zip(da)
                        .for_each(|((s, g), x)| *s += g * x)
                });
            }
            Op::Div(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |s| {
                    s.iter_mut()
                        .zip(g)
                        .zip(db)
                        .for_each(|((s, g), y)| *s += g / y)
                });
                acc(*b, &mut |s| {
                    for (i, s) in s.iter_mut().enumerate() {
                        *s -= g[i] * da[i] / (db[i] * db[i]);
                    }
                });
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let (da, db) = (self.data(*a), self.data(*b));
                // ties route the gradient to the first operand
                let pick_a = |i: usize| {
                    if is_min {
                        da[i] <= db[i]
                    } else {
                        da[i] >= db[i]
                    }
                };
                acc(*a, &mut |s| {
                    (0..s.len())
                        .filter(|&i| pick_a(i))
                        .for_each(|i| s[i] += g[i])
                });
                acc(*b, &mut |s| {
                    (0..s.len())
                        .filter(|&i| !pick_a(i))
                        .for_each(|i| s[i] += g[i])
                });
            }
            Op::AddRow(x, row) => {
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*row, &mut |s| {
                    let d = s.len();
                    for (k, gv) in g.iter().enumerate() {
                        s[k % d] += gv;
                    }
                });
            }
            Op::Affine { x, scale } => acc(*x, &mut |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += scale * g)
            }),
            Op::MulConst { x, factors } => acc(*x, &mut |s| {
                s.iter_mut()
                    .zip(g)
                    .zip(factors)
                    .for_each(|((s, g), f)| *s += g * f)
            }),
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.cols();
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |s| matmul_bt_acc(g, db, s, m, n, k));
                acc(*b, &mut |s| matmul_at_acc(da, g, s, m, k, n));
            }
            Op::Transpose(x) => {
                let (r, c) = self.nodes[x.0].value.dims2().unwrap();
                acc(*x, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::OuterSum(col, row) => {
                let n = self.nodes[col.0].value.numel();
                let m = self.nodes[row.0].value.numel();
                acc(*col, &mut |s| {
                    (0..n).for_each(|i| s[i] += g[i * m..(i + 1) * m].iter().sum::<f64>())
                });
                acc(*row, &mut |s| {
                    (0..n).for_each(|i| (0..m).for_each(|j| s[j] += g[i * m + j]))
                });
            }
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            } => {
                let (outer, len, inner) = (*outer, *axis_len, *inner);
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |a: usize| (o * len + a) * inner + i;
                            let dot: f64 = (0..len).map(|a| g[idx(a)] * out[idx(a)]).sum();
                            for a in 0..len {
                                s[idx(a)] += out[idx(a)] * (g[idx(a)] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmaxRows { x } => {
                let m = node.value.cols();
                acc(*x, &mut |s| {
                    for (i, (yr, gr)) in out.chunks(m).zip(g.chunks(m)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..m {
                            s[i * m + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LeakyRelu { x, slope } => {
                let dx = self.data(*x);
                acc(*x, &mut |s| {
                    s.iter_mut()
                        .zip(g)
                        .zip(dx)
                        .for_each(|((s, g), v)| *s += if *v > 0.0 { *g } else { slope * g })
                });
            }
            Op::Relu(x) => {
                let dx = self.data(*x);
                acc(*x, &mut |s| {
                    s.iter_mut().zip(g).zip(dx).for_each(|((s, g), v)| {
                        if *v > 0.0 {
                            *s += g
                        }
                    })
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |s| {
                s.iter_mut()
                    .zip(g)
                    .zip(out)
                    .for_each(|((s, g), y)| *s += g * y * (1.0 - y))
            }),
            Op::Exp(x) => acc(*x, &mut |s| {
                s.iter_mut()
                    .zip(g)
                    .zip(out)
                    .for_each(|((s, g), y)| *s += g * y)
            }),
            Op::Log { x, floor } => {
                let dx = self.data(*x);
                acc(*x, &mut |s| {
                    s.iter_mut().zip(g).zip(dx).for_each(|((s, g), v)| {
                        if *v > *floor {
                            *s += g / v
                        }
                    })
                });
            }
            Op::Abs(x) => {
                let dx = self.data(*x);
                acc(*x, &mut |s| {
                    s.iter_mut().zip(g).zip(dx).for_each(|((s, g), v)| {
                        if *v > 0.0 {
                            *s += g
                        } else if *v < 0.0 {
                            *s -= g
                        }
                    })
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n))
            }
            Op::Concat {
                parts,
                outer,
                widths,
                inner,
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (p, &w) in parts.iter().zip(widths) {
                    acc(*p, &mut |s| {
                        for o in 0..*outer {
                            let src =
                                &g[(o * total + offset) * inner..(o * total + offset + w) * inner];
                            s[o * w * inner..(o + 1) * w * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(s, g)| *s += g);
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice {
                x,
                outer,
                axis_len,
                start,
                inner,
            } => {
                let len = node.value.shape().iter().product::<usize>() / (outer * inner);
                acc(*x, &mut |s| {
                    for o in 0..*outer {
                        let base = (o * axis_len + start) * inner;
                        s[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::Gather { x, indices } => acc(*x, &mut |s| {
                indices.iter().zip(g).for_each(|(&i, g)| s[i] += g)
            }),
            Op::Reshape(x) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::BatchNorm(c) => self.batch_norm_backward(c, g, &mut acc),
            Op::IouLoss { pred, gt } => {
                let p = self.data(*pred);
                acc(*pred, &mut |s| {
                    for (i, &(gs, ge)) in gt.iter().enumerate() {
                        let (a, b) = (p[2 * i], p[2 * i + 1]);
                        let (cs, ce) = (a.min(b), a.max(b));
                        let parts = interval_parts(cs, ce, gs, ge);
                        let (d_cs, d_ce) = parts.grad(cs, ce, gs, ge);
                        if a <= b {
                            s[2 * i] += g[i] * d_cs;
                            s[2 * i + 1] += g[i] * d_ce;
                        } else {
                            s[2 * i] += g[i] * d_ce;
                            s[2 * i + 1] += g[i] * d_cs;
                        }
                    }
                });
            }
        }
    }

    fn batch_norm_backward(
        &self,
        c: &BatchNormCache,
        g: &[f64],
        acc: &mut dyn FnMut(Var, &mut dyn FnMut(&mut [f64])),
    ) {
        let d = c.inv_std.len();
        let n = c.rows.len();
        let gamma = self.data(c.gamma);
        let valid = || (0..n).filter(|&i| c.rows[i]);
        let mut sum_g = vec![0.0; d];
        let mut sum_gx = vec![0.0; d];
        for i in valid() {
            for j in 0..d {
                sum_g[j] += g[i * d + j];
                sum_gx[j] += g[i * d + j] * c.xhat[i * d + j];
            }
        }
        acc(c.beta, &mut |s| {
            s.iter_mut().zip(&sum_g).for_each(|(s, v)| *s += v)
        });
        acc(c.gamma, &mut |s| {
            s.iter_mut().zip(&sum_gx).for_each(|(s, v)| *s += v)
        });
        let count = valid().count() as f64;
        acc(c.x, &mut |s| {
            for i in valid() {
                for j in 0..d {
                    let k = i * d + j;
                    s[k] += if c.batch_stats {
                        gamma[j]
                            * c.inv_std[j]
                            * (g[k] - sum_g[j] / count - c.xhat[k] * sum_gx[j] / count)
                    } else {
                        gamma[j] * c.inv_std[j] * g[k]
                    };
                }
            }
        });
    }
}

struct IntervalParts {
    lo: f64,
    hi: f64,
    inter: f64,
    union: f64,
    loss: f64,
}

fn interval_parts(cs: f64, ce: f64, gs: f64, ge: f64) -> IntervalParts {
    let lo = cs.max(gs);
    let hi = ce.min(ge);
    let inter = (hi - lo).max(0.0);
    let union = (ce - cs) + (ge - gs) - inter;
    let loss = if union > 0.0 {
        1.0 - inter / union
    } else if cs == gs && ce == ge {
        0.0
    } else {
        1.0
    };
    IntervalParts {
        lo,
        hi,
        inter,
        union,
        loss,
    }
}

impl IntervalParts {
    /// Partial derivatives of the loss with respect to the canonical
    /// predicted start and end.
    fn grad(&self, cs: f64, ce: f64, gs: f64, ge: f64) -> (f64, f64) {
        if self.inter <= 0.0 || self.union <= 0.0 {
            return (0.0, 0.0);
        }
        let u2 = self.union * self.union;
        let d_inter = -(self.union + self.inter) / u2;
        let mut d_cs = -self.inter / u2;
        let mut d_ce = self.inter / u2;
        if ce < ge {
            d_ce += d_inter;
        }
        if cs > gs {
            d_cs -= d_inter;
        }
        (d_cs, d_ce)
    }
}
