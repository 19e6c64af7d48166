//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward op appends a node whose inputs have strictly smaller ids,
//! so node order is already topological and the backward pass is a single
//! reverse sweep. Gradient accumulators are reset at the start of every
//! backward pass and each node is visited exactly once.
//!
//! One tape is single-threaded; independent tapes share nothing and may run
//! on separate threads.

use super::scalar::{lit, Scalar};
use super::tensor::Tensor;
use super::NumericsError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Clamp applied to predicted probabilities before the BCE log.
pub const BCE_EPS: f64 = 1e-7;
/// Guard added to the cosine denominator (zero-vector safety).
pub const COSINE_EPS: f64 = 1e-8;

enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MaxElem { a: Var, b: Var },
    Scale { x: Var, k: S },
    MulScalar { x: Var, s: Var },
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    MulCol { x: Var, col: Var },
    Sigmoid { x: Var },
    Relu { x: Var },
    Exp { x: Var },
    Abs { x: Var },
    SoftmaxRows { x: Var },
    PoolMean { x: Var, axis: usize },
    PoolMax { x: Var, argmax: Vec<usize> },
    Concat { a: Var, b: Var },
    Reshape { x: Var },
    MeanAll { x: Var },
    SumAll { x: Var },
    Bce { pred: Var, target: Tensor<S> },
    CosineRows { a: Var, b: Var },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
    grad: Option<Tensor<S>>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input: receives no gradient entries.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input: gradients are accumulated for it during backward.
    pub fn var(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient, or `None` when no gradient flowed to `v`
    /// (constants and nodes outside the differentiated subgraph).
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs)
    }

    fn shape_err(op: &'static str, lhs: &Tensor<S>, rhs: &Tensor<S>) -> NumericsError {
        NumericsError::ShapeMismatch {
            op,
            lhs: lhs.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        }
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(Self::shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = ta.at2(i, p);
                for j in 0..n {
                    out[i * n + j] += aip * tb.at2(p, j);
                }
            }
        }
        let value = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push_op(value, Op::MatMul { a, b }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(NumericsError::RankMismatch {
                op: "transpose",
                expected: 2,
                shape: t.shape().to_vec(),
            });
        }
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.at2(i, j);
            }
        }
        let value = Tensor::from_vec(&[n, m], out)?;
        Ok(self.push_op(value, Op::Transpose { x }, &[x]))
    }

    // ── Elementwise on equal shapes ─────────────────────────────────

    fn zip(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err(op_name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_vec(ta.shape(), data)?;
        Ok(self.push_op(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Elementwise maximum; on ties the gradient goes to `a`.
    pub fn max_elem(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip(
            "max_elem",
            a,
            b,
            |x, y| if x >= y { x } else { y },
            Op::MaxElem { a, b },
        )
    }

    /// Multiply by a compile-time constant (not differentiated through).
    pub fn scale(&mut self, x: Var, k: S) -> Var {
        let value = self.value(x).map(|v| v * k);
        self.push_op(value, Op::Scale { x, k }, &[x])
    }

    /// Multiply a tensor by a `[1]` scalar node; both sides get gradients.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var, NumericsError> {
        let ts = self.value(s);
        if ts.len() != 1 {
            return Err(NumericsError::RankMismatch {
                op: "mul_scalar",
                expected: 1,
                shape: ts.shape().to_vec(),
            });
        }
        let k = ts.item();
        let value = self.value(x).map(|v| v * k);
        Ok(self.push_op(value, Op::MulScalar { x, s }, &[x, s]))
    }

    // ── Explicit broadcasts over rank-2 tensors ─────────────────────

    fn check_rowvec(
        &self,
        op: &'static str,
        x: Var,
        vec: Var,
        want: usize,
    ) -> Result<(usize, usize), NumericsError> {
        let (tx, tv) = (self.value(x), self.value(vec));
        if tx.rank() != 2 || tv.rank() != 1 || tv.len() != want {
            return Err(Self::shape_err(op, tx, tv));
        }
        Ok((tx.rows(), tx.cols()))
    }

    /// `out[i,j] = x[i,j] + row[j]`
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        let want = if self.value(x).rank() == 2 {
            self.value(x).cols()
        } else {
            0
        };
        let (m, n) = self.check_rowvec("add_row", x, row, want)?;
        let mut data = self.value(x).data().to_vec();
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += r[j];
            }
        }
        let value = Tensor::from_vec(&[m, n], data)?;
        Ok(self.push_op(value, Op::AddRow { x, row }, &[x, row]))
    }

    /// `out[i,j] = x[i,j] * row[j]`
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        let want = if self.value(x).rank() == 2 {
            self.value(x).cols()
        } else {
            0
        };
        let (m, n) = self.check_rowvec("mul_row", x, row, want)?;
        let mut data = self.value(x).data().to_vec();
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] *= r[j];
            }
        }
        let value = Tensor::from_vec(&[m, n], data)?;
        Ok(self.push_op(value, Op::MulRow { x, row }, &[x, row]))
    }

    /// `out[i,j] = x[i,j] * col[i]`
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var, NumericsError> {
        let want = if self.value(x).rank() == 2 {
            self.value(x).rows()
        } else {
            0
        };
        let (m, n) = self.check_rowvec("mul_col", x, col, want)?;
        let mut data = self.value(x).data().to_vec();
        let c = self.value(col).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] *= c[i];
            }
        }
        let value = Tensor::from_vec(&[m, n], data)?;
        Ok(self.push_op(value, Op::MulCol { x, col }, &[x, col]))
    }

    // ── Pointwise nonlinearities ────────────────────────────────────

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(stable_sigmoid);
        self.push_op(value, Op::Sigmoid { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        self.push_op(value, Op::Relu { x }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        self.push_op(value, Op::Exp { x }, &[x])
    }

    /// |x| with subgradient 0 at x = 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        self.push_op(value, Op::Abs { x }, &[x])
    }

    /// Row-stabilized softmax over the last axis of a rank-2 tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(NumericsError::RankMismatch {
                op: "softmax_rows",
                expected: 2,
                shape: t.shape().to_vec(),
            });
        }
        let (m, n) = (t.rows(), t.cols());
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let max = row.iter().fold(S::neg_infinity(), |acc, &v| acc.max(v));
            let mut sum = S::zero();
            for j in 0..n {
                let e = (row[j] - max).exp();
                data[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                data[i * n + j] /= sum;
            }
        }
        let value = Tensor::from_vec(&[m, n], data)?;
        Ok(self.push_op(value, Op::SoftmaxRows { x }, &[x]))
    }

    // ── Reductions ──────────────────────────────────────────────────

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize), NumericsError> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(NumericsError::RankMismatch {
                op,
                expected: 2,
                shape: t.shape().to_vec(),
            });
        }
        if axis >= 2 {
            return Err(NumericsError::InvalidAxis {
                op,
                axis,
                shape: t.shape().to_vec(),
            });
        }
        Ok((t.rows(), t.cols()))
    }

    /// Mean over one axis of a rank-2 tensor: axis 0 → `[cols]`, axis 1 → `[rows]`.
    pub fn pool_mean(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let (m, n) = self.check_axis("pool_mean", x, axis)?;
        let t = self.value(x);
        let value = if axis == 0 {
            let inv = S::one() / lit::<S>(m as f64);
            let mut out = vec![S::zero(); n];
            for i in 0..m {
                for (j, o) in out.iter_mut().enumerate() {
                    *o += t.at2(i, j);
                }
            }
            for o in out.iter_mut() {
                *o *= inv;
            }
            Tensor::from_vec(&[n], out)?
        } else {
            let inv = S::one() / lit::<S>(n as f64);
            let mut out = vec![S::zero(); m];
            for (i, o) in out.iter_mut().enumerate() {
                for j in 0..n {
                    *o += t.at2(i, j);
                }
                *o *= inv;
            }
            Tensor::from_vec(&[m], out)?
        };
        Ok(self.push_op(value, Op::PoolMean { x, axis }, &[x]))
    }

    /// Max over one axis; gradient routes to the first argmax on ties.
    pub fn pool_max(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let (m, n) = self.check_axis("pool_max", x, axis)?;
        let t = self.value(x);
        let (out, argmax, out_len) = if axis == 0 {
            let mut out = vec![S::neg_infinity(); n];
            let mut arg = vec![0usize; n];
            for i in 0..m {
                for j in 0..n {
                    let v = t.at2(i, j);
                    if v > out[j] {
                        out[j] = v;
                        arg[j] = i * n + j;
                    }
                }
            }
            (out, arg, n)
        } else {
            let mut out = vec![S::neg_infinity(); m];
            let mut arg = vec![0usize; m];
            for i in 0..m {
                for j in 0..n {
                    let v = t.at2(i, j);
                    if v > out[i] {
                        out[i] = v;
                        arg[i] = i * n + j;
                    }
                }
            }
            (out, arg, m)
        };
        let value = Tensor::from_vec(&[out_len], out)?;
        Ok(self.push_op(value, Op::PoolMax { x, argmax }, &[x]))
    }

    /// Concatenate two rank-1 vectors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 1 || tb.rank() != 1 {
            return Err(Self::shape_err("concat", ta, tb));
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let n = data.len();
        let value = Tensor::from_vec(&[n], data)?;
        Ok(self.push_op(value, Op::Concat { a, b }, &[a, b]))
    }

    /// Same data under a new shape; gradient reshapes back.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push_op(value, Op::Reshape { x }, &[x]))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = lit::<S>(t.len() as f64);
        let sum: S = t.data().iter().copied().sum();
        let value = Tensor::scalar(sum / n);
        self.push_op(value, Op::MeanAll { x }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let sum: S = self.value(x).data().iter().copied().sum();
        let value = Tensor::scalar(sum);
        self.push_op(value, Op::SumAll { x }, &[x])
    }

    // ── Fused losses / similarity ───────────────────────────────────

    /// Mean binary cross-entropy against a constant target grid.
    /// Predictions are clamped to `[BCE_EPS, 1 - BCE_EPS]` before the log.
    pub fn bce(&mut self, pred: Var, target: &Tensor<S>) -> Result<Var, NumericsError> {
        let tp = self.value(pred);
        if tp.shape() != target.shape() {
            return Err(Self::shape_err("bce", tp, target));
        }
        let eps = lit::<S>(BCE_EPS);
        let hi = S::one() - eps;
        let mut sum = S::zero();
        for (&p, &y) in tp.data().iter().zip(target.data()) {
            let pc = clamp(p, eps, hi);
            sum -= y * pc.ln() + (S::one() - y) * (S::one() - pc).ln();
        }
        let value = Tensor::scalar(sum / lit::<S>(tp.len() as f64));
        Ok(self.push_op(
            value,
            Op::Bce {
                pred,
                target: target.clone(),
            },
            &[pred],
        ))
    }

    /// Mean squared error, composed from primitives so both sides get
    /// gradients for free.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let diff = self.sub(a, b)?;
        let sq = self.mul(diff, diff)?;
        Ok(self.mean_all(sq))
    }

    /// All-pairs row cosine similarity: `out[i,j] = <a_i, b_j> / (|a_i||b_j| + eps)`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.cols() {
            return Err(Self::shape_err("cosine_rows", ta, tb));
        }
        let (ra, rb, d) = (ta.rows(), tb.rows(), ta.cols());
        let eps = lit::<S>(COSINE_EPS);
        let na: Vec<S> = (0..ra).map(|i| row_norm(ta, i, d)).collect();
        let nb: Vec<S> = (0..rb).map(|j| row_norm(tb, j, d)).collect();
        let mut out = vec![S::zero(); ra * rb];
        for i in 0..ra {
            for j in 0..rb {
                let mut dot = S::zero();
                for k in 0..d {
                    dot += ta.at2(i, k) * tb.at2(j, k);
                }
                out[i * rb + j] = dot / (na[i] * nb[j] + eps);
            }
        }
        let value = Tensor::from_vec(&[ra, rb], out)?;
        Ok(self.push_op(value, Op::CosineRows { a, b }, &[a, b]))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Resets all accumulators first,
    /// seeds the root with 1, and visits every node exactly once.
    pub fn backward(&mut self, root: Var) -> Result<(), NumericsError> {
        if self.value(root).len() != 1 {
            return Err(NumericsError::RankMismatch {
                op: "backward",
                expected: 1,
                shape: self.value(root).shape().to_vec(),
            });
        }
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
        let seed = Tensor::from_vec(self.value(root).shape(), vec![S::one()])?;
        self.nodes[root.0].grad = Some(seed);

        for id in (0..=root.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            self.backward_node(id);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Tensor<S>) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        debug_assert_eq!(node.value.shape(), contrib.shape());
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.data_mut().iter_mut().zip(contrib.data()) {
                    *gi += *ci;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    fn backward_node(&mut self, id: usize) {
        let d_out = self.nodes[id].grad.clone().expect("grad present");
        let g = d_out.data();
        match &self.nodes[id].op {
            Op::Leaf => {}

            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = dOut · Bᵀ
                let mut da = vec![S::zero(); m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        for p in 0..k {
                            da[i * k + p] += gij * tb.at2(p, j);
                        }
                    }
                }
                // dB = Aᵀ · dOut
                let mut db = vec![S::zero(); k * n];
                for p in 0..k {
                    for i in 0..m {
                        let aip = ta.at2(i, p);
                        for j in 0..n {
                            db[p * n + j] += aip * g[i * n + j];
                        }
                    }
                }
                self.accumulate(a, Tensor::from_vec(&[m, k], da).unwrap());
                self.accumulate(b, Tensor::from_vec(&[k, n], db).unwrap());
            }

            Op::Transpose { x } => {
                let x = *x;
                let (m, n) = (self.value(x).rows(), self.value(x).cols());
                let mut dx = vec![S::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = g[j * m + i];
                    }
                }
                self.accumulate(x, Tensor::from_vec(&[m, n], dx).unwrap());
            }

            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, d_out.clone());
                self.accumulate(b, d_out);
            }

            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, d_out.clone());
                self.accumulate(b, d_out.map(|v| -v));
            }

            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da = zip_tensors(&d_out, self.value(b), |d, y| d * y);
                let db = zip_tensors(&d_out, self.value(a), |d, x| d * x);
                self.accumulate(a, da);
                self.accumulate(b, db);
            }

            Op::MaxElem { a, b } => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (self.value(a), self.value(b));
                let mut da = vec![S::zero(); g.len()];
                let mut db = vec![S::zero(); g.len()];
                for (i, (&x, &y)) in ta.data().iter().zip(tb.data()).enumerate() {
                    if x >= y {
                        da[i] = g[i];
                    } else {
                        db[i] = g[i];
                    }
                }
                let shape = ta.shape().to_vec();
                self.accumulate(a, Tensor::from_vec(&shape, da).unwrap());
                self.accumulate(b, Tensor::from_vec(&shape, db).unwrap());
            }

            Op::Scale { x, k } => {
                let (x, k) = (*x, *k);
                self.accumulate(x, d_out.map(|d| d * k));
            }

            Op::MulScalar { x, s } => {
                let (x, s) = (*x, *s);
                let k = self.value(s).item();
                let dx = d_out.map(|d| d * k);
                let ds: S = d_out
                    .data()
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&d, &v)| d * v)
                    .sum();
                self.accumulate(x, dx);
                self.accumulate(s, Tensor::scalar(ds));
            }

            Op::AddRow { x, row } => {
                let (x, row) = (*x, *row);
                let (m, n) = (self.value(x).rows(), self.value(x).cols());
                let mut dr = vec![S::zero(); n];
                for i in 0..m {
                    for (j, dj) in dr.iter_mut().enumerate() {
                        *dj += g[i * n + j];
                    }
                }
                self.accumulate(x, d_out.clone());
                self.accumulate(row, Tensor::from_vec(&[n], dr).unwrap());
            }

            Op::MulRow { x, row } => {
                let (x, row) = (*x, *row);
                let tx = self.value(x).clone();
                let tr = self.value(row).clone();
                let (m, n) = (tx.rows(), tx.cols());
                let mut dx = vec![S::zero(); m * n];
                let mut dr = vec![S::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = g[i * n + j] * tr.data()[j];
                        dr[j] += g[i * n + j] * tx.at2(i, j);
                    }
                }
                self.accumulate(x, Tensor::from_vec(&[m, n], dx).unwrap());
                self.accumulate(row, Tensor::from_vec(&[n], dr).unwrap());
            }

            Op::MulCol { x, col } => {
                let (x, col) = (*x, *col);
                let tx = self.value(x).clone();
                let tc = self.value(col).clone();
                let (m, n) = (tx.rows(), tx.cols());
                let mut dx = vec![S::zero(); m * n];
                let mut dc = vec![S::zero(); m];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = g[i * n + j] * tc.data()[i];
                        dc[i] += g[i * n + j] * tx.at2(i, j);
                    }
                }
                self.accumulate(x, Tensor::from_vec(&[m, n], dx).unwrap());
                self.accumulate(col, Tensor::from_vec(&[m], dc).unwrap());
            }

            Op::Sigmoid { x } => {
                let x = *x;
                let y = &self.nodes[id].value;
                let dx = zip_tensors(&d_out, y, |d, o| d * o * (S::one() - o));
                self.accumulate(x, dx);
            }

            Op::Relu { x } => {
                let x = *x;
                let dx = zip_tensors(&d_out, self.value(x), |d, v| {
                    if v > S::zero() {
                        d
                    } else {
                        S::zero()
                    }
                });
                self.accumulate(x, dx);
            }

            Op::Exp { x } => {
                let x = *x;
                let y = &self.nodes[id].value;
                let dx = zip_tensors(&d_out, y, |d, o| d * o);
                self.accumulate(x, dx);
            }

            Op::Abs { x } => {
                let x = *x;
                let dx = zip_tensors(&d_out, self.value(x), |d, v| {
                    if v > S::zero() {
                        d
                    } else if v < S::zero() {
                        -d
                    } else {
                        S::zero()
                    }
                });
                self.accumulate(x, dx);
            }

            Op::SoftmaxRows { x } => {
                let x = *x;
                let y = self.nodes[id].value.clone();
                let (m, n) = (y.rows(), y.cols());
                let mut dx = vec![S::zero(); m * n];
                for i in 0..m {
                    let mut dot = S::zero();
                    for j in 0..n {
                        dot += g[i * n + j] * y.at2(i, j);
                    }
                    for j in 0..n {
                        dx[i * n + j] = y.at2(i, j) * (g[i * n + j] - dot);
                    }
                }
                self.accumulate(x, Tensor::from_vec(&[m, n], dx).unwrap());
            }

            Op::PoolMean { x, axis } => {
                let (x, axis) = (*x, *axis);
                let (m, n) = (self.value(x).rows(), self.value(x).cols());
                let mut dx = vec![S::zero(); m * n];
                if axis == 0 {
                    let inv = S::one() / lit::<S>(m as f64);
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = g[j] * inv;
                        }
                    }
                } else {
                    let inv = S::one() / lit::<S>(n as f64);
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = g[i] * inv;
                        }
                    }
                }
                self.accumulate(x, Tensor::from_vec(&[m, n], dx).unwrap());
            }

            Op::PoolMax { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                let (m, n) = (self.value(x).rows(), self.value(x).cols());
                let mut dx = vec![S::zero(); m * n];
                for (out_idx, &flat) in argmax.iter().enumerate() {
                    dx[flat] += g[out_idx];
                }
                self.accumulate(x, Tensor::from_vec(&[m, n], dx).unwrap());
            }

            Op::Concat { a, b } => {
                let (a, b) = (*a, *b);
                let la = self.value(a).len();
                let lb = self.value(b).len();
                let da = Tensor::from_vec(&[la], g[..la].to_vec()).unwrap();
                let db = Tensor::from_vec(&[lb], g[la..la + lb].to_vec()).unwrap();
                self.accumulate(a, da);
                self.accumulate(b, db);
            }

            Op::Reshape { x } => {
                let x = *x;
                let shape = self.value(x).shape().to_vec();
                let dx = Tensor::from_vec(&shape, g.to_vec()).unwrap();
                self.accumulate(x, dx);
            }

            Op::MeanAll { x } => {
                let x = *x;
                let t = self.value(x);
                let k = g[0] / lit::<S>(t.len() as f64);
                let dx = Tensor::full(t.shape(), k);
                self.accumulate(x, dx);
            }

            Op::SumAll { x } => {
                let x = *x;
                let dx = Tensor::full(self.value(x).shape(), g[0]);
                self.accumulate(x, dx);
            }

            Op::Bce { pred, target } => {
                let pred = *pred;
                let target = target.clone();
                let tp = self.value(pred).clone();
                let eps = lit::<S>(BCE_EPS);
                let hi = S::one() - eps;
                let inv_n = S::one() / lit::<S>(tp.len() as f64);
                let scale = g[0] * inv_n;
                let data = tp
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &y)| {
                        // clamp kills the gradient outside (eps, 1-eps)
                        if p <= eps || p >= hi {
                            S::zero()
                        } else {
                            scale * (p - y) / (p * (S::one() - p))
                        }
                    })
                    .collect();
                let dx = Tensor::from_vec(tp.shape(), data).unwrap();
                self.accumulate(pred, dx);
            }

            Op::CosineRows { a, b } => {
                let (a, b) = (*a, *b);
                let ta = self.value(a).clone();
                let tb = self.value(b).clone();
                let y = self.nodes[id].value.clone();
                let (ra, rb, d) = (ta.rows(), tb.rows(), ta.cols());
                let eps = lit::<S>(COSINE_EPS);
                let na: Vec<S> = (0..ra).map(|i| row_norm(&ta, i, d)).collect();
                let nb: Vec<S> = (0..rb).map(|j| row_norm(&tb, j, d)).collect();
                let mut da = vec![S::zero(); ra * d];
                let mut db = vec![S::zero(); rb * d];
                for i in 0..ra {
                    for j in 0..rb {
                        let gij = g[i * rb + j];
                        if gij == S::zero() {
                            continue;
                        }
                        let denom = na[i] * nb[j] + eps;
                        let s = y.at2(i, j);
                        for k in 0..d {
                            // d s/d a_ik = b_jk/denom - s * nb_j/denom * a_ik/na_i
                            let unit_a = if na[i] > S::zero() {
                                ta.at2(i, k) / na[i]
                            } else {
                                S::zero()
                            };
                            let unit_b = if nb[j] > S::zero() {
                                tb.at2(j, k) / nb[j]
                            } else {
                                S::zero()
                            };
                            da[i * d + k] += gij * (tb.at2(j, k) / denom - s * nb[j] / denom * unit_a);
                            db[j * d + k] += gij * (ta.at2(i, k) / denom - s * na[i] / denom * unit_b);
                        }
                    }
                }
                self.accumulate(a, Tensor::from_vec(&[ra, d], da).unwrap());
                self.accumulate(b, Tensor::from_vec(&[rb, d], db).unwrap());
            }
        }
    }
}

#[inline]
fn clamp<S: Scalar>(x: S, lo: S, hi: S) -> S {
    if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    }
}

/// Overflow-free logistic function.
#[inline]
fn stable_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn row_norm<S: Scalar>(t: &Tensor<S>, i: usize, d: usize) -> S {
    let mut sum = S::zero();
    for k in 0..d {
        let v = t.at2(i, k);
        sum += v * v;
    }
    sum.sqrt()
}

fn zip_tensors<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data).unwrap()
}
