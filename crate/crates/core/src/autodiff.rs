//! Reverse-mode differentiation over a recorded tape of matrix operations.
//!
//! A [`Tape`] records every operation as a node appended after its inputs, so
//! node order is already a topological order. [`Tape::backward`] walks the
//! nodes from the loss back to the leaves exactly once.
//!
//! ```
//! use symnets::autodiff::Tape;
//! use symnets::Matrix;
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Matrix::from_rows(&[[1.0, -2.0], [3.0, 0.5]]).unwrap());
//! let loss = tape.sum(w);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).as_slice(), &[1.0; 4]);
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    log_add_exp, log_sigmoid, log_softmax_rows, log_sum_exp_rows, matmul, matmul_transposed, sigmoid,
    transposed_matmul, Matrix,
};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which optimizer group a trainable leaf belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    FeatureExtractor,
    Classifiers,
    Discriminator,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulTransposed(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    LogSigmoid(Var),
    LogAddExp(Var, Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    LogSoftmaxRows(Var),
    LogSumExpRows(Var),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// A single-threaded recording of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter. Every leaf receives an adjoint.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    /// A copy of `x` through which no adjoint flows.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`, the shape of a dense layer with an out×in weight.
    pub fn matmul_transposed(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_transposed(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMulTransposed(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Adds the 1×n row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = self.value(a).add_row_broadcast(self.value(bias))?;
        Ok(self.push(value, Op::AddRow(a, bias)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    /// Elementwise `ln σ(x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(log_sigmoid);
        self.push(value, Op::LogSigmoid(a))
    }

    /// Elementwise `ln(eᵃ + eᵇ)`.
    pub fn log_add_exp(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), log_add_exp)?;
        Ok(self.push(value, Op::LogAddExp(a, b)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_cols(self.value(b))?;
        Ok(self.push(value, Op::ConcatCols(a, b)))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let cols = self.value(a).cols();
        if start > end || end > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("range {start}..{end} of {cols} columns"),
            ));
        }
        let value = self.value(a).slice_cols(start, end);
        Ok(self.push(value, Op::SliceCols(a, start)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        self.push(value, Op::LogSoftmaxRows(a))
    }

    /// Row-wise log-sum-exp, giving a B×1 column.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let value = log_sum_exp_rows(self.value(a));
        self.push(value, Op::LogSumExpRows(a))
    }

    /// Row sums, giving a B×1 column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_rows();
        self.push(value, Op::SumRows(a))
    }

    /// Sum of every entry as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Mean of every entry as a 1×1 node.
    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::filled(1, 1, m.sum() / m.len() as f64);
        self.push(value, Op::Mean(a))
    }

    /// Propagates d(loss)/d(node) to every node recorded before `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf => {
                    adj[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = matmul_transposed(&g, self.value(b))?;
                    let gb = transposed_matmul(self.value(a), &g)?;
                    accumulate(&mut adj, a, ga);
                    accumulate(&mut adj, b, gb);
                }
                Op::MatMulTransposed(a, b) => {
                    let ga = matmul(&g, self.value(b))?;
                    let gb = transposed_matmul(&g, self.value(a))?;
                    accumulate(&mut adj, a, ga);
                    accumulate(&mut adj, b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, a, g.clone());
                    accumulate(&mut adj, b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, b, g.scale(-1.0));
                    accumulate(&mut adj, a, g);
                }
                Op::AddRow(a, bias) => {
                    accumulate(&mut adj, bias, g.sum_cols());
                    accumulate(&mut adj, a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.hadamard(self.value(b))?;
                    let gb = g.hadamard(self.value(a))?;
                    accumulate(&mut adj, a, ga);
                    accumulate(&mut adj, b, gb);
                }
                Op::Scale(a, factor) => accumulate(&mut adj, a, g.scale(factor)),
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(a), |g, x| if x > 0.0 { g } else { 0.0 })?;
                    accumulate(&mut adj, a, ga);
                }
                Op::Exp(a) => accumulate(&mut adj, a, g.hadamard(&node.value)?),
                Op::LogSigmoid(a) => {
                    let ga = g.zip_map(self.value(a), |g, x| g * sigmoid(-x))?;
                    accumulate(&mut adj, a, ga);
                }
                Op::LogAddExp(a, b) => {
                    let out = &node.value;
                    let wa = self.value(a).zip_map(out, |x, o| (x - o).exp())?;
                    let wb = self.value(b).zip_map(out, |x, o| (x - o).exp())?;
                    accumulate(&mut adj, a, g.hadamard(&wa)?);
                    accumulate(&mut adj, b, g.hadamard(&wb)?);
                }
                Op::ConcatCols(a, b) => {
                    let split = self.value(a).cols();
                    accumulate(&mut adj, a, g.slice_cols(0, split));
                    accumulate(&mut adj, b, g.slice_cols(split, g.cols()));
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.value(a).shape();
                    let width = g.cols();
                    let ga = Matrix::from_fn(rows, cols, |i, j| {
                        if j >= start && j < start + width {
                            g.get(i, j - start)
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut adj, a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    // dx = g - softmax * rowsum(g)
                    let out = &node.value;
                    let row_totals = g.sum_rows();
                    let ga = Matrix::from_fn(out.rows(), out.cols(), |i, j| {
                        g.get(i, j) - out.get(i, j).exp() * row_totals.get(i, 0)
                    });
                    accumulate(&mut adj, a, ga);
                }
                Op::LogSumExpRows(a) => {
                    let x = self.value(a);
                    let out = &node.value;
                    let ga = Matrix::from_fn(x.rows(), x.cols(), |i, j| {
                        g.get(i, 0) * (x.get(i, j) - out.get(i, 0)).exp()
                    });
                    accumulate(&mut adj, a, ga);
                }
                Op::SumRows(a) => {
                    let (rows, cols) = self.value(a).shape();
                    accumulate(&mut adj, a, Matrix::from_fn(rows, cols, |i, _| g.get(i, 0)));
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.value(a).shape();
                    accumulate(&mut adj, a, Matrix::filled(rows, cols, g.get(0, 0)));
                }
                Op::Mean(a) => {
                    let (rows, cols) = self.value(a).shape();
                    let n = (rows * cols) as f64;
                    accumulate(&mut adj, a, Matrix::filled(rows, cols, g.get(0, 0) / n));
                }
            }
        }
        Ok(Gradients { adjoints: adj })
    }
}

fn accumulate(adj: &mut [Option<Matrix>], target: Var, g: Matrix) {
    match &mut adj[target.0] {
        Some(existing) => existing.axpy(1.0, &g).expect("adjoint shape matches its node"),
        slot @ None => *slot = Some(g),
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Adjoint of a leaf. Leaves with no path to the loss get `None`.
    pub fn try_get(&self, v: Var) -> Option<&Matrix> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v` on `tape`, zero-filled if `v` did not reach the loss.
    pub fn get_or_zero(&self, tape: &Tape, v: Var) -> Matrix {
        match self.try_get(v) {
            Some(m) => m.clone(),
            None => {
                let (r, c) = tape.value(v).shape();
                Matrix::zeros(r, c)
            }
        }
    }

    /// Adjoint of a leaf that must lie on a path to the loss.
    ///
    /// Panics otherwise; use [`Gradients::try_get`] when that is not certain.
    pub fn get(&self, v: Var) -> &Matrix {
        self.try_get(v).expect("variable has no adjoint")
    }
}

/// Central-difference estimate of ∂f/∂θ for every entry of every parameter.
pub fn central_difference<F>(params: &[Matrix], step: f64, mut f: F) -> Result<Vec<Matrix>>
where
    F: FnMut(&[Matrix]) -> Result<f64>,
{
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Matrix::zeros(params[p].rows(), params[p].cols());
        for i in 0..params[p].len() {
            let orig = params[p].as_slice()[i];
            work[p].as_mut_slice()[i] = orig + step;
            let up = f(&work)?;
            work[p].as_mut_slice()[i] = orig - step;
            let down = f(&work)?;
            work[p].as_mut_slice()[i] = orig;
            grad.as_mut_slice()[i] = (up - down) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Compares tape gradients against central differences.
///
/// `build` records a scalar function of the given parameter leaves. Returns the
/// largest `|analytic − numeric| / max(1, |numeric|)` over all coordinates.
pub fn grad_check<F>(params: &[Matrix], step: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::invalid("grad_check step must be positive"));
    }
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;

    let numeric = central_difference(params, step, |ps| {
        let mut t = Tape::new();
        let leaves: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone())).collect();
        let out = build(&mut t, &leaves)?;
        Ok(t.scalar(out))
    })?;

    let mut worst = 0.0f64;
    for (leaf, num) in leaves.iter().zip(&numeric) {
        let analytic = grads.get_or_zero(&tape, *leaf);
        for (a, n) in analytic.as_slice().iter().zip(num.as_slice()) {
            worst = worst.max((a - n).abs() / n.abs().max(1.0));
        }
    }
    Ok(worst)
}
