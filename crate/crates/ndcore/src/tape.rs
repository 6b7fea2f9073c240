//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every primitive in the order it is evaluated. Because a
//! node can only refer to nodes created before it, recording order is already
//! a topological order, and [`Tape::backward`] walks it once in reverse.
//!
//! ```
//! use ndcore::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.square(x);
//! let y = tape.sum(y);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

use crate::error::{shape_err, NdError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    MeanRows(Var),
    RepeatRows(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    Clamp(Var, f64, f64),
    NormalizeRows(Var),
    LogSumExpRows(Var),
    Diag(Var),
    BlockDot(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of a computation; see the module docs.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node that influenced it.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Inputs and parameters enter the tape as leaves.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let value = value.as_matrix();
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(v, Op::MatMulNt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rows() != y.rows() || x.cols() != y.cols() {
            return Err(shape_err(
                op,
                format!("{}x{} vs {}x{}", x.rows(), x.cols(), y.rows(), y.cols()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Adds the `1×n` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (x, row) = (self.value(a), self.value(r));
        if row.rows() != 1 || row.cols() != x.cols() {
            return Err(shape_err(
                "add_row",
                format!("{}x{} + {}x{}", x.rows(), x.cols(), row.rows(), row.cols()),
            ));
        }
        let mut v = x.clone();
        let c = x.cols();
        for (i, val) in v.data_mut().iter_mut().enumerate() {
            *val += row.data()[i % c];
        }
        Ok(self.push(v, Op::AddRow(a, r)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Sum of all entries, as a `1×1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::scalar(x.sum() / x.len() as f64);
        self.push(v, Op::Mean(a))
    }

    /// Per-row sums as an `m×1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows()).map(|i| x.row_slice(i).iter().sum()).collect();
        let v = Tensor::matrix(x.rows(), 1, data);
        self.push(v, Op::SumCols(a))
    }

    /// Column means as a `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_rows();
        self.push(v, Op::MeanRows(a))
    }

    /// Stacks a `1×n` row `n_rows` times.
    pub fn repeat_rows(&mut self, a: Var, n_rows: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != 1 {
            return Err(shape_err("repeat_rows", format!("{} rows", x.rows())));
        }
        let v = x.repeat_rows(n_rows);
        Ok(self.push(v, Op::RepeatRows(a)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).concat_cols(self.value(b))?;
        Ok(self.push(v, Op::ConcatCols(a, b)))
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let x = self.value(a);
        if lo > hi || hi > x.cols() {
            return Err(shape_err(
                "slice_cols",
                format!("[{lo}, {hi}) of {} columns", x.cols()),
            ));
        }
        let v = x.slice_cols(lo, hi);
        Ok(self.push(v, Op::SliceCols(a, lo)))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for i in 0..x.rows() {
            let row = v.row_slice_mut(i);
            let norm = row.iter().map(|t| t * t).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|t| *t /= norm);
        }
        self.push(v, Op::NormalizeRows(a))
    }

    /// Stable `log Σ_j exp(a_ij)` per row, as an `m×1` column.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows()).map(|i| logsumexp(x.row_slice(i))).collect();
        let v = Tensor::matrix(x.rows(), 1, data);
        self.push(v, Op::LogSumExpRows(a))
    }

    /// Diagonal of a square matrix, as an `m×1` column.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != x.cols() {
            return Err(shape_err("diag", format!("{}x{}", x.rows(), x.cols())));
        }
        let data = (0..x.rows()).map(|i| x.get(i, i)).collect();
        let v = Tensor::matrix(x.rows(), 1, data);
        Ok(self.push(v, Op::Diag(a)))
    }

    /// Blockwise contraction `y[b, i] = Σ_j lam[b, i·k + j] · coef[i, j]`
    /// for `lam: B×(n·k)` and `coef: n×k`.
    pub fn block_dot(&mut self, lam: Var, coef: Var) -> Result<Var> {
        let (l, c) = (self.value(lam), self.value(coef));
        let (n, k) = (c.rows(), c.cols());
        if l.cols() != n * k {
            return Err(shape_err(
                "block_dot",
                format!("{} columns vs coefficient {n}x{k}", l.cols()),
            ));
        }
        let b = l.rows();
        let mut out = vec![0.0; b * n];
        for r in 0..b {
            let row = l.row_slice(r);
            for i in 0..n {
                out[r * n + i] = (0..k).map(|j| row[i * k + j] * c.get(i, j)).sum();
            }
        }
        let v = Tensor::matrix(b, n, out);
        Ok(self.push(v, Op::BlockDot(lam, coef)))
    }

    /// Gradients of the scalar `output` with respect to every recorded node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(NdError::NonScalar(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                // Leaves keep their gradient; interior nodes are consumed.
                grads[idx] = Some(g);
                continue;
            }
            let y = &node.value;
            match node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(b))?;
                    let gb = self.value(a).matmul_tn(&g)?;
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::MatMulNt(a, b) => {
                    let ga = g.matmul(self.value(b))?;
                    let gb = g.matmul_tn(self.value(a))?;
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Transpose(a) => accumulate(&mut grads, a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, b, g.map(|t| -t));
                    accumulate(&mut grads, a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(b), |t, x| t * x);
                    let gb = g.zip_map(self.value(a), |t, x| t * x);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::AddRow(a, r) => {
                    let gr = g.mean_rows().map(|t| t * g.rows() as f64);
                    accumulate(&mut grads, r, gr);
                    accumulate(&mut grads, a, g);
                }
                Op::Scale(a, c) => accumulate(&mut grads, a, g.map(|t| t * c)),
                Op::AddScalar(a) => accumulate(&mut grads, a, g),
                Op::Tanh(a) => accumulate(&mut grads, a, g.zip_map(y, |t, v| t * (1.0 - v * v))),
                Op::Exp(a) => accumulate(&mut grads, a, g.zip_map(y, |t, v| t * v)),
                Op::Ln(a) => accumulate(&mut grads, a, g.zip_map(self.value(a), |t, x| t / x)),
                Op::Square(a) => {
                    accumulate(&mut grads, a, g.zip_map(self.value(a), |t, x| 2.0 * t * x))
                }
                Op::Sum(a) => {
                    let x = self.value(a);
                    accumulate(&mut grads, a, Tensor::filled(x.rows(), x.cols(), g.item()));
                }
                Op::Mean(a) => {
                    let x = self.value(a);
                    let s = g.item() / x.len() as f64;
                    accumulate(&mut grads, a, Tensor::filled(x.rows(), x.cols(), s));
                }
                Op::SumCols(a) => {
                    let x = self.value(a);
                    let (r, c) = (x.rows(), x.cols());
                    let data = (0..r * c).map(|i| g.data()[i / c]).collect();
                    accumulate(&mut grads, a, Tensor::matrix(r, c, data));
                }
                Op::MeanRows(a) => {
                    let x = self.value(a);
                    let r = x.rows();
                    let ga = g.map(|t| t / r as f64).repeat_rows(r);
                    accumulate(&mut grads, a, ga);
                }
                Op::RepeatRows(a) => {
                    let r = g.rows();
                    accumulate(&mut grads, a, g.mean_rows().map(|t| t * r as f64));
                }
                Op::ConcatCols(a, b) => {
                    let p = self.value(a).cols();
                    accumulate(&mut grads, a, g.slice_cols(0, p));
                    accumulate(&mut grads, b, g.slice_cols(p, g.cols()));
                }
                Op::SliceCols(a, lo) => {
                    let x = self.value(a);
                    let mut ga = Tensor::zeros(x.rows(), x.cols());
                    let w = g.cols();
                    for i in 0..x.rows() {
                        ga.row_slice_mut(i)[lo..lo + w].copy_from_slice(g.row_slice(i));
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga =
                        g.zip_map(self.value(a), |t, x| if x > lo && x < hi { t } else { 0.0 });
                    accumulate(&mut grads, a, ga);
                }
                Op::NormalizeRows(a) => {
                    let x = self.value(a);
                    let mut ga = Tensor::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        let xr = x.row_slice(i);
                        let yr = y.row_slice(i);
                        let gr = g.row_slice(i);
                        let norm = xr.iter().map(|t| t * t).sum::<f64>().sqrt().max(1e-12);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, o) in ga.row_slice_mut(i).iter_mut().enumerate() {
                            *o = (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::LogSumExpRows(a) => {
                    let x = self.value(a);
                    let mut ga = Tensor::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        let lse = y.data()[i];
                        let gi = g.data()[i];
                        for (o, &v) in ga.row_slice_mut(i).iter_mut().zip(x.row_slice(i)) {
                            *o = gi * (v - lse).exp();
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::Diag(a) => {
                    let n = g.rows();
                    let mut ga = Tensor::zeros(n, n);
                    for i in 0..n {
                        ga.set(i, i, g.data()[i]);
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::BlockDot(lam, coef) => {
                    let (l, c) = (self.value(lam), self.value(coef));
                    let (n, k) = (c.rows(), c.cols());
                    let mut gl = Tensor::zeros(l.rows(), l.cols());
                    let mut gc = Tensor::zeros(n, k);
                    for r in 0..l.rows() {
                        for i in 0..n {
                            let gi = g.get(r, i);
                            for j in 0..k {
                                gl.set(r, i * k + j, gi * c.get(i, j));
                                let cur = gc.get(i, j);
                                gc.set(i, j, cur + gi * l.get(r, i * k + j));
                            }
                        }
                    }
                    accumulate(&mut grads, lam, gl);
                    accumulate(&mut grads, coef, gc);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Stable log-sum-exp of a slice; `-inf` for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.square(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, 2.0]));
        let c = t.leaf(Tensor::scalar(5.0));
        let y = t.scale(c, 2.0);
        let g = t.backward(y).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get_or_zeros(x, t.value(x)).sum(), 0.0);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, 2.0]));
        let y = t.tanh(x);
        assert!(matches!(t.backward(y), Err(NdError::NonScalar(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        // f(x) = x·x + x  →  f'(2) = 5
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0));
        let xx = t.mul(x, x).unwrap();
        let y = t.add(xx, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 5.0);
    }

    #[test]
    fn logsumexp_is_stable() {
        assert!((logsumexp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
    }
}
