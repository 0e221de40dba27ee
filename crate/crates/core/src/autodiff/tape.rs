//! Reverse-mode tape over dense `f64` matrices.

use ndarray::{Array2, Axis};

use super::AutodiffError;
use crate::alignment::{fit_slices, ScaleShift};

pub type Matrix = Array2<f64>;

/// Probabilities fed to the binary cross-entropy are clamped to
/// `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub const BCE_CLAMP: f64 = 1e-12;

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
    /// `a + b` with `b` a `1 x n` row broadcast over the rows of `a`.
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Mean(Var),
    Sum(Var),
    /// Masked MSE after a fixed affine alignment; the fit is a constant
    /// with respect to the gradient.
    AlignedMse {
        pred: Var,
        target: Vec<f64>,
        mask: Vec<bool>,
        fit: ScaleShift,
        count: usize,
    },
    Bce {
        prob: Var,
        target: Vec<f64>,
    },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::AlignedMse { .. } => "aligned_mse",
            Op::Bce { .. } => "bce",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::AddRow(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::Tanh(a) | Op::Sigmoid(a) | Op::Mean(a) | Op::Sum(a) => vec![a],
            Op::AlignedMse { pred, .. } => vec![pred],
            Op::Bce { prob, .. } => vec![prob],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    requires_grad: bool,
    op: Op,
}

/// A single-threaded computation graph. Nodes are appended in evaluation
/// order, so reverse insertion order is a valid backward schedule.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A parameter leaf; only trainable leaves receive gradients.
    pub fn parameter(&mut self, value: Matrix, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: trainable,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Matrix::from_elem((1, 1), x))
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    /// Number of nodes currently holding a gradient buffer.
    pub fn grad_buffers(&self) -> usize {
        self.nodes.iter().filter(|n| n.grad.is_some()).count()
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let value = self.value(a).dot(self.value(b));
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                left: sa,
                right: sr,
            });
        }
        let value = self.value(a) + self.value(row);
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        let value = self.value(a) + self.value(b);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a) * self.value(b);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = m.sum() / m.len().max(1) as f64;
        self.push(Matrix::from_elem((1, 1), value), Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum();
        self.push(Matrix::from_elem((1, 1), value), Op::Sum(a))
    }

    /// Scale-and-shift-invariant loss of a column of predictions.
    ///
    /// The least-squares fit is recomputed from the current values and then
    /// held constant for the backward pass. At the optimum the partial
    /// derivatives of the residual with respect to `(s, t)` vanish, so this
    /// gradient equals that of the fully refitted loss.
    pub fn ssi_loss(&mut self, pred: Var, target: &[f64], mask: &[bool]) -> Result<Var, AutodiffError> {
        let values: Vec<f64> = self.value(pred).iter().copied().collect();
        if values.len() != target.len() || values.len() != mask.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "ssi_loss",
                left: self.shape(pred),
                right: (target.len(), mask.len()),
            });
        }
        let fit = fit_slices(&values, target, mask)?;
        let mut acc = 0.0;
        let mut count = 0usize;
        for ((&p, &g), &m) in values.iter().zip(target).zip(mask) {
            if m {
                let r = fit.apply(p) - g;
                acc += r * r;
                count += 1;
            }
        }
        let value = acc / count as f64;
        Ok(self.push(
            Matrix::from_elem((1, 1), value),
            Op::AlignedMse {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                fit,
                count,
            },
        ))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 targets.
    pub fn bce(&mut self, prob: Var, target: &[f64]) -> Result<Var, AutodiffError> {
        let p = self.value(prob);
        if p.len() != target.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "bce",
                left: p.dim(),
                right: (target.len(), 1),
            });
        }
        let n = target.len().max(1) as f64;
        let value = p.iter().zip(target).map(|(&p, &y)| bce_term(p, y)).sum::<f64>() / n;
        Ok(self.push(
            Matrix::from_elem((1, 1), value),
            Op::Bce {
                prob,
                target: target.to_vec(),
            },
        ))
    }

    /// Populate gradients of `loss` for every node that requires them.
    ///
    /// Buffers are allocated only on nodes with `requires_grad`; a loss
    /// that depends on no trainable leaf is a no-op.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        for node in self.nodes[..=loss.0].iter_mut() {
            if node.requires_grad {
                node.grad = Some(Matrix::zeros(node.value.dim()));
            }
        }
        self.nodes[loss.0].grad = Some(Matrix::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(upstream) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.local_gradients(idx, &upstream);
            self.nodes[idx].grad = Some(upstream);
            for (parent, g) in contributions {
                if let Some(buf) = self.nodes[parent.0].grad.as_mut() {
                    *buf += &g;
                }
            }
        }
        Ok(())
    }

    fn local_gradients(&self, idx: usize, up: &Matrix) -> Vec<(Var, Matrix)> {
        let node = &self.nodes[idx];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    out.push((*a, up.dot(&self.value(*b).t())));
                }
                if needs(*b) {
                    out.push((*b, self.value(*a).t().dot(up)));
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    out.push((*a, up.clone()));
                }
                if needs(*row) {
                    out.push((*row, up.sum_axis(Axis(0)).insert_axis(Axis(0))));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        out.push((v, up.clone()));
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    out.push((*a, up * self.value(*b)));
                }
                if needs(*b) {
                    out.push((*b, up * self.value(*a)));
                }
            }
            Op::Scale(a, c) => out.push((*a, up * *c)),
            Op::Tanh(a) => {
                let d = node.value.mapv(|y| 1.0 - y * y);
                out.push((*a, up * &d));
            }
            Op::Sigmoid(a) => {
                let d = node.value.mapv(|y| y * (1.0 - y));
                out.push((*a, up * &d));
            }
            Op::Mean(a) => {
                let src = self.value(*a);
                let g = up[[0, 0]] / src.len().max(1) as f64;
                out.push((*a, Matrix::from_elem(src.dim(), g)));
            }
            Op::Sum(a) => {
                out.push((*a, Matrix::from_elem(self.value(*a).dim(), up[[0, 0]])));
            }
            Op::AlignedMse {
                pred,
                target,
                mask,
                fit,
                count,
            } => {
                let src = self.value(*pred);
                let k = up[[0, 0]] * 2.0 * fit.s / *count as f64;
                let mut g = Matrix::zeros(src.dim());
                for (i, (gv, &p)) in g.iter_mut().zip(src.iter()).enumerate() {
                    if mask[i] {
                        *gv = k * (fit.apply(p) - target[i]);
                    }
                }
                out.push((*pred, g));
            }
            Op::Bce { prob, target } => {
                let src = self.value(*prob);
                let scale = up[[0, 0]] / target.len().max(1) as f64;
                let mut g = Matrix::zeros(src.dim());
                for (i, (gv, &p)) in g.iter_mut().zip(src.iter()).enumerate() {
                    // The clamp is flat outside its interval.
                    if p > BCE_CLAMP && p < 1.0 - BCE_CLAMP {
                        let y = target[i];
                        *gv = scale * (-y / p + (1.0 - y) / (1.0 - p));
                    }
                }
                out.push((*prob, g));
            }
        }
        out
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-[y ln p + (1 - y) ln(1 - p)]` with `p` clamped.
#[inline]
pub fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn linear_gradient() {
        let mut t = Tape::new();
        let w = t.parameter(array![[1.5]], true);
        let x = t.constant(array![[3.0]]);
        let y = t.mul(w, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(w).unwrap()[[0, 0]], 3.0);
        assert!(t.grad(x).is_none());
        assert_eq!(t.op_tag(y), "mul");
        assert_eq!(t.parents(y), vec![w, x]);
    }

    #[test]
    fn frozen_graph_allocates_nothing() {
        let mut t = Tape::new();
        let w = t.parameter(array![[1.0, 2.0]], false);
        let s = t.sum(w);
        t.backward(s).unwrap();
        assert_eq!(t.grad_buffers(), 0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let w = t.parameter(array![[1.0, 2.0]], true);
        assert_eq!(t.backward(w), Err(AutodiffError::NonScalarLoss((1, 2))));
    }

    #[test]
    fn matmul_bias_tanh_gradient() {
        // y = sum(tanh(x W + b))
        let mut t = Tape::new();
        let x = t.constant(array![[0.5, -1.0], [2.0, 0.25]]);
        let w = t.parameter(array![[0.3], [0.7]], true);
        let b = t.parameter(array![[0.1]], true);
        let h = t.matmul(x, w).unwrap();
        let h = t.add_row(h, b).unwrap();
        let a = t.tanh(h);
        let y = t.sum(a);
        t.backward(y).unwrap();
        let z = [0.5 * 0.3 - 0.7 + 0.1, 2.0 * 0.3 + 0.25 * 0.7 + 0.1];
        let d: Vec<f64> = z.iter().map(|z: &f64| 1.0 - z.tanh().powi(2)).collect();
        let gw = t.grad(w).unwrap();
        assert!((gw[[0, 0]] - (0.5 * d[0] + 2.0 * d[1])).abs() < 1e-15);
        assert!((gw[[1, 0]] - (-d[0] + 0.25 * d[1])).abs() < 1e-15);
        assert!((t.grad(b).unwrap()[[0, 0]] - (d[0] + d[1])).abs() < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros((2, 3)));
        let b = t.constant(Matrix::zeros((2, 3)));
        assert!(matches!(t.matmul(a, b), Err(AutodiffError::ShapeMismatch { .. })));
        let r = t.constant(Matrix::zeros((1, 2)));
        assert!(t.add_row(a, r).is_err());
        assert!(t.bce(a, &[0.0; 5]).is_err());
    }

    #[test]
    fn bce_at_half() {
        let mut t = Tape::new();
        let z = t.parameter(array![[0.0]], true);
        let p = t.sigmoid(z);
        let l = t.bce(p, &[1.0]).unwrap();
        assert!((t.scalar_value(l) - std::f64::consts::LN_2).abs() < 1e-15);
        t.backward(l).unwrap();
        // d/dz = p - y
        assert!((t.grad(z).unwrap()[[0, 0]] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!(bce_term(0.0, 1.0).is_finite());
        assert!(bce_term(1.0, 0.0).is_finite());
    }
}
