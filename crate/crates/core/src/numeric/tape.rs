//! Define-by-run reverse-mode differentiation over [`Matrix`] values.
//!
//! Every operation evaluates eagerly and appends a record to the [`Tape`].
//! [`Tape::backward`] walks the records in exact reverse order and deposits
//! adjoints into the [`ParamSet`] the leaves were drawn from.

use crate::error::{Error, Result};
use crate::numeric::matrix::Matrix;
use crate::numeric::param::{ParamId, ParamSet};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operation kinds, used for diagnostics and adjoint fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Param,
    MatMul,
    MatMulT,
    Add,
    AddRow,
    Hadamard,
    Scale,
    Tanh,
    Sigmoid,
    Relu,
    SoftmaxRows,
    LayerNorm,
    ConcatRows,
    ConcatCols,
    SliceCols,
    MeanRows,
    SumAll,
    Transpose,
    ScalarFn,
}

impl OpKind {
    pub fn parse(name: &str) -> Option<OpKind> {
        use OpKind::*;
        let all = [
            Leaf, Param, MatMul, MatMulT, Add, AddRow, Hadamard, Scale, Tanh, Sigmoid, Relu,
            SoftmaxRows, LayerNorm, ConcatRows, ConcatCols, SliceCols, MeanRows, SumAll,
            Transpose, ScalarFn,
        ];
        all.into_iter()
            .find(|k| format!("{k:?}").eq_ignore_ascii_case(name))
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var),
    SumAll(Var),
    Transpose(Var),
    ScalarFn(Var, Matrix),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulT(..) => OpKind::MatMulT,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Hadamard(..) => OpKind::Hadamard,
            Op::Scale(..) => OpKind::Scale,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Relu(_) => OpKind::Relu,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::MeanRows(_) => OpKind::MeanRows,
            Op::SumAll(_) => OpKind::SumAll,
            Op::Transpose(_) => OpKind::Transpose,
            Op::ScalarFn(..) => OpKind::ScalarFn,
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Scale every adjoint emitted by `kind` by 1.5. Exists so gradient checks
    /// can be shown to catch a broken backward rule.
    #[doc(hidden)]
    pub fn corrupt_adjoint(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.push(params.get(id).value.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(value, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds the `1 x c` row `r` to every row of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (xr, xc) = self.shape(x);
        if self.shape(r) != (1, xc) {
            return Err(Error::Shape {
                op: "add_row",
                left: (xr, xc),
                right: self.shape(r),
            });
        }
        let mut value = self.value(x).clone();
        let row = self.value(r).as_slice().to_vec();
        for i in 0..xr {
            for (v, b) in value.row_mut(i).iter_mut().zip(&row) {
                *v += b;
            }
        }
        Ok(self.push(value, Op::AddRow(x, r)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Hadamard(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).scale(c);
        self.push(value, Op::Scale(x, c))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).softmax_rows();
        self.push(value, Op::SoftmaxRows(x))
    }

    /// Row-wise layer normalization with population variance.
    pub fn layernorm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        for (name, p) in [("layernorm gain", gain), ("layernorm bias", bias)] {
            if self.shape(p) != (1, cols) {
                return Err(Error::Shape {
                    op: name,
                    left: (rows, cols),
                    right: self.shape(p),
                });
            }
        }
        let (normalized, inv_std) = standardize_rows(self.value(x), eps);
        let g = self.value(gain).as_slice();
        let b = self.value(bias).as_slice();
        let mut value = normalized.clone();
        for i in 0..rows {
            for ((v, gj), bj) in value.row_mut(i).iter_mut().zip(g).zip(b) {
                *v = *v * gj + bj;
            }
        }
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            if m.cols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: self.shape(parts[0]),
                    right: m.shape(),
                });
            }
            rows += m.rows();
            data.extend_from_slice(m.as_slice());
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.shape(parts[0]),
                    right: (r, c),
                });
            }
            cols += c;
        }
        let mut value = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p).row(i);
                value.row_mut(i)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if start + len > cols {
            return Err(Error::Shape {
                op: "slice_cols",
                left: (rows, cols),
                right: (start, len),
            });
        }
        let src = self.value(x);
        let value = Matrix::from_fn(rows, len, |i, j| src[(i, start + j)]);
        Ok(self.push(value, Op::SliceCols(x, start)))
    }

    /// Column-wise mean, `1 x cols`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let (rows, cols) = m.shape();
        let mut out = Matrix::zeros(1, cols);
        for i in 0..rows {
            for (o, v) in out.as_mut_slice().iter_mut().zip(m.row(i)) {
                *o += v;
            }
        }
        let out = out.scale(1.0 / rows as f64);
        self.push(out, Op::MeanRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x))
    }

    /// Records a scalar function of `x` whose value and local gradient were
    /// computed elsewhere. `grad` must have the shape of `x`.
    pub fn scalar_fn(&mut self, x: Var, value: f64, grad: Matrix) -> Result<Var> {
        if grad.shape() != self.shape(x) {
            return Err(Error::Shape {
                op: "scalar_fn",
                left: self.shape(x),
                right: grad.shape(),
            });
        }
        Ok(self.push(Matrix::scalar(value), Op::ScalarFn(x, grad)))
    }

    /// Propagates adjoints from `loss` back to every parameter leaf.
    ///
    /// All gradients in `params` are zeroed first; parameters that the loss
    /// does not reach keep a zero gradient.
    pub fn backward(self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        params.zero_grads();

        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let kind = node.op.kind();
            let mut emit = |target: Var, mut contribution: Matrix| {
                if self.fault == Some(kind) {
                    contribution = contribution.scale(1.5);
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            };
            let val = |v: Var| &self.nodes[v.0].value;

            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => params.get_mut(*id).grad.add_assign(&g),
                Op::MatMul(a, b) => {
                    emit(*a, g.matmul_t(val(*b))?);
                    emit(*b, val(*a).t_matmul(&g)?);
                }
                Op::MatMulT(a, b) => {
                    emit(*a, g.matmul(val(*b))?);
                    emit(*b, g.t_matmul(val(*a))?);
                }
                Op::Add(a, b) => {
                    emit(*a, g.clone());
                    emit(*b, g);
                }
                Op::AddRow(x, r) => {
                    let mut row = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, v) in row.as_mut_slice().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    emit(*x, g);
                    emit(*r, row);
                }
                Op::Hadamard(a, b) => {
                    emit(*a, g.hadamard(val(*b))?);
                    emit(*b, g.hadamard(val(*a))?);
                }
                Op::Scale(x, c) => emit(*x, g.scale(*c)),
                Op::Tanh(x) => {
                    let y = &node.value;
                    emit(*x, g.zip_map(y, "tanh'", |gi, yi| gi * (1.0 - yi * yi))?);
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    emit(*x, g.zip_map(y, "sigmoid'", |gi, yi| gi * yi * (1.0 - yi))?);
                }
                Op::Relu(x) => {
                    emit(*x, g.zip_map(val(*x), "relu'", |gi, xi| if xi > 0.0 { gi } else { 0.0 })?);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yi), gi) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                            *d = yi * (gi - inner);
                        }
                    }
                    emit(*x, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let gvals = val(*gain).as_slice();
                    let (rows, cols) = normalized.shape();
                    let mut dx = Matrix::zeros(rows, cols);
                    let mut dgain = Matrix::zeros(1, cols);
                    let mut dbias = Matrix::zeros(1, cols);
                    for i in 0..rows {
                        let gr = g.row(i);
                        let xh = normalized.row(i);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..cols {
                            let d = gr[j] * gvals[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                            dgain.as_mut_slice()[j] += gr[j] * xh[j];
                            dbias.as_mut_slice()[j] += gr[j];
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        let row = dx.row_mut(i);
                        for j in 0..cols {
                            let d = gr[j] * gvals[j];
                            row[j] = inv_std[i] * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                    emit(*x, dx);
                    emit(*gain, dgain);
                    emit(*bias, dbias);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = val(p).shape();
                        let slice = g.as_slice()[offset * c..(offset + r) * c].to_vec();
                        emit(p, Matrix::from_vec(r, c, slice)?);
                        offset += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = val(p).shape();
                        emit(p, Matrix::from_fn(r, c, |i, j| g[(i, offset + j)]));
                        offset += c;
                    }
                }
                Op::SliceCols(x, start) => {
                    let (r, c) = val(*x).shape();
                    let mut dx = Matrix::zeros(r, c);
                    for i in 0..r {
                        dx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    emit(*x, dx);
                }
                Op::MeanRows(x) => {
                    let (r, c) = val(*x).shape();
                    let inv = 1.0 / r as f64;
                    emit(*x, Matrix::from_fn(r, c, |_, j| g[(0, j)] * inv));
                }
                Op::SumAll(x) => {
                    let (r, c) = val(*x).shape();
                    emit(*x, Matrix::filled(r, c, g.item()));
                }
                Op::Transpose(x) => emit(*x, g.transpose()),
                Op::ScalarFn(x, local) => emit(*x, local.scale(g.item())),
            }
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Per-row `(x - mean) / sqrt(var + eps)` with population variance; also
/// returns each row's `1 / sqrt(var + eps)`.
pub fn standardize_rows(x: &Matrix, eps: f64) -> (Matrix, Vec<f64>) {
    let (rows, cols) = x.shape();
    let mut out = Matrix::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    for i in 0..rows {
        let r = x.row(i);
        let mean = r.iter().sum::<f64>() / cols as f64;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (o, v) in out.row_mut(i).iter_mut().zip(r) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}
