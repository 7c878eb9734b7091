use std::sync::Arc;

use super::tensor::split_at_axis;
use super::{AutodiffError, Tensor};

/// Differentiable operation recorded in a [`Graph`](super::Graph).
///
/// Elementwise binary ops accept a scalar (rank-0) operand on either side; no
/// other broadcasting is performed.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    /// `[m, k] x [k, n] -> [m, n]`.
    MatMul,
    /// Swaps the two axes of a matrix.
    Transpose,
    /// Contracts axis `mode` of the first input with the columns of the matrix
    /// given as second input: `Y[.., i, ..] = sum_j U[i, j] X[.., j, ..]`.
    ModeProduct {
        mode: usize,
    },
    /// Adjoint companion of [`OpKind::ModeProduct`]: contracts every axis but
    /// `mode` of two equally shaped (up to `mode`) tensors into a matrix.
    ModeGram {
        mode: usize,
    },
    Concat {
        axis: usize,
    },
    SliceAxis {
        axis: usize,
        start: usize,
        len: usize,
    },
    /// Embeds the input at `start` along `axis` in a zero tensor of extent `total`.
    PadAxis {
        axis: usize,
        start: usize,
        total: usize,
    },
    /// Picks entries of the flattened input; output is one-dimensional.
    Gather {
        indices: Arc<[usize]>,
    },
    /// Scatter-adds a one-dimensional input into a zero tensor of `shape`.
    Scatter {
        indices: Arc<[usize]>,
        shape: Vec<usize>,
    },
    Reshape {
        shape: Vec<usize>,
    },
    /// Sum of all entries, producing a scalar.
    Sum,
    /// Mean of all entries, producing a scalar.
    Mean,
    /// Replicates a scalar into `shape`.
    BroadcastTo {
        shape: Vec<usize>,
    },
    Relu,
    /// Heaviside step `1[x > 0]`; its derivative is zero.
    Step,
    Logistic,
    Tanh,
    Sin,
    Cos,
    Square,
    /// Row-wise softmax of a matrix (a vector is treated as one row).
    Softmax,
    /// Mean over rows of `-log softmax(logits)[label]`.
    SoftmaxCrossEntropy {
        labels: Arc<[usize]>,
    },
    /// Mean of squared differences of two equally shaped tensors.
    SquaredError,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "subtract",
            OpKind::Mul => "multiply",
            OpKind::Div => "divide",
            OpKind::Neg => "negate",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::ModeProduct { .. } => "mode-product",
            OpKind::ModeGram { .. } => "mode-gram",
            OpKind::Concat { .. } => "concat",
            OpKind::SliceAxis { .. } => "slice-axis",
            OpKind::PadAxis { .. } => "pad-axis",
            OpKind::Gather { .. } => "gather",
            OpKind::Scatter { .. } => "scatter",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::BroadcastTo { .. } => "broadcast",
            OpKind::Relu => "relu",
            OpKind::Step => "step",
            OpKind::Logistic => "logistic",
            OpKind::Tanh => "tanh",
            OpKind::Sin => "sin",
            OpKind::Cos => "cos",
            OpKind::Square => "square",
            OpKind::Softmax => "softmax",
            OpKind::SoftmaxCrossEntropy { .. } => "softmax-cross-entropy",
            OpKind::SquaredError => "squared-error",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Concat { .. } => None,
            OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Div
            | OpKind::MatMul
            | OpKind::ModeProduct { .. }
            | OpKind::ModeGram { .. }
            | OpKind::SquaredError => Some(2),
            _ => Some(1),
        }
    }
}

fn mismatch(op: &OpKind, inputs: &[&Tensor]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op: op.name(),
        shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn build(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("kernel produced consistent shape")
}

fn elementwise(
    op: &OpKind,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, AutodiffError> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(build(a.shape().to_vec(), data))
    } else if b.is_scalar() {
        let y = b.item();
        Ok(build(
            a.shape().to_vec(),
            a.data().iter().map(|&x| f(x, y)).collect(),
        ))
    } else if a.is_scalar() {
        let x = a.item();
        Ok(build(
            b.shape().to_vec(),
            b.data().iter().map(|&y| f(x, y)).collect(),
        ))
    } else {
        Err(mismatch(op, &[a, b]))
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// Four independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn as_rows(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [n] => Some((1, *n)),
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

/// Evaluates `op` on concrete inputs.
pub fn evaluate(op: &OpKind, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
    if let Some(arity) = op.arity() {
        if inputs.len() != arity {
            return Err(AutodiffError::Arity {
                op: op.name(),
                expected: arity,
                got: inputs.len(),
            });
        }
    } else if inputs.is_empty() {
        return Err(AutodiffError::Arity {
            op: op.name(),
            expected: 1,
            got: 0,
        });
    }

    match op {
        OpKind::Add => elementwise(op, inputs[0], inputs[1], |x, y| x + y),
        OpKind::Sub => elementwise(op, inputs[0], inputs[1], |x, y| x - y),
        OpKind::Mul => elementwise(op, inputs[0], inputs[1], |x, y| x * y),
        OpKind::Div => elementwise(op, inputs[0], inputs[1], |x, y| x / y),
        OpKind::Neg => Ok(inputs[0].map(|x| -x)),
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            match (a.shape(), b.shape()) {
                ([m, k], [k2, n]) if k == k2 => Ok(build(
                    vec![*m, *n],
                    matmul_raw(a.data(), b.data(), *m, *k, *n),
                )),
                _ => Err(mismatch(op, inputs)),
            }
        }
        OpKind::Transpose => match inputs[0].shape() {
            [r, c] => Ok(build(vec![*c, *r], transpose_raw(inputs[0].data(), *r, *c))),
            _ => Err(mismatch(op, inputs)),
        },
        OpKind::ModeProduct { mode } => {
            let (x, u) = (inputs[0], inputs[1]);
            if *mode >= x.rank() {
                return Err(mismatch(op, inputs));
            }
            let (m, n) = match u.shape() {
                [m, n] if *n == x.shape()[*mode] => (*m, *n),
                _ => return Err(mismatch(op, inputs)),
            };
            let (outer, _, inner) = split_at_axis(x.shape(), *mode);
            let mut out = vec![0.0; outer * m * inner];
            let (xd, ud) = (x.data(), u.data());
            if inner == 1 {
                // Last axis: rows of x against rows of u.
                for p in 0..outer {
                    let xr = &xd[p * n..(p + 1) * n];
                    for i in 0..m {
                        out[p * m + i] = dot(xr, &ud[i * n..(i + 1) * n]);
                    }
                }
                let mut shape = x.shape().to_vec();
                shape[*mode] = m;
                return Ok(build(shape, out));
            }
            for p in 0..outer {
                for i in 0..m {
                    let dst = &mut out[(p * m + i) * inner..(p * m + i + 1) * inner];
                    for j in 0..n {
                        let w = ud[i * n + j];
                        if w == 0.0 {
                            continue;
                        }
                        let src = &xd[(p * n + j) * inner..(p * n + j + 1) * inner];
                        for (o, &s) in dst.iter_mut().zip(src) {
                            *o += w * s;
                        }
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            shape[*mode] = m;
            Ok(build(shape, out))
        }
        OpKind::ModeGram { mode } => {
            let (a, b) = (inputs[0], inputs[1]);
            if *mode >= a.rank() || a.rank() != b.rank() {
                return Err(mismatch(op, inputs));
            }
            let same_elsewhere = a
                .shape()
                .iter()
                .zip(b.shape())
                .enumerate()
                .all(|(ax, (x, y))| ax == *mode || x == y);
            if !same_elsewhere {
                return Err(mismatch(op, inputs));
            }
            let (outer, m, inner) = split_at_axis(a.shape(), *mode);
            let n = b.shape()[*mode];
            let mut out = vec![0.0; m * n];
            let (ad, bd) = (a.data(), b.data());
            if inner == 1 {
                // Last axis: sum of outer products of matching rows.
                for p in 0..outer {
                    let br = &bd[p * n..(p + 1) * n];
                    for i in 0..m {
                        let w = ad[p * m + i];
                        if w == 0.0 {
                            continue;
                        }
                        for (o, &y) in out[i * n..(i + 1) * n].iter_mut().zip(br) {
                            *o += w * y;
                        }
                    }
                }
                return Ok(build(vec![m, n], out));
            }
            for p in 0..outer {
                for i in 0..m {
                    let ar = &ad[(p * m + i) * inner..(p * m + i + 1) * inner];
                    for j in 0..n {
                        let br = &bd[(p * n + j) * inner..(p * n + j + 1) * inner];
                        out[i * n + j] += dot(ar, br);
                    }
                }
            }
            Ok(build(vec![m, n], out))
        }
        OpKind::Concat { axis } => {
            let first = inputs[0];
            if *axis >= first.rank() {
                return Err(mismatch(op, inputs));
            }
            let compatible = inputs.iter().all(|t| {
                t.rank() == first.rank()
                    && t.shape()
                        .iter()
                        .zip(first.shape())
                        .enumerate()
                        .all(|(ax, (x, y))| ax == *axis || x == y)
            });
            if !compatible {
                return Err(mismatch(op, inputs));
            }
            let total: usize = inputs.iter().map(|t| t.shape()[*axis]).sum();
            let (outer, _, inner) = split_at_axis(first.shape(), *axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for p in 0..outer {
                for t in inputs {
                    let len = t.shape()[*axis] * inner;
                    out.extend_from_slice(&t.data()[p * len..(p + 1) * len]);
                }
            }
            let mut shape = first.shape().to_vec();
            shape[*axis] = total;
            Ok(build(shape, out))
        }
        OpKind::SliceAxis { axis, start, len } => {
            let x = inputs[0];
            if *axis >= x.rank() || *len == 0 || start + len > x.shape()[*axis] {
                return Err(mismatch(op, inputs));
            }
            let (outer, n, inner) = split_at_axis(x.shape(), *axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for p in 0..outer {
                let base = (p * n + start) * inner;
                out.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = *len;
            Ok(build(shape, out))
        }
        OpKind::PadAxis { axis, start, total } => {
            let x = inputs[0];
            if *axis >= x.rank() || start + x.shape()[*axis] > *total {
                return Err(mismatch(op, inputs));
            }
            let (outer, n, inner) = split_at_axis(x.shape(), *axis);
            let mut out = vec![0.0; outer * total * inner];
            for p in 0..outer {
                let dst = (p * total + start) * inner;
                out[dst..dst + n * inner]
                    .copy_from_slice(&x.data()[p * n * inner..(p + 1) * n * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = *total;
            Ok(build(shape, out))
        }
        OpKind::Gather { indices } => {
            let x = inputs[0];
            if indices.is_empty() || indices.iter().any(|&i| i >= x.numel()) {
                return Err(AutodiffError::IndexOutOfRange {
                    op: op.name(),
                    len: x.numel(),
                });
            }
            let data = indices.iter().map(|&i| x.data()[i]).collect();
            Ok(build(vec![indices.len()], data))
        }
        OpKind::Scatter { indices, shape } => {
            let x = inputs[0];
            let numel: usize = shape.iter().product();
            if x.shape() != [indices.len()] {
                return Err(mismatch(op, inputs));
            }
            if indices.iter().any(|&i| i >= numel) {
                return Err(AutodiffError::IndexOutOfRange {
                    op: op.name(),
                    len: numel,
                });
            }
            let mut out = vec![0.0; numel];
            for (&i, &v) in indices.iter().zip(x.data()) {
                out[i] += v;
            }
            Tensor::new(shape.clone(), out)
        }
        OpKind::Reshape { shape } => {
            let numel: usize = shape.iter().product();
            if numel != inputs[0].numel() {
                return Err(mismatch(op, inputs));
            }
            inputs[0].reshaped(shape)
        }
        OpKind::Sum => Ok(Tensor::scalar(inputs[0].data().iter().sum())),
        OpKind::Mean => {
            let x = inputs[0];
            Ok(Tensor::scalar(
                x.data().iter().sum::<f64>() / x.numel() as f64,
            ))
        }
        OpKind::BroadcastTo { shape } => {
            if !inputs[0].is_scalar() {
                return Err(mismatch(op, inputs));
            }
            Tensor::new(
                shape.clone(),
                vec![inputs[0].item(); shape.iter().product()],
            )
        }
        OpKind::Relu => Ok(inputs[0].map(|x| if x > 0.0 { x } else { 0.0 })),
        OpKind::Step => Ok(inputs[0].map(|x| if x > 0.0 { 1.0 } else { 0.0 })),
        OpKind::Logistic => Ok(inputs[0].map(logistic)),
        OpKind::Tanh => Ok(inputs[0].map(f64::tanh)),
        OpKind::Sin => Ok(inputs[0].map(f64::sin)),
        OpKind::Cos => Ok(inputs[0].map(f64::cos)),
        OpKind::Square => Ok(inputs[0].map(|x| x * x)),
        OpKind::Softmax => {
            let x = inputs[0];
            let (rows, cols) = as_rows(x).ok_or_else(|| mismatch(op, inputs))?;
            let mut out = x.data().to_vec();
            for r in 0..rows {
                let row = &mut out[r * cols..(r + 1) * cols];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
            Ok(build(x.shape().to_vec(), out))
        }
        OpKind::SoftmaxCrossEntropy { labels } => {
            let x = inputs[0];
            let (rows, cols) = as_rows(x).ok_or_else(|| mismatch(op, inputs))?;
            if labels.len() != rows {
                return Err(mismatch(op, inputs));
            }
            if labels.iter().any(|&l| l >= cols) {
                return Err(AutodiffError::IndexOutOfRange {
                    op: op.name(),
                    len: cols,
                });
            }
            let mut total = 0.0;
            for (r, &label) in labels.iter().enumerate() {
                let row = &x.data()[r * cols..(r + 1) * cols];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[label];
            }
            Ok(Tensor::scalar(total / rows as f64))
        }
        OpKind::SquaredError => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(op, inputs));
            }
            let sum: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            Ok(Tensor::scalar(sum / a.numel() as f64))
        }
    }
}

/// One-hot matrix for `labels` over `classes` columns.
pub(crate) fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        data[r * classes + l] = 1.0;
    }
    build(vec![labels.len(), classes], data)
}
