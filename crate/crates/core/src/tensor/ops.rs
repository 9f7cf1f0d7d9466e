use super::Tensor;
use crate::error::{Error, Result};

/// The operation catalog. Row-wise operations treat a rank-1 tensor as one row.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// `[n,k] x [k,m] -> [n,m]`
    MatMul,
    /// Same shape, or a `[d]`/`[1,d]` right operand broadcast over rows.
    Add,
    /// Same broadcasting rule as `Add`.
    Sub,
    /// Elementwise product of equal shapes.
    Mul,
    Scale(f64),
    Relu,
    Exp,
    Log,
    SoftmaxRows,
    LogSoftmaxRows,
    L2NormalizeRows,
    /// Mean of all entries, shape `[1]`.
    Mean,
    /// Sum of all entries, shape `[1]`.
    Sum,
    Square,
    ConcatRows,
    SelectRows(Vec<usize>),
    Transpose,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::SoftmaxRows => "softmax_rows",
            Op::LogSoftmaxRows => "log_softmax_rows",
            Op::L2NormalizeRows => "l2_normalize_rows",
            Op::Mean => "mean",
            Op::Sum => "sum",
            Op::Square => "square",
            Op::ConcatRows => "concat_rows",
            Op::SelectRows(_) => "select_rows",
            Op::Transpose => "transpose",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::MatMul | Op::Add | Op::Sub | Op::Mul => Some(2),
            Op::ConcatRows => None,
            _ => Some(1),
        }
    }
}

/// Norm below which row normalization is rejected.
const MIN_ROW_NORM: f64 = 1e-12;

fn shape_err(op: &Op, inputs: &[&Tensor]) -> Error {
    Error::Shape {
        op: op.name(),
        shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn is_row_broadcast(a: &Tensor, b: &Tensor) -> bool {
    let (n, d) = a.dims2();
    match b.shape() {
        [bd] => *bd == d && a.shape().len() == 2 && n >= 1,
        [1, bd] => *bd == d && a.shape().len() == 2 && n > 1,
        _ => false,
    }
}

/// Evaluates one catalog operation.
pub fn forward_op(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    if let Some(k) = op.arity() {
        if inputs.len() != k {
            return Err(Error::invalid(format!(
                "{} expects {k} inputs, got {}",
                op.name(),
                inputs.len()
            )));
        }
    } else if inputs.is_empty() {
        return Err(Error::invalid(format!("{} expects inputs", op.name())));
    }

    match op {
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
                return Err(shape_err(op, inputs));
            }
            let (n, k) = a.dims2();
            let m = b.cols();
            let mut out = vec![0.0; n * m];
            matmul_nn(a.data(), b.data(), &mut out, n, k, m);
            Tensor::new(vec![n, m], out)
        }
        Op::Add | Op::Sub => {
            let (a, b) = (inputs[0], inputs[1]);
            let sign = if matches!(op, Op::Add) { 1.0 } else { -1.0 };
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x + sign * y).collect();
                Tensor::new(a.shape().to_vec(), data)
            } else if is_row_broadcast(a, b) {
                let d = a.cols();
                let mut data = a.data().to_vec();
                for row in data.chunks_mut(d) {
                    for (x, y) in row.iter_mut().zip(b.data()) {
                        *x += sign * y;
                    }
                }
                Tensor::new(a.shape().to_vec(), data)
            } else {
                Err(shape_err(op, inputs))
            }
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(shape_err(op, inputs));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Tensor::new(a.shape().to_vec(), data)
        }
        Op::Scale(c) => map(inputs[0], |x| c * x),
        Op::Relu => map(inputs[0], |x| if x > 0.0 { x } else { 0.0 }),
        Op::Exp => map(inputs[0], f64::exp),
        Op::Log => {
            if let Some(bad) = inputs[0].data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                return Err(Error::Domain {
                    op: "log",
                    msg: format!("non-positive input {bad}"),
                });
            }
            map(inputs[0], f64::ln)
        }
        Op::SoftmaxRows => {
            let x = inputs[0];
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(x.cols()) {
                softmax_in_place(row);
            }
            Tensor::new(x.shape().to_vec(), data)
        }
        Op::LogSoftmaxRows => {
            let x = inputs[0];
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(x.cols()) {
                let lse = log_sum_exp(row);
                row.iter_mut().for_each(|v| *v -= lse);
            }
            Tensor::new(x.shape().to_vec(), data)
        }
        Op::L2NormalizeRows => {
            let x = inputs[0];
            let mut data = x.data().to_vec();
            for (i, row) in data.chunks_mut(x.cols()).enumerate() {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(norm >= MIN_ROW_NORM) {
                    return Err(Error::Domain {
                        op: "l2_normalize_rows",
                        msg: format!("row {i} has norm {norm}"),
                    });
                }
                row.iter_mut().for_each(|v| *v /= norm);
            }
            Tensor::new(x.shape().to_vec(), data)
        }
        Op::Mean => {
            let x = inputs[0];
            Ok(Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64))
        }
        Op::Sum => Ok(Tensor::scalar(inputs[0].data().iter().sum())),
        Op::Square => map(inputs[0], |x| x * x),
        Op::ConcatRows => {
            let d = inputs[0].cols();
            if inputs.iter().any(|t| t.cols() != d || t.shape().len() > 2) {
                return Err(shape_err(op, inputs));
            }
            let n: usize = inputs.iter().map(|t| t.rows()).sum();
            let mut data = Vec::with_capacity(n * d);
            for t in inputs {
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![n, d], data)
        }
        Op::SelectRows(idx) => {
            let x = inputs[0];
            let (n, d) = x.dims2();
            if idx.is_empty() || idx.iter().any(|&i| i >= n) {
                return Err(Error::Shape {
                    op: "select_rows",
                    shapes: vec![x.shape().to_vec(), vec![idx.len()]],
                });
            }
            let mut data = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                data.extend_from_slice(x.row(i));
            }
            Tensor::new(vec![idx.len(), d], data)
        }
        Op::Transpose => {
            let x = inputs[0];
            let (n, d) = x.dims2();
            let mut data = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..d {
                    data[j * n + i] = x.data()[i * d + j];
                }
            }
            Tensor::new(vec![d, n], data)
        }
    }
}

/// Vector-Jacobian products: gradients of each input given the output gradient.
pub(super) fn backward_op(op: &Op, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>> {
    match op {
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (n, k) = a.dims2();
            let m = b.cols();
            let mut ga = vec![0.0; n * k];
            let mut gb = vec![0.0; k * m];
            matmul_nt(grad_out, b.data(), &mut ga, n, m, k);
            matmul_tn(a.data(), grad_out, &mut gb, n, k, m);
            vec![ga, gb]
        }
        Op::Add | Op::Sub => {
            let (a, b) = (inputs[0], inputs[1]);
            let sign = if matches!(op, Op::Add) { 1.0 } else { -1.0 };
            let ga = grad_out.to_vec();
            let gb = if a.shape() == b.shape() {
                grad_out.iter().map(|g| sign * g).collect()
            } else {
                let d = a.cols();
                let mut acc = vec![0.0; d];
                for row in grad_out.chunks(d) {
                    for (s, g) in acc.iter_mut().zip(row) {
                        *s += sign * g;
                    }
                }
                acc
            };
            vec![ga, gb]
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let ga = grad_out.iter().zip(b.data()).map(|(g, y)| g * y).collect();
            let gb = grad_out.iter().zip(a.data()).map(|(g, x)| g * x).collect();
            vec![ga, gb]
        }
        Op::Scale(c) => vec![grad_out.iter().map(|g| c * g).collect()],
        Op::Relu => vec![grad_out
            .iter()
            .zip(inputs[0].data())
            .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
            .collect()],
        Op::Exp => vec![grad_out.iter().zip(output.data()).map(|(g, y)| g * y).collect()],
        Op::Log => vec![grad_out.iter().zip(inputs[0].data()).map(|(g, x)| g / x).collect()],
        Op::SoftmaxRows => {
            let d = output.cols();
            let mut gx = vec![0.0; grad_out.len()];
            for ((gx_r, g_r), y_r) in gx.chunks_mut(d).zip(grad_out.chunks(d)).zip(output.data().chunks(d)) {
                let dot: f64 = g_r.iter().zip(y_r).map(|(g, y)| g * y).sum();
                for ((o, g), y) in gx_r.iter_mut().zip(g_r).zip(y_r) {
                    *o = y * (g - dot);
                }
            }
            vec![gx]
        }
        Op::LogSoftmaxRows => {
            let d = output.cols();
            let mut gx = vec![0.0; grad_out.len()];
            for ((gx_r, g_r), y_r) in gx.chunks_mut(d).zip(grad_out.chunks(d)).zip(output.data().chunks(d)) {
                let total: f64 = g_r.iter().sum();
                for ((o, g), y) in gx_r.iter_mut().zip(g_r).zip(y_r) {
                    *o = g - y.exp() * total;
                }
            }
            vec![gx]
        }
        Op::L2NormalizeRows => {
            let x = inputs[0];
            let d = x.cols();
            let mut gx = vec![0.0; grad_out.len()];
            for (((gx_r, g_r), y_r), x_r) in gx
                .chunks_mut(d)
                .zip(grad_out.chunks(d))
                .zip(output.data().chunks(d))
                .zip(x.data().chunks(d))
            {
                let norm = x_r.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = g_r.iter().zip(y_r).map(|(g, y)| g * y).sum();
                for ((o, g), y) in gx_r.iter_mut().zip(g_r).zip(y_r) {
                    *o = (g - y * dot) / norm;
                }
            }
            vec![gx]
        }
        Op::Mean => {
            let n = inputs[0].numel();
            vec![vec![grad_out[0] / n as f64; n]]
        }
        Op::Sum => vec![vec![grad_out[0]; inputs[0].numel()]],
        Op::Square => vec![grad_out
            .iter()
            .zip(inputs[0].data())
            .map(|(g, x)| 2.0 * x * g)
            .collect()],
        Op::ConcatRows => {
            let mut offset = 0;
            inputs
                .iter()
                .map(|t| {
                    let g = grad_out[offset..offset + t.numel()].to_vec();
                    offset += t.numel();
                    g
                })
                .collect()
        }
        Op::SelectRows(idx) => {
            let x = inputs[0];
            let d = x.cols();
            let mut gx = vec![0.0; x.numel()];
            for (r, &i) in idx.iter().enumerate() {
                for (o, g) in gx[i * d..(i + 1) * d].iter_mut().zip(&grad_out[r * d..(r + 1) * d]) {
                    *o += g;
                }
            }
            vec![gx]
        }
        Op::Transpose => {
            let (n, d) = inputs[0].dims2();
            let mut gx = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..d {
                    gx[i * d + j] = grad_out[j * n + i];
                }
            }
            vec![gx]
        }
    }
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// `out[n,m] += a[n,k] * b[k,m]`
fn matmul_nn(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in out_row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[n,k] += g[n,m] * b[k,m]^T`
fn matmul_nt(g: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let g_row = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let b_row = &b[p * m..(p + 1) * m];
            out[i * k + p] += g_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,m] += a[n,k]^T * g[n,m]`
fn matmul_tn(a: &[f64], g: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let g_row = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, gv) in out[p * m..(p + 1) * m].iter_mut().zip(g_row) {
                *o += aip * gv;
            }
        }
    }
}
