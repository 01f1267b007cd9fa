//! Forward kernels and local backward rules for every recordable op.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Operations a [`super::Tape`] knows how to record.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind<T> {
    /// `[m×k]·[k×n]`
    MatMul,
    /// Elementwise sum of two same-shaped tensors.
    Add,
    /// `[m×n] + [n]`, the bias broadcast over rows.
    AddBias,
    /// Elementwise product.
    Mul,
    Scale(T),
    Relu,
    Tanh,
    /// Softmax along the last axis, max-subtracted.
    RowSoftmax,
    /// Log-softmax along the last axis, max-subtracted.
    RowLogSoftmax,
    Log,
    Exp,
    Sum,
    Mean,
    Transpose,
    ConcatRows,
    IndexRows(Vec<usize>),
    /// `A·Bᵀ` for `A: [m×d]`, `B: [n×d]`.
    DotMatrix,
    /// Row `i` picks column `idx[i]`: `[m×n] → [m]`.
    Pick(Vec<usize>),
    Reshape(Vec<usize>),
}

impl<T> OpKind<T> {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::AddBias => "add_bias",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::RowSoftmax => "row_softmax",
            OpKind::RowLogSoftmax => "row_log_softmax",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Transpose => "transpose",
            OpKind::ConcatRows => "concat_rows",
            OpKind::IndexRows(_) => "index_rows",
            OpKind::DotMatrix => "dot_matrix",
            OpKind::Pick(_) => "pick",
            OpKind::Reshape(_) => "reshape",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::MatMul | OpKind::Add | OpKind::AddBias | OpKind::Mul | OpKind::DotMatrix => {
                Some(2)
            }
            OpKind::ConcatRows => None,
            _ => Some(1),
        }
    }
}

fn shapes<T: Scalar>(inputs: &[&Tensor<T>]) -> String {
    inputs.iter().map(|t| format!("{:?}", t.shape())).collect::<Vec<_>>().join(", ")
}

fn mismatch<T: Scalar>(kind: &OpKind<T>, inputs: &[&Tensor<T>]) -> Error {
    Error::shape(kind.name(), shapes(inputs))
}

fn matrix_dims<T: Scalar>(t: &Tensor<T>) -> Option<(usize, usize)> {
    (t.ndim() == 2).then(|| (t.shape()[0], t.shape()[1]))
}

/// Rows and row length for row-wise ops; vectors are one row.
fn row_view<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    match t.ndim() {
        2 => (t.shape()[0], t.shape()[1]),
        _ => (1, t.numel()),
    }
}

/// `out[i,:] = Σ_k a[i,k]·b[k,:]`, accumulated in `k` order.
pub(crate) fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[i,j] = Σ_p a[i,p]·b[j,p]` for `a: [m×k]`, `b: [n×k]`.
pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `out = aᵀ·b` for `a: [m×k]`, `b: [m×n]`, giving `[k×n]`.
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> (T, T) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for &v in row {
        total += (v - max).exp();
    }
    (max, total)
}

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let (max, total) = log_sum_exp(row);
        for (o, &v) in out[i * cols..(i + 1) * cols].iter_mut().zip(row) {
            *o = (v - max).exp() / total;
        }
    }
    out
}

pub(crate) fn log_softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let (max, total) = log_sum_exp(row);
        let lse = total.ln();
        for (o, &v) in out[i * cols..(i + 1) * cols].iter_mut().zip(row) {
            *o = (v - max) - lse;
        }
    }
    out
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Evaluate `kind` on `inputs`, returning the output shape and values.
pub(crate) fn forward<T: Scalar>(
    kind: &OpKind<T>,
    inputs: &[&Tensor<T>],
) -> Result<(Vec<usize>, Vec<T>)> {
    if let Some(n) = kind.arity() {
        if inputs.len() != n {
            return Err(Error::shape(
                kind.name(),
                format!("expected {n} inputs, got {}", inputs.len()),
            ));
        }
    }
    let bad = || mismatch(kind, inputs);
    let x = inputs.first().copied();
    let out = match kind {
        OpKind::MatMul => {
            let (m, k) = matrix_dims(inputs[0]).ok_or_else(bad)?;
            let (k2, n) = matrix_dims(inputs[1]).ok_or_else(bad)?;
            if k != k2 {
                return Err(bad());
            }
            (vec![m, n], matmul_nn(inputs[0].data(), inputs[1].data(), m, k, n))
        }
        OpKind::DotMatrix => {
            let (m, k) = matrix_dims(inputs[0]).ok_or_else(bad)?;
            let (n, k2) = matrix_dims(inputs[1]).ok_or_else(bad)?;
            if k != k2 {
                return Err(bad());
            }
            (vec![m, n], matmul_nt(inputs[0].data(), inputs[1].data(), m, k, n))
        }
        OpKind::Add | OpKind::Mul => {
            if inputs[0].shape() != inputs[1].shape() {
                return Err(bad());
            }
            let data = if matches!(kind, OpKind::Add) {
                zip_map(inputs[0].data(), inputs[1].data(), |a, b| a + b)
            } else {
                zip_map(inputs[0].data(), inputs[1].data(), |a, b| a * b)
            };
            (inputs[0].shape().to_vec(), data)
        }
        OpKind::AddBias => {
            let (m, n) = matrix_dims(inputs[0]).ok_or_else(bad)?;
            let b = inputs[1];
            if b.ndim() != 1 || b.numel() != n {
                return Err(bad());
            }
            let mut data = inputs[0].data().to_vec();
            for i in 0..m {
                for (o, &bv) in data[i * n..(i + 1) * n].iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            (vec![m, n], data)
        }
        OpKind::Scale(c) => {
            let x = x.unwrap();
            (x.shape().to_vec(), x.data().iter().map(|&v| v * *c).collect())
        }
        OpKind::Relu => {
            let x = x.unwrap();
            let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() });
            (x.shape().to_vec(), data.collect())
        }
        OpKind::Tanh => {
            let x = x.unwrap();
            (x.shape().to_vec(), x.data().iter().map(|v| v.tanh()).collect())
        }
        OpKind::Log => {
            let x = x.unwrap();
            (x.shape().to_vec(), x.data().iter().map(|v| v.ln()).collect())
        }
        OpKind::Exp => {
            let x = x.unwrap();
            (x.shape().to_vec(), x.data().iter().map(|v| v.exp()).collect())
        }
        OpKind::RowSoftmax | OpKind::RowLogSoftmax => {
            let x = x.unwrap();
            if x.ndim() == 0 || x.ndim() > 2 {
                return Err(bad());
            }
            let (r, c) = row_view(x);
            let data = if matches!(kind, OpKind::RowSoftmax) {
                softmax_rows(x.data(), r, c)
            } else {
                log_softmax_rows(x.data(), r, c)
            };
            (x.shape().to_vec(), data)
        }
        OpKind::Sum | OpKind::Mean => {
            let x = x.unwrap();
            let mut total = T::zero();
            for &v in x.data() {
                total += v;
            }
            if matches!(kind, OpKind::Mean) {
                if x.numel() == 0 {
                    return Err(bad());
                }
                total /= T::of(x.numel() as f64);
            }
            (vec![], vec![total])
        }
        OpKind::Transpose => {
            let x = x.unwrap();
            let (m, n) = matrix_dims(x).ok_or_else(bad)?;
            (vec![n, m], transpose(x.data(), m, n))
        }
        OpKind::ConcatRows => {
            let first = x.ok_or_else(bad)?;
            let (_, c) = matrix_dims(first).ok_or_else(bad)?;
            let mut rows = 0;
            let mut data = Vec::new();
            for t in inputs {
                let (r, c2) = matrix_dims(t).ok_or_else(bad)?;
                if c2 != c {
                    return Err(bad());
                }
                rows += r;
                data.extend_from_slice(t.data());
            }
            (vec![rows, c], data)
        }
        OpKind::IndexRows(idx) => {
            let x = x.unwrap();
            let (m, c) = matrix_dims(x).ok_or_else(bad)?;
            if let Some(&i) = idx.iter().find(|&&i| i >= m) {
                return Err(Error::shape("index_rows", format!("row {i} of {:?}", x.shape())));
            }
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                data.extend_from_slice(x.row(i));
            }
            (vec![idx.len(), c], data)
        }
        OpKind::Pick(idx) => {
            let x = x.unwrap();
            let (m, n) = matrix_dims(x).ok_or_else(bad)?;
            if idx.len() != m {
                return Err(bad());
            }
            if let Some(&j) = idx.iter().find(|&&j| j >= n) {
                return Err(Error::shape("pick", format!("column {j} of {:?}", x.shape())));
            }
            (vec![m], idx.iter().enumerate().map(|(i, &j)| x.data()[i * n + j]).collect())
        }
        OpKind::Reshape(shape) => {
            let x = x.unwrap();
            if shape.iter().product::<usize>() != x.numel() {
                return Err(Error::shape(
                    "reshape",
                    format!("{:?} into {shape:?}", x.shape()),
                ));
            }
            (shape.clone(), x.data().to_vec())
        }
    };
    Ok(out)
}

/// Vector-Jacobian products: given the upstream gradient `g` of the output,
/// return the gradient for input `which`.
pub(crate) fn backward<T: Scalar>(
    kind: &OpKind<T>,
    inputs: &[Tensor<T>],
    output: &Tensor<T>,
    g: &[T],
    which: usize,
) -> Vec<T> {
    let x = &inputs[0];
    match kind {
        OpKind::MatMul => {
            let (m, k) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let n = inputs[1].shape()[1];
            if which == 0 {
                // g·bᵀ
                matmul_nt(g, inputs[1].data(), m, n, k)
            } else {
                // aᵀ·g
                matmul_tn(inputs[0].data(), g, m, k, n)
            }
        }
        OpKind::DotMatrix => {
            let (m, k) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let n = inputs[1].shape()[0];
            if which == 0 {
                matmul_nn(g, inputs[1].data(), m, n, k)
            } else {
                matmul_tn(g, inputs[0].data(), m, n, k)
            }
        }
        OpKind::Add => g.to_vec(),
        OpKind::Mul => zip_map(g, inputs[1 - which].data(), |a, b| a * b),
        OpKind::AddBias => {
            if which == 0 {
                g.to_vec()
            } else {
                let n = inputs[1].numel();
                let mut out = vec![T::zero(); n];
                for row in g.chunks(n.max(1)) {
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                out
            }
        }
        OpKind::Scale(c) => g.iter().map(|&v| v * *c).collect(),
        // relu'(0) = 0
        OpKind::Relu => zip_map(g, x.data(), |gv, xv| if xv > T::zero() { gv } else { T::zero() }),
        OpKind::Tanh => zip_map(g, output.data(), |gv, y| gv * (T::one() - y * y)),
        OpKind::Log => zip_map(g, x.data(), |gv, xv| gv / xv),
        OpKind::Exp => zip_map(g, output.data(), |gv, y| gv * y),
        OpKind::RowSoftmax => {
            let (r, c) = row_view(x);
            let y = output.data();
            let mut out = vec![T::zero(); r * c];
            for i in 0..r {
                let s = i * c..(i + 1) * c;
                let mut dot = T::zero();
                for (&gv, &yv) in g[s.clone()].iter().zip(&y[s.clone()]) {
                    dot += gv * yv;
                }
                for ((o, &gv), &yv) in out[s.clone()].iter_mut().zip(&g[s.clone()]).zip(&y[s]) {
                    *o = yv * (gv - dot);
                }
            }
            out
        }
        OpKind::RowLogSoftmax => {
            let (r, c) = row_view(x);
            let y = output.data();
            let mut out = vec![T::zero(); r * c];
            for i in 0..r {
                let s = i * c..(i + 1) * c;
                let mut total = T::zero();
                for &gv in &g[s.clone()] {
                    total += gv;
                }
                for ((o, &gv), &yv) in out[s.clone()].iter_mut().zip(&g[s.clone()]).zip(&y[s]) {
                    *o = gv - yv.exp() * total;
                }
            }
            out
        }
        OpKind::Sum => vec![g[0]; x.numel()],
        OpKind::Mean => vec![g[0] / T::of(x.numel() as f64); x.numel()],
        OpKind::Transpose => {
            // output is [n×m]; gradient goes back to [m×n]
            let (m, n) = (x.shape()[0], x.shape()[1]);
            transpose(g, n, m)
        }
        OpKind::ConcatRows => {
            let start: usize = inputs[..which].iter().map(Tensor::numel).sum();
            g[start..start + inputs[which].numel()].to_vec()
        }
        OpKind::IndexRows(idx) => {
            let c = x.cols();
            let mut out = vec![T::zero(); x.numel()];
            for (r, &i) in idx.iter().enumerate() {
                for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                    *o += v;
                }
            }
            out
        }
        OpKind::Pick(idx) => {
            let n = x.cols();
            let mut out = vec![T::zero(); x.numel()];
            for (i, &j) in idx.iter().enumerate() {
                out[i * n + j] = g[i];
            }
            out
        }
        OpKind::Reshape(_) => g.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let i = t(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let x = t(&[vec![3.0, -1.5], vec![0.25, 7.0]]);
        let (shape, data) = forward(&OpKind::MatMul, &[&i, &x]).unwrap();
        assert_eq!(shape, vec![2, 2]);
        assert_eq!(data, x.data());
    }

    #[test]
    fn relu_and_softmax_definitions() {
        let x = Tensor::vector(vec![-1.0, 2.0]);
        assert_eq!(forward(&OpKind::Relu, &[&x]).unwrap().1, vec![0.0, 2.0]);
        let z = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(forward(&OpKind::RowSoftmax, &[&z]).unwrap().1, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let x = Tensor::vector(vec![1000.0, 1000.0, -1000.0]);
        let (_, p) = forward(&OpKind::RowSoftmax, &[&x]).unwrap();
        assert_eq!(p, vec![0.5, 0.5, 0.0]);
        let (_, lp) = forward(&OpKind::RowLogSoftmax, &[&x]).unwrap();
        assert!((lp[0] + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let err = forward(&OpKind::MatMul, &[&a, &b]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        assert!(forward(&OpKind::IndexRows(vec![2]), &[&a]).is_err());
        assert!(forward(&OpKind::Pick(vec![0, 3]), &[&a]).is_err());
        assert!(forward(&OpKind::AddBias, &[&a, &Tensor::zeros(&[2])]).is_err());
    }

    #[test]
    fn dot_matrix_is_a_times_b_transpose() {
        let a = t(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = t(&[vec![5.0, 6.0], vec![7.0, 8.0], vec![9.0, 10.0]]);
        let (shape, d) = forward(&OpKind::DotMatrix, &[&a, &b]).unwrap();
        assert_eq!(shape, vec![2, 3]);
        assert_eq!(d, vec![17.0, 23.0, 29.0, 39.0, 53.0, 67.0]);
    }
}
