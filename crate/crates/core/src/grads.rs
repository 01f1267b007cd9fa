use crate::autodiff::gradcheck::{rel_err, REL_ERR_FLOOR};
use crate::error::{Error, Result};
use crate::memtrace::{self, Category};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gradients aligned one-to-one with a parameter list.
#[derive(Debug, Clone)]
pub struct ParamGrads<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(params: &[Tensor<T>]) -> Self {
        let tensors = memtrace::in_category(Category::Parameters, || {
            params.iter().map(|p| Tensor::zeros(p.shape())).collect()
        });
        ParamGrads { tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Add `grads` into slots `offset..offset + grads.len()`.
    pub fn accumulate_at(&mut self, offset: usize, grads: &[Tensor<T>]) -> Result<()> {
        if offset + grads.len() > self.tensors.len() {
            return Err(Error::shape("accumulate", "more gradients than parameters"));
        }
        for (dst, g) in self.tensors[offset..].iter_mut().zip(grads) {
            dst.add_assign(g)?;
        }
        Ok(())
    }

    pub fn accumulate(&mut self, other: &ParamGrads<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::shape("accumulate", "gradient lists differ in length"));
        }
        self.accumulate_at(0, &other.tensors)
    }

    pub fn rel_err(&self, other: &ParamGrads<T>) -> f64 {
        rel_err_norm(&self.tensors, &other.tensors)
    }

    pub fn max_rel_err(&self, other: &ParamGrads<T>) -> f64 {
        max_rel_err(&self.tensors, &other.tensors)
    }

    pub fn bit_identical(&self, other: &ParamGrads<T>) -> bool {
        self.len() == other.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.same_values(b))
    }

    pub fn flatten_f64(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.to_f64_vec()).collect()
    }
}

/// Normwise relative error `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)` over two aligned
/// lists taken as one flat vector; 0 when both are equal. Mismatched shapes
/// count as infinitely far apart.
pub fn rel_err_norm<T: Scalar>(a: &[Tensor<T>], b: &[Tensor<T>]) -> f64 {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.shape() != y.shape()) {
        return f64::INFINITY;
    }
    let sq = |ts: &[Tensor<T>]| ts.iter().flat_map(|t| t.data()).map(|v| v.as_f64().powi(2)).sum::<f64>();
    let diff: f64 = a
        .iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(p, q)| (p.as_f64() - q.as_f64()).powi(2))
        .sum();
    if diff == 0.0 {
        0.0
    } else {
        diff.sqrt() / sq(a).max(sq(b)).sqrt()
    }
}

/// Largest elementwise `|a − b| / max(|a|, |b|, floor)` over two aligned
/// lists, with `floor` = [`REL_ERR_FLOOR`] times the largest magnitude in
/// either list. Mismatched shapes count as infinitely far apart.
pub fn max_rel_err<T: Scalar>(a: &[Tensor<T>], b: &[Tensor<T>]) -> f64 {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.shape() != y.shape()) {
        return f64::INFINITY;
    }
    let scale = a.iter().chain(b).flat_map(|t| t.data()).fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
    let floor = REL_ERR_FLOOR * scale;
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(p, q)| rel_err(p.as_f64(), q.as_f64(), floor))
        .fold(0.0, f64::max)
}

pub fn tensor_rel_err<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    rel_err_norm(std::slice::from_ref(a), std::slice::from_ref(b))
}
