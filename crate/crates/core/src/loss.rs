//! Batch contrastive loss over dot-product similarities and its gradients.
//!
//! `L = −(1/|S|) Σ_i log softmax_j(f(s_i)·g(t_j) / τ)[r_i]`
//!
//! The graph builders here are what every training path differentiates
//! through. [`analytic_rep_grads`] is a closed-form derivation of the same
//! representation gradients and is only used to cross-check them.

use crate::autodiff::ops::{log_softmax_rows, matmul_nt, softmax_rows};
use crate::autodiff::Tape;
use crate::batch::{check_positives, Batch};
use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::grads::ParamGrads;
use crate::memtrace::{self, Category};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
}

impl LossConfig {
    pub fn new(temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        Ok(LossConfig { temperature })
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { temperature: 1.0 }
    }
}

pub(crate) fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("temperature must be positive, got {t}")))
    }
}

#[derive(Debug, Clone)]
pub struct SimilarityResult<T> {
    /// `f(s_i)·g(t_j) / τ`
    pub logits: Tensor<T>,
    /// Row-wise softmax of the logits.
    pub p: Tensor<T>,
    pub loss: T,
}

#[derive(Debug, Clone)]
pub struct RepresentationGradients<T> {
    /// `∂L/∂f(s_i)` by row.
    pub u: Tensor<T>,
    /// `∂L/∂g(t_j)` by row.
    pub v: Tensor<T>,
    /// Sum of `f(s_k)` over anchors whose positive is `t_j` (zero if none).
    pub epsilon: Tensor<T>,
}

fn check_reps<T: Scalar>(f: &Tensor<T>, g: &Tensor<T>, positives: &[usize]) -> Result<()> {
    if f.ndim() != 2 || g.ndim() != 2 || f.cols() != g.cols() {
        return Err(Error::shape(
            "contrastive_loss",
            format!("anchors {:?}, targets {:?}", f.shape(), g.shape()),
        ));
    }
    if f.rows() == 0 {
        return Err(Error::InvalidBatch("no anchors".into()));
    }
    check_positives(positives, f.rows(), g.rows())
}

/// Loss value and the quantities it is built from, without a tape.
pub fn contrastive_loss<T: Scalar>(
    f: &Tensor<T>,
    g: &Tensor<T>,
    positives: &[usize],
    temperature: f64,
) -> Result<SimilarityResult<T>> {
    check_temperature(temperature)?;
    check_reps(f, g, positives)?;
    let (m, d, n) = (f.rows(), f.cols(), g.rows());
    let inv_t = T::one() / T::of(temperature);
    let logits: Vec<T> = matmul_nt(f.data(), g.data(), m, d, n).into_iter().map(|x| x * inv_t).collect();
    let p = softmax_rows(&logits, m, n);
    let logp = log_softmax_rows(&logits, m, n);
    let mut total = T::zero();
    for (i, &r) in positives.iter().enumerate() {
        total += logp[i * n + r];
    }
    let loss = -total / T::of(m as f64);
    Ok(SimilarityResult {
        logits: Tensor::raw(vec![m, n], logits),
        p: Tensor::raw(vec![m, n], p),
        loss,
    })
}

/// Closed-form representation gradients:
///
/// `u_i = −(1/(|S|τ)) (g(t_{r_i}) − Σ_j p_ij g(t_j))`
/// `v_j = −(1/(|S|τ)) (ε_j − Σ_i p_ij f(s_i))`
///
/// with `ε_j = Σ_{k : r_k = j} f(s_k)`.
pub fn analytic_rep_grads<T: Scalar>(
    f: &Tensor<T>,
    g: &Tensor<T>,
    positives: &[usize],
    temperature: f64,
    result: &SimilarityResult<T>,
) -> Result<RepresentationGradients<T>> {
    check_reps(f, g, positives)?;
    let (m, d, n) = (f.rows(), f.cols(), g.rows());
    if result.p.shape() != [m, n] {
        return Err(Error::shape("analytic_rep_grads", "similarity result from another batch"));
    }
    let p = result.p.data();
    let scale = -T::one() / (T::of(m as f64) * T::of(temperature));

    let mut u = vec![T::zero(); m * d];
    for i in 0..m {
        let row = &mut u[i * d..(i + 1) * d];
        row.copy_from_slice(g.row(positives[i]));
        for j in 0..n {
            let pij = p[i * n + j];
            for (o, &gv) in row.iter_mut().zip(g.row(j)) {
                *o -= pij * gv;
            }
        }
        for o in row.iter_mut() {
            *o *= scale;
        }
    }

    let mut eps = vec![T::zero(); n * d];
    for (k, &j) in positives.iter().enumerate() {
        for (o, &fv) in eps[j * d..(j + 1) * d].iter_mut().zip(f.row(k)) {
            *o += fv;
        }
    }
    let mut v = eps.clone();
    for j in 0..n {
        let row = &mut v[j * d..(j + 1) * d];
        for i in 0..m {
            let pij = p[i * n + j];
            for (o, &fv) in row.iter_mut().zip(f.row(i)) {
                *o -= pij * fv;
            }
        }
        for o in row.iter_mut() {
            *o *= scale;
        }
    }

    Ok(RepresentationGradients {
        u: Tensor::raw(vec![m, d], u),
        v: Tensor::raw(vec![n, d], v),
        epsilon: Tensor::raw(vec![n, d], eps),
    })
}

/// Record the loss over a precomputed `[|S| × |T|]` score matrix.
pub fn score_loss_graph<T: Scalar>(
    tape: &Tape<T>,
    scores: &Tensor<T>,
    positives: &[usize],
    temperature: f64,
) -> Result<Tensor<T>> {
    check_temperature(temperature)?;
    if scores.ndim() != 2 || scores.rows() == 0 {
        return Err(Error::InvalidBatch(format!("score matrix {:?}", scores.shape())));
    }
    check_positives(positives, scores.rows(), scores.cols())?;
    let logits = tape.scale(scores, T::one() / T::of(temperature))?;
    let logp = tape.row_log_softmax(&logits)?;
    let picked = tape.pick(&logp, positives)?;
    let total = tape.sum(&picked)?;
    tape.scale(&total, -T::one() / T::of(scores.rows() as f64))
}

/// Record the dot-product loss over representation matrices.
pub fn loss_graph<T: Scalar>(
    tape: &Tape<T>,
    f: &Tensor<T>,
    g: &Tensor<T>,
    positives: &[usize],
    temperature: f64,
) -> Result<Tensor<T>> {
    check_reps(f, g, positives)?;
    let scores = tape.dot_matrix(f, g)?;
    score_loss_graph(tape, &scores, positives, temperature)
}

/// Ground truth: encode the whole batch on one tape, compute the loss and
/// back-propagate through everything. Returns gradients laid out like
/// [`DualEncoder::params`] and the loss.
pub fn direct_param_grads<T: Scalar>(
    batch: &Batch<T>,
    model: &DualEncoder<T>,
    temperature: f64,
) -> Result<(ParamGrads<T>, T)> {
    let tape = Tape::new();
    let anchor_leaves = model.anchor.bind(&tape);
    let target_leaves = match &model.target {
        Some(t) => t.bind(&tape),
        None => anchor_leaves.clone(),
    };
    let f = model.anchor.apply(&tape, &anchor_leaves, &batch.anchors)?;
    let g = model.target_encoder().apply(&tape, &target_leaves, &batch.targets)?;
    let loss = memtrace::in_category(Category::Similarity, || {
        loss_graph(&tape, &f, &g, &batch.positives, temperature)
    })?;
    let value = loss.item()?;

    let mut grads = ParamGrads::zeros_like(&model.params());
    if loss.is_attached() {
        tape.backward(&loss)?;
        let rows = [(&f, batch.num_anchors()), (&g, batch.num_targets())];
        let reached: u64 = rows.iter().filter(|(t, _)| t.is_attached()).map(|&(_, n)| n as u64).sum();
        memtrace::count_ops(|c| c.encoder_backward_rows += reached);
        let anchor_grads = anchor_leaves.iter().map(|l| tape.take_grad(l)).collect::<Result<Vec<_>>>()?;
        grads.accumulate_at(0, &anchor_grads)?;
        if !model.is_tied() {
            let target_grads = target_leaves.iter().map(|l| tape.take_grad(l)).collect::<Result<Vec<_>>>()?;
            grads.accumulate_at(model.target_offset(), &target_grads)?;
        }
    }
    Ok((grads, value))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn single_target_has_zero_loss_and_gradient() {
        let f = m(&[vec![0.3, -1.2]]);
        let g = m(&[vec![2.0, 0.7]]);
        let res = contrastive_loss(&f, &g, &[0], 1.0).unwrap();
        assert_eq!(res.loss, 0.0);
        let grads = analytic_rep_grads(&f, &g, &[0], 1.0, &res).unwrap();
        assert!(grads.u.data().iter().chain(grads.v.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn two_target_closed_form() {
        let f = m(&[vec![1.0, 0.0]]);
        let g = m(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let res = contrastive_loss(&f, &g, &[0], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((res.loss - -(e / (e + 1.0)).ln()).abs() < 1e-15);
        assert!((res.loss - 0.3133).abs() < 1e-4);
        let grads = analytic_rep_grads(&f, &g, &[0], 1.0, &res).unwrap();
        let s = 1.0 / (e + 1.0);
        assert!((grads.u.data()[0] + s).abs() < 1e-15);
        assert!((grads.u.data()[1] - s).abs() < 1e-15);
        assert!((grads.u.data()[0] + 0.2689).abs() < 1e-4);
    }

    #[test]
    fn invalid_positive_is_reported() {
        let f = m(&[vec![1.0]]);
        let g = m(&[vec![1.0]]);
        assert!(matches!(
            contrastive_loss(&f, &g, &[1], 1.0),
            Err(Error::InvalidPositive { index: 1, .. })
        ));
        assert!(contrastive_loss(&f, &g, &[0], 0.0).is_err());
    }

    #[test]
    fn epsilon_sums_anchors_sharing_a_positive() {
        let f = m(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let g = m(&[vec![0.1, 0.2], vec![0.3, 0.4]]);
        let r = [1, 0, 1];
        let res = contrastive_loss(&f, &g, &r, 1.0).unwrap();
        let grads = analytic_rep_grads(&f, &g, &r, 1.0, &res).unwrap();
        assert_eq!(grads.epsilon.data(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn graph_loss_matches_plain_loss() {
        let f = m(&[vec![0.2, -0.4], vec![1.0, 0.5]]);
        let g = m(&[vec![0.7, 0.1], vec![-0.3, 0.9], vec![0.0, 0.2]]);
        let tape = Tape::new();
        let fl = tape.leaf(&f);
        let gl = tape.leaf(&g);
        let l = loss_graph(&tape, &fl, &gl, &[2, 0], 0.5).unwrap();
        let plain = contrastive_loss(&f, &g, &[2, 0], 0.5).unwrap();
        assert_eq!(l.item().unwrap(), plain.loss);
    }
}
