//! Cached training with a parameterized distance `Φ(f(s), g(t); Ω)` in place
//! of the dot product.
//!
//! On top of the representation cache, the step stores every pair score
//! `d_ij` and the gradient `w_ij = ∂L/∂d_ij`. Each block of pairs is then
//! re-scored with a graph, and `w` is pushed back into `Ω` and folded into
//! the representation gradients `u`, `v`, after which the encoders are
//! updated from `u`, `v` exactly as in the dot-product case. `Φ` is
//! evaluated twice per pair.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::batch::Batch;
use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::gradcache::{
    plan_subbatches, step1_graphless_forward, step3_accumulate, CacheConfig, ChunkOrder, RepresentationGradientCache,
    StepOutput, SubBatchPlan,
};
use crate::grads::ParamGrads;
use crate::loss::{check_temperature, score_loss_graph};
use crate::memtrace::{self, Category};
use crate::optim::OptimizerState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Two-layer scorer on a pair: `w2ᵀ tanh(W1 [f; g] + b1) + b2`.
///
/// `W1` is stored as one `[2d × h]` matrix; its top half multiplies `f` and
/// its bottom half `g`, so each representation is projected once per block
/// rather than once per pair.
#[derive(Debug, Clone)]
pub struct MlpHead<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Debug, Clone)]
pub enum DistanceHead<T> {
    DotProduct,
    Mlp(MlpHead<T>),
}

impl<T: Scalar> DistanceHead<T> {
    /// Seeded MLP head for `d`-wide representations.
    pub fn mlp(seed: u64, d: usize, hidden: usize) -> Result<Self> {
        if d == 0 || hidden == 0 {
            return Err(Error::InvalidConfig("distance head needs positive widths".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |n: usize, fan_in: usize| -> Vec<T> {
            let a = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| T::of(rng.random_range(-a..a))).collect()
        };
        let w1 = uniform(2 * d * hidden, 2 * d);
        let w2 = uniform(hidden, hidden);
        Ok(memtrace::in_category(Category::Parameters, || {
            DistanceHead::Mlp(MlpHead {
                w1: Tensor::raw(vec![2 * d, hidden], w1),
                b1: Tensor::zeros(&[hidden]),
                w2: Tensor::raw(vec![hidden, 1], w2),
                b2: Tensor::zeros(&[1]),
            })
        }))
    }

    pub fn num_tensors(&self) -> usize {
        match self {
            DistanceHead::DotProduct => 0,
            DistanceHead::Mlp(_) => 4,
        }
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        match self {
            DistanceHead::DotProduct => Vec::new(),
            DistanceHead::Mlp(m) => vec![m.w1.clone(), m.b1.clone(), m.w2.clone(), m.b2.clone()],
        }
    }

    pub fn with_params(&self, params: Vec<Tensor<T>>) -> Result<Self> {
        if params.len() != self.num_tensors() {
            return Err(Error::shape("distance_head", "parameter count changed"));
        }
        match self {
            DistanceHead::DotProduct => Ok(DistanceHead::DotProduct),
            DistanceHead::Mlp(m) => {
                let [w1, b1, w2, b2]: [Tensor<T>; 4] = params.try_into().unwrap();
                let fresh = MlpHead { w1: w1.detach(), b1: b1.detach(), w2: w2.detach(), b2: b2.detach() };
                if fresh.w1.shape() != m.w1.shape()
                    || fresh.b1.shape() != m.b1.shape()
                    || fresh.w2.shape() != m.w2.shape()
                    || fresh.b2.shape() != m.b2.shape()
                {
                    return Err(Error::shape("distance_head", "parameter shapes changed"));
                }
                Ok(DistanceHead::Mlp(fresh))
            }
        }
    }

    pub fn bind(&self, tape: &Tape<T>) -> Vec<Tensor<T>> {
        self.params().iter().map(|p| tape.leaf_with_grad_category(p, Category::Parameters)).collect()
    }

    /// `[|f| × |g|]` scores using previously bound `leaves`.
    pub fn apply(&self, tape: &Tape<T>, leaves: &[Tensor<T>], f: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        if f.ndim() != 2 || g.ndim() != 2 || f.cols() != g.cols() {
            return Err(Error::shape("distance", format!("anchors {:?}, targets {:?}", f.shape(), g.shape())));
        }
        let (m, n, d) = (f.rows(), g.rows(), f.cols());
        match self {
            DistanceHead::DotProduct => tape.dot_matrix(f, g),
            DistanceHead::Mlp(head) => {
                if head.w1.rows() != 2 * d {
                    return Err(Error::shape(
                        "distance",
                        format!("head expects width {}, got {d}", head.w1.rows() / 2),
                    ));
                }
                memtrace::count_ops(|c| c.distance_forward_pairs += (m * n) as u64);
                let top: Vec<usize> = (0..d).collect();
                let bottom: Vec<usize> = (d..2 * d).collect();
                let a = tape.matmul(f, &tape.index_rows(&leaves[0], &top)?)?;
                let b = tape.matmul(g, &tape.index_rows(&leaves[0], &bottom)?)?;
                let ii: Vec<usize> = (0..m).flat_map(|i| std::iter::repeat_n(i, n)).collect();
                let jj: Vec<usize> = (0..m).flat_map(|_| 0..n).collect();
                let pre = tape.add(&tape.index_rows(&a, &ii)?, &tape.index_rows(&b, &jj)?)?;
                let hidden = tape.tanh(&tape.add_bias(&pre, &leaves[1])?)?;
                let out = tape.add_bias(&tape.matmul(&hidden, &leaves[2])?, &leaves[3])?;
                tape.reshape(&out, &[m, n])
            }
        }
    }

    /// Scores without a graph.
    pub fn scores(&self, f: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        tape.no_graph(|| self.apply(&tape, &self.params(), f, g))
    }
}

/// Encoders plus the distance head. Parameters are laid out as
/// `encoders.params()` followed by `head.params()`.
#[derive(Debug, Clone)]
pub struct DeepModel<T> {
    pub encoders: DualEncoder<T>,
    pub head: DistanceHead<T>,
}

impl<T: Scalar> DeepModel<T> {
    pub fn new(encoders: DualEncoder<T>, head: DistanceHead<T>) -> Self {
        DeepModel { encoders, head }
    }

    pub fn head_offset(&self) -> usize {
        self.encoders.num_tensors()
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        let mut p = self.encoders.params();
        p.extend(self.head.params());
        p
    }

    pub fn with_params(&self, mut params: Vec<Tensor<T>>) -> Result<Self> {
        if params.len() != self.head_offset() + self.head.num_tensors() {
            return Err(Error::shape("deep_model", "parameter count changed"));
        }
        let head = params.split_off(self.head_offset());
        Ok(DeepModel { encoders: self.encoders.with_params(params)?, head: self.head.with_params(head)? })
    }
}

/// Cached `∂L/∂d_ij` for every pair, `|S|·|T|` floats.
#[derive(Debug, Clone)]
pub struct DistanceGradientCache<T> {
    w: Tensor<T>,
    filled: bool,
}

impl<T: Scalar> DistanceGradientCache<T> {
    pub fn unfilled() -> Self {
        DistanceGradientCache { w: Tensor::zeros(&[0, 0]), filled: false }
    }

    pub fn is_filled(&self) -> bool {
        self.filled
    }

    pub fn w(&self) -> &Tensor<T> {
        &self.w
    }

    pub fn float_count(&self) -> usize {
        if self.filled {
            self.w.numel()
        } else {
            0
        }
    }
}

fn block<T: Scalar>(m: &Tensor<T>, rows: &Range<usize>, cols: &Range<usize>) -> Tensor<T> {
    let data = rows.clone().flat_map(|i| m.row(i)[cols.clone()].iter().copied()).collect();
    Tensor::raw(vec![rows.len(), cols.len()], data)
}

/// All pair scores, block by block and without a graph.
pub fn forward_collect<T: Scalar>(
    head: &DistanceHead<T>,
    reps_anchor: &Tensor<T>,
    reps_target: &Tensor<T>,
    plan: &SubBatchPlan,
) -> Result<Tensor<T>> {
    let (m, n) = (reps_anchor.rows(), reps_target.rows());
    let mut d_vals = memtrace::in_category(Category::DistanceCache, || Tensor::zeros(&[m, n]));
    let out = d_vals.data_mut().expect("fresh buffer");
    for rs in &plan.anchor_chunks {
        for rt in &plan.target_chunks {
            let f = reps_anchor.slice_rows(rs.start, rs.end)?;
            let g = reps_target.slice_rows(rt.start, rt.end)?;
            let s = memtrace::in_category(Category::Similarity, || head.scores(&f, &g))?;
            for (bi, i) in rs.clone().enumerate() {
                out[i * n + rt.start..i * n + rt.end].copy_from_slice(s.row(bi));
            }
        }
    }
    Ok(d_vals)
}

/// Loss over the stored scores and its gradient with respect to each score.
pub fn build_distance_cache<T: Scalar>(
    d_vals: &Tensor<T>,
    positives: &[usize],
    temperature: f64,
) -> Result<(DistanceGradientCache<T>, T)> {
    memtrace::in_category(Category::Similarity, || {
        let tape = Tape::new();
        let d = tape.leaf_with_grad_category(d_vals, Category::DistanceCache);
        let loss = score_loss_graph(&tape, &d, positives, temperature)?;
        tape.backward(&loss)?;
        let w = tape.take_grad(&d)?;
        Ok((DistanceGradientCache { w, filled: true }, loss.item()?))
    })
}

/// Re-score each block with a graph and back-propagate its slice of `w`.
/// Returns `∂L/∂Ω` and the representation gradient cache. Blocks run with
/// anchor chunks outside and target chunks inside, in `order`.
pub fn update_omega_and_fold<T: Scalar>(
    head: &DistanceHead<T>,
    reps_anchor: &Tensor<T>,
    reps_target: &Tensor<T>,
    plan: &SubBatchPlan,
    cache: &DistanceGradientCache<T>,
    order: ChunkOrder,
) -> Result<(ParamGrads<T>, RepresentationGradientCache<T>)> {
    if !cache.is_filled() {
        return Err(Error::CacheNotFilled("distance gradient"));
    }
    let (m, n, d) = (reps_anchor.rows(), reps_target.rows(), reps_anchor.cols());
    if cache.w().shape() != [m, n] {
        return Err(Error::shape("fold", "distance cache does not match the representations"));
    }
    let mut omega = ParamGrads::zeros_like(&head.params());
    let (mut u, mut v) = memtrace::in_category(Category::GradientCache, || {
        (Tensor::zeros(&[m, d]), Tensor::zeros(&[n, d]))
    });
    for rs in order.arrange(&plan.anchor_chunks) {
        for rt in order.arrange(&plan.target_chunks) {
            memtrace::in_category(Category::Similarity, || -> Result<()> {
                let tape = Tape::new();
                let f = tape.leaf(&reps_anchor.slice_rows(rs.start, rs.end)?);
                let g = tape.leaf(&reps_target.slice_rows(rt.start, rt.end)?);
                let leaves = head.bind(&tape);
                let s = head.apply(&tape, &leaves, &f, &g)?;
                tape.backward_vjp(&s, &block(cache.w(), rs, rt))?;
                let grads = leaves.iter().map(|l| tape.take_grad(l)).collect::<Result<Vec<_>>>()?;
                omega.accumulate_at(0, &grads)?;
                add_rows(&mut u, rs.start, &tape.grad(&f)?);
                add_rows(&mut v, rt.start, &tape.grad(&g)?);
                Ok(())
            })?;
        }
    }
    Ok((omega, RepresentationGradientCache::from_parts(u, v)?))
}

fn add_rows<T: Scalar>(dst: &mut Tensor<T>, start: usize, src: &Tensor<T>) {
    let c = dst.cols();
    let out = dst.data_mut().expect("accumulator is unique");
    for (o, &s) in out[start * c..start * c + src.numel()].iter_mut().zip(src.data()) {
        *o += s;
    }
}

/// Cached gradients for encoders and head, laid out like [`DeepModel::params`].
pub fn deep_cached_grads<T: Scalar>(
    batch: &Batch<T>,
    model: &DeepModel<T>,
    config: &CacheConfig,
    order: ChunkOrder,
) -> Result<StepOutput<T>> {
    check_temperature(config.temperature)?;
    let plan = plan_subbatches(batch.num_anchors(), batch.num_targets(), config.sub_batch_s, config.sub_batch_t)?;
    let reps = step1_graphless_forward(batch, &model.encoders, &plan)?;
    let d_vals = forward_collect(&model.head, &reps.anchors, &reps.targets, &plan)?;
    let (dcache, loss) = build_distance_cache(&d_vals, &batch.positives, config.temperature)?;
    drop(d_vals);
    let (omega, rcache) = update_omega_and_fold(&model.head, &reps.anchors, &reps.targets, &plan, &dcache, order)?;
    drop((reps, dcache));
    let enc = step3_accumulate(batch, &model.encoders, &plan, &rcache, order)?;
    let mut tensors = enc.tensors;
    tensors.extend(omega.tensors);
    Ok(StepOutput { loss, grads: ParamGrads { tensors } })
}

/// Ground truth: encoders, head and loss on one tape.
pub fn direct_deep_grads<T: Scalar>(
    batch: &Batch<T>,
    model: &DeepModel<T>,
    temperature: f64,
) -> Result<(ParamGrads<T>, T)> {
    let tape = Tape::new();
    let enc = &model.encoders;
    let anchor_leaves = enc.anchor.bind(&tape);
    let target_leaves = match &enc.target {
        Some(t) => t.bind(&tape),
        None => anchor_leaves.clone(),
    };
    let head_leaves = model.head.bind(&tape);
    let f = enc.anchor.apply(&tape, &anchor_leaves, &batch.anchors)?;
    let g = enc.target_encoder().apply(&tape, &target_leaves, &batch.targets)?;
    let loss = memtrace::in_category(Category::Similarity, || {
        let s = model.head.apply(&tape, &head_leaves, &f, &g)?;
        score_loss_graph(&tape, &s, &batch.positives, temperature)
    })?;
    let value = loss.item()?;
    let mut grads = ParamGrads::zeros_like(&model.params());
    if loss.is_attached() {
        tape.backward(&loss)?;
        let rows = [(&f, batch.num_anchors()), (&g, batch.num_targets())];
        let reached: u64 = rows.iter().filter(|(t, _)| t.is_attached()).map(|&(_, n)| n as u64).sum();
        memtrace::count_ops(|c| c.encoder_backward_rows += reached);
        let take = |ls: &[Tensor<T>]| ls.iter().map(|l| tape.take_grad(l)).collect::<Result<Vec<_>>>();
        grads.accumulate_at(0, &take(&anchor_leaves)?)?;
        if !enc.is_tied() {
            grads.accumulate_at(enc.target_offset(), &take(&target_leaves)?)?;
        }
        grads.accumulate_at(model.head_offset(), &take(&head_leaves)?)?;
    }
    Ok((grads, value))
}

pub fn train_step_deep<T: Scalar>(
    batch: &Batch<T>,
    model: &mut DeepModel<T>,
    opt: &mut OptimizerState<T>,
    config: &CacheConfig,
) -> Result<T> {
    let out = deep_cached_grads(batch, model, config, ChunkOrder::Forward)?;
    let mut params = model.params();
    opt.step(&mut params, &out.grads.tensors)?;
    *model = model.with_params(params)?;
    Ok(out.loss)
}
