//! Cached large-batch training and the two baselines it is measured against.
//!
//! A cached step runs in four phases:
//!
//! 1. encode every sub-batch without recording a graph and keep only the
//!    representations `F`, `G`;
//! 2. build the loss over `F`, `G` as leaves and back-propagate to get the
//!    representation gradient cache `u`, `v`;
//! 3. re-encode one sub-batch at a time with a graph and back-propagate the
//!    cached rows as upstream gradients, summing parameter gradients;
//! 4. step the optimizer once with the summed gradients.
//!
//! Only one sub-batch of encoder activations is ever alive, and the summed
//! gradient equals the direct full-batch gradient up to floating point
//! summation order.

use std::ops::Range;

use crate::autodiff::Tape;
use crate::batch::Batch;
use crate::encoder::{DualEncoder, EncoderParams};
use crate::error::{Error, Result};
use crate::grads::ParamGrads;
use crate::loss::{check_temperature, direct_param_grads, loss_graph};
use crate::memtrace::{self, Category};
use crate::optim::OptimizerState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Contiguous, order-preserving partition of anchors and targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubBatchPlan {
    pub anchor_chunks: Vec<Range<usize>>,
    pub target_chunks: Vec<Range<usize>>,
    pub sub_batch_s: usize,
    pub sub_batch_t: usize,
}

pub(crate) fn chunk_ranges(n: usize, size: usize) -> Vec<Range<usize>> {
    (0..n).step_by(size.max(1)).map(|s| s..(s + size).min(n)).collect()
}

pub fn plan_subbatches(n_anchors: usize, n_targets: usize, sub_batch_s: usize, sub_batch_t: usize) -> Result<SubBatchPlan> {
    if sub_batch_s == 0 || sub_batch_t == 0 {
        return Err(Error::InvalidConfig("sub-batch sizes must be at least 1".into()));
    }
    Ok(SubBatchPlan {
        anchor_chunks: chunk_ranges(n_anchors, sub_batch_s),
        target_chunks: chunk_ranges(n_targets, sub_batch_t),
        sub_batch_s,
        sub_batch_t,
    })
}

impl SubBatchPlan {
    /// Sizes of the anchor chunks, handy for assertions and logs.
    pub fn anchor_sizes(&self) -> Vec<usize> {
        self.anchor_chunks.iter().map(|r| r.len()).collect()
    }

    pub fn target_sizes(&self) -> Vec<usize> {
        self.target_chunks.iter().map(|r| r.len()).collect()
    }

    fn covers(&self, n_anchors: usize, n_targets: usize) -> bool {
        let ends = |c: &[Range<usize>]| c.last().map_or(0, |r| r.end);
        ends(&self.anchor_chunks) == n_anchors && ends(&self.target_chunks) == n_targets
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacheConfig {
    pub sub_batch_s: usize,
    pub sub_batch_t: usize,
    pub temperature: f64,
}

impl CacheConfig {
    pub fn new(sub_batch_s: usize, sub_batch_t: usize, temperature: f64) -> Self {
        CacheConfig { sub_batch_s, sub_batch_t, temperature }
    }
}

/// Order in which sub-batches are visited during accumulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChunkOrder {
    #[default]
    Forward,
    Reverse,
}

impl ChunkOrder {
    pub(crate) fn arrange<'a, X>(self, items: &'a [X]) -> Box<dyn Iterator<Item = &'a X> + 'a> {
        match self {
            ChunkOrder::Forward => Box::new(items.iter()),
            ChunkOrder::Reverse => Box::new(items.iter().rev()),
        }
    }
}

/// Cached `∂L/∂f(s_i)` and `∂L/∂g(t_j)`, exactly `(|S| + |T|)·d` floats.
#[derive(Debug, Clone)]
pub struct RepresentationGradientCache<T> {
    u_rows: Tensor<T>,
    v_rows: Tensor<T>,
    filled: bool,
}

impl<T: Scalar> RepresentationGradientCache<T> {
    /// A cache that has not been populated yet.
    pub fn unfilled() -> Self {
        RepresentationGradientCache { u_rows: Tensor::zeros(&[0, 0]), v_rows: Tensor::zeros(&[0, 0]), filled: false }
    }

    pub fn from_parts(u_rows: Tensor<T>, v_rows: Tensor<T>) -> Result<Self> {
        if u_rows.ndim() != 2 || v_rows.ndim() != 2 || u_rows.cols() != v_rows.cols() {
            return Err(Error::shape(
                "gradient_cache",
                format!("u {:?}, v {:?}", u_rows.shape(), v_rows.shape()),
            ));
        }
        Ok(RepresentationGradientCache {
            u_rows: u_rows.into_category(Category::GradientCache),
            v_rows: v_rows.into_category(Category::GradientCache),
            filled: true,
        })
    }

    pub fn is_filled(&self) -> bool {
        self.filled
    }

    pub fn u_rows(&self) -> &Tensor<T> {
        &self.u_rows
    }

    pub fn v_rows(&self) -> &Tensor<T> {
        &self.v_rows
    }

    pub fn float_count(&self) -> usize {
        if self.filled {
            self.u_rows.numel() + self.v_rows.numel()
        } else {
            0
        }
    }
}

/// Step-one output: all representations, computed without a graph.
#[derive(Debug, Clone)]
pub struct Representations<T> {
    pub anchors: Tensor<T>,
    pub targets: Tensor<T>,
}

pub(crate) fn encode_chunks<T: Scalar>(
    tape: &Tape<T>,
    encoder: &EncoderParams<T>,
    inputs: &Tensor<T>,
    chunks: &[Range<usize>],
) -> Result<Tensor<T>> {
    let mut out = memtrace::in_category(Category::RepresentationStore, || {
        Tensor::zeros(&[inputs.rows(), encoder.out_dim()])
    });
    for r in chunks {
        let x = inputs.slice_rows(r.start, r.end)?;
        let y = encoder.forward(tape, &x)?.output;
        out.write_rows(r.start, &y)?;
    }
    Ok(out)
}

pub fn step1_graphless_forward<T: Scalar>(
    batch: &Batch<T>,
    model: &DualEncoder<T>,
    plan: &SubBatchPlan,
) -> Result<Representations<T>> {
    if !plan.covers(batch.num_anchors(), batch.num_targets()) {
        return Err(Error::InvalidConfig("sub-batch plan does not cover the batch".into()));
    }
    let tape = Tape::new();
    tape.no_graph(|| {
        Ok(Representations {
            anchors: encode_chunks(&tape, &model.anchor, &batch.anchors, &plan.anchor_chunks)?,
            targets: encode_chunks(&tape, model.target_encoder(), &batch.targets, &plan.target_chunks)?,
        })
    })
}

/// Loss over the representations alone and the gradient cache it induces.
/// Returns the cache and the full-batch loss.
pub fn step2_build_cache<T: Scalar>(
    reps_anchor: &Tensor<T>,
    reps_target: &Tensor<T>,
    positives: &[usize],
    temperature: f64,
) -> Result<(RepresentationGradientCache<T>, T)> {
    memtrace::in_category(Category::Similarity, || {
        let tape = Tape::new();
        let f = tape.leaf_with_grad_category(reps_anchor, Category::GradientCache);
        let g = tape.leaf_with_grad_category(reps_target, Category::GradientCache);
        let loss = loss_graph(&tape, &f, &g, positives, temperature)?;
        tape.backward(&loss)?;
        let cache = RepresentationGradientCache::from_parts(tape.take_grad(&f)?, tape.take_grad(&g)?)?;
        Ok((cache, loss.item()?))
    })
}

/// Back-propagate cached rows through one tower, one chunk per tape.
pub(crate) fn accumulate_tower<T: Scalar>(
    encoder: &EncoderParams<T>,
    inputs: &Tensor<T>,
    chunks: &[Range<usize>],
    upstream: &Tensor<T>,
    order: ChunkOrder,
    offset: usize,
    grads: &mut ParamGrads<T>,
) -> Result<()> {
    if encoder.num_tensors() == 0 {
        return Ok(());
    }
    for r in order.arrange(chunks) {
        let tape = Tape::new();
        let x = inputs.slice_rows(r.start, r.end)?;
        let enc = encoder.forward(&tape, &x)?;
        let up = upstream.slice_rows(r.start, r.end)?;
        tape.backward_vjp(&enc.output, &up)?;
        memtrace::count_ops(|c| c.encoder_backward_rows += r.len() as u64);
        let chunk = enc.leaves.iter().map(|l| tape.take_grad(l)).collect::<Result<Vec<_>>>()?;
        grads.accumulate_at(offset, &chunk)?;
    }
    Ok(())
}

pub fn step3_accumulate<T: Scalar>(
    batch: &Batch<T>,
    model: &DualEncoder<T>,
    plan: &SubBatchPlan,
    cache: &RepresentationGradientCache<T>,
    order: ChunkOrder,
) -> Result<ParamGrads<T>> {
    if !cache.is_filled() {
        return Err(Error::CacheNotFilled("representation gradient"));
    }
    let d = model.out_dim();
    if cache.u_rows().shape() != [batch.num_anchors(), d] || cache.v_rows().shape() != [batch.num_targets(), d] {
        return Err(Error::shape("step3", "cache does not match the batch"));
    }
    let mut grads = ParamGrads::zeros_like(&model.params());
    accumulate_tower(&model.anchor, &batch.anchors, &plan.anchor_chunks, cache.u_rows(), order, 0, &mut grads)?;
    accumulate_tower(
        model.target_encoder(),
        &batch.targets,
        &plan.target_chunks,
        cache.v_rows(),
        order,
        model.target_offset(),
        &mut grads,
    )?;
    Ok(grads)
}

/// Gradients and loss from steps one to three.
#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub loss: T,
    pub grads: ParamGrads<T>,
}

pub fn cached_grads<T: Scalar>(
    batch: &Batch<T>,
    model: &DualEncoder<T>,
    config: &CacheConfig,
    order: ChunkOrder,
) -> Result<StepOutput<T>> {
    check_temperature(config.temperature)?;
    let plan = plan_subbatches(batch.num_anchors(), batch.num_targets(), config.sub_batch_s, config.sub_batch_t)?;
    let reps = step1_graphless_forward(batch, model, &plan)?;
    let (cache, loss) = step2_build_cache(&reps.anchors, &reps.targets, &batch.positives, config.temperature)?;
    drop(reps);
    let grads = step3_accumulate(batch, model, &plan, &cache, order)?;
    Ok(StepOutput { loss, grads })
}

pub(crate) fn apply_update<T: Scalar>(
    model: &mut DualEncoder<T>,
    opt: &mut OptimizerState<T>,
    grads: &ParamGrads<T>,
) -> Result<()> {
    let mut params = model.params();
    opt.step(&mut params, &grads.tensors)?;
    *model = model.with_params(params)?;
    Ok(())
}

pub fn train_step_cached<T: Scalar>(
    batch: &Batch<T>,
    model: &mut DualEncoder<T>,
    opt: &mut OptimizerState<T>,
    config: &CacheConfig,
) -> Result<T> {
    let out = cached_grads(batch, model, config, ChunkOrder::Forward)?;
    apply_update(model, opt, &out.grads)?;
    Ok(out.loss)
}

pub fn train_step_direct<T: Scalar>(
    batch: &Batch<T>,
    model: &mut DualEncoder<T>,
    opt: &mut OptimizerState<T>,
    temperature: f64,
) -> Result<T> {
    let (grads, loss) = direct_param_grads(batch, model, temperature)?;
    apply_update(model, opt, &grads)?;
    Ok(loss)
}

/// Plain gradient accumulation: each chunk of `chunk_size` anchors is an
/// independent batch whose negatives come only from that chunk. Chunk
/// gradients are summed after scaling by `1/chunks`, so the result is the
/// gradient of the mean chunk loss, which is also the reported loss.
pub fn accumulation_grads<T: Scalar>(
    batch: &Batch<T>,
    model: &DualEncoder<T>,
    chunk_size: usize,
    temperature: f64,
) -> Result<StepOutput<T>> {
    if chunk_size == 0 {
        return Err(Error::InvalidConfig("accumulation chunk size must be at least 1".into()));
    }
    let chunks = chunk_ranges(batch.num_anchors(), chunk_size);
    if chunks.is_empty() {
        return Err(Error::InvalidBatch("no anchors".into()));
    }
    let weight = T::one() / T::of(chunks.len() as f64);
    let mut total = ParamGrads::zeros_like(&model.params());
    let mut loss_sum = T::zero();
    for r in chunks.iter().cloned() {
        let sub = batch.independent_chunk(r)?;
        let (g, loss) = direct_param_grads(&sub, model, temperature)?;
        let scaled: Vec<_> = memtrace::in_category(Category::Parameters, || {
            g.tensors.iter().map(|t| t.map(|x| x * weight)).collect()
        });
        total.accumulate_at(0, &scaled)?;
        loss_sum += loss;
    }
    Ok(StepOutput { loss: loss_sum * weight, grads: total })
}

pub fn train_step_accumulation<T: Scalar>(
    batch: &Batch<T>,
    model: &mut DualEncoder<T>,
    opt: &mut OptimizerState<T>,
    chunk_size: usize,
    temperature: f64,
) -> Result<T> {
    let out = accumulation_grads(batch, model, chunk_size, temperature)?;
    apply_update(model, opt, &out.grads)?;
    Ok(out.loss)
}
