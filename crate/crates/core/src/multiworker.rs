//! Data-parallel cached training simulated with threads.
//!
//! Each worker owns a contiguous slice of the anchors and of the targets.
//! Workers encode their slice without a graph, all-gather the
//! representations, each computes the full loss over the gathered set and
//! keeps the cache rows for its own examples, back-propagates them through
//! its local sub-batches, and the parameter gradients are summed across
//! workers. The loss is normalized by the global `|S|`, so the sum equals
//! the single-process gradient.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Barrier, Mutex};

use crate::autodiff::Tape;
use crate::batch::Batch;
use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::gradcache::{
    accumulate_tower, chunk_ranges, encode_chunks, step2_build_cache, CacheConfig, ChunkOrder, RepresentationGradientCache,
};
use crate::grads::ParamGrads;
use crate::loss::check_temperature;
use crate::memtrace::{self, Category, Probe};
use crate::optim::OptimizerState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rows owned by `rank` when `n` rows are split over `workers`; the first
/// `n % workers` ranks get one extra row.
pub fn partition(n: usize, workers: usize, rank: usize) -> Range<usize> {
    let base = n / workers;
    let extra = n % workers;
    let start = rank * base + rank.min(extra);
    start..start + base + usize::from(rank < extra)
}

/// Representations from every worker, concatenated in rank order.
#[derive(Debug, Clone)]
pub struct GatheredReps<T> {
    pub anchors: Tensor<T>,
    pub targets: Tensor<T>,
    /// Start row of each rank's anchors, plus the total at the end.
    pub anchor_offsets: Vec<usize>,
    pub target_offsets: Vec<usize>,
}

fn concat<T: Scalar>(parts: &[&Tensor<T>], cols: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let mut offsets = vec![0];
    let mut data = Vec::new();
    for p in parts {
        if p.ndim() != 2 || (p.rows() > 0 && p.cols() != cols) {
            return Err(Error::Exchange(format!("representation block {:?} in a width-{cols} gather", p.shape())));
        }
        data.extend_from_slice(p.data());
        offsets.push(offsets.last().unwrap() + p.rows());
    }
    let rows = *offsets.last().unwrap();
    Ok((Tensor::raw(vec![rows, cols], data), offsets))
}

/// Concatenate per-rank `(anchors, targets)` representations.
pub fn all_gather<T: Scalar>(locals: &[(Tensor<T>, Tensor<T>)], d: usize) -> Result<GatheredReps<T>> {
    memtrace::in_category(Category::RepresentationStore, || {
        let (anchors, anchor_offsets) = concat(&locals.iter().map(|l| &l.0).collect::<Vec<_>>(), d)?;
        let (targets, target_offsets) = concat(&locals.iter().map(|l| &l.1).collect::<Vec<_>>(), d)?;
        Ok(GatheredReps { anchors, targets, anchor_offsets, target_offsets })
    })
}

/// Cache rows belonging to `rank`, computed from the full gathered loss.
/// Returns the local cache and the global loss.
pub fn local_rep_grads<T: Scalar>(
    gathered: &GatheredReps<T>,
    positives: &[usize],
    rank: usize,
    temperature: f64,
) -> Result<(RepresentationGradientCache<T>, T)> {
    let (cache, loss) = step2_build_cache(&gathered.anchors, &gathered.targets, positives, temperature)?;
    let (a0, a1) = (gathered.anchor_offsets[rank], gathered.anchor_offsets[rank + 1]);
    let (t0, t1) = (gathered.target_offsets[rank], gathered.target_offsets[rank + 1]);
    let local = memtrace::in_category(Category::GradientCache, || -> Result<_> {
        Ok((cache.u_rows().slice_rows(a0, a1)?, cache.v_rows().slice_rows(t0, t1)?))
    })?;
    drop(cache);
    Ok((RepresentationGradientCache::from_parts(local.0, local.1)?, loss))
}

/// Sum per-rank gradients in rank order.
pub fn reduce_grads<T: Scalar>(per_rank: &[ParamGrads<T>]) -> Result<ParamGrads<T>> {
    let first = per_rank.first().ok_or_else(|| Error::Exchange("nothing to reduce".into()))?;
    let mut total = ParamGrads::zeros_like(&first.tensors);
    for g in per_rank {
        total.accumulate(g)?;
    }
    Ok(total)
}

/// Rendezvous shared by the worker threads of one step.
struct Exchange<T> {
    barrier: Barrier,
    reps: Mutex<Vec<Option<(Tensor<T>, Tensor<T>)>>>,
    grads: Mutex<Vec<Option<ParamGrads<T>>>>,
    failed: Mutex<Option<Error>>,
}

impl<T> Exchange<T> {
    fn fail(&self, e: Error) {
        self.failed.lock().unwrap().get_or_insert(e);
    }

    fn check(&self) -> Result<()> {
        match &*self.failed.lock().unwrap() {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }
}

/// A fixed number of simulated workers with their own memory probes and
/// counters of collective operations.
#[derive(Debug)]
pub struct WorkerGroup {
    workers: usize,
    probes: Vec<Arc<Probe>>,
    all_gathers: AtomicU64,
    reductions: AtomicU64,
}

impl WorkerGroup {
    pub fn new(workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::InvalidConfig("need at least one worker".into()));
        }
        Ok(WorkerGroup {
            workers,
            probes: (0..workers).map(|_| Probe::new()).collect(),
            all_gathers: AtomicU64::new(0),
            reductions: AtomicU64::new(0),
        })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Probe charged by worker `rank`'s allocations.
    pub fn probe(&self, rank: usize) -> &Arc<Probe> {
        &self.probes[rank]
    }

    pub fn all_gathers(&self) -> u64 {
        self.all_gathers.load(Ordering::SeqCst)
    }

    pub fn reductions(&self) -> u64 {
        self.reductions.load(Ordering::SeqCst)
    }
}

/// Result of one data-parallel step.
#[derive(Debug, Clone)]
pub struct MultiStepOutput<T> {
    pub loss: T,
    /// Each worker's model after its optimizer step.
    pub replicas: Vec<DualEncoder<T>>,
}

impl<T: Scalar> MultiStepOutput<T> {
    pub fn replicas_identical(&self) -> bool {
        let first = self.replicas[0].params();
        self.replicas
            .iter()
            .all(|r| r.params().iter().zip(&first).all(|(a, b)| a.same_values(b)))
    }
}

struct WorkerResult<T> {
    loss: T,
    grads: ParamGrads<T>,
    model: DualEncoder<T>,
}

#[allow(clippy::too_many_arguments)]
fn worker<T: Scalar>(
    rank: usize,
    group: &WorkerGroup,
    ex: &Exchange<T>,
    batch: &Batch<T>,
    model: &DualEncoder<T>,
    opt: Option<&OptimizerState<T>>,
    config: &CacheConfig,
) -> Result<WorkerResult<T>> {
    let n = group.workers;
    let rs = partition(batch.num_anchors(), n, rank);
    let rt = partition(batch.num_targets(), n, rank);
    let local = memtrace::in_category(Category::Data, || -> Result<_> {
        let anchors = batch.anchors.slice_rows(rs.start, rs.end)?;
        let targets = batch.targets.slice_rows(rt.start, rt.end)?;
        Ok((anchors, targets))
    });
    let (anchors, targets) = match local {
        Ok(x) => x,
        Err(e) => {
            ex.fail(e.clone());
            (Tensor::zeros(&[0, batch.anchors.cols()]), Tensor::zeros(&[0, batch.targets.cols()]))
        }
    };
    let a_chunks = chunk_ranges(anchors.rows(), config.sub_batch_s);
    let t_chunks = chunk_ranges(targets.rows(), config.sub_batch_t);

    // encode the local slice without a graph and publish it
    let reps = (|| -> Result<_> {
        let tape = Tape::new();
        tape.no_graph(|| {
            Ok((
                encode_chunks(&tape, &model.anchor, &anchors, &a_chunks)?,
                encode_chunks(&tape, model.target_encoder(), &targets, &t_chunks)?,
            ))
        })
    })();
    match reps {
        Ok(r) => ex.reps.lock().unwrap()[rank] = Some(r),
        Err(e) => ex.fail(e),
    }
    if ex.barrier.wait().is_leader() {
        group.all_gathers.fetch_add(1, Ordering::SeqCst);
    }
    ex.check()?;
    let gathered = {
        let slots = ex.reps.lock().unwrap();
        let locals: Vec<_> = slots.iter().map(|s| s.clone().expect("every worker published")).collect();
        drop(slots);
        all_gather(&locals, model.out_dim())
    };

    // local cache rows, then local accumulation
    let step = gathered.and_then(|g| {
        let (cache, loss) = local_rep_grads(&g, &batch.positives, rank, config.temperature)?;
        drop(g);
        let mut grads = ParamGrads::zeros_like(&model.params());
        let order = ChunkOrder::Forward;
        accumulate_tower(&model.anchor, &anchors, &a_chunks, cache.u_rows(), order, 0, &mut grads)?;
        accumulate_tower(
            model.target_encoder(),
            &targets,
            &t_chunks,
            cache.v_rows(),
            order,
            model.target_offset(),
            &mut grads,
        )?;
        Ok((grads, loss))
    });
    let loss = match step {
        Ok((g, loss)) => {
            ex.grads.lock().unwrap()[rank] = Some(g);
            loss
        }
        Err(e) => {
            ex.fail(e);
            T::zero()
        }
    };
    if ex.barrier.wait().is_leader() {
        group.reductions.fetch_add(1, Ordering::SeqCst);
    }
    ex.check()?;
    let per_rank: Vec<ParamGrads<T>> = ex.grads.lock().unwrap().iter().map(|g| g.clone().expect("every worker reduced")).collect();
    let grads = reduce_grads(&per_rank)?;
    drop(per_rank);

    let mut replica = model.clone();
    if let Some(opt) = opt {
        let mut o = opt.clone();
        let mut params = replica.params();
        o.step(&mut params, &grads.tensors)?;
        replica = replica.with_params(params)?;
    }
    Ok(WorkerResult { loss, grads, model: replica })
}

fn run<T: Scalar>(
    group: &WorkerGroup,
    batch: &Batch<T>,
    model: &DualEncoder<T>,
    opt: Option<&OptimizerState<T>>,
    config: &CacheConfig,
) -> Result<Vec<WorkerResult<T>>> {
    check_temperature(config.temperature)?;
    if config.sub_batch_s == 0 || config.sub_batch_t == 0 {
        return Err(Error::InvalidConfig("sub-batch sizes must be at least 1".into()));
    }
    if batch.num_anchors() == 0 {
        return Err(Error::InvalidBatch("no anchors".into()));
    }
    let n = group.workers;
    let ex = Exchange {
        barrier: Barrier::new(n),
        reps: Mutex::new(vec![None; n]),
        grads: Mutex::new(vec![None; n]),
        failed: Mutex::new(None),
    };
    let results: Vec<Result<WorkerResult<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .map(|rank| {
                let ex = &ex;
                s.spawn(move || {
                    memtrace::with_probe(group.probe(rank), || worker(rank, group, ex, batch, model, opt, config))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Exchange("worker panicked".into()))))
            .collect()
    });
    results.into_iter().collect()
}

/// Summed gradients and loss of a data-parallel cached step, without an
/// update. Equal to the single-process cached gradient.
pub fn multi_worker_grads<T: Scalar>(
    group: &WorkerGroup,
    batch: &Batch<T>,
    model: &DualEncoder<T>,
    config: &CacheConfig,
) -> Result<(ParamGrads<T>, T)> {
    let mut results = run(group, batch, model, None, config)?;
    let first = results.swap_remove(0);
    Ok((first.grads, first.loss))
}

/// One data-parallel cached step. Every worker applies the same update to
/// its own replica; `model` and `opt` end up in that common state.
pub fn train_step_multi<T: Scalar>(
    group: &WorkerGroup,
    batch: &Batch<T>,
    model: &mut DualEncoder<T>,
    opt: &mut OptimizerState<T>,
    config: &CacheConfig,
) -> Result<MultiStepOutput<T>> {
    let results = run(group, batch, model, Some(opt), config)?;
    let mut params = model.params();
    opt.step(&mut params, &results[0].grads.tensors)?;
    *model = model.with_params(params)?;
    let out = MultiStepOutput { loss: results[0].loss, replicas: results.into_iter().map(|r| r.model).collect() };
    if !out.replicas_identical() {
        return Err(Error::Exchange("worker replicas diverged".into()));
    }
    Ok(out)
}
