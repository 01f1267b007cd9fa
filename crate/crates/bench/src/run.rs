//! Training loop, per-step measurements and the batch-size sweep.

use std::sync::Arc;
use std::time::Instant;

use gradcache::batch::random_batch;
use gradcache::deep::train_step_deep;
use gradcache::gradcache::{train_step_accumulation, train_step_cached, train_step_direct, CacheConfig};
use gradcache::memtrace::{with_probe, OpCounts};
use gradcache::multiworker::{train_step_multi, WorkerGroup};
use gradcache::{Batch, Category, MemCounter, OptimizerState, Probe};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Mode, Optimizer, RunConfig};
use crate::error::{BenchError, Result};
use crate::eval::{evaluate_topk, EvalResult};
use crate::model::TrainedModel;
use crate::task::SyntheticTask;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Encoder forward rows, taped and graph-less.
    pub fwd_count: u64,
    pub bwd_count: u64,
    /// Peak live activation floats; the per-worker maximum in multi mode.
    pub act_peak: usize,
    /// Peak floats held in representation and distance gradient caches,
    /// summed over workers.
    pub cache_floats: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: RunConfig,
    pub records: Vec<StepRecord>,
    pub eval: EvalResult,
    pub model: TrainedModel,
}

/// Memory and op figures of one step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepStats {
    pub loss: f64,
    pub ops: OpCounts,
    pub act_peak: usize,
    pub rep_store_peak: usize,
    pub cache_floats: usize,
    pub total_peak: usize,
}

/// Model, optimizer and probes for one run.
pub struct Trainer {
    config: RunConfig,
    model: TrainedModel,
    opt: OptimizerState<f64>,
    probe: Arc<Probe>,
    group: Option<WorkerGroup>,
}

fn cache_floats(mem: &MemCounter) -> usize {
    mem.peak(Category::GradientCache) + mem.peak(Category::DistanceCache)
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let opt = match config.optimizer {
            Optimizer::Sgd => OptimizerState::sgd(config.lr),
            Optimizer::Adam => OptimizerState::adam(config.lr),
        };
        let group = match config.mode {
            Mode::Multi => Some(WorkerGroup::new(config.workers)?),
            _ => None,
        };
        Ok(Trainer { config: config.clone(), model: TrainedModel::init(config)?, opt, probe: Probe::new(), group })
    }

    pub fn model(&self) -> &TrainedModel {
        &self.model
    }

    pub fn into_model(self) -> TrainedModel {
        self.model
    }

    fn cache_config(&self) -> CacheConfig {
        let c = &self.config;
        CacheConfig::new(c.sub_batch_s.unwrap_or(c.batch_size), c.sub_batch_t.unwrap_or(c.batch_size), c.temperature)
    }

    fn probes(&self) -> Vec<&Arc<Probe>> {
        match &self.group {
            Some(g) => (0..g.workers()).map(|r| g.probe(r)).collect(),
            None => vec![&self.probe],
        }
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, batch: &Batch<f64>) -> Result<StepStats> {
        for p in self.probes() {
            p.reset_peaks();
            p.reset_ops();
        }
        let tau = self.config.temperature;
        let cache = self.cache_config();
        let loss = match (&mut self.model, self.config.mode) {
            (TrainedModel::Dual(m), Mode::Multi) => {
                let group = self.group.as_ref().expect("multi mode has a worker group");
                train_step_multi(group, batch, m, &mut self.opt, &cache)?.loss
            }
            (model, mode) => with_probe(&self.probe, || match (model, mode) {
                (TrainedModel::Dual(m), Mode::Direct | Mode::Sequential) => train_step_direct(batch, m, &mut self.opt, tau),
                (TrainedModel::Dual(m), Mode::Cache) => train_step_cached(batch, m, &mut self.opt, &cache),
                (TrainedModel::Dual(m), Mode::Accumulation) => {
                    train_step_accumulation(batch, m, &mut self.opt, cache.sub_batch_s, tau)
                }
                (TrainedModel::Deep(m), Mode::Deep) => train_step_deep(batch, m, &mut self.opt, &cache),
                _ => Err(gradcache::Error::InvalidConfig(format!("model does not match mode {mode}"))),
            })?,
        };
        let mems: Vec<MemCounter> = self.probes().iter().map(|p| p.memory()).collect();
        let mut ops = OpCounts::default();
        for p in self.probes() {
            let o = p.ops();
            ops.encoder_forward_rows += o.encoder_forward_rows;
            ops.encoder_backward_rows += o.encoder_backward_rows;
            ops.distance_forward_pairs += o.distance_forward_pairs;
        }
        let max_of = |c: Category| mems.iter().map(|m| m.peak(c)).max().unwrap_or(0);
        Ok(StepStats {
            loss,
            ops,
            act_peak: max_of(Category::Activation),
            rep_store_peak: max_of(Category::RepresentationStore),
            cache_floats: mems.iter().map(cache_floats).sum(),
            total_peak: mems.iter().map(|m| m.total_peak()).max().unwrap_or(0),
        })
    }
}

/// Index lists of every full batch in an epoch. A trailing partial batch
/// is dropped.
pub fn epoch_batches(rng: &mut ChaCha8Rng, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm.chunks_exact(batch_size).map(|c| c.to_vec()).collect()
}

pub fn run_experiment(config: &RunConfig, task: &SyntheticTask) -> Result<RunResult> {
    let mut trainer = Trainer::new(config)?;
    if task.train.len() < config.batch_size {
        return Err(BenchError::Config(format!(
            "batch_size {} exceeds the {} training pairs",
            config.batch_size,
            task.train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut records = Vec::new();
    for epoch in 0..config.epochs {
        for idx in epoch_batches(&mut rng, task.train.len(), config.batch_size) {
            let batch = task.train.batch(&idx)?;
            let start = Instant::now();
            let s = trainer.step(&batch)?;
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            let step = records.len();
            if let Some(budget) = config.activation_budget {
                if s.act_peak > budget {
                    return Err(BenchError::Budget { peak: s.act_peak, budget, step });
                }
            }
            records.push(StepRecord {
                step,
                epoch,
                loss: s.loss,
                fwd_count: s.ops.encoder_forward_rows,
                bwd_count: s.ops.encoder_backward_rows,
                act_peak: s.act_peak,
                cache_floats: s.cache_floats,
                wall_ms,
            });
        }
    }
    let eval = evaluate_topk(trainer.model(), &task.eval, &config.eval_k)?;
    Ok(RunResult { config: config.clone(), records, eval, model: trainer.into_model() })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub mode: Mode,
    pub batch_size: usize,
    pub act_peak: usize,
    pub rep_store_peak: usize,
    pub cache_floats: usize,
    pub total_peak: usize,
    pub fwd_count: u64,
    pub bwd_count: u64,
    pub loss: f64,
    pub wall_ms: f64,
}

/// One step from the initial model at each batch size, on random inputs.
pub fn sweep(config: &RunConfig, sizes: &[usize]) -> Result<Vec<SweepRow>> {
    sizes
        .iter()
        .map(|&n| {
            let cfg = RunConfig { batch_size: n, ..config.clone() };
            let mut trainer = Trainer::new(&cfg)?;
            let batch = random_batch::<f64>(cfg.seed.wrapping_add(n as u64), n, n, cfg.in_dim, cfg.in_dim)?;
            let start = Instant::now();
            let s = trainer.step(&batch)?;
            Ok(SweepRow {
                mode: cfg.mode,
                batch_size: n,
                act_peak: s.act_peak,
                rep_store_peak: s.rep_store_peak,
                cache_floats: s.cache_floats,
                total_peak: s.total_peak,
                fwd_count: s.ops.encoder_forward_rows,
                bwd_count: s.ops.encoder_backward_rows,
                loss: s.loss,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            })
        })
        .collect()
}
