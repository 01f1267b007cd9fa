//! Per-category memory peaks of a single training step.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::batch::{random_batch, Batch};
use crate::encoder::DualEncoder;
use crate::error::Result;
use crate::gradcache::{train_step_accumulation, train_step_cached, train_step_direct, CacheConfig};
use crate::memtrace::{self, Category, OpCounts, Probe};
use crate::optim::OptimizerState;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum StepMode {
    Direct,
    Cached { sub_batch_s: usize, sub_batch_t: usize },
    Accumulation { chunk: usize },
}

impl StepMode {
    pub fn name(&self) -> &'static str {
        match self {
            StepMode::Direct => "direct",
            StepMode::Cached { .. } => "cache",
            StepMode::Accumulation { .. } => "accumulation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemReport {
    pub mode: &'static str,
    pub batch_size: usize,
    /// Peak live floats by category name.
    pub peaks: BTreeMap<&'static str, usize>,
    pub total_peak: usize,
    /// Encoder activations still alive after the step returned.
    pub activation_live_after: usize,
    pub violations: usize,
    pub ops: OpCounts,
    pub loss: f64,
}

impl MemReport {
    pub fn peak(&self, category: Category) -> usize {
        self.peaks[category.name()]
    }
}

/// Run one step of `mode` under a fresh probe. The caller's model and
/// optimizer are left untouched.
pub fn profile_step<T: Scalar>(
    mode: StepMode,
    batch: &Batch<T>,
    model: &DualEncoder<T>,
    opt: &OptimizerState<T>,
    temperature: f64,
) -> Result<MemReport> {
    let probe = Probe::new();
    let (mut model, mut opt) = (model.clone(), opt.clone());
    let loss = memtrace::with_probe(&probe, || match mode {
        StepMode::Direct => train_step_direct(batch, &mut model, &mut opt, temperature),
        StepMode::Cached { sub_batch_s, sub_batch_t } => {
            train_step_cached(batch, &mut model, &mut opt, &CacheConfig::new(sub_batch_s, sub_batch_t, temperature))
        }
        StepMode::Accumulation { chunk } => train_step_accumulation(batch, &mut model, &mut opt, chunk, temperature),
    })?;
    let mem = probe.memory();
    Ok(MemReport {
        mode: mode.name(),
        batch_size: batch.num_anchors(),
        peaks: Category::ALL.iter().map(|&c| (c.name(), mem.peak(c))).collect(),
        total_peak: mem.total_peak(),
        activation_live_after: mem.live(Category::Activation),
        violations: mem.violations(),
        ops: probe.ops(),
        loss: loss.as_f64(),
    })
}

/// Profile `mode` on random batches of `|S| = |T| = n` for each `n`.
pub fn profile_sweep<T: Scalar>(
    mode: StepMode,
    batch_sizes: &[usize],
    model: &DualEncoder<T>,
    temperature: f64,
    seed: u64,
) -> Result<Vec<MemReport>> {
    let in_s = model.anchor.input_dim();
    let in_t = model.target_encoder().input_dim();
    batch_sizes
        .iter()
        .map(|&n| {
            let batch = random_batch::<T>(seed.wrapping_add(n as u64), n, n, in_s, in_t)?;
            profile_step(mode, &batch, model, &OptimizerState::sgd(0.01), temperature)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Activation;

    #[test]
    fn report_covers_every_category() {
        let model = DualEncoder::<f64>::init(1, &[3, 4], &[3, 4], Activation::Tanh).unwrap();
        let r = profile_sweep(StepMode::Direct, &[4], &model, 1.0, 0).unwrap();
        assert_eq!(r[0].peaks.len(), Category::ALL.len());
        assert_eq!(r[0].activation_live_after, 0);
        assert!(r[0].peak(Category::Activation) > 0);
        assert_eq!(r[0].peak(Category::GradientCache), 0);
    }
}
