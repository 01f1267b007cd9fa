//! Live-float accounting for tensors.
//!
//! A [`Probe`] installed on the current thread is charged for every tensor
//! buffer allocated while it is active and credited back when the buffer is
//! dropped, wherever that happens. Each buffer is tagged with the ambient
//! [`Category`] at allocation time, so the peak of activation memory can be
//! read independently of the representation store or the gradient cache.
//! Units are floats, not bytes.
//!
//! The probe also carries operation counters (encoder rows forwarded and
//! back-propagated, distance-head pair evaluations) used to check the
//! two-pass overhead of cached training.

use std::cell::{Cell, RefCell};
use std::sync::{Arc, Mutex};

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    /// Encoder intermediates and their gradients.
    Activation,
    /// Step-one representations `F`, `G`.
    RepresentationStore,
    /// Cached representation gradients `u`, `v`.
    GradientCache,
    /// Pairwise distances and their cached gradients `w`.
    DistanceCache,
    /// Loss-level graph over representations (logits, log-probabilities).
    Similarity,
    /// Model parameters, optimizer moments and parameter gradients.
    Parameters,
    /// Raw batch inputs.
    Data,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Activation,
        Category::RepresentationStore,
        Category::GradientCache,
        Category::DistanceCache,
        Category::Similarity,
        Category::Parameters,
        Category::Data,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Activation => "activation",
            Category::RepresentationStore => "representation_store",
            Category::GradientCache => "gradient_cache",
            Category::DistanceCache => "distance_cache",
            Category::Similarity => "similarity",
            Category::Parameters => "parameters",
            Category::Data => "data",
        }
    }
}

const NCAT: usize = Category::ALL.len();

/// Per-category live and high-water counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemCounter {
    live: [usize; NCAT],
    peak: [usize; NCAT],
    total_live: usize,
    total_peak: usize,
    violations: usize,
}

impl MemCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn track_alloc(&mut self, category: Category, n_floats: usize) {
        let k = category.index();
        self.live[k] += n_floats;
        self.peak[k] = self.peak[k].max(self.live[k]);
        self.total_live += n_floats;
        self.total_peak = self.total_peak.max(self.total_live);
    }

    pub fn track_release(&mut self, category: Category, n_floats: usize) -> Result<()> {
        let k = category.index();
        if n_floats > self.live[k] {
            self.violations += 1;
            return Err(Error::MemViolation { category, live: self.live[k], requested: n_floats });
        }
        self.live[k] -= n_floats;
        self.total_live -= n_floats;
        Ok(())
    }

    pub fn live(&self, category: Category) -> usize {
        self.live[category.index()]
    }

    pub fn peak(&self, category: Category) -> usize {
        self.peak[category.index()]
    }

    pub fn total_live(&self) -> usize {
        self.total_live
    }

    pub fn total_peak(&self) -> usize {
        self.total_peak
    }

    pub fn violations(&self) -> usize {
        self.violations
    }

    /// Forget high-water marks, keeping what is currently live.
    pub fn reset_peaks(&mut self) {
        self.peak = self.live;
        self.total_peak = self.total_live;
    }

    /// Sums counters of several workers. Peaks are summed too, which is an
    /// upper bound on the joint peak.
    pub fn merged<'a>(counters: impl IntoIterator<Item = &'a MemCounter>) -> MemCounter {
        let mut out = MemCounter::new();
        for c in counters {
            for k in 0..NCAT {
                out.live[k] += c.live[k];
                out.peak[k] += c.peak[k];
            }
            out.total_live += c.total_live;
            out.total_peak += c.total_peak;
            out.violations += c.violations;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OpCounts {
    /// Examples pushed through an encoder forward pass (taped or not).
    pub encoder_forward_rows: u64,
    /// Examples whose encoder output received a backward pass.
    pub encoder_backward_rows: u64,
    /// `(anchor, target)` pairs evaluated by a parameterized distance head.
    pub distance_forward_pairs: u64,
}

/// Memory counter plus op counters shared by everything allocated while the
/// probe is installed.
#[derive(Debug, Default)]
pub struct Probe {
    mem: Mutex<MemCounter>,
    ops: Mutex<OpCounts>,
}

impl Probe {
    pub fn new() -> Arc<Probe> {
        Arc::new(Probe::default())
    }

    pub fn memory(&self) -> MemCounter {
        self.mem.lock().unwrap().clone()
    }

    pub fn ops(&self) -> OpCounts {
        *self.ops.lock().unwrap()
    }

    pub fn reset_peaks(&self) {
        self.mem.lock().unwrap().reset_peaks();
    }

    pub fn reset_ops(&self) {
        *self.ops.lock().unwrap() = OpCounts::default();
    }

    fn alloc(&self, category: Category, n: usize) {
        self.mem.lock().unwrap().track_alloc(category, n);
    }

    fn release(&self, category: Category, n: usize) {
        // Violations are recorded on the counter; drop paths cannot report.
        let _ = self.mem.lock().unwrap().track_release(category, n);
    }
}

thread_local! {
    static ACTIVE: RefCell<Option<Arc<Probe>>> = const { RefCell::new(None) };
    static CATEGORY: Cell<Category> = const { Cell::new(Category::Activation) };
}

/// Run `f` with `probe` installed on this thread.
pub fn with_probe<R>(probe: &Arc<Probe>, f: impl FnOnce() -> R) -> R {
    struct Restore(Option<Arc<Probe>>);
    impl Drop for Restore {
        fn drop(&mut self) {
            let prev = self.0.take();
            ACTIVE.with(|a| *a.borrow_mut() = prev);
        }
    }
    let prev = ACTIVE.with(|a| a.borrow_mut().replace(probe.clone()));
    let _restore = Restore(prev);
    f()
}

/// Run `f` with new allocations tagged as `category`.
pub fn in_category<R>(category: Category, f: impl FnOnce() -> R) -> R {
    struct Restore(Category);
    impl Drop for Restore {
        fn drop(&mut self) {
            CATEGORY.with(|c| c.set(self.0));
        }
    }
    let prev = CATEGORY.with(|c| c.replace(category));
    let _restore = Restore(prev);
    f()
}

pub fn current_category() -> Category {
    CATEGORY.with(|c| c.get())
}

pub fn active_probe() -> Option<Arc<Probe>> {
    ACTIVE.with(|a| a.borrow().clone())
}

pub(crate) fn count_ops(f: impl FnOnce(&mut OpCounts)) {
    ACTIVE.with(|a| {
        if let Some(p) = a.borrow().as_ref() {
            f(&mut p.ops.lock().unwrap());
        }
    });
}

/// A charge against a probe held by a tensor buffer; released on drop.
#[derive(Debug)]
pub(crate) struct Charge {
    probe: Arc<Probe>,
    category: Category,
    floats: usize,
}

impl Charge {
    pub(crate) fn take(category: Category, floats: usize) -> Option<Charge> {
        let probe = active_probe()?;
        probe.alloc(category, floats);
        Some(Charge { probe, category, floats })
    }

    pub(crate) fn category(&self) -> Category {
        self.category
    }

    /// Move the charge to another category without touching the float count.
    pub(crate) fn recategorize(&mut self, category: Category) {
        if category == self.category {
            return;
        }
        self.probe.release(self.category, self.floats);
        self.probe.alloc(category, self.floats);
        self.category = category;
    }
}

impl Drop for Charge {
    fn drop(&mut self) {
        self.probe.release(self.category, self.floats);
    }
}
