use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::memtrace::Category;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Anchors `S`, targets `T` and the positive map `r`.
///
/// Hard negatives are ordinary rows of `T`; `hard_negatives[i]` lists the
/// ones sampled for anchor `i` and only matters when the batch is split into
/// independent chunks.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub anchors: Tensor<T>,
    pub targets: Tensor<T>,
    pub positives: Vec<usize>,
    pub hard_negatives: Vec<Vec<usize>>,
}

pub(crate) fn check_positives(positives: &[usize], anchors: usize, targets: usize) -> Result<()> {
    if positives.len() != anchors {
        return Err(Error::InvalidBatch(format!(
            "{} positives for {anchors} anchors",
            positives.len()
        )));
    }
    for (anchor, &index) in positives.iter().enumerate() {
        if index >= targets {
            return Err(Error::InvalidPositive { anchor, index, targets });
        }
    }
    Ok(())
}

impl<T: Scalar> Batch<T> {
    pub fn new(anchors: Tensor<T>, targets: Tensor<T>, positives: Vec<usize>) -> Result<Self> {
        let n = anchors.rows();
        Self::with_hard_negatives(anchors, targets, positives, vec![Vec::new(); n])
    }

    pub fn with_hard_negatives(
        anchors: Tensor<T>,
        targets: Tensor<T>,
        positives: Vec<usize>,
        hard_negatives: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if anchors.ndim() != 2 || targets.ndim() != 2 {
            return Err(Error::InvalidBatch("anchors and targets must be matrices".into()));
        }
        check_positives(&positives, anchors.rows(), targets.rows())?;
        if hard_negatives.len() != anchors.rows() {
            return Err(Error::InvalidBatch("one hard-negative list per anchor".into()));
        }
        if let Some(&j) = hard_negatives.iter().flatten().find(|&&j| j >= targets.rows()) {
            return Err(Error::InvalidBatch(format!("hard negative {j} out of range")));
        }
        Ok(Batch {
            anchors: anchors.into_category(Category::Data),
            targets: targets.into_category(Category::Data),
            positives,
            hard_negatives,
        })
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.rows()
    }

    pub fn num_targets(&self) -> usize {
        self.targets.rows()
    }

    pub fn hard_negative_count(&self, anchor: usize) -> usize {
        self.hard_negatives[anchor].len()
    }

    /// First anchor referencing each target, as positive or hard negative.
    fn owners(&self) -> Vec<Option<usize>> {
        let mut owner = vec![None; self.num_targets()];
        for i in 0..self.num_anchors() {
            for &j in std::iter::once(&self.positives[i]).chain(&self.hard_negatives[i]) {
                owner[j].get_or_insert(i);
            }
        }
        owner
    }

    /// Independent small batch for the anchors in `range`: their own
    /// positives and hard negatives plus every target no anchor owns. With
    /// the full range this is the batch itself.
    pub fn independent_chunk(&self, range: Range<usize>) -> Result<Batch<T>> {
        let owner = self.owners();
        let mut keep = vec![false; self.num_targets()];
        for (j, o) in owner.iter().enumerate() {
            keep[j] = o.is_none_or(|i| range.contains(&i));
        }
        for i in range.clone() {
            keep[self.positives[i]] = true;
        }
        let rows: Vec<usize> = (0..self.num_targets()).filter(|&j| keep[j]).collect();
        let mut remap = vec![usize::MAX; self.num_targets()];
        for (new, &old) in rows.iter().enumerate() {
            remap[old] = new;
        }
        let cols = self.targets.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &j in &rows {
            data.extend_from_slice(self.targets.row(j));
        }
        let targets = Tensor::from_vec(vec![rows.len(), cols], data)?;
        let anchors = self.anchors.slice_rows(range.start, range.end)?;
        let positives = range.clone().map(|i| remap[self.positives[i]]).collect();
        let hard = range
            .map(|i| {
                self.hard_negatives[i]
                    .iter()
                    .filter(|&&j| keep[j])
                    .map(|&j| remap[j])
                    .collect()
            })
            .collect();
        Batch::with_hard_negatives(anchors, targets, positives, hard)
    }
}

/// Uniform `U(lo, hi)` matrix from a seeded generator.
pub fn random_matrix<T: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| T::of(rng.random_range(lo..hi))).collect();
    Tensor::raw(vec![rows, cols], data)
}

/// Random batch with inputs in `[-1, 1)`. Anchor `i` has positive `i`;
/// targets beyond `n_anchors` are hard negatives assigned round-robin.
pub fn random_batch<T: Scalar>(
    seed: u64,
    n_anchors: usize,
    n_targets: usize,
    in_dim_s: usize,
    in_dim_t: usize,
) -> Result<Batch<T>> {
    if n_targets < n_anchors {
        return Err(Error::InvalidBatch("need at least one target per anchor".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors = crate::memtrace::in_category(Category::Data, || random_matrix(&mut rng, n_anchors, in_dim_s, -1.0, 1.0));
    let targets = crate::memtrace::in_category(Category::Data, || random_matrix(&mut rng, n_targets, in_dim_t, -1.0, 1.0));
    let mut hard = vec![Vec::new(); n_anchors];
    if n_anchors > 0 {
        for j in n_anchors..n_targets {
            hard[(j - n_anchors) % n_anchors].push(j);
        }
    }
    Batch::with_hard_negatives(anchors, targets, (0..n_anchors).collect(), hard)
}
