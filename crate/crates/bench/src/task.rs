//! Synthetic paired data from a shared linear latent.
//!
//! Each pair draws `z ~ N(0, I)`; the anchor is `z·A + σ·ε_s` and the target
//! `z·B + σ·ε_t` with fixed random projections `A`, `B`. Retrieval is
//! learnable because both sides see the same `z`, and harder as `σ` grows.

use gradcache::{Batch, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub seed: u64,
    pub n_pairs: usize,
    pub in_dim_s: usize,
    pub in_dim_t: usize,
    pub latent_dim: usize,
    pub noise: f64,
    pub eval_fraction: f64,
    /// Use `A = B = I`; requires all three widths to match.
    pub identity_maps: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            seed: 0,
            n_pairs: 1000,
            in_dim_s: 32,
            in_dim_t: 32,
            latent_dim: 16,
            noise: 1.0,
            eval_fraction: 0.1,
            identity_maps: false,
        }
    }
}

/// Aligned anchor and target rows: row `i` of each forms pair `i`.
#[derive(Debug, Clone)]
pub struct Pairs {
    pub anchors: Tensor<f64>,
    pub targets: Tensor<f64>,
}

impl Pairs {
    pub fn len(&self) -> usize {
        self.anchors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Batch of the pairs at `idx`, anchor `k` matched with target `k`.
    pub fn batch(&self, idx: &[usize]) -> Result<Batch<f64>> {
        let pick = |t: &Tensor<f64>| -> Result<Tensor<f64>> {
            let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
            Ok(Tensor::from_vec(vec![idx.len(), t.cols()], data)?)
        };
        Ok(Batch::new(pick(&self.anchors)?, pick(&self.targets)?, (0..idx.len()).collect())?)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub train: Pairs,
    pub eval: Pairs,
}

/// Number of evaluation pairs, rounded to the nearest integer.
pub fn eval_count(n_pairs: usize, fraction: f64) -> usize {
    (n_pairs as f64 * fraction).round() as usize
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    (0..rows * cols).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

fn project(z: &[f64], n: usize, k: usize, map: &[f64], out: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * out];
    for i in 0..n {
        for a in 0..k {
            let zi = z[i * k + a];
            for (o, &m) in y[i * out..(i + 1) * out].iter_mut().zip(&map[a * out..(a + 1) * out]) {
                *o += zi * m;
            }
        }
    }
    y
}

pub fn generate_task(config: &TaskConfig) -> Result<SyntheticTask> {
    let c = config;
    if c.n_pairs < 2 {
        return Err(BenchError::Config(format!("n_pairs must be at least 2, got {}", c.n_pairs)));
    }
    if c.in_dim_s == 0 || c.in_dim_t == 0 || c.latent_dim == 0 {
        return Err(BenchError::Config("task dimensions must be positive".into()));
    }
    if c.identity_maps && (c.in_dim_s != c.latent_dim || c.in_dim_t != c.latent_dim) {
        return Err(BenchError::Config("identity maps need in_dim_s = in_dim_t = latent_dim".into()));
    }
    if !(c.noise >= 0.0 && c.noise.is_finite()) {
        return Err(BenchError::Config(format!("noise must be non-negative, got {}", c.noise)));
    }
    if !(0.0..1.0).contains(&c.eval_fraction) {
        return Err(BenchError::Config(format!("eval_fraction must be in [0, 1), got {}", c.eval_fraction)));
    }
    let n_eval = eval_count(c.n_pairs, c.eval_fraction);
    if n_eval >= c.n_pairs {
        return Err(BenchError::Config("eval split leaves no training pairs".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let k = c.latent_dim;
    let identity = |d: usize| (0..d * d).map(|i| if i / d == i % d { 1.0 } else { 0.0 }).collect::<Vec<_>>();
    let (a, b) = if c.identity_maps {
        (identity(k), identity(k))
    } else {
        let s = 1.0 / (k as f64).sqrt();
        (gaussian(&mut rng, k, c.in_dim_s, s), gaussian(&mut rng, k, c.in_dim_t, s))
    };
    let z = gaussian(&mut rng, c.n_pairs, k, 1.0);
    let mut xs = project(&z, c.n_pairs, k, &a, c.in_dim_s);
    let mut xt = project(&z, c.n_pairs, k, &b, c.in_dim_t);
    if c.noise > 0.0 {
        for (x, e) in xs.iter_mut().zip(gaussian(&mut rng, c.n_pairs, c.in_dim_s, c.noise)) {
            *x += e;
        }
        for (x, e) in xt.iter_mut().zip(gaussian(&mut rng, c.n_pairs, c.in_dim_t, c.noise)) {
            *x += e;
        }
    }

    let n_train = c.n_pairs - n_eval;
    let split = |data: &[f64], d: usize| -> Result<(Tensor<f64>, Tensor<f64>)> {
        Ok((
            Tensor::from_vec(vec![n_train, d], data[..n_train * d].to_vec())?,
            Tensor::from_vec(vec![n_eval, d], data[n_train * d..].to_vec())?,
        ))
    };
    let (train_s, eval_s) = split(&xs, c.in_dim_s)?;
    let (train_t, eval_t) = split(&xt, c.in_dim_t)?;
    Ok(SyntheticTask {
        config: c.clone(),
        train: Pairs { anchors: train_s, targets: train_t },
        eval: Pairs { anchors: eval_s, targets: eval_t },
    })
}
