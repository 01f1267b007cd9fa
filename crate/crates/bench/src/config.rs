//! Run configuration: defaults, then a TOML key-value file, then flags.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use gradcache::Activation;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};
use crate::task::TaskConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Direct,
    Cache,
    Accumulation,
    Sequential,
    Deep,
    Multi,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Direct => "direct",
            Mode::Cache => "cache",
            Mode::Accumulation => "accumulation",
            Mode::Sequential => "sequential",
            Mode::Deep => "deep",
            Mode::Multi => "multi",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Mode::Direct),
            "cache" => Ok(Mode::Cache),
            "accumulation" => Ok(Mode::Accumulation),
            "sequential" => Ok(Mode::Sequential),
            "deep" => Ok(Mode::Deep),
            "multi" => Ok(Mode::Multi),
            _ => Err(BenchError::Config(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub batch_size: usize,
    /// Anchor sub-batch; also the chunk size in accumulation mode.
    pub sub_batch_s: Option<usize>,
    pub sub_batch_t: Option<usize>,
    pub workers: usize,
    pub temperature: f64,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub eval_k: Vec<usize>,
    pub activation_budget: Option<usize>,
    /// Encoder hidden width; 0 gives a single linear layer.
    pub hidden: usize,
    pub dim: usize,
    pub activation: Activation,
    /// Hidden width of the distance head in deep mode.
    pub head_hidden: usize,
    pub n_pairs: usize,
    pub in_dim: usize,
    pub latent_dim: usize,
    pub noise: f64,
    pub eval_fraction: f64,
    /// Seed of the dataset; defaults to `seed`.
    pub data_seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Cache,
            batch_size: 128,
            sub_batch_s: Some(16),
            sub_batch_t: Some(16),
            workers: 1,
            temperature: 0.1,
            optimizer: Optimizer::Adam,
            lr: 1e-2,
            epochs: 5,
            seed: 0,
            eval_k: vec![1, 5, 20],
            activation_budget: None,
            hidden: 32,
            dim: 16,
            activation: Activation::Tanh,
            head_hidden: 16,
            n_pairs: 1000,
            in_dim: 32,
            latent_dim: 16,
            noise: 1.0,
            eval_fraction: 0.1,
            data_seed: None,
        }
    }
}

/// Values given on the command line; each one that is set wins over the
/// file and the defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub batch_size: Option<usize>,
    pub sub_batch_s: Option<usize>,
    pub sub_batch_t: Option<usize>,
    pub workers: Option<usize>,
    pub temperature: Option<f64>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub activation_budget: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| BenchError::Config(e.message().to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))
    }

    /// Defaults, then `path` if given, then `overrides`; validated.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut c = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        c.apply(overrides);
        c.validate()?;
        Ok(c)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.mode {
            self.mode = v;
        }
        if let Some(v) = o.batch_size {
            self.batch_size = v;
        }
        if o.sub_batch_s.is_some() {
            self.sub_batch_s = o.sub_batch_s;
        }
        if o.sub_batch_t.is_some() {
            self.sub_batch_t = o.sub_batch_t;
        }
        if let Some(v) = o.workers {
            self.workers = v;
        }
        if let Some(v) = o.temperature {
            self.temperature = v;
        }
        if let Some(v) = o.epochs {
            self.epochs = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if o.activation_budget.is_some() {
            self.activation_budget = o.activation_budget;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(BenchError::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.dim == 0 || self.in_dim == 0 {
            return fail("dim and in_dim must be positive".into());
        }
        if self.eval_k.contains(&0) {
            return fail("eval_k entries must be at least 1".into());
        }
        match self.mode {
            Mode::Cache | Mode::Deep | Mode::Multi => {
                for (name, v) in [("sub_batch_s", self.sub_batch_s), ("sub_batch_t", self.sub_batch_t)] {
                    match v {
                        None => return fail(format!("{} mode requires {name}", self.mode)),
                        Some(0) => return fail(format!("{name} must be at least 1")),
                        _ => {}
                    }
                }
            }
            Mode::Accumulation => match self.sub_batch_s {
                None => return fail("accumulation mode requires sub_batch_s (the chunk size)".into()),
                Some(0) => return fail("sub_batch_s must be at least 1".into()),
                _ => {}
            },
            Mode::Direct | Mode::Sequential => {}
        }
        if self.mode == Mode::Deep && self.head_hidden == 0 {
            return fail("deep mode requires head_hidden ≥ 1".into());
        }
        if self.workers == 0 {
            return fail("workers must be at least 1".into());
        }
        if self.workers > 1 && self.mode != Mode::Multi {
            return fail(format!("workers = {} is only valid in multi mode", self.workers));
        }
        Ok(())
    }

    pub fn task(&self) -> TaskConfig {
        TaskConfig {
            seed: self.data_seed.unwrap_or(self.seed),
            n_pairs: self.n_pairs,
            in_dim_s: self.in_dim,
            in_dim_t: self.in_dim,
            latent_dim: self.latent_dim,
            noise: self.noise,
            eval_fraction: self.eval_fraction,
            identity_maps: false,
        }
    }

    /// Encoder layer widths `[in, hidden, dim]`, or `[in, dim]` without a
    /// hidden layer.
    pub fn encoder_dims(&self) -> Vec<usize> {
        if self.hidden == 0 {
            vec![self.in_dim, self.dim]
        } else {
            vec![self.in_dim, self.hidden, self.dim]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file() {
        let mut c = RunConfig::from_toml("mode = \"direct\"\nbatch_size = 64\ntemperature = 0.5\n").unwrap();
        assert_eq!(c.mode, Mode::Direct);
        c.apply(&Overrides { batch_size: Some(32), mode: Some(Mode::Cache), ..Default::default() });
        assert_eq!((c.mode, c.batch_size, c.temperature), (Mode::Cache, 32, 0.5));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(RunConfig::from_toml("batch = 3"), Err(BenchError::Config(_))));
        assert!(matches!(RunConfig::from_toml("mode = \"huge\""), Err(BenchError::Config(_))));
        let bad = [
            RunConfig { mode: Mode::Cache, sub_batch_s: None, ..Default::default() },
            RunConfig { mode: Mode::Accumulation, sub_batch_s: Some(0), ..Default::default() },
            RunConfig { temperature: 0.0, ..Default::default() },
            RunConfig { workers: 2, mode: Mode::Cache, ..Default::default() },
            RunConfig { batch_size: 0, ..Default::default() },
        ];
        for c in bad {
            let e = c.validate().unwrap_err();
            assert_eq!(e.exit_code(), 2, "{c:?}");
        }
        assert!(RunConfig { mode: Mode::Direct, sub_batch_s: None, ..Default::default() }.validate().is_ok());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [Mode::Direct, Mode::Cache, Mode::Accumulation, Mode::Sequential, Mode::Deep, Mode::Multi] {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
    }
}
