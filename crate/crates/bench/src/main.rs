use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gradcache::profile::{profile_sweep, StepMode};
use gradcache_bench::config::{Mode, Overrides, RunConfig};
use gradcache_bench::error::{BenchError, Result};
use gradcache_bench::eval::evaluate_topk;
use gradcache_bench::model::TrainedModel;
use gradcache_bench::report::{write_run, write_sweep};
use gradcache_bench::run::{run_experiment, sweep};
use gradcache_bench::task::{generate_task, Pairs};

#[derive(Parser)]
#[command(name = "gradcache", version, about = "Contrastive training with a representation gradient cache")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train and eval pairs as CSV.
    Generate(Common),
    /// Train, evaluate and write metrics.jsonl, summary.csv and params.json.
    Train(Common),
    /// Evaluate saved parameters on the eval split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Parameter file written by `train`; defaults to OUT/params.json.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// One step per batch size; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "64,128,256,512,1024,2048,4096")]
        sizes: Vec<usize>,
    },
    /// Per-category memory peaks of one step per batch size, as JSON lines.
    Profile {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "64,128,256,512")]
        sizes: Vec<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML file of run settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    sub_batch_s: Option<usize>,
    #[arg(long)]
    sub_batch_t: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum activation floats per step; exceeding it exits with status 3.
    #[arg(long)]
    activation_budget: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let overrides = Overrides {
            mode: self.mode.as_deref().map(str::parse).transpose()?,
            batch_size: self.batch_size,
            sub_batch_s: self.sub_batch_s,
            sub_batch_t: self.sub_batch_t,
            workers: self.workers,
            temperature: self.temperature,
            epochs: self.epochs,
            seed: self.seed,
            activation_budget: self.activation_budget,
        };
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))
}

fn write_pairs(path: &Path, pairs: &Pairs) -> Result<()> {
    let err = |e: csv::Error| BenchError::Encode(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let (ds, dt) = (pairs.anchors.cols(), pairs.targets.cols());
    let mut header = vec!["pair".to_string()];
    header.extend((0..ds).map(|i| format!("s{i}")));
    header.extend((0..dt).map(|i| format!("t{i}")));
    w.write_record(&header).map_err(err)?;
    for i in 0..pairs.len() {
        let mut row = vec![i.to_string()];
        row.extend(pairs.anchors.row(i).iter().map(|x| x.to_string()));
        row.extend(pairs.targets.row(i).iter().map(|x| x.to_string()));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| BenchError::io(path, e))
}

fn to_json<S: serde::Serialize>(v: &S) -> Result<String> {
    serde_json::to_string(v).map_err(|e| BenchError::Encode(e.to_string()))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(common) => {
            let cfg = common.resolve()?;
            let task = generate_task(&cfg.task())?;
            create_dir(&common.out)?;
            write_pairs(&common.out.join("train.csv"), &task.train)?;
            write_pairs(&common.out.join("eval.csv"), &task.eval)?;
            println!("wrote {} train and {} eval pairs to {}", task.train.len(), task.eval.len(), common.out.display());
        }
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let task = generate_task(&cfg.task())?;
            let run = run_experiment(&cfg, &task)?;
            write_run(&common.out, &run)?;
            let last = run.records.last().map(|r| r.loss).unwrap_or(f64::NAN);
            let hits: Vec<String> = run.eval.ks.iter().zip(&run.eval.hits).map(|(k, h)| format!("hit@{k}={h:.4}")).collect();
            println!("{} steps={} final_loss={last:.6} {}", cfg.mode, run.records.len(), hits.join(" "));
        }
        Command::Eval { common, params } => {
            let cfg = common.resolve()?;
            let task = generate_task(&cfg.task())?;
            let path = params.unwrap_or_else(|| common.out.join("params.json"));
            let model = TrainedModel::load(&path)?;
            let result = evaluate_topk(&model, &task.eval, &cfg.eval_k)?;
            println!("{}", to_json(&result)?);
        }
        Command::Sweep { common, sizes } => {
            let cfg = common.resolve()?;
            let rows = sweep(&cfg, &sizes)?;
            create_dir(&common.out)?;
            write_sweep(&common.out.join("sweep.csv"), &rows)?;
            for r in &rows {
                println!("{} n={} act_peak={} cache_floats={}", r.mode, r.batch_size, r.act_peak, r.cache_floats);
            }
        }
        Command::Profile { common, sizes } => {
            let cfg = common.resolve()?;
            let mode = match cfg.mode {
                Mode::Direct | Mode::Sequential => StepMode::Direct,
                Mode::Cache => StepMode::Cached {
                    sub_batch_s: cfg.sub_batch_s.unwrap_or(cfg.batch_size),
                    sub_batch_t: cfg.sub_batch_t.unwrap_or(cfg.batch_size),
                },
                Mode::Accumulation => StepMode::Accumulation { chunk: cfg.sub_batch_s.unwrap_or(cfg.batch_size) },
                m => return Err(BenchError::Config(format!("profile supports direct, cache and accumulation, not {m}"))),
            };
            let model = TrainedModel::init(&cfg)?;
            for r in profile_sweep(mode, &sizes, model.encoders(), cfg.temperature, cfg.seed)? {
                println!("{}", to_json(&r)?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
