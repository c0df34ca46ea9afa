use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use attnlab::attention::PenaltyVariant;
use attnlab::models::{AttentionVariant, Cell, Family};
use attnlab::tasks::{Split, TaskKind};
use attnlab_cli::commands::{self, DiagnoseOptions, HeatmapFormat};
use attnlab_cli::config::{parse_list, ExperimentConfig};
use attnlab_cli::{exit_code, ConfigError};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "attnlab", version, about = "Attention-manipulation experiments: data, training, sweeps and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test data and a manifest.
    Gen(Overrides),
    /// Train one model and keep the selected checkpoint.
    Train {
        #[command(flatten)]
        common: Overrides,
        /// Run directory of the unpenalized run (base accuracy, KL reference).
        #[arg(long)]
        base_run: Option<PathBuf>,
        #[arg(long)]
        base_accuracy: Option<f64>,
    },
    /// Train every (model, λ, seed) cell and write an aggregated report.
    Sweep {
        #[command(flatten)]
        common: Overrides,
        /// Comma-separated, e.g. 0,0.1,1.
        #[arg(long)]
        lambdas: Option<String>,
        /// Comma-separated seeds.
        #[arg(long)]
        seeds: Option<String>,
        /// Concurrent cells.
        #[arg(long)]
        jobs: Option<usize>,
        /// Comma-separated family:penalty pairs, e.g. embedding:single,transformer:max.
        #[arg(long)]
        models: Option<String>,
        #[arg(long)]
        no_baselines: bool,
    },
    /// Render one example's attention from a trained run.
    Heatmap {
        run_dir: PathBuf,
        index: usize,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[arg(long, value_enum, default_value = "svg")]
        format: HeatmapFormat,
        /// Attention head to draw (classifiers).
        #[arg(long, default_value_t = 0)]
        head: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Zeroing accuracy and embedding-norm growth of a trained run.
    Diagnose {
        run_dir: PathBuf,
        #[arg(long)]
        zeroing: bool,
        #[arg(long)]
        norms: bool,
        /// Zero impermissible attention without renormalizing.
        #[arg(long)]
        raw: bool,
    },
}

/// Settings shared by the commands that build a config. Flags override the
/// config file.
#[derive(Args)]
struct Overrides {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    outdir: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    /// Falls back to the config file, then ATTNLAB_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    force: bool,
    #[arg(long)]
    task: Option<String>,
    /// Training examples.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n_dev: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    cell: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    penalty: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" | "dev" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split {other}; expected train, val or test")),
    }
}

fn parsed<T: std::str::FromStr>(flag: &str, value: &Option<String>) -> anyhow::Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .as_deref()
        .map(|v| v.parse::<T>().map_err(|e| ConfigError(format!("--{flag} {v}: {e}")).into()))
        .transpose()
}

impl Overrides {
    /// Config file (if any) with the flags applied. The seed comes from the
    /// flag, else the file, else ATTNLAB_SEED, else 0.
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let (mut cfg, file_has_seed) = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
                let table: toml::Table = toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
                (ExperimentConfig::load(path)?, table.contains_key("seed"))
            }
            None => (ExperimentConfig::default(), false),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        } else if !file_has_seed {
            if let Ok(v) = std::env::var("ATTNLAB_SEED") {
                cfg.seed = v.trim().parse().map_err(|e| ConfigError(format!("ATTNLAB_SEED={v}: {e}")))?;
            }
        }
        if let Some(v) = &self.outdir {
            cfg.outdir = v.clone();
        }
        if let Some(v) = &self.run_id {
            cfg.run_id = Some(v.clone());
        }
        if let Some(t) = parsed::<TaskKind>("task", &self.task)? {
            cfg.data.task = t;
        }
        let d = &mut cfg.data;
        for (slot, v) in [
            (&mut d.n_train, self.n),
            (&mut d.n_dev, self.n_dev),
            (&mut d.n_test, self.n_test),
            (&mut d.max_len, self.max_len),
            (&mut d.vocab_size, self.vocab),
        ] {
            if let Some(v) = v {
                *slot = v;
            }
        }
        if self.data_seed.is_some() {
            d.seed = self.data_seed;
        }
        let m = &mut cfg.model;
        if let Some(f) = parsed::<Family>("family", &self.family)? {
            m.family = Some(f);
        }
        if let Some(c) = parsed::<Cell>("cell", &self.cell)? {
            m.cell = Some(c);
        }
        if let Some(v) = parsed::<AttentionVariant>("variant", &self.variant)? {
            m.variant = Some(v);
        }
        m.embed_dim = self.embed_dim.or(m.embed_dim);
        m.hidden_dim = self.hidden_dim.or(m.hidden_dim);
        let t = &mut cfg.train;
        if let Some(p) = parsed::<PenaltyVariant>("penalty", &self.penalty)? {
            t.penalty = p;
        }
        t.lambda = self.lambda.unwrap_or(t.lambda);
        t.epochs = self.epochs.unwrap_or(t.epochs);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        t.learning_rate = self.lr.unwrap_or(t.learning_rate);
        Ok(cfg)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen(o) => {
            let dir = commands::gen(&o.resolve()?, o.force)?;
            println!("{}", dir.display());
        }
        Command::Train {
            common,
            base_run,
            base_accuracy,
        } => {
            let mut cfg = common.resolve()?;
            cfg.base_run = base_run.or(cfg.base_run);
            cfg.base_accuracy = base_accuracy.or(cfg.base_accuracy);
            let dir = commands::train(&cfg, common.force)?;
            let metrics = std::fs::read_to_string(dir.join("metrics.json")).context("reading metrics")?;
            println!("{}\n{metrics}", dir.display());
        }
        Command::Sweep {
            common,
            lambdas,
            seeds,
            jobs,
            models,
            no_baselines,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(l) = lambdas {
                cfg.sweep.lambdas = parse_list(&l)?;
            }
            if let Some(s) = seeds {
                cfg.sweep.seeds = parse_list(&s)?;
            }
            if let Some(m) = models {
                cfg.sweep.models = parse_list(&m)?;
            }
            cfg.sweep.jobs = jobs.unwrap_or(cfg.sweep.jobs);
            if no_baselines {
                cfg.sweep.baselines = false;
            }
            let dir = commands::sweep(&cfg, common.force)?;
            let text = std::fs::read_to_string(dir.join("report.txt")).context("reading report")?;
            print!("{text}");
        }
        Command::Heatmap {
            run_dir,
            index,
            split,
            format,
            head,
            out,
        } => {
            let path = commands::heatmap(&run_dir, index, split, format, head, out.as_deref())?;
            println!("{}", path.display());
        }
        Command::Diagnose {
            run_dir,
            zeroing,
            norms,
            raw,
        } => {
            let path = commands::diagnose(&run_dir, DiagnoseOptions { zeroing, norms, raw })?;
            print!("{}", std::fs::read_to_string(&path)?);
            println!();
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
