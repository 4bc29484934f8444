//! `plateau-lr`: run seeded closed-loop simulations, replay recorded loss
//! traces through a scheduler, compare schedulers head to head, and
//! benchmark the per-step detector cost.
//!
//! Exit codes: 0 on success, 1 on I/O errors, 2 on configuration or
//! validation errors.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use plateau_lr::harness::{self, KvConfig};
use plateau_lr::trace::{read_loss_trace, replay, write_lr_trace};
use plateau_lr::{LrTrace, Scheduler};

#[derive(Parser, Debug)]
#[command(
    name = "plateau-lr",
    version,
    about = "Plateau-driven learning-rate schedules: simulate, replay, compare, bench"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one scheduler against the seeded synthetic loss process.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Write the `iter,loss,lr,de,event` trace here (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a long-format `iter,series,value` plot CSV.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Feed a recorded `iter,loss` trace through a scheduler (open loop).
    Replay {
        #[command(flatten)]
        common: Common,
        /// Recorded loss trace.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Run several schedulers on one identically seeded process.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Loss level for the iterations-to-target metric.
        #[arg(long)]
        target: Option<f64>,
        /// Machine-readable key-value report.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Time the detector step over N synthetic losses.
    Bench {
        #[arg(long, short = 'n', default_value_t = 10_000_000)]
        iterations: u64,
    },
}

/// Flags shared by the run commands; each overrides the config file key of the same name.
#[derive(Args, Debug, Default)]
struct Common {
    /// Key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Process seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Scheduler: fastface, ema_hck, linlr, mslr, coslr or constant.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    gamma0: Option<String>,
    #[arg(long, visible_alias = "total_iters")]
    total_iters: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    /// Iteration count, or a fraction of total_iters when in (0, 1).
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    delta: Option<String>,
    #[arg(long, visible_alias = "lr_min")]
    lr_min: Option<String>,
    #[arg(long, visible_alias = "half_size")]
    half_size: Option<String>,
    /// Comma-separated fractions of total_iters.
    #[arg(long)]
    milestones: Option<String>,
    /// Let above-threshold steps leave the tolerance count untouched.
    #[arg(long)]
    no_consecutive: bool,
}

impl Common {
    fn load(&self) -> Result<KvConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                KvConfig::parse(&text).with_context(|| format!("in config {}", path.display()))?
            }
            None => KvConfig::default(),
        };
        let overrides = [
            ("kind", &self.kind),
            ("gamma0", &self.gamma0),
            ("total_iters", &self.total_iters),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("lambda", &self.lambda),
            ("tau", &self.tau),
            ("delta", &self.delta),
            ("lr_min", &self.lr_min),
            ("half_size", &self.half_size),
            ("milestones", &self.milestones),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, v.as_str())?;
            }
        }
        if let Some(seed) = self.seed {
            cfg.set("seed", seed.to_string())?;
        }
        if self.no_consecutive {
            cfg.set("consecutive", "false")?;
        }
        Ok(cfg)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn emit_trace(trace: &LrTrace, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => write_lr_trace(trace, create(path)?)
            .with_context(|| format!("writing {}", path.display()))?,
        None => write_lr_trace(trace, io::stdout().lock())?,
    }
    Ok(())
}

fn emit_plot(series: &[(&str, &LrTrace)], path: Option<&Path>) -> Result<()> {
    if let Some(path) = path {
        harness::write_plot_csv(series, create(path)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common, out, plot } => {
            let spec = common.load()?.simulate_spec()?;
            let trace = harness::simulate(&spec)?;
            emit_trace(&trace, out.as_deref())?;
            emit_plot(&[(spec.scheduler.kind.as_str(), &trace)], plot.as_deref())?;
        }
        Command::Replay {
            common,
            input,
            out,
            plot,
        } => {
            let file =
                File::open(&input).with_context(|| format!("opening {}", input.display()))?;
            let losses = read_loss_trace(BufReader::new(file))
                .with_context(|| format!("reading {}", input.display()))?;
            let mut cfg = common.load()?;
            if cfg.get("kind").is_none() {
                cfg.set("kind", "fastface")?;
            }
            if cfg.get("total_iters").is_none() {
                cfg.set("total_iters", losses.len().to_string())?;
            }
            let sched_cfg = cfg.scheduler_config(None)?;
            let kind = sched_cfg.kind;
            let mut sched = Scheduler::new(sched_cfg)?;
            let trace = replay(&mut sched, &losses)?;
            emit_trace(&trace, out.as_deref())?;
            emit_plot(&[(kind.as_str(), &trace)], plot.as_deref())?;
        }
        Command::Compare {
            common,
            target,
            report,
            plot,
        } => {
            let mut cfg = common.load()?;
            if let Some(t) = target {
                cfg.set("target", t.to_string())?;
            }
            let spec = cfg.compare_spec()?;
            let result = harness::compare(&spec)?;
            print!("{}", result.report.render_table());
            if let Some(path) = report {
                let mut w = create(&path)?;
                w.write_all(result.report.render_kv().as_bytes())
                    .and_then(|()| w.flush())
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            let labels = series_labels(
                &result
                    .report
                    .runs
                    .iter()
                    .map(|r| r.label.as_str())
                    .collect::<Vec<_>>(),
            );
            let series: Vec<(&str, &LrTrace)> = labels
                .iter()
                .map(String::as_str)
                .zip(result.traces.iter())
                .collect();
            emit_plot(&series, plot.as_deref())?;
        }
        Command::Bench { iterations } => {
            let report = harness::bench(iterations)?;
            print!("{}", report.render());
        }
    }
    Ok(())
}

/// Disambiguates repeated scheduler names by appending the run index.
fn series_labels(labels: &[&str]) -> Vec<String> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            if labels.iter().filter(|o| *o == l).count() > 1 {
                format!("{l}.{i}")
            } else {
                l.to_string()
            }
        })
        .collect()
}

/// 1 if any cause in the chain is an I/O failure, 2 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    let io = err.chain().any(|cause| {
        cause.is::<io::Error>()
            || cause
                .downcast_ref::<plateau_lr::Error>()
                .is_some_and(plateau_lr::Error::is_io)
    });
    if io {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
