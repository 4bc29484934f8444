//! Experiment plumbing behind the command-line front end: the key-value
//! config format, closed-loop simulation and comparison runs, the per-step
//! cost benchmark, and the long-format plot CSV.
//!
//! # Config format
//!
//! One `key = value` (or `key: value`) pair per line. `#` starts a comment,
//! blank lines are ignored, keys may appear once. Scheduler keys are
//! `kind`, `gamma0`, `total_iters`, `alpha`, `beta`, `lambda`, `tau`,
//! `delta`, `lr_min`, `half_size`, `milestones` (comma-separated fractions)
//! and `consecutive` (`true`/`false`). Process keys are `l0`, `l_inf`,
//! `floor_slope`, `decay_gain`, `noise_scale` and `seed`. Comparisons add
//! `schedulers` (comma-separated kinds) and an optional `target` loss;
//! a key prefixed with a kind (`mslr.delta = 4`) applies to that kind only.
//!
//! Precedence, lowest first: built-in defaults, config file, command-line
//! overrides (applied through [`KvConfig::set`]).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use crate::detector::{FastFaceParams, FastFaceState};
use crate::error::{Error, Result};
use crate::rng::NormalSource;
use crate::schedule::{Scheduler, SchedulerConfig, SchedulerKind, Tau};
use crate::sim::{run_closed_loop, ProcessConfig};
use crate::trace::{format_float, LrTrace};

const SCHEDULER_KEYS: [&str; 12] = [
    "kind",
    "gamma0",
    "total_iters",
    "alpha",
    "beta",
    "lambda",
    "tau",
    "delta",
    "lr_min",
    "half_size",
    "milestones",
    "consecutive",
];
const PROCESS_KEYS: [&str; 6] = [
    "l0",
    "l_inf",
    "floor_slope",
    "decay_gain",
    "noise_scale",
    "seed",
];
const COMPARE_KEYS: [&str; 2] = ["schedulers", "target"];

fn is_known_key(key: &str) -> bool {
    if SCHEDULER_KEYS.contains(&key) || PROCESS_KEYS.contains(&key) || COMPARE_KEYS.contains(&key) {
        return true;
    }
    match key.split_once('.') {
        Some((kind, rest)) => {
            kind.parse::<SchedulerKind>().is_ok()
                && rest != "kind"
                && SCHEDULER_KEYS.contains(&rest)
        }
        None => false,
    }
}

/// Flat key-value configuration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let sep = line
                .find(['=', ':'])
                .ok_or_else(|| Error::parse(line_no, "expected `key = value`"))?;
            let key = line[..sep].trim();
            let value = line[sep + 1..].trim();
            if key.is_empty() {
                return Err(Error::parse(line_no, "empty key"));
            }
            if !is_known_key(key) {
                return Err(Error::parse(line_no, format!("unknown key `{key}`")));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::parse(line_no, format!("duplicate key `{key}`")));
            }
        }
        Ok(Self { entries })
    }

    /// Sets or replaces a key (command-line overrides).
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !is_known_key(key) {
            return Err(Error::param("config", format!("unknown key `{key}`")));
        }
        self.entries.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    fn scoped(&self, kind: Option<SchedulerKind>, key: &str) -> Option<&str> {
        kind.and_then(|k| self.get(&format!("{k}.{key}")))
            .or_else(|| self.get(key))
    }

    /// Builds a scheduler config, reading `<kind>.<key>` before `<key>`.
    pub fn scheduler_config(&self, kind: Option<SchedulerKind>) -> Result<SchedulerConfig> {
        let kind = match kind {
            Some(k) => k,
            None => self.get("kind").ok_or(Error::MissingKey("kind"))?.parse()?,
        };
        let scope = Some(kind);
        let mut cfg = SchedulerConfig::new(kind);
        if let Some(v) = self.scoped(scope, "gamma0") {
            cfg.gamma0 = parse_f64("gamma0", v)?;
        }
        if let Some(v) = self.scoped(scope, "total_iters") {
            cfg.total_iters = Some(parse_u64("total_iters", v)?);
        }
        if let Some(v) = self.scoped(scope, "alpha") {
            cfg.alpha = parse_f64("alpha", v)?;
        }
        if let Some(v) = self.scoped(scope, "beta") {
            cfg.beta = parse_f64("beta", v)?;
        }
        if let Some(v) = self.scoped(scope, "lambda") {
            cfg.lambda = parse_f64("lambda", v)?;
        }
        if let Some(v) = self.scoped(scope, "tau") {
            cfg.tau = v.parse::<Tau>()?;
        }
        if let Some(v) = self.scoped(scope, "delta") {
            cfg.delta = parse_f64("delta", v)?;
        }
        if let Some(v) = self.scoped(scope, "lr_min") {
            cfg.lr_min = parse_f64("lr_min", v)?;
        }
        if let Some(v) = self.scoped(scope, "half_size") {
            cfg.half_size = parse_u64("half_size", v)? as usize;
        }
        if let Some(v) = self.scoped(scope, "milestones") {
            cfg.milestones = parse_list(v)
                .map(|s| parse_f64("milestones", s))
                .collect::<Result<_>>()?;
        }
        if let Some(v) = self.scoped(scope, "consecutive") {
            cfg.consecutive = parse_bool("consecutive", v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn process_config(&self) -> Result<ProcessConfig> {
        let mut p = ProcessConfig::default();
        if let Some(v) = self.get("l0") {
            p.l0 = parse_f64("l0", v)?;
        }
        if let Some(v) = self.get("l_inf") {
            p.l_inf = parse_f64("l_inf", v)?;
        }
        if let Some(v) = self.get("floor_slope") {
            p.floor_slope = parse_f64("floor_slope", v)?;
        }
        if let Some(v) = self.get("decay_gain") {
            p.decay_gain = parse_f64("decay_gain", v)?;
        }
        if let Some(v) = self.get("noise_scale") {
            p.noise_scale = parse_f64("noise_scale", v)?;
        }
        if let Some(v) = self.get("seed") {
            p.seed = parse_u64("seed", v)?;
        }
        Ok(p)
    }

    pub fn simulate_spec(&self) -> Result<SimulateSpec> {
        let scheduler = self.scheduler_config(None)?;
        let total_iters = scheduler
            .total_iters
            .ok_or(Error::MissingKey("total_iters"))?;
        Ok(SimulateSpec {
            scheduler,
            process: self.process_config()?,
            total_iters,
        })
    }

    pub fn compare_spec(&self) -> Result<CompareSpec> {
        let list = self
            .get("schedulers")
            .ok_or(Error::MissingKey("schedulers"))?;
        let runs = parse_list(list)
            .map(|name| {
                let kind = name.parse::<SchedulerKind>()?;
                self.scheduler_config(Some(kind))
            })
            .collect::<Result<Vec<_>>>()?;
        if runs.len() < 2 {
            return Err(Error::param(
                "schedulers",
                "a comparison needs at least two schedulers",
            ));
        }
        let total_iters = self
            .get("total_iters")
            .ok_or(Error::MissingKey("total_iters"))
            .and_then(|v| parse_u64("total_iters", v))?;
        let target = self
            .get("target")
            .map(|v| parse_f64("target", v))
            .transpose()?;
        Ok(CompareSpec {
            runs,
            process: self.process_config()?,
            total_iters,
            target,
        })
    }
}

fn parse_list(v: &str) -> impl Iterator<Item = &str> {
    v.trim_start_matches('[')
        .trim_end_matches(']')
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
}

fn parse_f64(name: &'static str, v: &str) -> Result<f64> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(Error::param(name, format!("`{v}` is not a finite number"))),
    }
}

fn parse_u64(name: &'static str, v: &str) -> Result<u64> {
    v.parse::<u64>()
        .map_err(|_| Error::param(name, format!("`{v}` is not a non-negative integer")))
}

fn parse_bool(name: &'static str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::param(name, format!("`{v}` is not true/false"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSpec {
    pub scheduler: SchedulerConfig,
    pub process: ProcessConfig,
    pub total_iters: u64,
}

pub fn simulate(spec: &SimulateSpec) -> Result<LrTrace> {
    let mut sched = Scheduler::new(spec.scheduler.clone())?;
    Ok(run_closed_loop(&mut sched, &spec.process, spec.total_iters)?.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareSpec {
    pub runs: Vec<SchedulerConfig>,
    pub process: ProcessConfig,
    pub total_iters: u64,
    pub target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub label: String,
    pub final_loss: f64,
    pub iters_to_target: Option<u64>,
    pub lr_drops: usize,
    /// Sum of per-step losses.
    pub auc: f64,
    pub ns_per_step: f64,
}

impl RunMetrics {
    pub fn from_trace(label: impl Into<String>, trace: &LrTrace, target: Option<f64>) -> Self {
        let records = trace.records();
        Self {
            label: label.into(),
            final_loss: records.last().map_or(f64::NAN, |r| r.loss),
            iters_to_target: target
                .and_then(|tgt| records.iter().find(|r| r.loss <= tgt).map(|r| r.iter)),
            lr_drops: trace.lr_drops(),
            auc: records.iter().map(|r| r.loss).sum(),
            ns_per_step: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub total_iters: u64,
    pub seed: u64,
    pub target: Option<f64>,
    pub runs: Vec<RunMetrics>,
}

impl ComparisonReport {
    /// Aligned human-readable table.
    pub fn render_table(&self) -> String {
        let header = [
            "scheduler",
            "final_loss",
            "iters_to_target",
            "lr_drops",
            "auc",
            "ns/step",
        ];
        let rows: Vec<[String; 6]> = self
            .runs
            .iter()
            .map(|m| {
                [
                    m.label.clone(),
                    format!("{:.6}", m.final_loss),
                    m.iters_to_target.map_or("-".into(), |i| i.to_string()),
                    m.lr_drops.to_string(),
                    format!("{:.3}", m.auc),
                    format!("{:.1}", m.ns_per_step),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let _ = writeln!(
            out,
            "T = {}, seed = {}, target = {}",
            self.total_iters,
            self.seed,
            self.target.map_or("-".into(), format_float)
        );
        let mut line = |cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(widths)
                .enumerate()
                .map(|(i, (c, w))| {
                    if i == 0 {
                        format!("{c:<w$}")
                    } else {
                        format!("{c:>w$}")
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&header.map(String::from));
        for row in &rows {
            line(row);
        }
        out
    }

    /// Machine-readable `key = value` report.
    pub fn render_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "total_iters = {}", self.total_iters);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(
            out,
            "target = {}",
            self.target.map_or("none".into(), format_float)
        );
        let _ = writeln!(out, "runs = {}", self.runs.len());
        for (i, m) in self.runs.iter().enumerate() {
            let _ = writeln!(out, "run.{i}.scheduler = {}", m.label);
            let _ = writeln!(out, "run.{i}.final_loss = {}", format_float(m.final_loss));
            let _ = writeln!(
                out,
                "run.{i}.iters_to_target = {}",
                m.iters_to_target.map_or("none".into(), |v| v.to_string())
            );
            let _ = writeln!(out, "run.{i}.lr_drops = {}", m.lr_drops);
            let _ = writeln!(out, "run.{i}.auc = {}", format_float(m.auc));
            let _ = writeln!(out, "run.{i}.ns_per_step = {}", format_float(m.ns_per_step));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub report: ComparisonReport,
    pub traces: Vec<LrTrace>,
}

/// Runs every scheduler on the same seeded process, one thread per run.
pub fn compare(spec: &CompareSpec) -> Result<Comparison> {
    if spec.runs.len() < 2 {
        return Err(Error::param(
            "schedulers",
            "a comparison needs at least two schedulers",
        ));
    }
    let results: Vec<Result<(LrTrace, f64)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = spec
            .runs
            .iter()
            .map(|cfg| {
                scope.spawn(move || {
                    let mut sched = Scheduler::new(cfg.clone())?;
                    let start = Instant::now();
                    let (_, trace) = run_closed_loop(&mut sched, &spec.process, spec.total_iters)?;
                    let ns = start.elapsed().as_nanos() as f64 / spec.total_iters as f64;
                    Ok((trace, ns))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("comparison worker panicked"))
            .collect()
    });
    let mut runs = Vec::with_capacity(results.len());
    let mut traces = Vec::with_capacity(results.len());
    for (cfg, res) in spec.runs.iter().zip(results) {
        let (trace, ns) = res?;
        let mut m = RunMetrics::from_trace(cfg.kind.as_str(), &trace, spec.target);
        m.ns_per_step = ns;
        runs.push(m);
        traces.push(trace);
    }
    Ok(Comparison {
        report: ComparisonReport {
            total_iters: spec.total_iters,
            seed: spec.process.seed,
            target: spec.target,
            runs,
        },
        traces,
    })
}

/// Writes `iter,series,value` rows for the loss, LR and `D^E` of each trace.
pub fn write_plot_csv(series: &[(&str, &LrTrace)], mut sink: impl Write) -> Result<()> {
    let mut out = String::from("iter,series,value\n");
    for (name, trace) in series {
        for r in trace.records() {
            let _ = writeln!(out, "{},{name}.loss,{}", r.iter, format_float(r.loss));
        }
        for r in trace.records() {
            let _ = writeln!(out, "{},{name}.lr,{}", r.iter, format_float(r.lr));
        }
        for r in trace.records() {
            if let Some(de) = r.de {
                let _ = writeln!(out, "{},{name}.de,{}", r.iter, format_float(de));
            }
        }
    }
    sink.write_all(out.as_bytes())?;
    sink.flush()?;
    Ok(())
}

pub const MIN_BENCH_ITERS: u64 = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub iters: u64,
    /// Mean nanoseconds per step over each tenth of the run, in order.
    pub decile_ns: Vec<f64>,
    pub state_bytes_early: usize,
    pub state_bytes_late: usize,
    pub halvings: u64,
}

impl BenchReport {
    pub fn first_decile_ns(&self) -> f64 {
        self.decile_ns[0]
    }

    pub fn last_decile_ns(&self) -> f64 {
        self.decile_ns[self.decile_ns.len() - 1]
    }

    pub fn ratio(&self) -> f64 {
        self.last_decile_ns() / self.first_decile_ns()
    }

    pub fn render(&self) -> String {
        format!(
            "iterations         {}\nfirst decile       {:.2} ns/step\nlast decile        {:.2} ns/step\nlast/first         {:.3}\nstate size         {} B (early) / {} B (late)\nhalvings           {}\n",
            self.iters,
            self.first_decile_ns(),
            self.last_decile_ns(),
            self.ratio(),
            self.state_bytes_early,
            self.state_bytes_late,
            self.halvings,
        )
    }
}

/// Times the full detector step over `n` synthetic noisy losses.
pub fn bench(n: u64) -> Result<BenchReport> {
    if n < MIN_BENCH_ITERS {
        return Err(Error::param(
            "iterations",
            format!("{n} is below the minimum of {MIN_BENCH_ITERS}"),
        ));
    }
    let mut state = FastFaceState::new(FastFaceParams::new(n / 20))?;
    let mut losses = NormalSource::new(0x5eed);
    let decile = n / 10;
    let mut decile_ns = Vec::with_capacity(10);
    let mut state_bytes_early = 0;
    let mut halvings = 0u64;
    let mut t = 0u64;
    for d in 0..10 {
        let len = if d == 9 { n - t } else { decile };
        let start = Instant::now();
        for _ in 0..len {
            let loss = 1.0 + losses.next_uniform();
            let sig = state.step(std::hint::black_box(loss))?;
            halvings += (sig.event == crate::detector::Event::Halved) as u64;
            t += 1;
            if t == 10 {
                state_bytes_early = std::mem::size_of_val(&state);
            }
        }
        decile_ns.push(start.elapsed().as_nanos() as f64 / len as f64);
    }
    Ok(BenchReport {
        iters: n,
        decile_ns,
        state_bytes_early,
        state_bytes_late: std::mem::size_of_val(&state),
        halvings,
    })
}
