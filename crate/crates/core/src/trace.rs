//! Loss and learning-rate traces, their CSV formats, and offline replay.
//!
//! Input: `iter,loss` with `iter` counting up from 0 without gaps.
//! Output: `iter,loss,lr,de,event`. Floats are written in the shortest form
//! that parses back to the same value; `de` is left empty for schedulers
//! without a detector.
//!
//! Replay is open-loop: the recorded losses do not react to the replayed
//! LR, so it is only good for inspecting the detector on a fixed recording
//! and for regression tests, not for judging a schedule.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::detector::{DetectorSignal, Event};
use crate::error::{Error, Result};
use crate::schedule::Scheduler;

pub const LOSS_HEADER: &str = "iter,loss";
pub const LR_HEADER: &str = "iter,loss,lr,de,event";

/// Ordered losses; the iteration index is the position.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTrace {
    losses: Vec<f64>,
}

impl LossTrace {
    pub fn new(losses: Vec<f64>) -> Result<Self> {
        if let Some((i, &v)) = losses.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: i as u64,
                value: v,
            });
        }
        Ok(Self { losses })
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrRecord {
    pub iter: u64,
    pub loss: f64,
    pub lr: f64,
    pub de: Option<f64>,
    pub event: Event,
}

impl LrRecord {
    pub fn new(iter: u64, loss: f64, lr: f64, signal: Option<DetectorSignal>) -> Self {
        Self {
            iter,
            loss,
            lr,
            de: signal.map(|s| s.de),
            event: signal.map_or(Event::None, |s| s.event),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LrTrace {
    records: Vec<LrRecord>,
}

impl LrTrace {
    pub fn new(records: Vec<LrRecord>) -> Self {
        Self { records }
    }

    pub fn records(&self) -> &[LrRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn loss_trace(&self) -> LossTrace {
        LossTrace {
            losses: self.records.iter().map(|r| r.loss).collect(),
        }
    }

    pub fn lrs(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().map(|r| r.lr)
    }

    /// Number of steps whose LR is strictly below the previous step's.
    pub fn lr_drops(&self) -> usize {
        self.records
            .windows(2)
            .filter(|w| w[1].lr < w[0].lr)
            .count()
    }

    pub fn halvings(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.event == Event::Halved)
            .count()
    }
}

/// Shortest round-trip rendering; switches to exponent form far from 1.
pub fn format_float(x: f64) -> String {
    let a = x.abs();
    if a == 0.0 || (1e-5..1e16).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn split_line(line: &str) -> impl Iterator<Item = &str> {
    line.split(',').map(str::trim)
}

fn parse_iter(line_no: usize, field: Option<&str>, expected: u64) -> Result<u64> {
    let raw = field.ok_or_else(|| Error::parse(line_no, "missing field `iter`"))?;
    let iter: u64 = raw
        .parse()
        .map_err(|_| Error::parse(line_no, format!("malformed field `iter` ({raw:?})")))?;
    if iter < expected {
        return Err(Error::parse(line_no, format!("duplicate iter {iter}")));
    }
    if iter > expected {
        return Err(Error::parse(
            line_no,
            format!("gap (expected iter {expected}, got {iter})"),
        ));
    }
    Ok(iter)
}

fn parse_float(line_no: usize, name: &str, field: Option<&str>) -> Result<f64> {
    let raw = field.ok_or_else(|| Error::parse(line_no, format!("missing field `{name}`")))?;
    raw.parse::<f64>()
        .map_err(|_| Error::parse(line_no, format!("malformed field `{name}` ({raw:?})")))
}

fn check_header(
    lines: &mut impl Iterator<Item = std::io::Result<String>>,
    header: &str,
) -> Result<()> {
    match lines.next() {
        None => Err(Error::parse(1, format!("missing header `{header}`"))),
        Some(line) => {
            let line = line?;
            let line = line.strip_prefix('\u{feff}').unwrap_or(&line);
            if line.trim() == header {
                Ok(())
            } else {
                Err(Error::parse(
                    1,
                    format!("expected header `{header}`, found {line:?}"),
                ))
            }
        }
    }
}

/// Parses an `iter,loss` CSV. Blank lines are not allowed inside the data.
pub fn read_loss_trace(source: impl BufRead) -> Result<LossTrace> {
    let mut lines = source.lines();
    check_header(&mut lines, LOSS_HEADER)?;
    let mut losses = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let line_no = idx + 2;
        let mut fields = split_line(&line);
        parse_iter(line_no, fields.next(), losses.len() as u64)?;
        let loss = parse_float(line_no, "loss", fields.next())?;
        if fields.next().is_some() {
            return Err(Error::parse(line_no, "too many fields"));
        }
        if !loss.is_finite() {
            return Err(Error::parse(line_no, "non-finite loss"));
        }
        losses.push(loss);
    }
    Ok(LossTrace { losses })
}

pub fn write_loss_trace(trace: &LossTrace, mut sink: impl Write) -> Result<()> {
    let mut out = String::with_capacity(16 * trace.len() + 16);
    out.push_str(LOSS_HEADER);
    out.push('\n');
    for (i, l) in trace.losses.iter().enumerate() {
        let _ = writeln!(out, "{i},{}", format_float(*l));
    }
    sink.write_all(out.as_bytes())?;
    sink.flush()?;
    Ok(())
}

pub fn write_lr_trace(trace: &LrTrace, mut sink: impl Write) -> Result<()> {
    let mut out = String::with_capacity(48 * trace.len() + 32);
    out.push_str(LR_HEADER);
    out.push('\n');
    for r in &trace.records {
        let de = r.de.map(format_float).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.iter,
            format_float(r.loss),
            format_float(r.lr),
            de,
            r.event
        );
    }
    sink.write_all(out.as_bytes())?;
    sink.flush()?;
    Ok(())
}

pub fn read_lr_trace(source: impl BufRead) -> Result<LrTrace> {
    let mut lines = source.lines();
    check_header(&mut lines, LR_HEADER)?;
    let mut records = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let line_no = idx + 2;
        let mut fields = split_line(&line);
        let iter = parse_iter(line_no, fields.next(), records.len() as u64)?;
        let loss = parse_float(line_no, "loss", fields.next())?;
        let lr = parse_float(line_no, "lr", fields.next())?;
        let de = match fields.next() {
            Some("") => None,
            other => Some(parse_float(line_no, "de", other)?),
        };
        let event = fields
            .next()
            .ok_or_else(|| Error::parse(line_no, "missing field `event`"))?
            .parse::<Event>()
            .map_err(|e| Error::parse(line_no, format!("malformed field `event`: {e}")))?;
        if fields.next().is_some() {
            return Err(Error::parse(line_no, "too many fields"));
        }
        records.push(LrRecord {
            iter,
            loss,
            lr,
            de,
            event,
        });
    }
    Ok(LrTrace { records })
}

/// Feeds a recorded loss trace through a fresh scheduler (open loop).
pub fn replay(sched: &mut Scheduler, trace: &LossTrace) -> Result<LrTrace> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let start = sched.next_iter();
    if start != 0 {
        return Err(Error::OutOfOrder {
            expected: 0,
            got: start,
        });
    }
    let records = trace
        .losses
        .iter()
        .enumerate()
        .map(|(t, &loss)| {
            let out = sched.step(t as u64, loss)?;
            Ok(LrRecord::new(t as u64, loss, out.lr, out.signal))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LrTrace { records })
}
