//! Streaming plateau detection for learning-rate scheduling.
//!
//! A training loop feeds one loss per iteration to a [`Scheduler`]; the
//! adaptive policies track a doubly smoothed per-step loss decrease in
//! constant time and memory, and divide the learning rate once that signal
//! has stayed below a threshold for a tolerance window. Closed-form
//! baselines (linear, multi-step, cosine, constant) share the same
//! interface. [`sim`] provides a seeded loss process that reacts to the
//! emitted LR, [`trace`] reads and writes CSV traces, and [`harness`] holds
//! the experiment plumbing used by the command-line tool.

pub mod detector;
pub mod error;
pub mod harness;
pub mod rng;
pub mod schedule;
pub mod sim;
pub mod trace;

pub use detector::{
    DetectorSignal, EmaState, Event, FastFaceParams, FastFaceState, HaarDetector, NaivePipeline,
    PlateauGate,
};
pub use error::{Error, Result};
pub use schedule::{multistep_next, ScheduleStep, Scheduler, SchedulerConfig, SchedulerKind, Tau};
pub use sim::{run_closed_loop, ProcessConfig, SimState};
pub use trace::{
    read_loss_trace, read_lr_trace, replay, write_lr_trace, LossTrace, LrRecord, LrTrace,
};
