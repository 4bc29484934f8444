//! Seeded synthetic loss process that responds to the learning rate.
//!
//! Under a fixed LR the loss contracts geometrically towards an LR-dependent
//! floor `l_inf + floor_slope * lr`, so a constant LR produces a plateau and
//! each LR drop produces a fresh decline (a staircase). Per step:
//!
//! ```text
//! plateau = l_inf + b * lr
//! L' = plateau + (L - plateau) * (1 - k * lr) + sigma * lr * xi,   xi ~ N(0, 1)
//! L' = max(L', 0)
//! ```
//!
//! Exactly one normal variate is drawn per step, including when `sigma = 0`,
//! so traces stay aligned across noise settings.

use crate::error::{Error, Result};
use crate::rng::NormalSource;
use crate::schedule::Scheduler;
use crate::trace::{LossTrace, LrRecord, LrTrace};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcessConfig {
    pub l0: f64,
    pub l_inf: f64,
    /// Loss per unit LR added to the reachable floor.
    pub floor_slope: f64,
    /// Contraction rate per unit LR per step.
    pub decay_gain: f64,
    /// Noise standard deviation per unit LR.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for ProcessConfig {
    fn default() -> Self {
        Self {
            l0: 30.0,
            l_inf: 1.0,
            floor_slope: 100.0,
            decay_gain: 0.5,
            noise_scale: 0.2,
            seed: 42,
        }
    }
}

impl ProcessConfig {
    pub fn plateau(&self, lr: f64) -> f64 {
        self.l_inf + self.floor_slope * lr
    }

    /// Checks static parameters and the contraction condition at the largest LR in use.
    pub fn validate(&self, max_lr: f64) -> Result<()> {
        let nonneg = |name: &'static str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::param(name, format!("{v} must be finite and >= 0")))
            }
        };
        if !(self.l0.is_finite() && self.l0 > 0.0) {
            return Err(Error::param(
                "l0",
                format!("{} must be finite and > 0", self.l0),
            ));
        }
        nonneg("l_inf", self.l_inf)?;
        nonneg("floor_slope", self.floor_slope)?;
        nonneg("noise_scale", self.noise_scale)?;
        if !(self.decay_gain.is_finite() && self.decay_gain > 0.0) {
            return Err(Error::param(
                "decay_gain",
                format!("{} must be finite and > 0", self.decay_gain),
            ));
        }
        check_contraction(self.decay_gain, max_lr)
    }
}

fn check_contraction(decay_gain: f64, lr: f64) -> Result<()> {
    let product = decay_gain * lr;
    if product < 1.0 {
        Ok(())
    } else {
        Err(Error::Contraction { product })
    }
}

#[derive(Debug, Clone)]
pub struct SimState {
    loss: f64,
    noise: NormalSource,
    step: u64,
}

impl SimState {
    pub fn new(cfg: &ProcessConfig) -> Self {
        Self {
            loss: cfg.l0,
            noise: NormalSource::new(cfg.seed),
            step: 0,
        }
    }

    /// Starts from an arbitrary loss instead of `l0`.
    pub fn with_loss(cfg: &ProcessConfig, loss: f64) -> Self {
        Self {
            loss,
            ..Self::new(cfg)
        }
    }

    pub fn loss(&self) -> f64 {
        self.loss
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Advances the process one step under `lr` and returns the new loss.
    pub fn step(&mut self, cfg: &ProcessConfig, lr: f64) -> Result<f64> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::param("lr", format!("{lr} must be finite and >= 0")));
        }
        check_contraction(cfg.decay_gain, lr)?;
        let xi = self.noise.next_normal();
        let plateau = cfg.plateau(lr);
        let next = plateau
            + (self.loss - plateau) * (1.0 - cfg.decay_gain * lr)
            + cfg.noise_scale * lr * xi;
        self.loss = next.max(0.0);
        self.step += 1;
        Ok(self.loss)
    }
}

/// Runs `sched` against the process for `total` iterations.
///
/// Iteration `t` feeds the current loss `L_t` to the scheduler, records
/// `(t, L_t, lr_t, signal)`, then advances the process under `lr_t` to get
/// `L_{t+1}`.
pub fn run_closed_loop(
    sched: &mut Scheduler,
    cfg: &ProcessConfig,
    total: u64,
) -> Result<(LossTrace, LrTrace)> {
    if total == 0 {
        return Err(Error::param("total_iters", "must be at least 1"));
    }
    cfg.validate(sched.config().gamma0)?;
    let mut sim = SimState::new(cfg);
    let mut records = Vec::with_capacity(total as usize);
    for t in 0..total {
        let loss = sim.loss();
        let out = sched.step(t, loss)?;
        records.push(LrRecord::new(t, loss, out.lr, out.signal));
        if t + 1 < total {
            sim.step(cfg, out.lr)?;
        }
    }
    let lr_trace = LrTrace::new(records);
    Ok((lr_trace.loss_trace(), lr_trace))
}
