//! Uniform per-iteration scheduler interface: one loss in, one learning rate out.
//!
//! Adaptive kinds (`fastface`, `ema_hck`) watch the loss stream; the
//! closed-form baselines (`linlr`, `mslr`, `coslr`, `constant`) ignore it.
//! `ema_hck` smooths the loss with one EMA, applies a Haar kernel of
//! half-size `s`, divides the response by `s^2` to get a per-step decrease,
//! and feeds that to the same threshold/tolerance policy as `fastface`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::detector::{
    DetectorSignal, EmaState, FastFaceParams, FastFaceState, HaarDetector, PlateauGate,
    DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_DELTA, DEFAULT_LAMBDA,
};
use crate::error::{Error, Result};

pub const DEFAULT_GAMMA0: f64 = 0.02;
pub const DEFAULT_TAU_FRACTION: f64 = 0.05;
pub const DEFAULT_HALF_SIZE: usize = 1000;
pub const DEFAULT_MILESTONES: [f64; 5] = [0.2, 0.4, 0.5, 0.6, 0.8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchedulerKind {
    FastFace,
    EmaHck,
    LinLr,
    MsLr,
    CosLr,
    Constant,
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 6] = [
        SchedulerKind::FastFace,
        SchedulerKind::EmaHck,
        SchedulerKind::LinLr,
        SchedulerKind::MsLr,
        SchedulerKind::CosLr,
        SchedulerKind::Constant,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchedulerKind::FastFace => "fastface",
            SchedulerKind::EmaHck => "ema_hck",
            SchedulerKind::LinLr => "linlr",
            SchedulerKind::MsLr => "mslr",
            SchedulerKind::CosLr => "coslr",
            SchedulerKind::Constant => "constant",
        }
    }

    /// Whether the policy reads the loss stream.
    pub fn is_adaptive(self) -> bool {
        matches!(self, SchedulerKind::FastFace | SchedulerKind::EmaHck)
    }
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchedulerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchedulerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::param(
                    "kind",
                    format!(
                        "unknown scheduler `{s}` (expected one of fastface, ema_hck, linlr, mslr, coslr, constant)"
                    ),
                )
            })
    }
}

/// Tolerance either as an absolute iteration count or as a fraction of `T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tau {
    Iters(u64),
    Fraction(f64),
}

impl Tau {
    pub fn resolve(self, total_iters: Option<u64>) -> Result<u64> {
        match self {
            Tau::Iters(0) => Err(Error::param("tau", "must be at least 1 iteration")),
            Tau::Iters(n) => Ok(n),
            Tau::Fraction(f) => {
                let total = total_iters.ok_or_else(|| {
                    Error::param(
                        "tau",
                        format!("fraction {f} of total_iters given but total_iters is not set"),
                    )
                })?;
                Ok(((f * total as f64).round() as u64).max(1))
            }
        }
    }
}

impl FromStr for Tau {
    type Err = Error;

    /// Values in `(0, 1)` are fractions of `T`; whole numbers `>= 1` are iteration counts.
    fn from_str(s: &str) -> Result<Self> {
        if let Ok(n) = s.parse::<u64>() {
            return if n >= 1 {
                Ok(Tau::Iters(n))
            } else {
                Err(Error::param("tau", "must be at least 1 iteration"))
            };
        }
        match s.parse::<f64>() {
            Ok(f) if f > 0.0 && f < 1.0 => Ok(Tau::Fraction(f)),
            Ok(f) if f >= 1.0 && f.fract() == 0.0 && f < u64::MAX as f64 => {
                Ok(Tau::Iters(f as u64))
            }
            _ => Err(Error::param(
                "tau",
                format!("`{s}` is neither a fraction in (0, 1) nor a whole iteration count"),
            )),
        }
    }
}

impl fmt::Display for Tau {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tau::Iters(n) => write!(f, "{n}"),
            Tau::Fraction(x) => write!(f, "{x}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerConfig {
    pub kind: SchedulerKind,
    pub gamma0: f64,
    pub total_iters: Option<u64>,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub tau: Tau,
    pub delta: f64,
    pub lr_min: f64,
    pub half_size: usize,
    pub milestones: Vec<f64>,
    /// Reset the tolerance count on above-threshold steps (adaptive kinds).
    pub consecutive: bool,
}

impl SchedulerConfig {
    pub fn new(kind: SchedulerKind) -> Self {
        Self {
            kind,
            gamma0: DEFAULT_GAMMA0,
            total_iters: None,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            lambda: DEFAULT_LAMBDA,
            tau: Tau::Fraction(DEFAULT_TAU_FRACTION),
            delta: DEFAULT_DELTA,
            lr_min: 0.0,
            half_size: DEFAULT_HALF_SIZE,
            milestones: DEFAULT_MILESTONES.to_vec(),
            consecutive: true,
        }
    }

    pub fn with_total_iters(mut self, total: u64) -> Self {
        self.total_iters = Some(total);
        self
    }

    fn require_total(&self) -> Result<u64> {
        match self.total_iters {
            None => Err(Error::MissingKey("total_iters")),
            Some(0) => Err(Error::param("total_iters", "must be at least 1")),
            Some(t) => Ok(t),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma0.is_finite() && self.gamma0 > 0.0) {
            return Err(Error::param(
                "gamma0",
                format!("{} must be finite and > 0", self.gamma0),
            ));
        }
        if self.total_iters == Some(0) {
            return Err(Error::param("total_iters", "must be at least 1"));
        }
        match self.kind {
            SchedulerKind::FastFace | SchedulerKind::EmaHck => {
                self.tau.resolve(self.total_iters)?;
                if self.kind == SchedulerKind::EmaHck && self.half_size == 0 {
                    return Err(Error::param("half_size", "must be at least 1"));
                }
            }
            SchedulerKind::LinLr | SchedulerKind::CosLr => {
                self.require_total()?;
            }
            SchedulerKind::MsLr => {
                self.require_total()?;
                if !(self.delta.is_finite() && self.delta > 1.0) {
                    return Err(Error::param("delta", format!("{} must be > 1", self.delta)));
                }
                let in_range = self.milestones.iter().all(|m| *m > 0.0 && *m < 1.0);
                let increasing = self.milestones.windows(2).all(|w| w[0] < w[1]);
                if !in_range || !increasing {
                    return Err(Error::param(
                        "milestones",
                        "must be strictly increasing fractions in (0, 1)",
                    ));
                }
            }
            SchedulerKind::Constant => {}
        }
        Ok(())
    }
}

/// `lr / delta`, the multi-step decay rule.
pub fn multistep_next(lr: f64, delta: f64) -> Result<f64> {
    if delta.is_nan() || delta <= 1.0 {
        return Err(Error::param("delta", format!("{delta} must be > 1")));
    }
    Ok(lr / delta)
}

#[derive(Debug, Clone)]
enum Policy {
    FastFace(FastFaceState),
    EmaHck {
        ema: EmaState,
        haar: HaarDetector,
        gate: PlateauGate,
    },
    LinLr,
    MsLr {
        /// Iteration at which each milestone fires.
        at: Vec<u64>,
        next: usize,
        lr: f64,
    },
    CosLr,
    Constant,
}

/// Learning rate for one step, plus the detector output for adaptive kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleStep {
    pub lr: f64,
    pub signal: Option<DetectorSignal>,
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    config: SchedulerConfig,
    policy: Policy,
    step: u64,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig) -> Result<Self> {
        config.validate()?;
        let policy = match config.kind {
            SchedulerKind::FastFace => Policy::FastFace(FastFaceState::new(FastFaceParams {
                alpha: config.alpha,
                beta: config.beta,
                lambda: config.lambda,
                tau: config.tau.resolve(config.total_iters)?,
                delta: config.delta,
                lr0: config.gamma0,
                lr_min: config.lr_min,
                consecutive: config.consecutive,
            })?),
            SchedulerKind::EmaHck => Policy::EmaHck {
                ema: EmaState::new(config.alpha)?,
                haar: HaarDetector::new(config.half_size)?,
                gate: PlateauGate::new(
                    config.gamma0,
                    config.delta,
                    config.lambda,
                    config.tau.resolve(config.total_iters)?,
                    config.lr_min,
                    config.consecutive,
                )?,
            },
            SchedulerKind::LinLr => Policy::LinLr,
            SchedulerKind::MsLr => {
                let total = config.require_total()? as f64;
                // Tolerate representation error in products like 0.6 * 100.
                let at = config
                    .milestones
                    .iter()
                    .map(|m| (m * total - 1e-9).ceil().max(0.0) as u64)
                    .collect();
                Policy::MsLr {
                    at,
                    next: 0,
                    lr: config.gamma0,
                }
            }
            SchedulerKind::CosLr => Policy::CosLr,
            SchedulerKind::Constant => Policy::Constant,
        };
        Ok(Self {
            config,
            policy,
            step: 0,
        })
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn kind(&self) -> SchedulerKind {
        self.config.kind
    }

    /// Index the next call to [`Scheduler::step`] must carry.
    pub fn next_iter(&self) -> u64 {
        self.step
    }

    /// Emits the learning rate for iteration `t` given the loss observed there.
    pub fn step(&mut self, t: u64, loss: f64) -> Result<ScheduleStep> {
        if t != self.step {
            return Err(Error::OutOfOrder {
                expected: self.step,
                got: t,
            });
        }
        let gamma0 = self.config.gamma0;
        let total = self.config.total_iters.unwrap_or(1) as f64;
        let out = match &mut self.policy {
            Policy::FastFace(state) => {
                let sig = state.step(loss)?;
                ScheduleStep {
                    lr: sig.lr,
                    signal: Some(sig),
                }
            }
            Policy::EmaHck { ema, haar, gate } => {
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step: t,
                        value: loss,
                    });
                }
                let smoothed = ema.update(loss)?;
                let signal = match haar.push(smoothed)? {
                    Some(response) => {
                        // A linear trend of slope m gives response s^2 * m, so this
                        // is on the same per-step scale as the fastface signal and lambda.
                        let s = haar.half_size() as f64;
                        let de = response / (s * s);
                        let (below_threshold, event) = gate.observe(de);
                        DetectorSignal {
                            de,
                            below_threshold,
                            lr: gate.lr(),
                            event,
                        }
                    }
                    // Window still filling: no detection possible yet.
                    None => DetectorSignal {
                        de: 0.0,
                        below_threshold: false,
                        lr: gate.lr(),
                        event: crate::detector::Event::None,
                    },
                };
                ScheduleStep {
                    lr: signal.lr,
                    signal: Some(signal),
                }
            }
            Policy::LinLr => ScheduleStep {
                lr: gamma0 * (1.0 - t as f64 / total),
                signal: None,
            },
            Policy::MsLr { at, next, lr } => {
                while *next < at.len() && t >= at[*next] {
                    *lr = multistep_next(*lr, self.config.delta)?;
                    *next += 1;
                }
                ScheduleStep {
                    lr: *lr,
                    signal: None,
                }
            }
            Policy::CosLr => ScheduleStep {
                lr: gamma0 * (1.0 + (PI * t as f64 / total).cos()) / 2.0,
                signal: None,
            },
            Policy::Constant => ScheduleStep {
                lr: gamma0,
                signal: None,
            },
        };
        self.step += 1;
        Ok(out)
    }
}
