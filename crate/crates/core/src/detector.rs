//! Streaming plateau detectors.
//!
//! Every detector here is a constant-size state machine fed one loss per
//! training iteration:
//!
//! - [`EmaState`]: exponential moving average with a `t = 0` pass-through base case.
//! - [`HaarDetector`]: half-size `s` Haar kernel over the last `2s` smoothed losses.
//! - [`NaivePipeline`]: EMA of the loss, one-step difference, EMA of the difference.
//!   Kept as a straightforward reference for the reduced recursion.
//! - [`FastFaceState`]: the reduced second-order recursion for the smoothed
//!   decrease `D^E`, plus the threshold/tolerance policy that halves the LR.
//!
//! Sign convention: a *decreasing* loss produces a *positive* response, both
//! for the Haar kernel and for `D^E`.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.001;
pub const DEFAULT_BETA: f64 = 0.001;
pub const DEFAULT_LAMBDA: f64 = 5e-5;
pub const DEFAULT_DELTA: f64 = 2.0;

fn check_finite(step: u64, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step, value })
    }
}

fn check_unit(name: &'static str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::param(name, format!("{v} is outside [0, 1]")))
    }
}

/// Exponential moving average `v <- a*x + (1-a)*v`, seeded with the first input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaState {
    alpha: f64,
    value: f64,
    initialized: bool,
    count: u64,
}

impl EmaState {
    pub fn new(alpha: f64) -> Result<Self> {
        check_unit("alpha", alpha)?;
        Ok(Self {
            alpha,
            value: 0.0,
            initialized: false,
            count: 0,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Current smoothed value, `None` before the first update.
    pub fn value(&self) -> Option<f64> {
        self.initialized.then_some(self.value)
    }

    /// Feeds one observation and returns the new smoothed value.
    pub fn update(&mut self, x: f64) -> Result<f64> {
        check_finite(self.count, x)?;
        self.count += 1;
        if self.initialized {
            self.value = self.alpha * x + (1.0 - self.alpha) * self.value;
        } else {
            self.value = x;
            self.initialized = true;
        }
        Ok(self.value)
    }
}

/// Haar kernel of half-size `s` evaluated over a sliding window of smoothed losses.
///
/// The response is `sum(older half) - sum(newer half)`, i.e. the negated dot
/// product with the `{-1 x s, +1 x s}` kernel. Nothing is emitted until `2s`
/// values have been seen, and each evaluation costs `O(s)`.
#[derive(Debug, Clone)]
pub struct HaarDetector {
    half_size: usize,
    window: VecDeque<f64>,
    count: u64,
}

impl HaarDetector {
    pub fn new(half_size: usize) -> Result<Self> {
        if half_size == 0 {
            return Err(Error::param("half_size", "must be at least 1"));
        }
        Ok(Self {
            half_size,
            window: VecDeque::with_capacity(2 * half_size),
            count: 0,
        })
    }

    pub fn half_size(&self) -> usize {
        self.half_size
    }

    /// Number of values currently buffered (always `< 2s` between calls).
    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn push(&mut self, smoothed: f64) -> Result<Option<f64>> {
        check_finite(self.count, smoothed)?;
        self.count += 1;
        self.window.push_back(smoothed);
        if self.window.len() < 2 * self.half_size {
            return Ok(None);
        }
        // Folding from the first element (not from 0.0) keeps s = 1 bitwise
        // identical to a plain difference, signed zeros included.
        let half_sum =
            |it: &mut dyn Iterator<Item = &f64>| it.copied().reduce(|a, b| a + b).unwrap_or(0.0);
        let older = half_sum(&mut self.window.iter().take(self.half_size));
        let newer = half_sum(&mut self.window.iter().skip(self.half_size));
        self.window.pop_front();
        Ok(Some(older - newer))
    }
}

/// Reference composition: EMA of the loss, first difference, EMA of the difference.
///
/// Returns `None` for the very first loss (no difference exists yet) and
/// `D^E_t` afterwards, with `D^E_1 = D_1`.
#[derive(Debug, Clone)]
pub struct NaivePipeline {
    ema_loss: EmaState,
    ema_diff: EmaState,
    prev_smoothed: Option<f64>,
}

impl NaivePipeline {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        Ok(Self {
            ema_loss: EmaState::new(alpha)?,
            ema_diff: EmaState::new(beta)?,
            prev_smoothed: None,
        })
    }

    pub fn update(&mut self, x: f64) -> Result<Option<f64>> {
        let smoothed = self.ema_loss.update(x)?;
        let de = match self.prev_smoothed {
            None => None,
            Some(prev) => Some(self.ema_diff.update(prev - smoothed)?),
        };
        self.prev_smoothed = Some(smoothed);
        Ok(de)
    }

    pub fn smoothed(&self) -> Option<f64> {
        self.ema_loss.value()
    }
}

/// What the tolerance machine did on a given step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Event {
    None,
    Counted,
    Halved,
}

impl Event {
    pub fn as_str(self) -> &'static str {
        match self {
            Event::None => "none",
            Event::Counted => "counted",
            Event::Halved => "halved",
        }
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Event {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" => Ok(Event::None),
            "counted" => Ok(Event::Counted),
            "halved" => Ok(Event::Halved),
            other => Err(format!("unknown event `{other}`")),
        }
    }
}

/// Observable output of one detector step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorSignal {
    pub de: f64,
    pub below_threshold: bool,
    pub lr: f64,
    pub event: Event,
}

/// Threshold/tolerance policy shared by the adaptive schedulers.
///
/// A signal strictly below `lambda` is counted; once `tau` steps have been
/// counted the next below-threshold step divides the LR by `delta` (clamped
/// at `lr_min`) and clears the count. With `consecutive` set, any step at or
/// above `lambda` also clears the count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauGate {
    lr: f64,
    lr_min: f64,
    delta: f64,
    lambda: f64,
    tau: u64,
    count: u64,
    consecutive: bool,
}

impl PlateauGate {
    pub fn new(
        lr0: f64,
        delta: f64,
        lambda: f64,
        tau: u64,
        lr_min: f64,
        consecutive: bool,
    ) -> Result<Self> {
        if !(lr0.is_finite() && lr0 > 0.0) {
            return Err(Error::param(
                "gamma0",
                format!("{lr0} must be finite and > 0"),
            ));
        }
        if !(delta.is_finite() && delta > 1.0) {
            return Err(Error::param("delta", format!("{delta} must be > 1")));
        }
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::param("lambda", format!("{lambda} must be > 0")));
        }
        if tau == 0 {
            return Err(Error::param("tau", "must be at least 1 iteration"));
        }
        if !(lr_min.is_finite() && (0.0..=lr0).contains(&lr_min)) {
            return Err(Error::param(
                "lr_min",
                format!("{lr_min} must lie in [0, gamma0]"),
            ));
        }
        Ok(Self {
            lr: lr0,
            lr_min,
            delta,
            lambda,
            tau,
            count: 0,
            consecutive,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn tau(&self) -> u64 {
        self.tau
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Advances the tolerance counter; returns `(below_threshold, event)`.
    pub fn observe(&mut self, signal: f64) -> (bool, Event) {
        if signal < self.lambda {
            if self.count < self.tau {
                self.count += 1;
                (true, Event::Counted)
            } else {
                self.lr = (self.lr / self.delta).max(self.lr_min);
                self.count = 0;
                (true, Event::Halved)
            }
        } else {
            if self.consecutive {
                self.count = 0;
            }
            (false, Event::None)
        }
    }
}

/// Hyper-parameters of the reduced-recursion scheduler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FastFaceParams {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub tau: u64,
    pub delta: f64,
    pub lr0: f64,
    pub lr_min: f64,
    /// Reset the tolerance count on above-threshold steps.
    pub consecutive: bool,
}

impl FastFaceParams {
    /// Default smoothing, threshold and decay with the given tolerance.
    pub fn new(tau: u64) -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            lambda: DEFAULT_LAMBDA,
            tau,
            delta: DEFAULT_DELTA,
            lr0: 0.02,
            lr_min: 0.0,
            consecutive: true,
        }
    }
}

/// Constant-size scheduler state: the `D^E` recursion plus the LR policy.
///
/// `D^E_t` is computed without materialising the smoothed loss or the raw
/// differences:
///
/// ```text
/// t = 0:  D^E = 0
/// t = 1:  D^E = a (L_{t-1} - L_t)
/// t > 1:  D^E = w1 D^E_{t-1} - w2 D^E_{t-2} + w3 (L_{t-1} - L_t)
/// w1 = (1-a) + (1-b),  w2 = (1-a)(1-b),  w3 = a b
/// ```
///
/// The `t = 0` seeding makes `D^E_2` differ from the composed two-EMA
/// pipeline; the gap obeys `e_t = w1 e_{t-1} - w2 e_{t-2}` with roots
/// `(1-a)` and `(1-b)`, so it decays geometrically. The smoothing state is
/// never reset when the LR drops.
///
/// The history is held as `D^E_{t-1}` and the increment
/// `D^E_{t-1} - D^E_{t-2}`, and the `t > 1` case is evaluated as
///
/// ```text
/// step' = (w1 - 1) step + w3 ((L_{t-1} - L_t) - D^E_{t-1} + step)
/// D^E_t = D^E_{t-1} + step'
/// ```
///
/// which is the same recursion (`w2 = w1 - 1 + w3`). With `a, b` near zero
/// both characteristic roots sit near 1; storing `D^E_{t-2}` directly lets
/// each step's rounding excite the fast mode and the error grows by ~1e4,
/// whereas rounding in the increment basis stays at the level of the
/// two-EMA pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FastFaceState {
    alpha: f64,
    beta: f64,
    omega1: f64,
    omega2: f64,
    omega3: f64,
    de_prev: f64,
    de_step: f64,
    loss_prev: f64,
    t: u64,
    gate: PlateauGate,
}

impl FastFaceState {
    pub fn new(params: FastFaceParams) -> Result<Self> {
        check_unit("alpha", params.alpha)?;
        check_unit("beta", params.beta)?;
        let gate = PlateauGate::new(
            params.lr0,
            params.delta,
            params.lambda,
            params.tau,
            params.lr_min,
            params.consecutive,
        )?;
        let (a, b) = (params.alpha, params.beta);
        Ok(Self {
            alpha: a,
            beta: b,
            omega1: (1.0 - a) + (1.0 - b),
            omega2: (1.0 - a) * (1.0 - b),
            omega3: a * b,
            de_prev: 0.0,
            de_step: 0.0,
            loss_prev: 0.0,
            t: 0,
            gate,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn omegas(&self) -> (f64, f64, f64) {
        (self.omega1, self.omega2, self.omega3)
    }

    pub fn lr(&self) -> f64 {
        self.gate.lr()
    }

    pub fn tolerance_count(&self) -> u64 {
        self.gate.count()
    }

    pub fn tau(&self) -> u64 {
        self.gate.tau()
    }

    pub fn delta(&self) -> f64 {
        self.gate.delta()
    }

    /// Number of losses consumed so far.
    pub fn iteration(&self) -> u64 {
        self.t
    }

    /// Most recent `D^E`.
    pub fn de(&self) -> f64 {
        self.de_prev
    }

    /// `D^E` one step before [`FastFaceState::de`].
    pub fn de_prev2(&self) -> f64 {
        self.de_prev - self.de_step
    }

    /// Overwrites the two-step `D^E` history, e.g. to start the recursion
    /// from externally computed `D^E_{t-1}`, `D^E_{t-2}`.
    pub fn reseed_history(&mut self, de_prev: f64, de_prev2: f64) {
        self.de_prev = de_prev;
        self.de_step = de_prev - de_prev2;
    }

    /// Advances the `D^E` recursion by one loss without touching the LR.
    pub fn de_update(&mut self, x: f64) -> Result<f64> {
        check_finite(self.t, x)?;
        let (de, step) = match self.t {
            0 => (0.0, 0.0),
            1 => {
                let de = self.alpha * (self.loss_prev - x);
                (de, de - self.de_prev)
            }
            _ => {
                let step = (self.omega1 - 1.0) * self.de_step
                    + self.omega3 * ((self.loss_prev - x) - self.de_prev + self.de_step);
                (self.de_prev + step, step)
            }
        };
        self.de_step = step;
        self.de_prev = de;
        self.loss_prev = x;
        self.t += 1;
        Ok(de)
    }

    /// One full scheduler step: update `D^E`, then apply the threshold/tolerance policy.
    pub fn step(&mut self, x: f64) -> Result<DetectorSignal> {
        let de = self.de_update(x)?;
        let (below_threshold, event) = self.gate.observe(de);
        Ok(DetectorSignal {
            de,
            below_threshold,
            lr: self.gate.lr(),
            event,
        })
    }
}
