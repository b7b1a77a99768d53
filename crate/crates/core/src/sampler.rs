//! Per-event accept/reject policies and the budget cap.
//!
//! Every policy returns a [`Decision`]. The stochastic policies consume
//! exactly one uniform draw per decided event; the cap is checked first and
//! a capped event consumes none, so decision logs replay exactly.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::epdf::{PriorMap, ScoreMap, SigmoidParams};
use crate::event::Event;

/// Generator behind every stochastic decision: ChaCha8 seeded through
/// `SeedableRng::seed_from_u64`, one `f64` draw (53-bit, `[0, 1)`) per
/// Bernoulli trial, accepting when the draw is below the probability.
pub type SamplerRng = ChaCha8Rng;

pub fn sampler_rng(seed: u64) -> SamplerRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const DEFAULT_TW_US: u64 = 100;
pub const DEFAULT_WINDOW_US: u64 = 6000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("alpha must lie in (0, 1], got {0}")]
    Alpha(f64),
    #[error("{name} must be at least 1 us")]
    ZeroWindow { name: &'static str },
    #[error("timestamp {t} precedes the anchor {anchor}")]
    BeforeAnchor { t: u64, anchor: u64 },
    #[error("pixel ({x}, {y}) is outside the score map")]
    OutsideScoreMap { x: u16, y: u16 },
    #[error("unknown method {0:?} (expected deterministic, uniform or poisson)")]
    UnknownMethod(String),
}

/// Target retained fraction, in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Alpha(f64);

impl Alpha {
    pub fn new(value: f64) -> Result<Self, SamplerError> {
        if value > 0.0 && value <= 1.0 {
            Ok(Self(value))
        } else {
            Err(SamplerError::Alpha(value))
        }
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

impl fmt::Display for Alpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Deterministic,
    Uniform,
    Poisson,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Deterministic => "deterministic",
            Method::Uniform => "uniform",
            Method::Poisson => "poisson",
        }
    }

    pub const ALL: [Method; 3] = [Method::Deterministic, Method::Uniform, Method::Poisson];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = SamplerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "deterministic" => Ok(Method::Deterministic),
            "uniform" => Ok(Method::Uniform),
            "poisson" => Ok(Method::Poisson),
            other => Err(SamplerError::UnknownMethod(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub alpha: Alpha,
    /// Deterministic cycle length, microseconds.
    pub tw_us: u64,
    /// ePDF window length, microseconds.
    pub window_us: u64,
    pub theta: SigmoidParams,
    pub seed: u64,
    pub prior: Option<Arc<PriorMap>>,
    pub cap_enabled: bool,
}

impl SamplerConfig {
    /// Defaults: `T_w` = 100 us, `T` = 6 ms, θ = [5, 0.5], cap on, seed 0.
    pub fn new(alpha: Alpha) -> Self {
        Self {
            alpha,
            tw_us: DEFAULT_TW_US,
            window_us: DEFAULT_WINDOW_US,
            theta: SigmoidParams::default(),
            seed: 0,
            prior: None,
            cap_enabled: true,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_window_us(mut self, window_us: u64) -> Self {
        self.window_us = window_us;
        self
    }

    pub fn with_tw_us(mut self, tw_us: u64) -> Self {
        self.tw_us = tw_us;
        self
    }

    pub fn with_theta(mut self, theta: SigmoidParams) -> Self {
        self.theta = theta;
        self
    }

    pub fn with_prior(mut self, prior: PriorMap) -> Self {
        self.prior = Some(Arc::new(prior));
        self
    }

    pub fn with_cap(mut self, enabled: bool) -> Self {
        self.cap_enabled = enabled;
        self
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        Alpha::new(self.alpha.get())?;
        if self.tw_us == 0 {
            return Err(SamplerError::ZeroWindow { name: "T_w" });
        }
        if self.window_us == 0 {
            return Err(SamplerError::ZeroWindow { name: "ePDF window" });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Outcome {
    Accept,
    RejectSampler,
    RejectCap,
}

impl Outcome {
    pub fn code(self) -> char {
        match self {
            Outcome::Accept => 'A',
            Outcome::RejectSampler => 'R',
            Outcome::RejectCap => 'C',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        match c {
            'A' => Some(Outcome::Accept),
            'R' => Some(Outcome::RejectSampler),
            'C' => Some(Outcome::RejectCap),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decision {
    pub outcome: Outcome,
    /// Acceptance probability used for the draw; `None` for deterministic
    /// and capped decisions.
    pub probability: Option<f64>,
}

impl Decision {
    pub const CAPPED: Decision = Decision { outcome: Outcome::RejectCap, probability: None };

    #[inline]
    pub fn is_accept(&self) -> bool {
        self.outcome == Outcome::Accept
    }
}

/// Stream-global counters behind the cap.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BudgetState {
    pub processed: u64,
    pub retained: u64,
}

impl BudgetState {
    #[inline]
    pub fn record(&mut self, outcome: Outcome) {
        self.processed += 1;
        if outcome == Outcome::Accept {
            self.retained += 1;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CapStatus {
    Pass,
    Capped,
}

/// Capped iff `retained / processed > alpha` over the events seen so far.
///
/// The comparison is exact: alpha is split into `mantissa * 2^-shift` and
/// compared as `retained * 2^shift > mantissa * processed` in integers.
pub fn cap_check(state: BudgetState, alpha: Alpha) -> CapStatus {
    if state.processed == 0 {
        return CapStatus::Pass;
    }
    let (mantissa, shift) = dyadic(alpha.get());
    let rhs = mantissa as u128 * state.processed as u128;
    let retained = state.retained as u128;
    let exceeds = if retained == 0 {
        false
    } else if shift >= 128 || retained > (u128::MAX >> shift) {
        // lhs >= 2^128 > rhs
        true
    } else {
        (retained << shift) > rhs
    };
    if exceeds {
        CapStatus::Capped
    } else {
        CapStatus::Pass
    }
}

/// Writes a positive finite `v` as `mantissa * 2^-shift` with an odd mantissa.
fn dyadic(v: f64) -> (u64, u32) {
    let bits = v.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1u64 << 52) - 1);
    let (mut mantissa, mut e) = if exp == 0 { (frac, -1074) } else { (frac | (1u64 << 52), exp - 1075) };
    let tz = mantissa.trailing_zeros();
    mantissa >>= tz;
    e += tz as i32;
    // alpha <= 1, so e <= 0 after stripping
    debug_assert!(e <= 0);
    (mantissa, (-e) as u32)
}

/// Runs `decide` unless the cap fires, then records the outcome.
pub fn capped<F>(state: &mut BudgetState, alpha: Alpha, decide: F) -> Result<Decision, SamplerError>
where
    F: FnOnce() -> Result<Decision, SamplerError>,
{
    let decision = match cap_check(*state, alpha) {
        CapStatus::Capped => Decision::CAPPED,
        CapStatus::Pass => decide()?,
    };
    state.record(decision.outcome);
    Ok(decision)
}

/// Acceptance span of each deterministic cycle, `round(alpha * T_w)`.
pub fn acceptance_span(tw_us: u64, alpha: Alpha) -> u64 {
    ((alpha.get() * tw_us as f64).round() as u64).min(tw_us)
}

/// Accepts when the phase `(t - anchor) mod T_w` falls in `[0, T_a)`.
pub fn deterministic_accept(t: u64, anchor: u64, tw_us: u64, alpha: Alpha) -> Result<Decision, SamplerError> {
    if t < anchor {
        return Err(SamplerError::BeforeAnchor { t, anchor });
    }
    let phase = (t - anchor) % tw_us;
    let outcome = if phase < acceptance_span(tw_us, alpha) { Outcome::Accept } else { Outcome::RejectSampler };
    Ok(Decision { outcome, probability: None })
}

#[inline]
fn bernoulli<R: Rng + ?Sized>(rng: &mut R, p: f64) -> Decision {
    let u: f64 = rng.random();
    let outcome = if u < p { Outcome::Accept } else { Outcome::RejectSampler };
    Decision { outcome, probability: Some(p) }
}

pub fn uniform_accept<R: Rng + ?Sized>(rng: &mut R, alpha: Alpha) -> Decision {
    bernoulli(rng, alpha.get())
}

/// Accepts with the score of the event's pixel in the frozen map of the
/// previous window; without a map yet, samples uniformly at `alpha`.
///
/// `alpha = 1` is the pass-through budget: the draw is still consumed but
/// the probability used is 1, since score maps never reach 1.
pub fn poisson_accept<R: Rng + ?Sized>(
    event: &Event,
    scores: Option<&ScoreMap>,
    rng: &mut R,
    alpha: Alpha,
) -> Result<Decision, SamplerError> {
    match scores {
        None => Ok(uniform_accept(rng, alpha)),
        Some(map) => {
            let p = map.get(event.x, event.y).ok_or(SamplerError::OutsideScoreMap { x: event.x, y: event.y })?;
            Ok(bernoulli(rng, if alpha.get() == 1.0 { 1.0 } else { p }))
        }
    }
}
