//! Online driver: one event at a time, no lookahead.
//!
//! Time is cut into consecutive windows `[anchor + (n-1)T, anchor + nT)`,
//! anchored at the first event. Every incoming event is tallied into the
//! current window's density map whatever its outcome; when an event crosses
//! the right edge the closed window's map becomes the frozen score map used
//! for the next window. Empty windows freeze the constant map.

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::epdf::{poisson_epdf, score_map, DensityMap, EpdfError, ScoreMap};
use crate::event::{Event, EventStream, SensorGeometry};
use crate::sampler::{
    capped, deterministic_accept, poisson_accept, sampler_rng, uniform_accept, Alpha, BudgetState, Decision, Method,
    Outcome, SamplerConfig, SamplerError, SamplerRng,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] SamplerError),
    #[error("prior: {0}")]
    Prior(#[from] EpdfError),
    #[error("event {index}: timestamp {current} precedes previous timestamp {previous}")]
    Unordered { index: u64, previous: u64, current: u64 },
    #[error("event {index}: pixel ({x}, {y}) outside the {geometry} sensor")]
    OutOfBounds { index: u64, x: u16, y: u16, geometry: SensorGeometry },
}

/// One line of the decision log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecisionRecord {
    pub index: u64,
    pub t: u64,
    pub outcome: Outcome,
    pub probability: Option<f64>,
    /// 1-based window the event fell in.
    pub window: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WindowTally {
    pub window: u64,
    pub processed: u64,
    pub retained: u64,
}

impl WindowTally {
    pub fn ratio(&self) -> f64 {
        self.retained as f64 / self.processed as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PhaseTiming {
    pub total: Duration,
    /// Score-map construction at window rollover.
    pub pdf: Duration,
    /// Accept/reject decisions.
    pub eval: Duration,
}

/// Per-phase cost in milliseconds per thousand events.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TimingReport {
    pub total: f64,
    pub pdf: f64,
    pub eval: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunStats {
    pub method: Method,
    pub alpha: Alpha,
    pub seed: u64,
    pub processed: u64,
    pub retained: u64,
    pub capped: u64,
    pub sampler_rejected: u64,
    /// Windows opened, including empty ones skipped over.
    pub windows: u64,
    /// Non-empty windows in order.
    pub per_window: Vec<WindowTally>,
    pub timing: PhaseTiming,
}

impl RunStats {
    pub fn ratio(&self) -> f64 {
        if self.processed == 0 {
            0.0
        } else {
            self.retained as f64 / self.processed as f64
        }
    }

    pub fn per_window_ratios(&self) -> Vec<f64> {
        self.per_window.iter().map(WindowTally::ratio).collect()
    }

    pub fn timing_report(&self) -> TimingReport {
        timing_probe(self)
    }
}

/// Wall-clock phase totals divided by thousands of processed events.
pub fn timing_probe(stats: &RunStats) -> TimingReport {
    if stats.processed == 0 {
        return TimingReport::default();
    }
    let kev = stats.processed as f64 / 1000.0;
    let per_kev = |d: Duration| d.as_secs_f64() * 1e3 / kev;
    TimingReport {
        total: per_kev(stats.timing.total),
        pdf: per_kev(stats.timing.pdf),
        eval: per_kev(stats.timing.eval),
    }
}

/// Window bookkeeping for the running stream.
#[derive(Clone, Debug)]
pub struct WindowState {
    /// 1-based.
    pub index: u64,
    pub start: u64,
    pub end: u64,
    pub density: DensityMap,
    /// Frozen map of the previous window; `None` in window 1.
    pub scores: Option<ScoreMap>,
    tally: WindowTally,
}

impl WindowState {
    fn first(geometry: SensorGeometry, anchor: u64, window_us: u64) -> Self {
        Self {
            index: 1,
            start: anchor,
            end: anchor.saturating_add(window_us),
            density: DensityMap::zeros(geometry, 1),
            scores: None,
            tally: WindowTally { window: 1, ..Default::default() },
        }
    }

    /// Closes every window that ends at or before `t`; returns how many.
    ///
    /// With `build_scores`, the first closed window's density is converted
    /// into the new frozen map; any further (empty) windows freeze the
    /// constant map instead.
    pub fn rollover(
        &mut self,
        t: u64,
        config: &SamplerConfig,
        build_scores: bool,
        closed: &mut Vec<WindowTally>,
    ) -> Result<u64, EpdfError> {
        if t < self.end {
            return Ok(0);
        }
        let window_us = config.window_us;
        let steps = (t - self.end) / window_us + 1;
        let last_closed = self.index + steps - 1;
        if self.tally.processed > 0 {
            closed.push(self.tally);
        }
        if build_scores {
            let geometry = self.density.geometry();
            let alpha = config.alpha.get();
            let map = if steps == 1 && !self.density.is_empty() {
                let epdf = poisson_epdf(&self.density);
                score_map(&epdf, alpha, config.theta, config.prior.as_deref())?
            } else {
                ScoreMap::constant(geometry, alpha, config.theta, last_closed)
            };
            self.scores = Some(map);
        }
        self.index = last_closed + 1;
        self.start = self.end + (steps - 1) * window_us;
        self.end = self.start.saturating_add(window_us);
        self.density.reset(self.index);
        self.tally = WindowTally { window: self.index, ..Default::default() };
        Ok(steps)
    }
}

/// Online downsampler bound to one stream.
pub struct Downsampler {
    method: Method,
    config: SamplerConfig,
    geometry: SensorGeometry,
    rng: SamplerRng,
    budget: BudgetState,
    anchor: Option<u64>,
    last_t: Option<u64>,
    next_index: u64,
    window: Option<WindowState>,
    capped: u64,
    closed: Vec<WindowTally>,
    pdf_time: Duration,
    eval_time: Duration,
}

impl Downsampler {
    pub fn new(method: Method, config: SamplerConfig, geometry: SensorGeometry) -> Result<Self, PipelineError> {
        config.validate()?;
        if let Some(prior) = &config.prior {
            if prior.geometry() != geometry {
                return Err(EpdfError::GeometryMismatch { expected: geometry, actual: prior.geometry() }.into());
            }
        }
        Ok(Self {
            method,
            rng: sampler_rng(config.seed),
            config,
            geometry,
            budget: BudgetState::default(),
            anchor: None,
            last_t: None,
            next_index: 0,
            window: None,
            capped: 0,
            closed: Vec::new(),
            pdf_time: Duration::ZERO,
            eval_time: Duration::ZERO,
        })
    }

    pub fn budget(&self) -> BudgetState {
        self.budget
    }

    pub fn window(&self) -> Option<&WindowState> {
        self.window.as_ref()
    }

    /// Decides one event.
    pub fn push(&mut self, event: &Event) -> Result<DecisionRecord, PipelineError> {
        let index = self.next_index;
        if let Some(previous) = self.last_t {
            if event.t < previous {
                return Err(PipelineError::Unordered { index, previous, current: event.t });
            }
        }
        if !self.geometry.contains(event.x, event.y) {
            return Err(PipelineError::OutOfBounds { index, x: event.x, y: event.y, geometry: self.geometry });
        }
        self.last_t = Some(event.t);
        self.next_index += 1;

        let anchor = *self.anchor.get_or_insert(event.t);
        let window =
            self.window.get_or_insert_with(|| WindowState::first(self.geometry, anchor, self.config.window_us));
        let poisson = self.method == Method::Poisson;
        if event.t >= window.end {
            let started = Instant::now();
            window.rollover(event.t, &self.config, poisson, &mut self.closed)?;
            if poisson {
                self.pdf_time += started.elapsed();
            }
        }
        if poisson {
            window.density.add_unchecked(event.x, event.y);
        }

        let started = Instant::now();
        let alpha = self.config.alpha;
        let rng = &mut self.rng;
        let mut decide = || -> Result<Decision, SamplerError> {
            match self.method {
                Method::Deterministic => deterministic_accept(event.t, anchor, self.config.tw_us, alpha),
                Method::Uniform => Ok(uniform_accept(rng, alpha)),
                Method::Poisson => poisson_accept(event, window.scores.as_ref(), rng, alpha),
            }
        };
        let decision = if self.config.cap_enabled {
            capped(&mut self.budget, alpha, decide)?
        } else {
            let d = decide()?;
            self.budget.record(d.outcome);
            d
        };
        self.eval_time += started.elapsed();

        if decision.outcome == Outcome::RejectCap {
            self.capped += 1;
        }
        window.tally.processed += 1;
        if decision.is_accept() {
            window.tally.retained += 1;
        }
        Ok(DecisionRecord {
            index,
            t: event.t,
            outcome: decision.outcome,
            probability: decision.probability,
            window: window.index,
        })
    }

    /// Final counters. `total` timing is left for the caller to fill in.
    pub fn finish(mut self) -> RunStats {
        let windows = self.window.as_ref().map_or(0, |w| w.index);
        if let Some(w) = &self.window {
            if w.tally.processed > 0 {
                self.closed.push(w.tally);
            }
        }
        RunStats {
            method: self.method,
            alpha: self.config.alpha,
            seed: self.config.seed,
            processed: self.budget.processed,
            retained: self.budget.retained,
            capped: self.capped,
            sampler_rejected: self.budget.processed - self.budget.retained - self.capped,
            windows,
            per_window: self.closed,
            timing: PhaseTiming { total: Duration::ZERO, pdf: self.pdf_time, eval: self.eval_time },
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub stream: EventStream,
    /// Input positions of the retained events.
    pub kept: Vec<usize>,
    pub stats: RunStats,
    pub log: Vec<DecisionRecord>,
}

/// Downsamples a whole stream.
pub fn run(stream: &EventStream, method: Method, config: &SamplerConfig) -> Result<RunOutput, PipelineError> {
    let started = Instant::now();
    let mut sampler = Downsampler::new(method, config.clone(), stream.geometry())?;
    let mut log = Vec::with_capacity(stream.len());
    let mut kept = Vec::with_capacity((stream.len() as f64 * config.alpha.get()) as usize + 1);
    for (i, event) in stream.events().iter().enumerate() {
        let record = sampler.push(event)?;
        if record.outcome == Outcome::Accept {
            kept.push(i);
        }
        log.push(record);
    }
    let mut stats = sampler.finish();
    stats.timing.total = started.elapsed();
    Ok(RunOutput { stream: stream.select(&kept), kept, stats, log })
}
