//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the crate's scoring or capping code unless a
//! function says so; arithmetic is deliberately done differently (tallies in
//! a BTreeMap, sorted extrema, compensated sums, tanh sigmoid).

#![allow(dead_code)]

use std::collections::BTreeMap;

use evdown::{Event, SensorGeometry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Selectivity of the Poisson sampler on `SceneSpec::reference(42)` at
/// alpha = 0.1, T = 6 ms, seed 42, cap on, as produced by [`oracle_run`]
/// with [`brute_scores`].
pub const REFERENCE_SELECTIVITY_SEED42: f64 = 4.467_118_846_741_675;

pub const OPEN_LOW: f64 = f64::MIN_POSITIVE;
pub const OPEN_HIGH: f64 = 1.0 - 1.0 / 9_007_199_254_740_992.0;

/// The whole scoring chain from raw window events, pixel by pixel.
pub fn brute_scores(events: &[Event], geometry: SensorGeometry, alpha: f64, slope: f64, midpoint: f64) -> Vec<f64> {
    let (w, h) = (geometry.width() as usize, geometry.height() as usize);
    let mut tally: BTreeMap<(u16, u16), u64> = BTreeMap::new();
    for e in events {
        *tally.entry((e.y, e.x)).or_default() += 1;
    }
    let mut f = vec![0.0f64; w * h];
    for (&(y, x), &n) in &tally {
        f[y as usize * w + x as usize] = 1.0 - (-(n as f64)).exp();
    }
    let mut sorted = f.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let g: Vec<f64> = if hi > lo { f.iter().map(|v| (v - lo) / (hi - lo)).collect() } else { vec![0.0; f.len()] };
    let mean = kahan_sum(g.iter().rev().copied()) / g.len() as f64;
    g.iter().map(|v| tanh_sigmoid(slope, midpoint, v - mean + alpha)).collect()
}

pub fn tanh_sigmoid(slope: f64, midpoint: f64, v: f64) -> f64 {
    let p = 0.5 * (1.0 + (0.5 * slope * (v - midpoint)).tanh());
    p.clamp(OPEN_LOW, OPEN_HIGH)
}

pub fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// `alpha` as the exact fraction `num / 2^shift`.
#[derive(Clone, Copy, Debug)]
pub struct ExactAlpha {
    num: u128,
    shift: u32,
}

impl ExactAlpha {
    pub fn new(alpha: f64) -> Self {
        assert!(alpha > 0.0 && alpha <= 1.0);
        let (mut v, mut shift) = (alpha, 0u32);
        while v.fract() != 0.0 {
            v *= 2.0;
            shift += 1;
        }
        assert!(shift < 70, "alpha needs {shift} binary digits");
        Self { num: v as u128, shift }
    }

    /// `retained / processed > alpha`.
    pub fn exceeded_by(&self, retained: u64, processed: u64) -> bool {
        (retained as u128) << self.shift > self.num * processed as u128
    }

    /// `retained <= alpha * (k - 1) + 1`.
    pub fn bound_holds(&self, retained: u64, k: u64) -> bool {
        (retained as u128) << self.shift <= self.num * (k as u128 - 1) + (1u128 << self.shift)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleOutcome {
    Accept,
    Reject,
    Capped,
}

#[derive(Clone, Debug, Default)]
pub struct OracleRun {
    /// `None` when the cap fired before any probability was needed.
    pub probabilities: Vec<Option<f64>>,
    pub outcomes: Vec<OracleOutcome>,
    pub windows: Vec<u64>,
    pub kept: Vec<usize>,
}

pub struct OracleConfig {
    pub geometry: SensorGeometry,
    pub alpha: f64,
    pub window_us: u64,
    pub slope: f64,
    pub midpoint: f64,
    pub seed: u64,
    pub cap: bool,
}

/// Replays the Poisson sampler event by event. For every event the score of
/// its window is rebuilt from scratch out of the raw events of the window
/// before it, found by timestamp search over the whole input; `scorer` turns
/// those events into per-pixel probabilities.
pub fn oracle_run<S>(events: &[Event], cfg: &OracleConfig, mut scorer: S) -> OracleRun
where
    S: FnMut(&[Event]) -> Vec<f64>,
{
    let mut out = OracleRun::default();
    let Some(first) = events.first() else { return out };
    let anchor = first.t;
    let exact = ExactAlpha::new(cfg.alpha);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let constant = {
        let p = 1.0 / (1.0 + (-cfg.slope * (cfg.alpha - cfg.midpoint)).exp());
        p.clamp(OPEN_LOW, OPEN_HIGH)
    };
    let mut cached: Option<(u64, Option<Vec<f64>>)> = None;
    let (mut processed, mut retained) = (0u64, 0u64);
    for (i, e) in events.iter().enumerate() {
        let n = (e.t - anchor) / cfg.window_us + 1;
        out.windows.push(n);
        if cfg.cap && processed > 0 && exact.exceeded_by(retained, processed) {
            out.probabilities.push(None);
            out.outcomes.push(OracleOutcome::Capped);
            processed += 1;
            continue;
        }
        let p = if n == 1 {
            cfg.alpha
        } else {
            if cached.as_ref().map(|c| c.0) != Some(n) {
                let lo = anchor + (n - 2) * cfg.window_us;
                let hi = anchor + (n - 1) * cfg.window_us;
                let a = events.partition_point(|x| x.t < lo);
                let b = events.partition_point(|x| x.t < hi);
                let map = (b > a).then(|| scorer(&events[a..b]));
                cached = Some((n, map));
            }
            let map = &cached.as_ref().unwrap().1;
            let p = match map {
                None => constant,
                Some(m) => m[cfg.geometry.index(e.x, e.y)],
            };
            if cfg.alpha == 1.0 {
                1.0
            } else {
                p
            }
        };
        let u: f64 = rng.random();
        processed += 1;
        out.probabilities.push(Some(p));
        if u < p {
            retained += 1;
            out.outcomes.push(OracleOutcome::Accept);
            out.kept.push(i);
        } else {
            out.outcomes.push(OracleOutcome::Reject);
        }
    }
    out
}

/// Selectivity (edge kept share over noise kept share) from labels given as
/// `true` for edge.
pub fn selectivity_of(is_edge: &[bool], kept: &[usize]) -> f64 {
    let edges = is_edge.iter().filter(|&&b| b).count() as f64;
    let noise = is_edge.len() as f64 - edges;
    let edges_kept = kept.iter().filter(|&&i| is_edge[i]).count() as f64;
    let noise_kept = kept.len() as f64 - edges_kept;
    (edges_kept / edges) / (noise_kept / noise)
}
