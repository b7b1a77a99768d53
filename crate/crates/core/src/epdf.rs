//! Event-importance estimation and the per-pixel acceptance score.
//!
//! One temporal window of events is tallied into a [`DensityMap`] (the
//! Poisson rate λ per pixel, both polarities pooled). The Poisson ePDF is the
//! probability of at least one event at a pixel, `f = 1 - exp(-λ)`. The
//! [`ScoreMap`] then maps `f` (optionally multiplied by a [`PriorMap`]) to
//! acceptance probabilities:
//!
//! ```text
//! g  = minmax(f · prior)                 (identically 0 when max == min)
//! pa = sigmoid(g + (alpha - mean(g)); θ)  sigmoid(v) = 1 / (1 + exp(-θ1 (v - θ2)))
//! ```
//!
//! The evaluation order is fixed so that independent replays can reproduce
//! the probabilities bit for bit: `f = -expm1(-λ)`; min and max by a linear
//! scan; `g = (v - min) / (max - min)`; `mean` is the row-major left-to-right
//! sum of `g` divided by the pixel count; `shift = alpha - mean`; each
//! probability is `1 / (1 + exp(-θ1 * ((g + shift) - θ2)))`, then clamped
//! into `[P_MIN, P_MAX]`.

use thiserror::Error;

use crate::event::{Event, SensorGeometry};

/// Smallest representable acceptance probability.
pub const P_MIN: f64 = f64::MIN_POSITIVE;
/// Largest acceptance probability strictly below 1 (`1 - 2^-53`).
pub const P_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// Mantissa bits kept when normalizing a prior. See [`PriorMap`].
const PRIOR_MANTISSA_BITS: u32 = 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EpdfError {
    #[error("event {index} at ({x}, {y}) is outside the {geometry} sensor")]
    OutOfBounds { index: usize, x: u16, y: u16, geometry: SensorGeometry },
    #[error("geometry mismatch: expected {expected}, got {actual}")]
    GeometryMismatch { expected: SensorGeometry, actual: SensorGeometry },
    #[error("map has {actual} values but geometry {geometry} needs {expected}")]
    Length { geometry: SensorGeometry, expected: usize, actual: usize },
    #[error("prior value at row {row}, column {col} is {value}; values must be finite and >= 0")]
    InvalidPriorValue { row: usize, col: usize, value: f64 },
    #[error("prior map is all zero")]
    ZeroPrior,
    #[error("sigmoid slope must be finite and > 0, got {0}")]
    Slope(f64),
    #[error("sigmoid midpoint must be finite, got {0}")]
    Midpoint(f64),
    #[error("alpha must lie in (0, 1], got {0}")]
    Alpha(f64),
    #[error("gaussian widths must be finite and > 0, got ({0}, {1})")]
    Sigma(f64, f64),
}

/// Per-pixel event counts over one window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DensityMap {
    geometry: SensorGeometry,
    counts: Vec<u32>,
    total: u64,
    window: u64,
}

impl DensityMap {
    pub fn zeros(geometry: SensorGeometry, window: u64) -> Self {
        Self { geometry, counts: vec![0; geometry.pixel_count()], total: 0, window }
    }

    pub fn from_counts(geometry: SensorGeometry, counts: Vec<u32>, window: u64) -> Result<Self, EpdfError> {
        if counts.len() != geometry.pixel_count() {
            return Err(EpdfError::Length { geometry, expected: geometry.pixel_count(), actual: counts.len() });
        }
        let total = counts.iter().map(|&c| c as u64).sum();
        Ok(Self { geometry, counts, total, window })
    }

    /// Adds one event. The caller guarantees the pixel is in bounds.
    #[inline]
    pub fn add_unchecked(&mut self, x: u16, y: u16) {
        let i = self.geometry.index(x, y);
        self.counts[i] = self.counts[i].saturating_add(1);
        self.total += 1;
    }

    pub fn add(&mut self, event: &Event) -> bool {
        if !self.geometry.contains(event.x, event.y) {
            return false;
        }
        self.add_unchecked(event.x, event.y);
        true
    }

    /// Clears the counts and relabels the map for window `window`.
    pub fn reset(&mut self, window: u64) {
        if self.total > 0 {
            self.counts.iter_mut().for_each(|c| *c = 0);
        }
        self.total = 0;
        self.window = window;
    }

    pub fn geometry(&self) -> SensorGeometry {
        self.geometry
    }

    pub fn window(&self) -> u64 {
        self.window
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn count_at(&self, x: u16, y: u16) -> u32 {
        self.counts[self.geometry.index(x, y)]
    }

    /// λ at a pixel.
    pub fn lambda(&self, x: u16, y: u16) -> f64 {
        self.count_at(x, y) as f64
    }

    /// Number of events accumulated; equals the sum of all counts.
    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

/// Tallies one window of events. Rejects the first out-of-bounds event.
pub fn accumulate_density<'a, I>(events: I, geometry: SensorGeometry, window: u64) -> Result<DensityMap, EpdfError>
where
    I: IntoIterator<Item = &'a Event>,
{
    let mut map = DensityMap::zeros(geometry, window);
    for (index, e) in events.into_iter().enumerate() {
        if !map.add(e) {
            return Err(EpdfError::OutOfBounds { index, x: e.x, y: e.y, geometry });
        }
    }
    Ok(map)
}

/// Poisson ePDF: probability of at least one event per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct EPdf {
    geometry: SensorGeometry,
    values: Vec<f64>,
    window: u64,
}

impl EPdf {
    pub fn geometry(&self) -> SensorGeometry {
        self.geometry
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn window(&self) -> u64 {
        self.window
    }

    /// Wraps raw per-pixel values in `[0, 1)`. Mostly useful for tests and
    /// for alternative importance estimators.
    pub fn from_values(geometry: SensorGeometry, values: Vec<f64>, window: u64) -> Result<Self, EpdfError> {
        if values.len() != geometry.pixel_count() {
            return Err(EpdfError::Length { geometry, expected: geometry.pixel_count(), actual: values.len() });
        }
        Ok(Self { geometry, values, window })
    }
}

#[inline]
pub fn poisson_at_least_one(lambda: f64) -> f64 {
    -(-lambda).exp_m1()
}

pub fn poisson_epdf(density: &DensityMap) -> EPdf {
    let values = density.counts.iter().map(|&c| poisson_at_least_one(c as f64)).collect();
    EPdf { geometry: density.geometry, values, window: density.window }
}

/// `(v - min) / (max - min)`; all zeros when the input is constant or empty.
pub fn minmax_normalize(values: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    minmax_in_place(&mut out);
    out
}

fn minmax_in_place(values: &mut [f64]) {
    let (min, max) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if max <= min {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let range = max - min;
    values.iter_mut().for_each(|v| *v = (*v - min) / range);
}

/// Slope and midpoint of the logistic score mapping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SigmoidParams {
    slope: f64,
    midpoint: f64,
}

impl SigmoidParams {
    pub fn new(slope: f64, midpoint: f64) -> Result<Self, EpdfError> {
        if !(slope.is_finite() && slope > 0.0) {
            return Err(EpdfError::Slope(slope));
        }
        if !midpoint.is_finite() {
            return Err(EpdfError::Midpoint(midpoint));
        }
        Ok(Self { slope, midpoint })
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn midpoint(&self) -> f64 {
        self.midpoint
    }

    #[inline]
    pub fn eval(&self, v: f64) -> f64 {
        1.0 / (1.0 + (-self.slope * (v - self.midpoint)).exp())
    }
}

impl Default for SigmoidParams {
    /// θ = [5, 0.5].
    fn default() -> Self {
        Self { slope: 5.0, midpoint: 0.5 }
    }
}

/// Task prior over pixel locations.
///
/// The raw weights are kept verbatim. Scoring uses a peak-normalized copy
/// (`w / max`) rounded to a 24-bit mantissa, so that a prior and any
/// positive multiple of it produce identical score maps even though
/// `c * w` is itself rounded.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorMap {
    geometry: SensorGeometry,
    weights: Vec<f64>,
    normalized: Vec<f64>,
}

impl PriorMap {
    pub fn new(geometry: SensorGeometry, weights: Vec<f64>) -> Result<Self, EpdfError> {
        if weights.len() != geometry.pixel_count() {
            return Err(EpdfError::Length { geometry, expected: geometry.pixel_count(), actual: weights.len() });
        }
        let width = geometry.width() as usize;
        let mut max = 0.0f64;
        for (i, &w) in weights.iter().enumerate() {
            if !(w.is_finite() && w >= 0.0) {
                return Err(EpdfError::InvalidPriorValue { row: i / width, col: i % width, value: w });
            }
            max = max.max(w);
        }
        if max <= 0.0 {
            return Err(EpdfError::ZeroPrior);
        }
        let normalized = weights.iter().map(|&w| round_mantissa(w / max, PRIOR_MANTISSA_BITS)).collect();
        Ok(Self { geometry, weights, normalized })
    }

    pub fn geometry(&self) -> SensorGeometry {
        self.geometry
    }

    /// Weights as given.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Peak-normalized weights in `[0, 1]` used for scoring.
    pub fn normalized(&self) -> &[f64] {
        &self.normalized
    }

    pub fn at(&self, x: u16, y: u16) -> f64 {
        self.weights[self.geometry.index(x, y)]
    }
}

/// Rounds a non-negative finite value to `bits` mantissa bits (half up).
fn round_mantissa(v: f64, bits: u32) -> f64 {
    debug_assert!(v >= 0.0 && v.is_finite());
    if v == 0.0 {
        return 0.0;
    }
    let drop = 52 - bits;
    let half = 1u64 << (drop - 1);
    let mask = !((1u64 << drop) - 1);
    f64::from_bits((v.to_bits() + half) & mask)
}

/// Default gaussian width: a quarter of the sensor extent on each axis.
pub fn default_gaussian_sigmas(geometry: SensorGeometry) -> (f64, f64) {
    (geometry.width() as f64 / 4.0, geometry.height() as f64 / 4.0)
}

/// Centered, peak-1 gaussian prior.
pub fn gaussian_prior(geometry: SensorGeometry, sigma_x: f64, sigma_y: f64) -> Result<PriorMap, EpdfError> {
    if !(sigma_x.is_finite() && sigma_x > 0.0 && sigma_y.is_finite() && sigma_y > 0.0) {
        return Err(EpdfError::Sigma(sigma_x, sigma_y));
    }
    let cx = (geometry.width() as f64 - 1.0) / 2.0;
    let cy = (geometry.height() as f64 - 1.0) / 2.0;
    let mut weights = Vec::with_capacity(geometry.pixel_count());
    for y in 0..geometry.height() {
        let dy = y as f64 - cy;
        let ey = dy * dy / (2.0 * sigma_y * sigma_y);
        for x in 0..geometry.width() {
            let dx = x as f64 - cx;
            weights.push((-(dx * dx / (2.0 * sigma_x * sigma_x) + ey)).exp());
        }
    }
    PriorMap::new(geometry, weights)
}

/// Per-pixel acceptance probabilities for one window, strictly inside (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    geometry: SensorGeometry,
    probs: Vec<f64>,
    window: u64,
}

impl ScoreMap {
    /// The degenerate map `sigmoid(alpha)` everywhere, produced by windows
    /// without activity.
    pub fn constant(geometry: SensorGeometry, alpha: f64, theta: SigmoidParams, window: u64) -> Self {
        let p = clamp_probability(theta.eval(0.0 + alpha));
        Self { geometry, probs: vec![p; geometry.pixel_count()], window }
    }

    pub fn geometry(&self) -> SensorGeometry {
        self.geometry
    }

    pub fn window(&self) -> u64 {
        self.window
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    #[inline]
    pub fn at(&self, x: u16, y: u16) -> f64 {
        self.probs[self.geometry.index(x, y)]
    }

    pub fn get(&self, x: u16, y: u16) -> Option<f64> {
        self.geometry.checked_index(x, y).map(|i| self.probs[i])
    }
}

#[inline]
fn clamp_probability(p: f64) -> f64 {
    p.clamp(P_MIN, P_MAX)
}

/// Maps an ePDF (optionally modulated by a prior) to acceptance probabilities.
pub fn score_map(
    epdf: &EPdf,
    alpha: f64,
    theta: SigmoidParams,
    prior: Option<&PriorMap>,
) -> Result<ScoreMap, EpdfError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(EpdfError::Alpha(alpha));
    }
    let mut g = match prior {
        None => epdf.values.clone(),
        Some(prior) => {
            if prior.geometry != epdf.geometry {
                return Err(EpdfError::GeometryMismatch { expected: epdf.geometry, actual: prior.geometry });
            }
            epdf.values.iter().zip(&prior.normalized).map(|(f, w)| f * w).collect()
        }
    };
    minmax_in_place(&mut g);
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    let shift = alpha - mean;
    for v in g.iter_mut() {
        *v = clamp_probability(theta.eval(*v + shift));
    }
    Ok(ScoreMap { geometry: epdf.geometry, probs: g, window: epdf.window })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::Polarity;

    fn geo(w: u16, h: u16) -> SensorGeometry {
        SensorGeometry::new(w, h).unwrap()
    }

    #[test]
    fn empty_window_is_zero_map() {
        let m = accumulate_density(&[], geo(3, 3), 1).unwrap();
        assert!(m.counts().iter().all(|&c| c == 0));
        assert_eq!(m.total(), 0);
    }

    #[test]
    fn counting_pools_polarities() {
        let events = [
            Event::new(0, 2, 1, Polarity::On),
            Event::new(1, 2, 1, Polarity::Off),
            Event::new(2, 2, 1, Polarity::On),
            Event::new(3, 0, 0, Polarity::Off),
        ];
        let m = accumulate_density(&events, geo(3, 2), 1).unwrap();
        assert_eq!(m.lambda(2, 1), 3.0);
        assert_eq!(m.lambda(0, 0), 1.0);
        assert_eq!(m.counts().iter().filter(|&&c| c > 0).count(), 2);
        assert_eq!(m.total(), 4);
    }

    #[test]
    fn out_of_bounds_rejected_with_index() {
        let events = [Event::new(0, 0, 0, Polarity::On), Event::new(1, 3, 0, Polarity::On)];
        let err = accumulate_density(&events, geo(3, 3), 1).unwrap_err();
        assert!(matches!(err, EpdfError::OutOfBounds { index: 1, x: 3, .. }));
    }

    #[test]
    fn poisson_closed_forms() {
        assert_eq!(poisson_at_least_one(0.0), 0.0);
        assert!((poisson_at_least_one(std::f64::consts::LN_2) - 0.5).abs() < 1e-15);
        // 1 - e^-1 to 20 digits: 0.63212055882855767840
        assert!((poisson_at_least_one(1.0) - 0.632_120_558_828_557_7).abs() < 1e-12);
    }

    #[test]
    fn poisson_epdf_zero_exactly_where_lambda_zero() {
        let m = DensityMap::from_counts(geo(2, 2), vec![0, 1, 0, 7], 3).unwrap();
        let f = poisson_epdf(&m);
        assert_eq!(f.values()[0], 0.0);
        assert_eq!(f.values()[2], 0.0);
        assert!(f.values()[1] > 0.0 && f.values()[3] < 1.0);
        assert_eq!(f.window(), 3);
    }

    #[test]
    fn minmax_cases() {
        assert_eq!(minmax_normalize(&[0.0, 0.5, 1.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&[3.0, 3.0, 3.0]), vec![0.0; 3]);
        assert_eq!(minmax_normalize(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert!(minmax_normalize(&[]).is_empty());
    }

    #[test]
    fn sigmoid_params_validated() {
        assert!(SigmoidParams::new(0.0, 0.5).is_err());
        assert!(SigmoidParams::new(-1.0, 0.5).is_err());
        assert!(SigmoidParams::new(f64::NAN, 0.5).is_err());
        assert!(SigmoidParams::new(5.0, f64::INFINITY).is_err());
        let d = SigmoidParams::default();
        assert_eq!((d.slope(), d.midpoint()), (5.0, 0.5));
    }

    #[test]
    fn midpoint_gives_one_half() {
        // constant ePDF -> g = 0, shift = alpha = 0.5 = θ2
        let f = EPdf::from_values(geo(3, 3), vec![0.2; 9], 1).unwrap();
        let s = score_map(&f, 0.5, SigmoidParams::default(), None).unwrap();
        assert!(s.probabilities().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn constant_epdf_alpha_03() {
        let f = EPdf::from_values(geo(4, 2), vec![0.7; 8], 1).unwrap();
        let s = score_map(&f, 0.3, SigmoidParams::default(), None).unwrap();
        let expected = 1.0 / (1.0 + std::f64::consts::E);
        for &p in s.probabilities() {
            assert!((p - expected).abs() < 1e-12);
            assert!((p - 0.268_941_421_369_995_1).abs() < 1e-12);
        }
        assert_eq!(s, ScoreMap::constant(geo(4, 2), 0.3, SigmoidParams::default(), 1));
    }

    #[test]
    fn constant_prior_matches_no_prior() {
        let m = DensityMap::from_counts(geo(3, 2), vec![0, 1, 2, 3, 0, 9], 1).unwrap();
        let f = poisson_epdf(&m);
        let prior = PriorMap::new(geo(3, 2), vec![2.5; 6]).unwrap();
        let th = SigmoidParams::default();
        assert_eq!(score_map(&f, 0.2, th, None).unwrap(), score_map(&f, 0.2, th, Some(&prior)).unwrap());
    }

    #[test]
    fn score_map_errors() {
        let f = EPdf::from_values(geo(2, 2), vec![0.0; 4], 1).unwrap();
        let prior = PriorMap::new(geo(2, 3), vec![1.0; 6]).unwrap();
        let th = SigmoidParams::default();
        assert!(matches!(score_map(&f, 0.5, th, Some(&prior)), Err(EpdfError::GeometryMismatch { .. })));
        assert!(matches!(score_map(&f, 0.0, th, None), Err(EpdfError::Alpha(_))));
        assert!(matches!(score_map(&f, 1.5, th, None), Err(EpdfError::Alpha(_))));
    }

    #[test]
    fn prior_validation() {
        assert_eq!(PriorMap::new(geo(2, 2), vec![0.0; 4]).unwrap_err(), EpdfError::ZeroPrior);
        let err = PriorMap::new(geo(2, 2), vec![1.0, 1.0, 1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, EpdfError::InvalidPriorValue { row: 1, col: 1, .. }));
        assert!(matches!(
            PriorMap::new(geo(2, 2), vec![1.0, -1.0, 1.0, 1.0]),
            Err(EpdfError::InvalidPriorValue { row: 0, col: 1, .. })
        ));
        assert!(PriorMap::new(geo(2, 2), vec![1.0; 3]).is_err());
    }

    #[test]
    fn gaussian_prior_values() {
        let g = geo(11, 7);
        let p = gaussian_prior(g, 2.0, 3.0).unwrap();
        assert_eq!(p.at(5, 3), 1.0);
        // closed form at one sigma along x
        assert!((p.at(7, 3) - (-0.5f64).exp()).abs() < 1e-12);
        assert!((p.at(7, 3) - 0.606_530_659_712_633_4).abs() < 1e-12);
        for y in 0..7 {
            for x in 0..11 {
                assert_eq!(p.at(x, y), p.at(10 - x, y));
            }
        }
        assert!(gaussian_prior(g, 0.0, 1.0).is_err());
        assert!(gaussian_prior(g, 1.0, -2.0).is_err());
    }

    #[test]
    fn single_pixel_window_peaks() {
        let events = [Event::new(0, 1, 1, Polarity::On); 4];
        let m = accumulate_density(&events, geo(3, 3), 1).unwrap();
        let s = score_map(&poisson_epdf(&m), 0.1, SigmoidParams::default(), None).unwrap();
        let max = s.probabilities().iter().cloned().fold(0.0, f64::max);
        assert_eq!(s.at(1, 1), max);
        assert!(s.at(0, 0) < max);
    }

    #[test]
    fn steep_sigmoid_stays_open() {
        let f = EPdf::from_values(geo(2, 1), vec![0.0, 0.9], 1).unwrap();
        let th = SigmoidParams::new(1e6, 0.5).unwrap();
        let s = score_map(&f, 0.5, th, None).unwrap();
        assert!(s.probabilities().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn mantissa_rounding() {
        assert_eq!(round_mantissa(1.0, 24), 1.0);
        assert_eq!(round_mantissa(0.5, 24), 0.5);
        let v = 0.1234567891234;
        assert!((round_mantissa(v, 24) - v).abs() < v * 1e-7);
        assert_eq!(round_mantissa(1.0 - f64::EPSILON / 2.0, 24), 1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            // above ~36 events, 1 - exp(-λ) rounds to 1.0 and counts tie
            fn higher_count_higher_score(
                counts in proptest::collection::vec(0u32..25, 16),
                alpha in 0.01f64..1.0,
            ) {
                let m = DensityMap::from_counts(geo(4, 4), counts.clone(), 1).unwrap();
                let s = score_map(&poisson_epdf(&m), alpha, SigmoidParams::default(), None).unwrap();
                let p = s.probabilities();
                for i in 0..16 {
                    for j in 0..16 {
                        if counts[i] > counts[j] {
                            prop_assert!(p[i] > p[j]);
                        }
                    }
                }
            }

            #[test]
            fn scores_strictly_inside_unit_interval(
                values in proptest::collection::vec(0.0f64..1.0, 1..64),
                alpha in 1e-6f64..=1.0,
                slope in 1e-3f64..1e4,
                midpoint in -10.0f64..10.0,
            ) {
                let n = values.len() as u16;
                let f = EPdf::from_values(geo(n, 1), values, 1).unwrap();
                let s = score_map(&f, alpha, SigmoidParams::new(slope, midpoint).unwrap(), None).unwrap();
                prop_assert!(s.probabilities().iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }
    }
}
