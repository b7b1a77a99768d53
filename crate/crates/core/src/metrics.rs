//! Evaluation of downsampled streams against their originals.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::epdf::DensityMap;
use crate::event::{Event, EventStream, Label, SensorGeometry};
use crate::pipeline::WindowTally;

/// Additive smoothing applied per pixel before the divergence.
pub const DIVERGENCE_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("original stream is empty")]
    EmptyOriginal,
    #[error("downsampled event {index} {event} is not in the original stream (or out of order)")]
    NotSubset { index: usize, event: Event },
    #[error("original stream carries no labels")]
    Unlabeled,
    #[error("geometry mismatch: {0} vs {1}")]
    GeometryMismatch(SensorGeometry, SensorGeometry),
    #[error("density map has zero total")]
    ZeroTotal,
}

/// Positions in `original` of each event of `downsampled`, matched as an
/// order-preserving subsequence on the full `(t, x, y, p)` tuple. Among
/// duplicate tuples the earliest unmatched one is taken.
pub fn match_subsequence(original: &[Event], downsampled: &[Event]) -> Result<Vec<usize>, MetricsError> {
    let mut out = Vec::with_capacity(downsampled.len());
    let mut j = 0;
    for (index, d) in downsampled.iter().enumerate() {
        while j < original.len() && original[j] != *d {
            j += 1;
        }
        if j == original.len() {
            return Err(MetricsError::NotSubset { index, event: *d });
        }
        out.push(j);
        j += 1;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetentionReport {
    pub ratio: f64,
    /// Non-empty windows of the original, anchored at its first event.
    pub per_window: Vec<WindowTally>,
}

impl RetentionReport {
    pub fn per_window_ratios(&self) -> Vec<f64> {
        self.per_window.iter().map(WindowTally::ratio).collect()
    }
}

pub fn retention_ratio(
    original: &EventStream,
    downsampled: &EventStream,
    window_us: u64,
) -> Result<RetentionReport, MetricsError> {
    if original.is_empty() {
        return Err(MetricsError::EmptyOriginal);
    }
    let kept = match_subsequence(original.events(), downsampled.events())?;
    Ok(retention_from_indices(original, &kept, window_us))
}

/// Same as [`retention_ratio`] with the matching already done. `kept` must be
/// increasing and the original non-empty.
pub fn retention_from_indices(original: &EventStream, kept: &[usize], window_us: u64) -> RetentionReport {
    let events = original.events();
    let window_us = window_us.max(1);
    let anchor = events.first().map_or(0, |e| e.t);
    let mut per_window: Vec<WindowTally> = Vec::new();
    let mut k = 0;
    for (i, e) in events.iter().enumerate() {
        let window = (e.t - anchor) / window_us + 1;
        if per_window.last().is_none_or(|w| w.window != window) {
            per_window.push(WindowTally { window, processed: 0, retained: 0 });
        }
        let w = per_window.last_mut().unwrap();
        w.processed += 1;
        if k < kept.len() && kept[k] == i {
            w.retained += 1;
            k += 1;
        }
    }
    let ratio = if events.is_empty() { 0.0 } else { kept.len() as f64 / events.len() as f64 };
    RetentionReport { ratio, per_window }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectivityReport {
    pub edge_fraction: f64,
    pub noise_fraction: f64,
    /// `edge_fraction / noise_fraction`; absent when no noise survives.
    pub ratio: Option<f64>,
    pub overall: f64,
    pub alpha: Option<f64>,
    pub edge_total: u64,
    pub noise_total: u64,
}

/// Retained share of edge events over retained share of noise events.
pub fn selectivity(
    original: &EventStream,
    kept: &[usize],
    alpha: Option<f64>,
) -> Result<SelectivityReport, MetricsError> {
    let labels = original.labels().ok_or(MetricsError::Unlabeled)?;
    let (mut edge_total, mut noise_total) = (0u64, 0u64);
    for l in labels {
        match l {
            Label::Edge => edge_total += 1,
            Label::Noise => noise_total += 1,
        }
    }
    let (mut edge_kept, mut noise_kept) = (0u64, 0u64);
    for &i in kept {
        match labels[i] {
            Label::Edge => edge_kept += 1,
            Label::Noise => noise_kept += 1,
        }
    }
    let frac = |k: u64, n: u64| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    let edge_fraction = frac(edge_kept, edge_total);
    let noise_fraction = frac(noise_kept, noise_total);
    let ratio = (noise_fraction > 0.0).then(|| edge_fraction / noise_fraction);
    Ok(SelectivityReport {
        edge_fraction,
        noise_fraction,
        ratio,
        overall: frac(kept.len() as u64, labels.len() as u64),
        alpha,
        edge_total,
        noise_total,
    })
}

/// Matches `downsampled` against a labeled `original` and reports selectivity.
pub fn selectivity_of(
    original: &EventStream,
    downsampled: &EventStream,
    alpha: Option<f64>,
) -> Result<SelectivityReport, MetricsError> {
    let kept = match_subsequence(original.events(), downsampled.events())?;
    selectivity(original, &kept, alpha)
}

/// Symmetric KL divergence `(KL(a||b) + KL(b||a)) / 2` of the two maps, each
/// normalized to sum 1, smoothed by [`DIVERGENCE_EPSILON`] per pixel and
/// renormalized.
pub fn density_divergence(a: &DensityMap, b: &DensityMap) -> Result<f64, MetricsError> {
    if a.geometry() != b.geometry() {
        return Err(MetricsError::GeometryMismatch(a.geometry(), b.geometry()));
    }
    if a.total() == 0 || b.total() == 0 {
        return Err(MetricsError::ZeroTotal);
    }
    let n = a.counts().len() as f64;
    let smooth = |m: &DensityMap| -> Vec<f64> {
        let total = m.total() as f64;
        let z = 1.0 + n * DIVERGENCE_EPSILON;
        m.counts().iter().map(|&c| (c as f64 / total + DIVERGENCE_EPSILON) / z).collect()
    };
    let (p, q) = (smooth(a), smooth(b));
    let kl = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(&pi, &qi)| pi * (pi / qi).ln()).sum::<f64>();
    Ok(0.5 * (kl(&p, &q) + kl(&q, &p)))
}
