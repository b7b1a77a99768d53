//! Labeled synthetic scenes: moving line edges over uniform background noise.
//!
//! Each edge and the background are independent Poisson processes with
//! exponential inter-arrival times, so the generated stream matches the
//! spatial Poisson model the importance estimator assumes. Labels record
//! which process produced each event.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::epdf::DensityMap;
use crate::event::{Event, EventStream, Label, Polarity, SensorGeometry};

/// Streams above this many expected events are refused.
pub const MAX_EVENTS: f64 = 4_294_967_296.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("sensor geometry must be at least 1x1")]
    Geometry,
    #[error("duration must be at least 1 us")]
    Duration,
    #[error("{what} must be finite and >= 0, got {value}")]
    Rate { what: String, value: f64 },
    #[error("edge {edge}: coordinates and velocity must be finite")]
    EdgeGeometry { edge: usize },
    #[error("scene would produce about {expected:.3e} events, above the 2^32 limit")]
    TooManyEvents { expected: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PolarityModel {
    /// Each source alternates ON, OFF, ON, ...
    #[default]
    Alternating,
    Random,
}

/// A straight segment translating at constant velocity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeSegment {
    /// Endpoints at t = 0, pixels.
    pub start: [f64; 2],
    pub end: [f64; 2],
    /// Pixels per second.
    #[serde(default)]
    pub velocity: [f64; 2],
    /// Events per second per pixel of rasterized edge.
    pub rate: f64,
}

impl EdgeSegment {
    fn at(&self, t_us: u64) -> ([i64; 2], [i64; 2]) {
        let s = t_us as f64 * 1e-6;
        let shift =
            |p: [f64; 2]| [(p[0] + self.velocity[0] * s).round() as i64, (p[1] + self.velocity[1] * s).round() as i64];
        (shift(self.start), shift(self.end))
    }

    /// Raster pixel count of the segment; the total emission rate is
    /// `rate * pixels()`.
    pub fn pixels(&self) -> f64 {
        let dx = (self.end[0] - self.start[0]).abs().round();
        let dy = (self.end[1] - self.start[1]).abs().round();
        dx.max(dy) + 1.0
    }

    /// Pixels covered by the edge at `t_us`, unclipped.
    pub fn raster_at(&self, t_us: u64) -> Vec<[i64; 2]> {
        let (a, b) = self.at(t_us);
        rasterize_line(a, b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: u16,
    pub height: u16,
    pub duration_us: u64,
    #[serde(default)]
    pub edges: Vec<EdgeSegment>,
    /// Background events per pixel per second.
    #[serde(default)]
    pub noise_rate: f64,
    #[serde(default)]
    pub polarity: PolarityModel,
    #[serde(default)]
    pub seed: u64,
}

impl SceneSpec {
    /// Background noise only.
    pub fn noise(width: u16, height: u16, duration_us: u64, noise_rate: f64, seed: u64) -> Self {
        Self { width, height, duration_us, edges: Vec::new(), noise_rate, polarity: PolarityModel::Random, seed }
    }

    /// The selectivity reference: one vertical 97-pixel edge sweeping a
    /// 128x128 sensor at 40 px/s, 500 events/s per edge pixel over 10
    /// events/s per pixel of background (50x), for 2.4 s.
    pub fn reference(seed: u64) -> Self {
        Self {
            width: 128,
            height: 128,
            duration_us: 2_400_000,
            edges: vec![EdgeSegment { start: [16.0, 16.0], end: [16.0, 112.0], velocity: [40.0, 0.0], rate: 500.0 }],
            noise_rate: 10.0,
            polarity: PolarityModel::Alternating,
            seed,
        }
    }

    /// A DAVIS346-sized scene with a little over 10^6 events in one second:
    /// four moving edges over background noise.
    pub fn benchmark(seed: u64) -> Self {
        let edge =
            |start: [f64; 2], end: [f64; 2], velocity: [f64; 2]| EdgeSegment { start, end, velocity, rate: 800.0 };
        Self {
            width: 346,
            height: 260,
            duration_us: 1_000_000,
            edges: vec![
                edge([20.0, 10.0], [20.0, 250.0], [150.0, 0.0]),
                edge([330.0, 30.0], [330.0, 230.0], [-120.0, 0.0]),
                edge([10.0, 20.0], [300.0, 20.0], [0.0, 90.0]),
                edge([40.0, 60.0], [200.0, 200.0], [60.0, -20.0]),
            ],
            noise_rate: 5.5,
            polarity: PolarityModel::Random,
            seed,
        }
    }

    pub fn geometry(&self) -> Result<SensorGeometry, SynthError> {
        SensorGeometry::new(self.width, self.height).map_err(|_| SynthError::Geometry)
    }

    pub fn expected_events(&self) -> f64 {
        let secs = self.duration_us as f64 * 1e-6;
        let edges: f64 = self.edges.iter().map(|e| e.rate * e.pixels()).sum();
        let noise = self.noise_rate * self.width as f64 * self.height as f64;
        (edges + noise) * secs
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        self.geometry()?;
        if self.duration_us < 1 {
            return Err(SynthError::Duration);
        }
        let check_rate = |what: String, value: f64| {
            if value.is_finite() && value >= 0.0 {
                Ok(())
            } else {
                Err(SynthError::Rate { what, value })
            }
        };
        check_rate("noise rate".into(), self.noise_rate)?;
        for (i, e) in self.edges.iter().enumerate() {
            check_rate(format!("edge {i} rate"), e.rate)?;
            if !e.start.iter().chain(&e.end).chain(&e.velocity).all(|v| v.is_finite()) {
                return Err(SynthError::EdgeGeometry { edge: i });
            }
        }
        let expected = self.expected_events();
        if expected > MAX_EVENTS {
            return Err(SynthError::TooManyEvents { expected });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabeledEvent {
    pub event: Event,
    pub label: Label,
    /// Index of the producing edge, for edge events.
    pub edge: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// Labeled stream.
    pub stream: EventStream,
    pub edge_ids: Vec<Option<u32>>,
}

impl SyntheticScene {
    pub fn labeled_events(&self) -> impl Iterator<Item = LabeledEvent> + '_ {
        let labels = self.stream.labels().expect("synthetic streams are labeled");
        self.stream.events().iter().zip(labels).zip(&self.edge_ids).map(|((&event, &label), &edge)| LabeledEvent {
            event,
            label,
            edge,
        })
    }
}

/// Integer midpoint line walk from `a` to `b`, both ends included.
pub fn rasterize_line(a: [i64; 2], b: [i64; 2]) -> Vec<[i64; 2]> {
    let [mut x, mut y] = a;
    let dx = (b[0] - a[0]).abs();
    let dy = -(b[1] - a[1]).abs();
    let sx = if a[0] < b[0] { 1 } else { -1 };
    let sy = if a[1] < b[1] { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx.max(-dy) + 1) as usize);
    loop {
        out.push([x, y]);
        if x == b[0] && y == b[1] {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

struct Source {
    rng: ChaCha8Rng,
    rate_per_us: f64,
    clock: f64,
    polarity: PolarityModel,
    next_on: bool,
}

impl Source {
    fn new(seed: u64, stream: u64, rate_per_s: f64, polarity: PolarityModel) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng, rate_per_us: rate_per_s * 1e-6, clock: 0.0, polarity, next_on: true }
    }

    /// Next arrival in integer microseconds, or `None` past `duration`.
    fn next_time(&mut self, duration: u64) -> Option<u64> {
        if self.rate_per_us <= 0.0 {
            return None;
        }
        let gap: f64 = Exp1.sample(&mut self.rng);
        self.clock += gap / self.rate_per_us;
        let t = self.clock.floor();
        (t < duration as f64).then_some(t as u64)
    }

    fn polarity(&mut self) -> Polarity {
        let on = match self.polarity {
            PolarityModel::Alternating => {
                let on = self.next_on;
                self.next_on = !on;
                on
            }
            PolarityModel::Random => self.rng.random(),
        };
        if on {
            Polarity::On
        } else {
            Polarity::Off
        }
    }
}

type Endpoints = ([i64; 2], [i64; 2]);

/// Generates the scene. Same spec, same stream.
pub fn generate(spec: &SceneSpec) -> Result<SyntheticScene, SynthError> {
    spec.validate()?;
    let geometry = spec.geometry()?;
    let mut all: Vec<LabeledEvent> = Vec::with_capacity(spec.expected_events() as usize + 16);

    for (id, edge) in spec.edges.iter().enumerate() {
        let mut source = Source::new(spec.seed, id as u64, edge.rate * edge.pixels(), spec.polarity);
        let mut cached: Option<(Endpoints, Vec<[i64; 2]>)> = None;
        while let Some(t) = source.next_time(spec.duration_us) {
            let ends = edge.at(t);
            if cached.as_ref().is_none_or(|(k, _)| *k != ends) {
                cached = Some((ends, rasterize_line(ends.0, ends.1)));
            }
            let raster = &cached.as_ref().unwrap().1;
            let [px, py] = raster[source.rng.random_range(0..raster.len())];
            let p = source.polarity();
            if px < 0 || py < 0 || px >= spec.width as i64 || py >= spec.height as i64 {
                continue;
            }
            all.push(LabeledEvent {
                event: Event::new(t, px as u16, py as u16, p),
                label: Label::Edge,
                edge: Some(id as u32),
            });
        }
    }

    let pixels = geometry.pixel_count() as f64;
    let mut noise = Source::new(spec.seed, spec.edges.len() as u64, spec.noise_rate * pixels, spec.polarity);
    while let Some(t) = noise.next_time(spec.duration_us) {
        let x = noise.rng.random_range(0..spec.width);
        let y = noise.rng.random_range(0..spec.height);
        let p = noise.polarity();
        all.push(LabeledEvent { event: Event::new(t, x, y, p), label: Label::Noise, edge: None });
    }

    if all.len() as f64 > MAX_EVENTS {
        return Err(SynthError::TooManyEvents { expected: all.len() as f64 });
    }
    // stable: ties keep edge order, then noise
    all.sort_by_key(|e| e.event.t);
    let events = all.iter().map(|e| e.event).collect();
    let labels = all.iter().map(|e| e.label).collect();
    let edge_ids = all.iter().map(|e| e.edge).collect();
    let stream = EventStream::new_unchecked(geometry, events).with_labels(labels).expect("one label per event");
    Ok(SyntheticScene { stream, edge_ids })
}

/// Per-pixel counts of events with `start <= t < end`.
pub fn density_snapshot(stream: &EventStream, start: u64, end: u64) -> DensityMap {
    let events = stream.events();
    let lo = events.partition_point(|e| e.t < start);
    let hi = events.partition_point(|e| e.t < end).max(lo);
    let mut map = DensityMap::zeros(stream.geometry(), 0);
    for e in &events[lo..hi] {
        map.add(e);
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{stream_duration, validate_stream};

    fn static_edge() -> SceneSpec {
        SceneSpec {
            width: 32,
            height: 32,
            duration_us: 200_000,
            edges: vec![EdgeSegment { start: [3.0, 4.0], end: [20.0, 15.0], velocity: [0.0, 0.0], rate: 300.0 }],
            noise_rate: 0.0,
            polarity: PolarityModel::Alternating,
            seed: 9,
        }
    }

    #[test]
    fn line_raster_endpoints_and_connectivity() {
        let px = rasterize_line([0, 0], [5, 2]);
        assert_eq!(px.first(), Some(&[0, 0]));
        assert_eq!(px.last(), Some(&[5, 2]));
        assert_eq!(px.len(), 6);
        for w in px.windows(2) {
            assert!((w[1][0] - w[0][0]).abs() <= 1 && (w[1][1] - w[0][1]).abs() <= 1);
        }
        assert_eq!(rasterize_line([3, 3], [3, 3]), vec![[3, 3]]);
        assert_eq!(rasterize_line([2, 5], [2, 1]).len(), 5);
    }

    #[test]
    fn static_edge_only_edge_events_on_segment() {
        let scene = generate(&static_edge()).unwrap();
        let raster = static_edge().edges[0].raster_at(0);
        assert!(!scene.stream.is_empty());
        for le in scene.labeled_events() {
            assert_eq!(le.label, Label::Edge);
            assert_eq!(le.edge, Some(0));
            assert!(raster.contains(&[le.event.x as i64, le.event.y as i64]));
        }
    }

    #[test]
    fn moving_edge_confined_to_raster_at_timestamp() {
        let spec = SceneSpec::reference(3);
        let scene = generate(&spec).unwrap();
        for le in scene.labeled_events().filter(|e| e.label == Label::Edge) {
            let raster = spec.edges[0].raster_at(le.event.t);
            assert!(raster.contains(&[le.event.x as i64, le.event.y as i64]));
        }
    }

    #[test]
    fn noise_count_within_three_sigma() {
        let spec = SceneSpec::noise(40, 30, 500_000, 20.0, 4);
        let expected = 20.0 * 1200.0 * 500_000.0 / 1e6;
        let n = generate(&spec).unwrap().stream.len() as f64;
        assert!((n - expected).abs() <= 3.0 * expected.sqrt(), "{n} vs {expected}");
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate(&SceneSpec::reference(5)).unwrap();
        let b = generate(&SceneSpec::reference(5)).unwrap();
        let c = generate(&SceneSpec::reference(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.stream, c.stream);
    }

    #[test]
    fn generated_streams_validate() {
        for spec in [SceneSpec::reference(1), static_edge(), SceneSpec::noise(3, 2, 10_000, 1000.0, 2)] {
            let s = generate(&spec).unwrap().stream;
            assert!(validate_stream(&s, 10).is_ok());
            assert!(stream_duration(&s) < spec.duration_us);
        }
    }

    #[test]
    fn edge_leaving_sensor_is_clipped() {
        let mut spec = static_edge();
        spec.edges[0].velocity = [400.0, 0.0];
        let s = generate(&spec).unwrap().stream;
        assert!(validate_stream(&s, 10).is_ok());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = static_edge();
        spec.duration_us = 0;
        assert_eq!(generate(&spec).unwrap_err(), SynthError::Duration);
        let mut spec = static_edge();
        spec.noise_rate = -1.0;
        assert!(matches!(generate(&spec), Err(SynthError::Rate { .. })));
        let mut spec = static_edge();
        spec.edges[0].velocity[1] = f64::NAN;
        assert!(matches!(generate(&spec), Err(SynthError::EdgeGeometry { edge: 0 })));
        let spec = SceneSpec::noise(1000, 1000, 10_000_000, 1000.0, 0);
        assert!(matches!(generate(&spec), Err(SynthError::TooManyEvents { .. })));
        let mut spec = static_edge();
        spec.width = 0;
        assert_eq!(generate(&spec).unwrap_err(), SynthError::Geometry);
    }

    #[test]
    fn alternating_polarity_per_source() {
        let scene = generate(&static_edge()).unwrap();
        let bits: Vec<_> = scene.stream.events().iter().map(|e| e.p).collect();
        assert_eq!(bits[0], Polarity::On);
        assert!(bits.windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn snapshots() {
        let s = generate(&SceneSpec::noise(16, 16, 400_000, 50.0, 8)).unwrap().stream;
        assert_eq!(density_snapshot(&s, 10, 10).total(), 0);
        assert_eq!(density_snapshot(&s, 0, u64::MAX).total(), s.len() as u64);
        // binomial split of a homogeneous process
        let half = density_snapshot(&s, 0, 200_000).total() as f64;
        let n = s.len() as f64;
        assert!((half - n / 2.0).abs() <= 3.0 * (n * 0.25).sqrt());
    }

    #[test]
    fn spec_json_defaults() {
        let spec: SceneSpec = serde_json::from_str(
            r#"{"width": 8, "height": 8, "duration_us": 1000,
                "edges": [{"start": [0, 0], "end": [7, 7], "rate": 10}]}"#,
        )
        .unwrap();
        assert_eq!(spec.noise_rate, 0.0);
        assert_eq!(spec.edges[0].velocity, [0.0, 0.0]);
        assert_eq!(spec.polarity, PolarityModel::Alternating);
    }
}
