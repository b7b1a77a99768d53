//! Event and stream types.
//!
//! An [`Event`] is the raw output of one pixel of an event camera: a
//! location, an integer microsecond timestamp and a polarity. Streams keep
//! events in non-decreasing timestamp order; ties keep their input order.

use std::fmt;

use thiserror::Error;

/// Direction of the brightness change that triggered an event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Off,
    On,
}

impl Polarity {
    /// Serialized value: ON → 1, OFF → 0.
    #[inline]
    pub fn as_bit(self) -> u8 {
        match self {
            Polarity::Off => 0,
            Polarity::On => 1,
        }
    }

    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            0 => Some(Polarity::Off),
            1 => Some(Polarity::On),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    /// Microseconds.
    pub t: u64,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: Polarity) -> Self {
        Self { x, y, t, p }
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(t={}, x={}, y={}, p={})", self.t, self.x, self.y, self.p.as_bit())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("sensor geometry must be at least 1x1, got {width}x{height}")]
pub struct GeometryError {
    pub width: u16,
    pub height: u16,
}

/// Sensor resolution in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SensorGeometry {
    width: u16,
    height: u16,
}

impl SensorGeometry {
    pub fn new(width: u16, height: u16) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError { width, height });
        }
        Ok(Self { width, height })
    }

    #[inline]
    pub fn width(&self) -> u16 {
        self.width
    }

    #[inline]
    pub fn height(&self) -> u16 {
        self.height
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    #[inline]
    pub fn contains(&self, x: u16, y: u16) -> bool {
        x < self.width && y < self.height
    }

    /// Row-major pixel index. The caller guarantees `contains(x, y)`.
    #[inline]
    pub fn index(&self, x: u16, y: u16) -> usize {
        y as usize * self.width as usize + x as usize
    }

    /// Row-major pixel index, or `None` when out of bounds.
    #[inline]
    pub fn checked_index(&self, x: u16, y: u16) -> Option<usize> {
        self.contains(x, y).then(|| self.index(x, y))
    }
}

impl fmt::Display for SensorGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Ground-truth origin of a synthetic event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Edge,
    Noise,
}

impl Label {
    pub fn as_char(self) -> char {
        match self {
            Label::Edge => 'E',
            Label::Noise => 'N',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            'E' => Some(Label::Edge),
            'N' => Some(Label::Noise),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    /// `t[index] < t[index - 1]`.
    Ordering { previous: u64, current: u64 },
    /// Coordinates outside the sensor.
    Bounds { x: u16, y: u16 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ViolationKind::Ordering { previous, current } => {
                write!(f, "event {}: timestamp {} precedes previous timestamp {}", self.index, current, previous)
            }
            ViolationKind::Bounds { x, y } => {
                write!(f, "event {}: pixel ({}, {}) outside sensor", self.index, x, y)
            }
        }
    }
}

/// Outcome of [`validate_stream`]. Holds at most `limit` violations, but
/// `total` counts all of them.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub total: usize,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.total == 0
    }

    pub fn first(&self) -> Option<&Violation> {
        self.violations.first()
    }
}

pub const DEFAULT_VIOLATION_LIMIT: usize = 10;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StreamError {
    #[error("invalid stream: {0}")]
    Invalid(Violation),
    #[error("label count {labels} does not match event count {events}")]
    LabelCount { events: usize, labels: usize },
}

/// Ordered events on a sensor, with optional per-event ground-truth labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    geometry: SensorGeometry,
    events: Vec<Event>,
    labels: Option<Vec<Label>>,
}

impl EventStream {
    /// Builds a stream, rejecting the first ordering or bounds violation.
    pub fn new(geometry: SensorGeometry, events: Vec<Event>) -> Result<Self, StreamError> {
        let report = validate_events(geometry, &events, 1);
        if let Some(v) = report.first() {
            return Err(StreamError::Invalid(*v));
        }
        Ok(Self { geometry, events, labels: None })
    }

    /// Builds a stream without validating it. Use [`validate_stream`] (or
    /// let the pipeline reject it) before relying on the invariants.
    pub fn new_unchecked(geometry: SensorGeometry, events: Vec<Event>) -> Self {
        Self { geometry, events, labels: None }
    }

    pub fn empty(geometry: SensorGeometry) -> Self {
        Self::new_unchecked(geometry, Vec::new())
    }

    pub fn with_labels(mut self, labels: Vec<Label>) -> Result<Self, StreamError> {
        if labels.len() != self.events.len() {
            return Err(StreamError::LabelCount { events: self.events.len(), labels: labels.len() });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    #[inline]
    pub fn geometry(&self) -> SensorGeometry {
        self.geometry
    }

    #[inline]
    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn labels(&self) -> Option<&[Label]> {
        self.labels.as_deref()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.events.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Sub-stream made of the events at `indices` (which must be increasing).
    /// Labels follow their events.
    pub fn select(&self, indices: &[usize]) -> EventStream {
        let events = indices.iter().map(|&i| self.events[i]).collect();
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        EventStream { geometry: self.geometry, events, labels }
    }

    /// The first `len` events.
    pub fn prefix(&self, len: usize) -> EventStream {
        let len = len.min(self.events.len());
        EventStream {
            geometry: self.geometry,
            events: self.events[..len].to_vec(),
            labels: self.labels.as_ref().map(|l| l[..len].to_vec()),
        }
    }

    pub fn into_parts(self) -> (SensorGeometry, Vec<Event>, Option<Vec<Label>>) {
        (self.geometry, self.events, self.labels)
    }
}

/// Checks ordering and bounds, reporting up to `limit` violations.
pub fn validate_events(geometry: SensorGeometry, events: &[Event], limit: usize) -> ValidationReport {
    let mut report = ValidationReport::default();
    let push = |report: &mut ValidationReport, v: Violation| {
        report.total += 1;
        if report.violations.len() < limit {
            report.violations.push(v);
        }
    };
    let mut previous: Option<u64> = None;
    for (index, e) in events.iter().enumerate() {
        if let Some(prev) = previous {
            if e.t < prev {
                push(&mut report, Violation { index, kind: ViolationKind::Ordering { previous: prev, current: e.t } });
            }
        }
        if !geometry.contains(e.x, e.y) {
            push(&mut report, Violation { index, kind: ViolationKind::Bounds { x: e.x, y: e.y } });
        }
        previous = Some(e.t);
    }
    report
}

pub fn validate_stream(stream: &EventStream, limit: usize) -> ValidationReport {
    validate_events(stream.geometry, &stream.events, limit)
}

/// `t_last - t_first`, or 0 for an empty stream.
pub fn stream_duration(stream: &EventStream) -> u64 {
    match (stream.events.first(), stream.events.last()) {
        (Some(first), Some(last)) => last.t.saturating_sub(first.t),
        _ => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geo(w: u16, h: u16) -> SensorGeometry {
        SensorGeometry::new(w, h).unwrap()
    }

    fn ev(t: u64, x: u16, y: u16) -> Event {
        Event::new(t, x, y, Polarity::On)
    }

    #[test]
    fn polarity_bits() {
        assert_eq!(Polarity::On.as_bit(), 1);
        assert_eq!(Polarity::Off.as_bit(), 0);
        assert_eq!(Polarity::from_bit(1), Some(Polarity::On));
        assert_eq!(Polarity::from_bit(2), None);
    }

    #[test]
    fn zero_geometry_rejected() {
        assert!(SensorGeometry::new(0, 5).is_err());
        assert!(SensorGeometry::new(5, 0).is_err());
        assert_eq!(geo(3, 2).pixel_count(), 6);
        assert_eq!(geo(3, 2).index(2, 1), 5);
    }

    #[test]
    fn empty_stream_is_valid() {
        let s = EventStream::empty(geo(4, 4));
        assert!(validate_stream(&s, DEFAULT_VIOLATION_LIMIT).is_ok());
    }

    #[test]
    fn ordering_violation_reported_at_index() {
        let s = EventStream::new_unchecked(geo(4, 4), vec![ev(5, 0, 0), ev(3, 0, 0)]);
        let r = validate_stream(&s, DEFAULT_VIOLATION_LIMIT);
        assert_eq!(r.total, 1);
        assert_eq!(r.violations[0].index, 1);
        assert!(matches!(r.violations[0].kind, ViolationKind::Ordering { previous: 5, current: 3 }));
        assert!(EventStream::new(geo(4, 4), vec![ev(5, 0, 0), ev(3, 0, 0)]).is_err());
    }

    #[test]
    fn bounds_violation_at_width() {
        let s = EventStream::new_unchecked(geo(4, 4), vec![ev(0, 4, 0)]);
        let r = validate_stream(&s, DEFAULT_VIOLATION_LIMIT);
        assert_eq!(r.violations[0].kind, ViolationKind::Bounds { x: 4, y: 0 });
    }

    #[test]
    fn equal_timestamps_allowed() {
        assert!(EventStream::new(geo(2, 2), vec![ev(7, 0, 0), ev(7, 1, 1)]).is_ok());
    }

    #[test]
    fn report_is_limited_but_counts_everything() {
        let events: Vec<_> = (0..30).map(|i| ev(100 - i, 0, 0)).collect();
        let r = validate_events(geo(1, 1), &events, 10);
        assert_eq!(r.violations.len(), 10);
        assert_eq!(r.total, 29);
    }

    #[test]
    fn durations() {
        let g = geo(2, 2);
        assert_eq!(stream_duration(&EventStream::empty(g)), 0);
        assert_eq!(stream_duration(&EventStream::new(g, vec![ev(42, 0, 0)]).unwrap()), 0);
        assert_eq!(stream_duration(&EventStream::new(g, vec![ev(100, 0, 0), ev(600, 1, 0)]).unwrap()), 500);
        let events: Vec<_> = (0..1000u64).map(|k| ev(k * 10, 0, 0)).collect();
        // direct arithmetic: 999 * 10
        assert_eq!(stream_duration(&EventStream::new(g, events).unwrap()), 9990);
    }

    #[test]
    fn label_length_checked() {
        let s = EventStream::new(geo(2, 2), vec![ev(1, 0, 0)]).unwrap();
        assert!(s.clone().with_labels(vec![]).is_err());
        assert!(s.with_labels(vec![Label::Edge]).unwrap().is_labeled());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn valid_streams_are_prefix_closed(
                deltas in proptest::collection::vec((0u64..50, 0u16..8, 0u16..8), 0..200),
                cut in 0usize..200,
            ) {
                let mut t = 0;
                let events: Vec<_> = deltas.iter().map(|&(dt, x, y)| { t += dt; ev(t, x, y) }).collect();
                let s = EventStream::new(geo(8, 8), events).unwrap();
                prop_assert!(validate_stream(&s.prefix(cut), 10).is_ok());
            }
        }
    }
}
