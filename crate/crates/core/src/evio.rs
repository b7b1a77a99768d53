//! File formats: CSV and binary event streams, prior grids, decision logs
//! and the stats document.
//!
//! CSV event files start with the header `t,x,y,p` (or `t,x,y,p,label`),
//! then one `t,x,y,p[,E|N]` row per event in decimal, no padding.
//!
//! Binary event files (all little-endian):
//!
//! ```text
//! "EVDN"  version:u8=1  width:u16  height:u16  count:u64
//! count * { t:u64  x:u16  y:u16  p:u8 }
//! ```

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::epdf::{EpdfError, PriorMap};
use crate::event::{validate_events, Event, EventStream, Label, Polarity, SensorGeometry, ViolationKind};
use crate::metrics::SelectivityReport;
use crate::pipeline::{DecisionRecord, RunStats};
use crate::sampler::Outcome;

pub const BINARY_MAGIC: &[u8; 4] = b"EVDN";
pub const BINARY_VERSION: u8 = 1;
pub const BINARY_HEADER_LEN: usize = 17;
pub const BINARY_RECORD_LEN: usize = 13;

const CSV_HEADER: &str = "t,x,y,p";
const CSV_HEADER_LABELED: &str = "t,x,y,p,label";
const LOG_HEADER: &str = "index,t,decision,probability,window";

#[derive(Debug, Error)]
pub enum EvioError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Stream(io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("not an EVDN file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported EVDN version {0}")]
    Version(u8),
    #[error("truncated file: record {record} of {count} incomplete at byte offset {offset}")]
    Truncated { offset: u64, record: u64, count: u64 },
    #[error("{extra} trailing bytes after {count} records")]
    TrailingBytes { count: u64, extra: u64 },
    #[error("record {record} at byte offset {offset}: polarity byte {value} is not 0 or 1")]
    BadPolarity { offset: u64, record: u64, value: u8 },
    #[error("event {index}: timestamp {current} precedes previous timestamp {previous}")]
    Ordering { index: usize, previous: u64, current: u64 },
    #[error("event {index}: pixel ({x}, {y}) outside the {geometry} sensor")]
    Bounds { index: usize, x: u16, y: u16, geometry: SensorGeometry },
    #[error("invalid sensor geometry {0}x{1}")]
    Geometry(u32, u32),
    #[error("prior is {actual_w}x{actual_h} but the sensor is {expected}")]
    PriorDimensions { expected: SensorGeometry, actual_w: usize, actual_h: usize },
    #[error("prior row {row}, column {col}: {message}")]
    PriorValue { row: usize, col: usize, message: String },
    #[error("prior: {0}")]
    Prior(#[from] EpdfError),
    #[error("stats: {0}")]
    Json(#[from] serde_json::Error),
}

impl EvioError {
    /// True when the failure comes from the filesystem rather than content.
    pub fn is_io(&self) -> bool {
        matches!(self, EvioError::Io { .. } | EvioError::Stream(_))
    }
}

fn with_path(path: &Path) -> impl FnOnce(io::Error) -> EvioError + '_ {
    move |source| EvioError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Binary,
}

impl Format {
    /// `.bin`/`.evdn` → binary, anything else CSV.
    pub fn from_extension(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
            Some(e) if e == "bin" || e == "evdn" => Format::Binary,
            _ => Format::Csv,
        }
    }

    /// Magic bytes first, extension as fallback.
    pub fn detect(path: &Path) -> Result<Format, EvioError> {
        let mut head = [0u8; 4];
        let mut f = File::open(path).map_err(with_path(path))?;
        let mut filled = 0;
        while filled < head.len() {
            match f.read(&mut head[filled..]).map_err(with_path(path))? {
                0 => break,
                n => filled += n,
            }
        }
        if filled == 4 && &head == BINARY_MAGIC {
            Ok(Format::Binary)
        } else {
            Ok(Format::from_extension(path))
        }
    }
}

fn check_stream(geometry: SensorGeometry, events: &[Event]) -> Result<(), EvioError> {
    match validate_events(geometry, events, 1).first() {
        None => Ok(()),
        Some(v) => Err(match v.kind {
            ViolationKind::Ordering { previous, current } => EvioError::Ordering { index: v.index, previous, current },
            ViolationKind::Bounds { x, y } => EvioError::Bounds { index: v.index, x, y, geometry },
        }),
    }
}

fn parse_field<T: std::str::FromStr>(raw: &[u8], line: u64, name: &str) -> Result<T, EvioError> {
    std::str::from_utf8(raw).ok().and_then(|s| s.parse().ok()).ok_or_else(|| EvioError::Malformed {
        line,
        message: format!("bad {name} field {:?}", String::from_utf8_lossy(raw)),
    })
}

/// Reads a CSV event file. Without `geometry` the sensor is sized to the
/// largest coordinates present (an empty file gives 1x1).
pub fn read_csv<R: Read>(reader: R, geometry: Option<SensorGeometry>) -> Result<EventStream, EvioError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut record = csv::ByteRecord::new();
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => EvioError::Stream(e),
        other => EvioError::Malformed { line: 0, message: format!("{other:?}") },
    };
    if !rdr.read_byte_record(&mut record).map_err(csv_err)? {
        return Err(EvioError::Malformed { line: 1, message: "missing header".into() });
    }
    let labeled = match &record.iter().collect::<Vec<_>>()[..] {
        [b"t", b"x", b"y", b"p"] => false,
        [b"t", b"x", b"y", b"p", b"label"] => true,
        _ => {
            return Err(EvioError::Malformed {
                line: 1,
                message: format!("expected header {CSV_HEADER:?} or {CSV_HEADER_LABELED:?}"),
            })
        }
    };
    let width = if labeled { 5 } else { 4 };
    let mut events = Vec::new();
    let mut labels = Vec::new();
    while rdr.read_byte_record(&mut record).map_err(csv_err)? {
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(EvioError::Malformed {
                line,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        let t: u64 = parse_field(&record[0], line, "t")?;
        let x: u16 = parse_field(&record[1], line, "x")?;
        let y: u16 = parse_field(&record[2], line, "y")?;
        let p = match &record[3] {
            b"0" => Polarity::Off,
            b"1" => Polarity::On,
            other => {
                return Err(EvioError::Malformed {
                    line,
                    message: format!("bad p field {:?}", String::from_utf8_lossy(other)),
                })
            }
        };
        events.push(Event::new(t, x, y, p));
        if labeled {
            let label = match &record[4] {
                b"E" => Label::Edge,
                b"N" => Label::Noise,
                other => {
                    return Err(EvioError::Malformed {
                        line,
                        message: format!("bad label {:?}", String::from_utf8_lossy(other)),
                    })
                }
            };
            labels.push(label);
        }
    }
    let geometry = match geometry {
        Some(g) => g,
        None => {
            let w = events.iter().map(|e| e.x as u32 + 1).max().unwrap_or(1);
            let h = events.iter().map(|e| e.y as u32 + 1).max().unwrap_or(1);
            if w > u16::MAX as u32 || h > u16::MAX as u32 {
                return Err(EvioError::Geometry(w, h));
            }
            SensorGeometry::new(w as u16, h as u16).expect("non-zero")
        }
    };
    check_stream(geometry, &events)?;
    let stream = EventStream::new_unchecked(geometry, events);
    Ok(if labeled { stream.with_labels(labels).expect("one label per row") } else { stream })
}

/// Canonical CSV encoding; the label column appears iff the stream is labeled.
pub fn write_csv<W: Write>(stream: &EventStream, writer: W) -> io::Result<()> {
    let mut w = BufWriter::new(writer);
    match stream.labels() {
        None => {
            writeln!(w, "{CSV_HEADER}")?;
            for e in stream.events() {
                writeln!(w, "{},{},{},{}", e.t, e.x, e.y, e.p.as_bit())?;
            }
        }
        Some(labels) => {
            writeln!(w, "{CSV_HEADER_LABELED}")?;
            for (e, l) in stream.events().iter().zip(labels) {
                writeln!(w, "{},{},{},{},{}", e.t, e.x, e.y, e.p.as_bit(), l.as_char())?;
            }
        }
    }
    w.flush()
}

pub fn read_binary<R: Read>(mut reader: R) -> Result<EventStream, EvioError> {
    let mut buf = Vec::new();
    reader.read_to_end(&mut buf).map_err(EvioError::Stream)?;
    decode_binary(&buf)
}

pub fn decode_binary(buf: &[u8]) -> Result<EventStream, EvioError> {
    if buf.len() < 4 || &buf[..4] != BINARY_MAGIC {
        return Err(EvioError::BadMagic);
    }
    if buf.len() < BINARY_HEADER_LEN {
        return Err(EvioError::Truncated { offset: buf.len() as u64, record: 0, count: 0 });
    }
    if buf[4] != BINARY_VERSION {
        return Err(EvioError::Version(buf[4]));
    }
    let width = u16::from_le_bytes([buf[5], buf[6]]);
    let height = u16::from_le_bytes([buf[7], buf[8]]);
    let count = u64::from_le_bytes(buf[9..17].try_into().unwrap());
    let geometry = SensorGeometry::new(width, height).map_err(|_| EvioError::Geometry(width as u32, height as u32))?;
    let payload = &buf[BINARY_HEADER_LEN..];
    let full = (payload.len() / BINARY_RECORD_LEN) as u64;
    if full < count {
        return Err(EvioError::Truncated {
            offset: (BINARY_HEADER_LEN as u64) + full * BINARY_RECORD_LEN as u64,
            record: full + 1,
            count,
        });
    }
    let used = count as usize * BINARY_RECORD_LEN;
    if payload.len() > used {
        return Err(EvioError::TrailingBytes { count, extra: (payload.len() - used) as u64 });
    }
    let mut events = Vec::with_capacity(count as usize);
    for (i, rec) in payload.chunks_exact(BINARY_RECORD_LEN).enumerate() {
        let t = u64::from_le_bytes(rec[..8].try_into().unwrap());
        let x = u16::from_le_bytes([rec[8], rec[9]]);
        let y = u16::from_le_bytes([rec[10], rec[11]]);
        let p = Polarity::from_bit(rec[12]).ok_or(EvioError::BadPolarity {
            offset: (BINARY_HEADER_LEN + i * BINARY_RECORD_LEN + 12) as u64,
            record: i as u64 + 1,
            value: rec[12],
        })?;
        events.push(Event::new(t, x, y, p));
    }
    check_stream(geometry, &events)?;
    Ok(EventStream::new_unchecked(geometry, events))
}

/// Binary encoding. Labels are not stored.
pub fn write_binary<W: Write>(stream: &EventStream, writer: W) -> io::Result<()> {
    let mut w = BufWriter::new(writer);
    let g = stream.geometry();
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&[BINARY_VERSION])?;
    w.write_all(&g.width().to_le_bytes())?;
    w.write_all(&g.height().to_le_bytes())?;
    w.write_all(&(stream.len() as u64).to_le_bytes())?;
    let mut rec = [0u8; BINARY_RECORD_LEN];
    for e in stream.events() {
        rec[..8].copy_from_slice(&e.t.to_le_bytes());
        rec[8..10].copy_from_slice(&e.x.to_le_bytes());
        rec[10..12].copy_from_slice(&e.y.to_le_bytes());
        rec[12] = e.p.as_bit();
        w.write_all(&rec)?;
    }
    w.flush()
}

/// Reads an event file. `format: None` detects it from magic bytes or the
/// extension; `geometry` only applies to CSV.
pub fn read_events(
    path: &Path,
    format: Option<Format>,
    geometry: Option<SensorGeometry>,
) -> Result<EventStream, EvioError> {
    let format = match format {
        Some(f) => f,
        None => Format::detect(path)?,
    };
    let file = File::open(path).map_err(with_path(path))?;
    let reader = BufReader::with_capacity(1 << 16, file);
    let result = match format {
        Format::Csv => read_csv(reader, geometry),
        Format::Binary => read_binary(reader),
    };
    result.map_err(|e| match e {
        EvioError::Stream(source) => EvioError::Io { path: path.to_path_buf(), source },
        other => other,
    })
}

pub fn write_events(stream: &EventStream, path: &Path, format: Format) -> Result<(), EvioError> {
    let file = File::create(path).map_err(with_path(path))?;
    match format {
        Format::Csv => write_csv(stream, file),
        Format::Binary => write_binary(stream, file),
    }
    .map_err(with_path(path))
}

/// Parses a prior grid: `width height`, then `height` rows of `width`
/// whitespace-separated values, row 0 on top. Rows and columns in errors
/// are 0-based.
pub fn parse_prior<R: BufRead>(reader: R, geometry: SensorGeometry) -> Result<PriorMap, EvioError> {
    let mut lines = reader.lines().enumerate().filter_map(|(i, l)| match l {
        Ok(l) if l.trim().is_empty() => None,
        other => Some((i as u64 + 1, other)),
    });
    let (line, header) = match lines.next() {
        Some((n, l)) => (n, l.map_err(EvioError::Stream)?),
        None => return Err(EvioError::Malformed { line: 1, message: "empty prior file".into() }),
    };
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|s| s.parse())
        .collect::<Result<_, _>>()
        .map_err(|_| EvioError::Malformed { line, message: format!("bad dimensions line {header:?}") })?;
    let [w, h] = dims[..] else {
        return Err(EvioError::Malformed { line, message: format!("bad dimensions line {header:?}") });
    };
    if w != geometry.width() as usize || h != geometry.height() as usize {
        return Err(EvioError::PriorDimensions { expected: geometry, actual_w: w, actual_h: h });
    }
    let mut weights = Vec::with_capacity(w * h);
    for row in 0..h {
        let (_, text) =
            lines.next().ok_or_else(|| EvioError::PriorValue { row, col: 0, message: "missing row".into() })?;
        let text = text.map_err(EvioError::Stream)?;
        let mut cols = 0;
        for (col, tok) in text.split_whitespace().enumerate() {
            let v: f64 = tok.parse().map_err(|_| EvioError::PriorValue {
                row,
                col,
                message: format!("not a number: {tok:?}"),
            })?;
            if !v.is_finite() || v < 0.0 {
                return Err(EvioError::PriorValue {
                    row,
                    col,
                    message: format!("value {tok} must be finite and >= 0"),
                });
            }
            if col >= w {
                return Err(EvioError::PriorValue { row, col, message: format!("more than {w} values") });
            }
            weights.push(v);
            cols += 1;
        }
        if cols != w {
            return Err(EvioError::PriorValue {
                row,
                col: cols,
                message: format!("expected {w} values, found {cols}"),
            });
        }
    }
    if let Some((line, _)) = lines.next() {
        return Err(EvioError::Malformed { line, message: format!("more than {h} rows") });
    }
    Ok(PriorMap::new(geometry, weights)?)
}

pub fn read_prior(path: &Path, geometry: SensorGeometry) -> Result<PriorMap, EvioError> {
    let file = File::open(path).map_err(with_path(path))?;
    parse_prior(BufReader::new(file), geometry).map_err(|e| match e {
        EvioError::Stream(source) => EvioError::Io { path: path.to_path_buf(), source },
        other => other,
    })
}

/// Writes any row-major grid in the prior file layout.
pub fn write_grid<W: Write>(geometry: SensorGeometry, values: &[f64], writer: W) -> io::Result<()> {
    let mut w = BufWriter::new(writer);
    writeln!(w, "{} {}", geometry.width(), geometry.height())?;
    for row in values.chunks(geometry.width() as usize) {
        let mut first = true;
        for v in row {
            if !first {
                w.write_all(b" ")?;
            }
            first = false;
            write!(w, "{v}")?;
        }
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn write_prior<W: Write>(prior: &PriorMap, writer: W) -> io::Result<()> {
    write_grid(prior.geometry(), prior.weights(), writer)
}

/// One CSV row per event: `index,t,decision,probability,window`. Decisions
/// are `A` (accept), `R` (sampler reject), `C` (capped); a missing
/// probability is written as `-1`. Probabilities use the shortest decimal
/// that parses back to the same double.
pub fn write_decision_log<W: Write>(log: &[DecisionRecord], writer: W) -> io::Result<()> {
    let mut w = BufWriter::new(writer);
    writeln!(w, "{LOG_HEADER}")?;
    for r in log {
        write!(w, "{},{},{},", r.index, r.t, r.outcome.code())?;
        match r.probability {
            Some(p) => write!(w, "{p}")?,
            None => w.write_all(b"-1")?,
        }
        writeln!(w, ",{}", r.window)?;
    }
    w.flush()
}

pub fn read_decision_log<R: BufRead>(reader: R) -> Result<Vec<DecisionRecord>, EvioError> {
    let mut lines = reader.lines();
    match lines.next() {
        Some(Ok(h)) if h == LOG_HEADER => {}
        Some(Err(e)) => return Err(EvioError::Stream(e)),
        _ => return Err(EvioError::Malformed { line: 1, message: format!("expected header {LOG_HEADER:?}") }),
    }
    let mut out = Vec::new();
    for (i, l) in lines.enumerate() {
        let line = i as u64 + 2;
        let l = l.map_err(EvioError::Stream)?;
        let f: Vec<&str> = l.split(',').collect();
        let bad = |what: &str| EvioError::Malformed { line, message: format!("bad {what}") };
        if f.len() != 5 {
            return Err(bad("field count"));
        }
        let mut code = f[2].chars();
        let outcome = match (code.next(), code.next()) {
            (Some(c), None) => Outcome::from_code(c).ok_or_else(|| bad("decision"))?,
            _ => return Err(bad("decision")),
        };
        let probability = match f[3] {
            "-1" => None,
            s => Some(s.parse::<f64>().map_err(|_| bad("probability"))?),
        };
        out.push(DecisionRecord {
            index: f[0].parse().map_err(|_| bad("index"))?,
            t: f[1].parse().map_err(|_| bad("t"))?,
            outcome,
            probability,
            window: f[4].parse().map_err(|_| bad("window"))?,
        });
    }
    Ok(out)
}

/// Keys every stats document carries.
pub const STATS_KEYS: [&str; 11] = [
    "alpha",
    "method",
    "seed",
    "processed",
    "retained",
    "capped",
    "ratio",
    "per_window_ratios",
    "ms_per_kev_total",
    "ms_per_kev_pdf",
    "ms_per_kev_eval",
];

/// Run summary. Fields that do not apply (e.g. the method when comparing two
/// files) are `null`; extra measurements go in `extra`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsDocument {
    pub alpha: Option<f64>,
    pub method: Option<String>,
    pub seed: Option<u64>,
    pub processed: u64,
    pub retained: u64,
    pub capped: Option<u64>,
    pub ratio: f64,
    pub per_window_ratios: Vec<f64>,
    pub ms_per_kev_total: f64,
    pub ms_per_kev_pdf: f64,
    pub ms_per_kev_eval: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selectivity: Option<SelectivityReport>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl StatsDocument {
    pub fn from_run(stats: &RunStats, selectivity: Option<SelectivityReport>) -> Self {
        let timing = stats.timing_report();
        Self {
            alpha: Some(stats.alpha.get()),
            method: Some(stats.method.name().to_string()),
            seed: Some(stats.seed),
            processed: stats.processed,
            retained: stats.retained,
            capped: Some(stats.capped),
            ratio: stats.ratio(),
            per_window_ratios: stats.per_window_ratios(),
            ms_per_kev_total: timing.total,
            ms_per_kev_pdf: timing.pdf,
            ms_per_kev_eval: timing.eval,
            selectivity,
            extra: serde_json::Map::new(),
        }
    }
}

pub fn write_stats<W: Write>(doc: &StatsDocument, writer: W) -> Result<(), EvioError> {
    let mut w = BufWriter::new(writer);
    serde_json::to_writer_pretty(&mut w, doc)?;
    w.write_all(b"\n").map_err(EvioError::Stream)?;
    w.flush().map_err(EvioError::Stream)
}

pub fn write_stats_file(doc: &StatsDocument, path: &Path) -> Result<(), EvioError> {
    let file = File::create(path).map_err(with_path(path))?;
    write_stats(doc, file).map_err(|e| match e {
        EvioError::Stream(source) => EvioError::Io { path: path.to_path_buf(), source },
        other => other,
    })
}

/// Names of required keys missing from a parsed stats document.
pub fn missing_stats_keys(doc: &serde_json::Value) -> Vec<&'static str> {
    STATS_KEYS.iter().copied().filter(|k| doc.get(k).is_none()).collect()
}
