//! Online downsampling of event-camera streams.
//!
//! Three per-event policies share one budget-capped driver:
//!
//! * `deterministic`: keep events whose phase in a short cycle `T_w` falls in
//!   the first `alpha * T_w` microseconds;
//! * `uniform`: keep each event independently with probability `alpha`;
//! * `poisson`: keep each event with a per-pixel probability derived from the
//!   previous window's Poisson event-importance map, so that pixels with
//!   structured activity (edges) survive preferentially.
//!
//! The cap drops any event arriving while the running retained/processed
//! ratio exceeds `alpha`. Decisions are online: an event is only ever judged
//! against events that came before its window.

pub mod epdf;
pub mod event;
pub mod evio;
pub mod metrics;
pub mod pipeline;
pub mod sampler;
pub mod synth;

pub use epdf::{DensityMap, EPdf, PriorMap, ScoreMap, SigmoidParams};
pub use event::{Event, EventStream, Label, Polarity, SensorGeometry};
pub use pipeline::{run, DecisionRecord, Downsampler, RunOutput, RunStats};
pub use sampler::{Alpha, Decision, Method, Outcome, SamplerConfig};
