//! Self-contained drivers for the engine: a seeded reference transformer and
//! scripted synthetic traces.

pub mod driver;
pub mod model;
pub mod trace;

pub use driver::{prefill, run_decode, Driver, ModelDriver, TraceDriver};
pub use model::{AttentionPath, ForwardOutput, ReferenceModel};
pub use trace::{
    generate_needle_trace, invert_confidence, ConfidenceProfile, Needle, Spike, SyntheticTrace, TraceHeader,
    TraceParams, TraceStep,
};
