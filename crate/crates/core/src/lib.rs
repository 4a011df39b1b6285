//! Energy estimation for software video encoding from processor-event counts.
//!
//! The crate ingests cachegrind/callgrind profiles, reads the CPU's cumulative
//! energy counters, fits per-preset linear energy models on relative residuals,
//! evaluates them with cross-validated MAPE and confidence intervals, and
//! attributes estimated energy to encoder sub-processes.

pub mod attribution;
pub mod dataset;
pub mod eval;
pub mod events;
pub mod model;
pub mod pipeline;
pub mod power;
pub mod profile;
pub mod solver;
pub mod synth;

pub use events::{EventId, EventVector};
pub use model::{EnergyModel, ModelMode, Preset};
