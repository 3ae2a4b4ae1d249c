//! Deterministic discrete-event simulation: scenario config, synthetic
//! host fleets, the event loop, and run metrics.

pub mod engine;
pub mod event;
pub mod hostmodel;
pub mod metrics;
pub mod scenario;

pub use engine::run;
pub use metrics::{Metrics, StatSummary};
pub use scenario::{parse_with_overrides, ConfigError, Scenario};
