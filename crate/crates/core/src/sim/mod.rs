//! Deterministic discrete-event simulation primitives: the virtual clock
//! and event queue, per-link loss/latency models, seeded random streams and
//! the scenario file format.

mod link;
mod queue;
mod rng;
mod scenario;

pub use link::{link_transmit, LinkModel, Topology, Transmission};
pub use queue::{EventQueue, RunStats, Scheduler, SimError, SimEvent, SimTime};
pub use rng::RngStreams;
pub use scenario::{ChurnSpec, ConfigError, ExperimentSpec, LinkSpec, NodeSpec, ScenarioConfig};
