//! Windowed-commitment multi-agent path finding on 4-connected grids.
//!
//! The [`framework`] loop executes one joint step at a time, learns
//! heuristic penalties for coupled agent groups, and delegates step
//! selection to an [`framework::ActionGenerator`] such as SS-CBS
//! ([`sscbs`]) or windowed CBS ([`wcbs`]).

pub mod framework;
pub mod harness;
pub mod heuristics;
pub mod model;
pub mod oracle;
pub mod scenarios;
pub mod sscbs;
pub mod wcbs;

pub use heuristics::{DistanceField, HeuristicPenalty, PenaltyStore};
pub use model::{AgentId, AgentTask, Configuration, Cost, GridMap, GroupConfiguration, Instance, Location};
