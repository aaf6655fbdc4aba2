//! Agent-based urban crime simulation.
//!
//! The crate is organised around the simulation pipeline:
//!
//! * [`env`] builds the gridded city (cells, static features, adjacency) and
//!   turns crime records into per-cell distributions and hotspot sets.
//! * [`population`] samples citizens, criminals and police onto the grid.
//! * [`mobility`] moves agents with exploration and preferential return, and
//!   moves police according to a patrol policy.
//! * [`decision`] assembles routine-activity contexts, renders prompts,
//!   parses model completions and hosts the rule-based engines.
//! * [`gateway`] is the chat-completions transport with bounded concurrency.
//! * [`simulation`] is the step loop; [`scenario`] injects counterfactual
//!   interventions into it.
//! * [`metrics`] compares simulated and observed distributions.
//! * [`perception`] aggregates street-level safety scores and aligns the
//!   scoring prompt with human annotations.
//!
//! Data-parallel inner loops go through [`exec`], which dispatches to rayon
//! when the `parallel` feature is enabled and to plain iterators otherwise.

pub mod decision;
pub mod env;
pub mod exec;
pub mod gateway;
pub mod geo;
pub mod ids;
pub mod metrics;
pub mod mobility;
pub mod perception;
pub mod population;
pub mod rng;
pub mod scenario;
pub mod simulation;
pub mod synthetic;

pub use ids::{AgentId, CellId, CellIdx};
