//! The discrete-time step loop.
//!
//! Each step runs scenario pre-step hooks, moves every active agent,
//! snapshots guardianship, evaluates one decision per active criminal
//! against that snapshot, applies the resulting crimes serially in agent-id
//! order and finally runs post-step hooks such as arrests.

mod artifacts;
mod config;
mod replay;
mod run;

pub use artifacts::{read_events, read_run_dir, write_events, write_run_dir, RunFiles};
pub use config::{CityRef, FieldError, MobilityConfig, RunConfig, ScenarioRef};
pub use replay::{replay, Divergence, ReplayReport};
pub use run::{guardianship_snapshot, run, run_in, RunDeps, Simulator};

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::decision::DecisionError;
use crate::env::{CrimeDistribution, EnvError};
use crate::gateway::TranscriptEntry;
use crate::ids::{AgentId, CellId};
use crate::population::PopulationError;
use crate::scenario::ScenarioError;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid run config: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Config(Vec<FieldError>),
    #[error("cannot access `{path}`: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Population(#[from] PopulationError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Decision(#[from] DecisionError),
    #[error("invalid fixture `{path}`: {message}")]
    Fixture { path: String, message: String },
    #[error("run has no city: set `city` in the config or supply an environment")]
    NoCity,
    #[error("llm replay needs the recorded transcript, which is missing")]
    TranscriptMissing,
    #[error("the llm engine needs the `http` feature or an injected gateway")]
    NoTransport,
    #[error("malformed artifact `{path}`: {message}")]
    Artifact { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CrimeEvent {
    pub step: u32,
    pub cell_id: CellId,
    pub criminal_id: AgentId,
    pub target_id: String,
    pub reasoning: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub decisions: u64,
    pub parse_failures: u64,
    pub invalid_targets: u64,
    pub transport_errors: u64,
    pub arrests: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrestRecord {
    pub step: u32,
    pub agent_id: AgentId,
}

/// Result of one run. Events and the transcript are stored in their own
/// JSONL files and are skipped when the summary is serialised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutput {
    #[serde(skip)]
    pub events: Vec<CrimeEvent>,
    pub per_cell_counts: CrimeDistribution,
    /// Index `t - 1` holds the count for step `t`.
    pub per_step_counts: Vec<u64>,
    pub diagnostics: Diagnostics,
    #[serde(default)]
    pub arrests: Vec<ArrestRecord>,
    pub config_echo: RunConfig,
    pub seed: u64,
    pub engine: String,
    /// False when the run aborted early.
    pub complete: bool,
    pub steps_completed: u32,
    #[serde(default)]
    pub notes: Vec<String>,
    #[serde(skip)]
    pub transcript: Vec<TranscriptEntry>,
}

impl SimulationOutput {
    pub fn total(&self) -> u64 {
        self.events.len() as u64
    }

    /// Events per criminal.
    pub fn offender_counts(&self) -> BTreeMap<&AgentId, u64> {
        let mut m = BTreeMap::new();
        for e in &self.events {
            *m.entry(&e.criminal_id).or_insert(0) += 1;
        }
        m
    }
}
