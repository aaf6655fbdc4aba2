use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::CityEnvironment;
use crate::gateway::{Gateway, TranscriptTransport};

use super::{CrimeEvent, RunConfig, RunDeps, SimError, SimulationOutput, Simulator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    /// Position in the event log.
    pub index: usize,
    pub step: u32,
    pub expected: Option<CrimeEvent>,
    pub actual: Option<CrimeEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub identical: bool,
    pub events_compared: usize,
    pub first_divergence: Option<Divergence>,
}

/// First position where two event logs differ.
pub fn diff_events(expected: &[CrimeEvent], actual: &[CrimeEvent]) -> Option<Divergence> {
    let n = expected.len().max(actual.len());
    (0..n).find(|&i| expected.get(i) != actual.get(i)).map(|index| {
        let (e, a) = (expected.get(index).cloned(), actual.get(index).cloned());
        let step = match (&e, &a) {
            (Some(x), Some(y)) => x.step.min(y.step),
            (Some(x), None) | (None, Some(x)) => x.step,
            (None, None) => 0,
        };
        Divergence { index, step, expected: e, actual: a }
    })
}

/// Re-executes `config` and compares the event log with `output`. Runs of
/// the llm engine are answered from the recorded transcript.
pub fn replay(env: &CityEnvironment, output: &SimulationOutput, config: &RunConfig) -> Result<ReplayReport, SimError> {
    let mut deps = RunDeps::default();
    if config.engine.is_llm() {
        if output.transcript.is_empty() {
            return Err(SimError::TranscriptMissing);
        }
        let transport = Arc::new(TranscriptTransport::new(output.transcript.iter().cloned()));
        let gw = Gateway::new(transport, config.gateway.clone().unwrap_or_default());
        deps.gateway = Some(Arc::new(gw));
    }
    let fresh = Simulator::new(env, config.clone(), deps)?.run()?;
    let first_divergence = diff_events(&output.events, &fresh.events);
    Ok(ReplayReport {
        identical: first_divergence.is_none(),
        events_compared: output.events.len().max(fresh.events.len()),
        first_divergence,
    })
}
