//! Counterfactual interventions applied on a step schedule.
//!
//! A [`ScenarioPlan`] lists interventions, each active over an inclusive
//! step range. Context injections add text to every decision prompt,
//! hotspot policing redirects patrols toward cells with more simulated
//! crime, and offender removal arrests the most active criminals after each
//! step.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ids::AgentId;
use crate::population::{AgentKind, HistoryEvent, Population};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read scenario `{path}`: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid scenario JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("intervention {index}: {reason}")]
    Invalid { index: usize, reason: String },
}

/// Inclusive `[start, end]` step range, written as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRange(pub u32, pub u32);

impl StepRange {
    pub fn contains(&self, step: u32) -> bool {
        self.0 <= step && step <= self.1
    }
}

fn default_epsilon() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    ContextInjection {
        text: String,
    },
    HotspotPolicing {
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    OffenderRemoval {
        k: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    #[serde(flatten)]
    pub action: Action,
    pub steps: StepRange,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScenarioPlan {
    pub name: String,
    #[serde(default)]
    pub interventions: Vec<Intervention>,
}

impl ScenarioPlan {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    /// Checks ranges against a run of `steps` steps and per-kind parameters.
    pub fn validate(&self, steps: u32) -> Result<(), ScenarioError> {
        for (index, iv) in self.interventions.iter().enumerate() {
            let bad = |reason: String| Err(ScenarioError::Invalid { index, reason });
            let StepRange(a, b) = iv.steps;
            if a < 1 || b < a || b > steps {
                return bad(format!("step range [{a}, {b}] must lie within [1, {steps}] with start <= end"));
            }
            match &iv.action {
                Action::ContextInjection { text } if text.trim().is_empty() => {
                    return bad("context_injection text must be non-empty".into())
                }
                Action::HotspotPolicing { epsilon } if !(*epsilon > 0.0 && epsilon.is_finite()) => {
                    return bad(format!("hotspot_policing epsilon must be positive, got {epsilon}"))
                }
                Action::OffenderRemoval { k: 0 } => return bad("offender_removal k must be >= 1".into()),
                _ => {}
            }
        }
        Ok(())
    }

    fn active(&self, step: u32) -> impl Iterator<Item = &Action> {
        self.interventions.iter().filter(move |iv| iv.steps.contains(step)).map(|iv| &iv.action)
    }

    /// Smoothing constant of the first active hotspot-policing intervention.
    pub fn hotspot_policing(&self, step: u32) -> Option<f64> {
        self.active(step).find_map(|a| match a {
            Action::HotspotPolicing { epsilon } => Some(*epsilon),
            _ => None,
        })
    }

    /// Arrest quota after `step`: the sum over active removals.
    pub fn removal_quota(&self, step: u32) -> usize {
        self.active(step)
            .map(|a| match a {
                Action::OffenderRemoval { k } => *k,
                _ => 0,
            })
            .sum()
    }
}

/// Active injection texts at `step`, in plan order.
pub fn context_overlays(plan: &ScenarioPlan, step: u32) -> Vec<String> {
    plan.active(step)
        .filter_map(|a| match a {
            Action::ContextInjection { text } => Some(text.clone()),
            _ => None,
        })
        .collect()
}

/// Patrol weights `(count + epsilon)`, normalised to sum to one.
pub fn hotspot_policing_weights(counts: &[u64], epsilon: f64) -> Vec<f64> {
    let raw: Vec<f64> = counts.iter().map(|&c| c as f64 + epsilon).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Arrests up to `k` active criminals with the most crimes this run, ties by
/// ascending id. Criminals without crimes are never arrested.
pub fn arrest_top_offenders(population: &mut Population, k: usize, step: u32) -> Vec<AgentId> {
    let mut candidates: Vec<(u32, usize)> = population
        .agents()
        .iter()
        .enumerate()
        .filter(|(_, a)| a.kind() == AgentKind::Criminal && a.is_active() && a.state.crimes_committed > 0)
        .map(|(i, a)| (a.state.crimes_committed, i))
        .collect();
    // Agents are stored in id order, so position breaks ties by id.
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    candidates.truncate(k);
    candidates.sort_by_key(|&(_, i)| i);
    let agents = population.agents_mut();
    candidates
        .into_iter()
        .map(|(_, i)| {
            let a = &mut agents[i];
            a.state.arrested = true;
            a.state.history.push(HistoryEvent::Arrested { step });
            a.profile.agent_id.clone()
        })
        .collect()
}
