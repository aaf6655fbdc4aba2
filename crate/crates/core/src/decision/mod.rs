//! Criminal decision-making.
//!
//! Every engine maps a [`DecisionContext`] to a [`CrimeDecision`]. The
//! context gathers the three routine-activity ingredients for one criminal
//! at one step: motivation (profile and history), suitable targets
//! (co-located citizens) and guardianship (same-cell police, perceived
//! safety and the cell description).

mod context;
mod engine;
mod parse;
mod template;

pub use context::{assemble_context, Ablation, CellView, CityMeta, CriminalView, DecisionContext, TargetView, TRAJECTORY_LEN};
pub use engine::{
    property_target, Engine, EngineConfig, LlmEngine, RuleEngine, ScriptedDecision, ScriptedEngine, StepInfo, DEFAULT_DETERRENCE,
    DEFAULT_P_BASE,
};
pub use parse::parse_decision;
pub use template::{render_prompt, PromptTemplate, RenderError, RenderedPrompt};

use serde::{Deserialize, Serialize};

use crate::ids::AgentId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrimeDecision {
    pub commit: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_id: Option<AgentId>,
    #[serde(default)]
    pub reasoning: String,
}

impl CrimeDecision {
    pub fn no_crime(reasoning: impl Into<String>) -> Self {
        CrimeDecision { commit: false, target_id: None, reasoning: reasoning.into() }
    }

    pub fn crime(target: impl Into<AgentId>, reasoning: impl Into<String>) -> Self {
        CrimeDecision { commit: true, target_id: Some(target.into()), reasoning: reasoning.into() }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DecisionError {
    #[error("no parsable decision object: {0}")]
    ParseFailure(String),
    #[error("decision names target {0:?}, which is not among the potential targets")]
    InvalidTarget(Option<String>),
    #[error("decision engine unavailable: {0}")]
    EngineUnavailable(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("criminal is at unknown cell `{0}`")]
    UnknownCell(String),
}
