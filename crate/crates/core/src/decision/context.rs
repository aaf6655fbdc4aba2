use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::env::CityEnvironment;
use crate::ids::{AgentId, CellId};
use crate::population::{Agent, AgentKind};

use super::DecisionError;

/// Number of most recent history events rendered as the trajectory.
pub const TRAJECTORY_LEN: usize = 10;

/// Prompt components that can be switched off for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub rat_structure: bool,
    pub safety_score: bool,
    pub semantic_description: bool,
    pub static_features: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation { rat_structure: true, safety_score: true, semantic_description: true, static_features: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriminalView {
    pub agent_id: AgentId,
    pub gender: String,
    pub race: String,
    pub residence: CellId,
    pub historical_trajectory: Vec<String>,
    pub criminal_record: Vec<String>,
    /// Crimes committed so far in this run.
    pub prior_successes: u32,
    pub current_location: CellId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetView {
    pub agent_id: AgentId,
    pub gender: String,
    pub race: String,
}

/// Raw cell attributes. Ablation hides fields at render time only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellView {
    pub cell_id: CellId,
    pub semantic_description: String,
    pub safety_score: f64,
    pub poi_count: u64,
    pub population: u64,
    pub average_income: f64,
    pub poverty_ratio: f64,
    pub housing_value: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CityMeta {
    pub city: String,
    pub mayor: String,
    pub party: String,
    pub strategy: String,
}

impl CityMeta {
    pub fn from_env(env: &CityEnvironment) -> Self {
        let m = env.metadata();
        let get = |k: &str, d: &str| m.get(k).cloned().unwrap_or_else(|| d.to_owned());
        CityMeta {
            city: get("city", env.name()),
            mayor: get("mayor", "unknown"),
            party: get("party", "unknown"),
            strategy: get("strategy", "unknown"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionContext {
    pub criminal: CriminalView,
    pub targets: Vec<TargetView>,
    pub police_count: u32,
    pub cell: CellView,
    pub city_meta: CityMeta,
    pub overlays: Vec<String>,
    pub ablation: Ablation,
}

impl DecisionContext {
    pub fn has_target(&self, id: &str) -> bool {
        self.targets.iter().any(|t| t.agent_id.as_str() == id)
    }

    /// Placeholder bindings for prompt rendering. Ablated fields are left
    /// unbound.
    pub fn bindings(&self) -> BTreeMap<&'static str, String> {
        let none_if_empty = |v: &[String]| if v.is_empty() { "none".to_owned() } else { v.join(", ") };
        let mut b = BTreeMap::from([
            ("city", self.city_meta.city.clone()),
            ("mayor", self.city_meta.mayor.clone()),
            ("party", self.city_meta.party.clone()),
            ("strategy", self.city_meta.strategy.clone()),
            ("agent_id", self.criminal.agent_id.to_string()),
            ("gender", self.criminal.gender.clone()),
            ("race", self.criminal.race.clone()),
            ("residence", self.criminal.residence.to_string()),
            ("historical_trajectory", none_if_empty(&self.criminal.historical_trajectory)),
            ("criminal_record", none_if_empty(&self.criminal.criminal_record)),
            ("current_location", self.criminal.current_location.to_string()),
            ("target_str", self.target_str()),
            ("police_count", self.police_count.to_string()),
        ]);
        if self.ablation.semantic_description {
            b.insert("desc", self.cell.semantic_description.clone());
        }
        if self.ablation.safety_score {
            b.insert("score", self.cell.safety_score.to_string());
        }
        if self.ablation.static_features {
            b.insert("poi_count", self.cell.poi_count.to_string());
            b.insert("population", self.cell.population.to_string());
            b.insert("income", self.cell.average_income.to_string());
            b.insert("poverty_ratio", self.cell.poverty_ratio.to_string());
            b.insert("housing_value", self.cell.housing_value.to_string());
        }
        b
    }

    /// `agent_id (gender, race)` entries joined by `, `; `none` when empty.
    pub fn target_str(&self) -> String {
        if self.targets.is_empty() {
            return "none".into();
        }
        self.targets.iter().map(|t| format!("{} ({}, {})", t.agent_id, t.gender, t.race)).collect::<Vec<_>>().join(", ")
    }
}

/// Builds the decision context for `criminal` at its current cell.
///
/// `citizens` and `police_count` must describe the criminal's current cell;
/// non-citizens in `citizens` are ignored.
pub fn assemble_context(
    criminal: &Agent,
    env: &CityEnvironment,
    citizens: &[&Agent],
    police_count: u32,
    overlays: &[String],
    ablation: Ablation,
) -> Result<DecisionContext, DecisionError> {
    let loc = criminal.state.location;
    if loc.get() >= env.len() {
        return Err(DecisionError::UnknownCell(format!("#{}", loc.get())));
    }
    let f = env.features(loc);
    let hist = &criminal.state.history;
    let trajectory = hist[hist.len().saturating_sub(TRAJECTORY_LEN)..].iter().map(|h| h.describe(env)).collect();
    Ok(DecisionContext {
        criminal: CriminalView {
            agent_id: criminal.profile.agent_id.clone(),
            gender: criminal.profile.gender.clone(),
            race: criminal.profile.race.clone(),
            residence: env.cell_id(criminal.profile.residence).clone(),
            historical_trajectory: trajectory,
            criminal_record: criminal.profile.criminal_record.clone(),
            prior_successes: criminal.state.crimes_committed,
            current_location: env.cell_id(loc).clone(),
        },
        targets: citizens
            .iter()
            .filter(|a| a.kind() == AgentKind::Citizen && a.is_active())
            .map(|a| TargetView {
                agent_id: a.profile.agent_id.clone(),
                gender: a.profile.gender.clone(),
                race: a.profile.race.clone(),
            })
            .collect(),
        police_count,
        cell: CellView {
            cell_id: env.cell_id(loc).clone(),
            semantic_description: f.semantic_description.clone(),
            safety_score: f.safety_score,
            poi_count: f.poi_count,
            population: f.population,
            average_income: f.average_income,
            poverty_ratio: f.poverty_ratio,
            housing_value: f.housing_value,
        },
        city_meta: CityMeta::from_env(env),
        overlays: overlays.to_vec(),
        ablation,
    })
}
