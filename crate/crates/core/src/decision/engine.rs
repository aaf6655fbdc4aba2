use std::collections::HashMap;
use std::io::BufRead;
use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::gateway::{CompletionRequest, Gateway, GatewayError};
use crate::ids::AgentId;

use super::context::DecisionContext;
use super::template::{render_prompt, PromptTemplate};
use super::{parse_decision, CrimeDecision, DecisionError};

pub const DEFAULT_P_BASE: f64 = 0.05;
pub const DEFAULT_DETERRENCE: f64 = 0.5;

fn default_p_base() -> f64 {
    DEFAULT_P_BASE
}
fn default_deterrence() -> f64 {
    DEFAULT_DETERRENCE
}
fn default_model() -> String {
    "qwen2.5-72b-instruct".into()
}
fn default_max_tokens() -> u32 {
    1024
}

/// Engine selection as it appears in a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EngineConfig {
    Random {
        #[serde(default = "default_p_base")]
        p_base: f64,
    },
    Routine {
        #[serde(default = "default_p_base")]
        p_base: f64,
    },
    Hotspot {
        #[serde(default = "default_p_base")]
        p_base: f64,
        #[serde(default = "default_deterrence")]
        deterrence: f64,
    },
    Burglary {
        #[serde(default = "default_p_base")]
        p_base: f64,
    },
    Llm {
        #[serde(default = "default_model")]
        model: String,
        #[serde(default)]
        temperature: f64,
        #[serde(default = "default_max_tokens")]
        max_tokens: u32,
        /// Optional `(system, user)` template file paths replacing the defaults.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        template: Option<(String, String)>,
    },
    Scripted {
        /// JSONL fixture of [`ScriptedDecision`] lines.
        fixture: String,
    },
}

impl EngineConfig {
    pub fn name(&self) -> &'static str {
        match self {
            EngineConfig::Random { .. } => "random",
            EngineConfig::Routine { .. } => "routine",
            EngineConfig::Hotspot { .. } => "hotspot",
            EngineConfig::Burglary { .. } => "burglary",
            EngineConfig::Llm { .. } => "llm",
            EngineConfig::Scripted { .. } => "scripted",
        }
    }

    pub fn rule(&self) -> Option<RuleEngine> {
        Some(match *self {
            EngineConfig::Random { p_base } => RuleEngine::Random { p_base },
            EngineConfig::Routine { p_base } => RuleEngine::Routine { p_base },
            EngineConfig::Hotspot { p_base, deterrence } => RuleEngine::Hotspot { p_base, deterrence },
            EngineConfig::Burglary { p_base } => RuleEngine::Burglary { p_base },
            _ => return None,
        })
    }

    pub fn is_llm(&self) -> bool {
        matches!(self, EngineConfig::Llm { .. })
    }
}

/// Per-step values shared by every decision in the step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepInfo {
    pub step: u32,
    /// Mean of `housing_value / (1 + police)` over all cells this step.
    pub mean_attractiveness: f64,
}

/// Synthetic target token for property crimes.
pub fn property_target(cell: &str) -> String {
    format!("property@{cell}")
}

/// Simplified rule baselines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RuleEngine {
    /// Commit with fixed probability regardless of context.
    Random { p_base: f64 },
    /// Commit only with a target present and no police, probability
    /// `min(1, p_base * targets)`.
    Routine { p_base: f64 },
    /// Routine probability scaled by police deterrence and perceived safety.
    Hotspot { p_base: f64, deterrence: f64 },
    /// Property crime with probability proportional to
    /// `housing_value / (1 + police)`, normalised by the citywide mean.
    Burglary { p_base: f64 },
}

impl RuleEngine {
    /// Commit probability for `ctx`.
    pub fn commit_probability(&self, ctx: &DecisionContext, step: &StepInfo) -> f64 {
        let n = ctx.targets.len() as f64;
        match *self {
            RuleEngine::Random { p_base } => {
                if ctx.targets.is_empty() {
                    0.0
                } else {
                    p_base.clamp(0.0, 1.0)
                }
            }
            RuleEngine::Routine { p_base } => {
                if ctx.targets.is_empty() || ctx.police_count > 0 {
                    0.0
                } else {
                    (p_base * n).min(1.0)
                }
            }
            RuleEngine::Hotspot { p_base, deterrence } => {
                if ctx.targets.is_empty() {
                    return 0.0;
                }
                let guard = (1.0 - deterrence * f64::from(ctx.police_count)).clamp(0.0, 1.0);
                ((p_base * n).min(1.0) * guard * (1.0 - ctx.cell.safety_score)).clamp(0.0, 1.0)
            }
            RuleEngine::Burglary { p_base } => {
                if step.mean_attractiveness <= 0.0 {
                    return 0.0;
                }
                let attr = ctx.cell.housing_value / (1.0 + f64::from(ctx.police_count));
                (p_base * attr / step.mean_attractiveness).clamp(0.0, 1.0)
            }
        }
    }

    pub fn decide(&self, ctx: &DecisionContext, step: &StepInfo, rng: &mut dyn RngCore) -> CrimeDecision {
        let p = self.commit_probability(ctx, step);
        let draw: f64 = rng.random();
        if draw >= p {
            return CrimeDecision::no_crime(format!("rule engine: no commit (p={p:.4})"));
        }
        match self {
            RuleEngine::Burglary { .. } => CrimeDecision {
                commit: true,
                target_id: Some(AgentId::new(property_target(ctx.cell.cell_id.as_str()))),
                reasoning: format!("rule engine: property crime (p={p:.4})"),
            },
            _ => {
                let t = &ctx.targets[rng.random_range(0..ctx.targets.len())];
                CrimeDecision::crime(t.agent_id.clone(), format!("rule engine: commit (p={p:.4})"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedDecision {
    pub agent_id: AgentId,
    pub step: u32,
    pub commit: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_id: Option<AgentId>,
    #[serde(default)]
    pub reasoning: String,
}

/// Replays fixed decisions keyed by `(agent_id, step)`. Unlisted pairs do
/// not commit.
#[derive(Debug, Clone, Default)]
pub struct ScriptedEngine {
    table: HashMap<(AgentId, u32), ScriptedDecision>,
}

impl ScriptedEngine {
    pub fn new(entries: impl IntoIterator<Item = ScriptedDecision>) -> Self {
        ScriptedEngine { table: entries.into_iter().map(|d| ((d.agent_id.clone(), d.step), d)).collect() }
    }

    pub fn from_jsonl<R: BufRead>(input: R) -> Result<Self, serde_json::Error> {
        let mut entries = Vec::new();
        for line in input.lines() {
            let line = line.map_err(serde_json::Error::io)?;
            if !line.trim().is_empty() {
                entries.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self::new(entries))
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn decide(&self, ctx: &DecisionContext, step: u32) -> Result<CrimeDecision, DecisionError> {
        let Some(d) = self.table.get(&(ctx.criminal.agent_id.clone(), step)) else {
            return Ok(CrimeDecision::no_crime("not scripted"));
        };
        if !d.commit {
            return Ok(CrimeDecision::no_crime(d.reasoning.clone()));
        }
        match &d.target_id {
            Some(t) if ctx.has_target(t.as_str()) || t.as_str().starts_with("property@") => {
                Ok(CrimeDecision { commit: true, target_id: Some(t.clone()), reasoning: d.reasoning.clone() })
            }
            other => Err(DecisionError::InvalidTarget(other.as_ref().map(|t| t.to_string()))),
        }
    }
}

/// Language-model engine: render, complete through the gateway, parse.
#[derive(Debug, Clone)]
pub struct LlmEngine {
    pub gateway: Arc<Gateway>,
    pub template: PromptTemplate,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl LlmEngine {
    pub fn tag(step: u32, agent_id: &str) -> String {
        format!("t{step:04}:{agent_id}")
    }

    pub fn request(&self, ctx: &DecisionContext, step: u32) -> Result<CompletionRequest, DecisionError> {
        let prompt = render_prompt(ctx, &self.template)?;
        Ok(CompletionRequest {
            system_text: prompt.system_text,
            user_text: prompt.user_text,
            model: self.model.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            tag: Self::tag(step, ctx.criminal.agent_id.as_str()),
        })
    }

    pub fn interpret(
        completion: Result<crate::gateway::Completion, GatewayError>,
        ctx: &DecisionContext,
    ) -> Result<CrimeDecision, DecisionError> {
        match completion {
            Ok(c) => parse_decision(&c.text, ctx),
            Err(e) => Err(DecisionError::EngineUnavailable(e.to_string())),
        }
    }

    pub fn decide(&self, ctx: &DecisionContext, step: u32) -> Result<CrimeDecision, DecisionError> {
        let req = self.request(ctx, step)?;
        Self::interpret(self.gateway.complete(&req), ctx)
    }

    /// Decides a whole step through one bounded-concurrency batch. Output is
    /// aligned with `contexts`.
    pub fn decide_batch(&self, contexts: &[&DecisionContext], step: u32) -> Vec<Result<CrimeDecision, DecisionError>> {
        let mut requests = Vec::with_capacity(contexts.len());
        let mut prepared: Vec<Result<String, DecisionError>> = Vec::with_capacity(contexts.len());
        for ctx in contexts {
            match self.request(ctx, step) {
                Ok(r) => {
                    prepared.push(Ok(r.tag.clone()));
                    requests.push(r);
                }
                Err(e) => prepared.push(Err(e)),
            }
        }
        let mut results = self.gateway.complete_batch(&requests);
        prepared
            .into_iter()
            .zip(contexts)
            .map(|(p, ctx)| {
                let tag = p?;
                let completion =
                    results.remove(&tag).unwrap_or_else(|| Err(GatewayError::Malformed(format!("no result for `{tag}`"))));
                Self::interpret(completion, ctx)
            })
            .collect()
    }
}

/// A ready-to-run decision engine.
#[derive(Debug, Clone)]
pub enum Engine {
    Rule(RuleEngine),
    Llm(LlmEngine),
    Scripted(Arc<ScriptedEngine>),
}

impl Engine {
    pub fn decide(&self, ctx: &DecisionContext, step: &StepInfo, rng: &mut dyn RngCore) -> Result<CrimeDecision, DecisionError> {
        match self {
            Engine::Rule(r) => Ok(r.decide(ctx, step, rng)),
            Engine::Llm(l) => l.decide(ctx, step.step),
            Engine::Scripted(s) => s.decide(ctx, step.step),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Engine::Rule(RuleEngine::Random { .. }) => "random",
            Engine::Rule(RuleEngine::Routine { .. }) => "routine",
            Engine::Rule(RuleEngine::Hotspot { .. }) => "hotspot",
            Engine::Rule(RuleEngine::Burglary { .. }) => "burglary",
            Engine::Llm(_) => "llm",
            Engine::Scripted(_) => "scripted",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decision::{Ablation, CellView, CityMeta, CriminalView, TargetView};
    use crate::gateway::{GatewayConfig, MockTransport};
    use crate::rng::seeded;

    fn ctx(targets: usize, police: u32) -> DecisionContext {
        DecisionContext {
            criminal: CriminalView {
                agent_id: "c3".into(),
                gender: "male".into(),
                race: "white".into(),
                residence: "g0".into(),
                historical_trajectory: vec![],
                criminal_record: vec![],
                prior_successes: 0,
                current_location: "g0".into(),
            },
            targets: (0..targets)
                .map(|i| TargetView { agent_id: format!("z{i}").into(), gender: "female".into(), race: "asian".into() })
                .collect(),
            police_count: police,
            cell: CellView {
                cell_id: "g0".into(),
                semantic_description: "quiet".into(),
                safety_score: 0.4,
                poi_count: 3,
                population: 900,
                average_income: 40000.0,
                poverty_ratio: 0.2,
                housing_value: 200000.0,
            },
            city_meta: CityMeta { city: "C".into(), mayor: "M".into(), party: "P".into(), strategy: "S".into() },
            overlays: vec![],
            ablation: Ablation::default(),
        }
    }

    #[test]
    fn routine_frequency_matches_probability() {
        let engine = RuleEngine::Routine { p_base: 0.1 };
        let c = ctx(3, 0);
        let info = StepInfo::default();
        assert!((engine.commit_probability(&c, &info) - 0.3).abs() < 1e-15);
        let mut rng = seeded(2024);
        let n = 100_000;
        let hits = (0..n).filter(|_| engine.decide(&c, &info, &mut rng).commit).count();
        let f = hits as f64 / n as f64;
        assert!((f - 0.3).abs() < 0.01, "{f}");
    }

    #[test]
    fn routine_never_commits_under_guard() {
        let engine = RuleEngine::Routine { p_base: 1.0 };
        let mut rng = seeded(1);
        for t in 1..6 {
            assert!(!engine.decide(&ctx(t, 1), &StepInfo::default(), &mut rng).commit);
        }
    }

    #[test]
    fn random_needs_targets_and_picks_one() {
        let engine = RuleEngine::Random { p_base: 1.0 };
        let mut rng = seeded(1);
        assert!(!engine.decide(&ctx(0, 0), &StepInfo::default(), &mut rng).commit);
        let c = ctx(4, 2);
        let d = engine.decide(&c, &StepInfo::default(), &mut rng);
        assert!(d.commit && c.has_target(d.target_id.unwrap().as_str()));
    }

    #[test]
    fn hotspot_scales_by_guard_and_safety() {
        let engine = RuleEngine::Hotspot { p_base: 0.1, deterrence: 0.5 };
        let info = StepInfo::default();
        assert!((engine.commit_probability(&ctx(3, 0), &info) - 0.3 * 0.6).abs() < 1e-12);
        assert!((engine.commit_probability(&ctx(3, 1), &info) - 0.3 * 0.5 * 0.6).abs() < 1e-12);
        assert_eq!(engine.commit_probability(&ctx(3, 2), &info), 0.0);
    }

    #[test]
    fn burglary_uses_property_token() {
        let engine = RuleEngine::Burglary { p_base: 0.5 };
        let info = StepInfo { step: 1, mean_attractiveness: 100000.0 };
        // attractiveness 200000 / 1 = 2x the mean -> probability 1.
        assert_eq!(engine.commit_probability(&ctx(0, 0), &info), 1.0);
        assert!((engine.commit_probability(&ctx(0, 1), &info) - 0.5).abs() < 1e-12);
        let d = engine.decide(&ctx(0, 0), &info, &mut seeded(3));
        assert_eq!(d.target_id.unwrap().as_str(), "property@g0");
    }

    #[test]
    fn rule_engines_are_deterministic_per_seed() {
        let engine = RuleEngine::Random { p_base: 0.5 };
        let c = ctx(5, 0);
        let draw = |s| {
            (0..50).map(|_| 0).scan(seeded(s), |r, _: i32| Some(engine.decide(&c, &StepInfo::default(), r))).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn scripted_replays_exactly() {
        let fixture = r#"{"agent_id":"c3","step":7,"commit":true,"target_id":"z1","reasoning":"scripted"}
{"agent_id":"c3","step":8,"commit":true,"target_id":"nobody"}
"#;
        let engine = ScriptedEngine::from_jsonl(fixture.as_bytes()).unwrap();
        assert_eq!(engine.len(), 2);
        let c = ctx(3, 0);
        assert_eq!(engine.decide(&c, 7).unwrap(), CrimeDecision::crime("z1", "scripted"));
        assert!(!engine.decide(&c, 6).unwrap().commit);
        assert_eq!(engine.decide(&c, 8), Err(DecisionError::InvalidTarget(Some("nobody".into()))));
    }

    #[test]
    fn llm_engine_round_trip() {
        let mock = MockTransport::new()
            .reply(LlmEngine::tag(1, "c3"), r#"Sure. {"status": true, "objective_id": "z2", "reasoning": "alone"}"#);
        let gw = Arc::new(Gateway::new(Arc::new(mock), GatewayConfig { backoff_base_ms: 0, ..GatewayConfig::default() }));
        let engine =
            LlmEngine { gateway: gw, template: PromptTemplate::criminal(), model: "m".into(), temperature: 0.0, max_tokens: 64 };
        let c = ctx(3, 0);
        assert_eq!(engine.decide(&c, 1).unwrap().target_id.unwrap().as_str(), "z2");
        let batch = engine.decide_batch(&[&c], 2);
        assert!(matches!(batch[0], Err(DecisionError::EngineUnavailable(_))));
    }

    #[test]
    fn config_serde_shape() {
        let c: EngineConfig = serde_json::from_str(r#"{"kind":"hotspot"}"#).unwrap();
        assert_eq!(c, EngineConfig::Hotspot { p_base: DEFAULT_P_BASE, deterrence: DEFAULT_DETERRENCE });
        let c: EngineConfig = serde_json::from_str(r#"{"kind":"llm","model":"x"}"#).unwrap();
        assert!(c.is_llm() && c.rule().is_none());
    }
}
