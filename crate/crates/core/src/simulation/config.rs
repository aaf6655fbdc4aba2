use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decision::{Ablation, EngineConfig};
use crate::env::{load_city, CityEnvironment};
use crate::exec::ExecMode;
use crate::gateway::GatewayConfig;
use crate::mobility::{EprParams, PatrolPolicyKind};
use crate::population::AgentCounts;
use crate::scenario::ScenarioPlan;
use crate::synthetic::SyntheticCity;

use super::SimError;

/// Where the city comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CityRef {
    /// A JSON bundle written by `ingest`.
    Bundle { path: PathBuf },
    /// Feature CSV plus optional GeoJSON boundaries.
    Csv {
        features: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        boundaries: Option<PathBuf>,
    },
    /// Generated grid city.
    Synthetic {
        rows: usize,
        cols: usize,
        #[serde(default)]
        seed: u64,
    },
}

impl CityRef {
    pub fn load(&self) -> Result<CityEnvironment, SimError> {
        Ok(match self {
            CityRef::Bundle { path } => CityEnvironment::load_bundle(path)?,
            CityRef::Csv { features, boundaries } => load_city(features, boundaries.as_deref())?.0,
            CityRef::Synthetic { rows, cols, seed } => SyntheticCity::grid(*rows, *cols, *seed).build(),
        })
    }

    fn resolve(&mut self, base: &Path) {
        match self {
            CityRef::Bundle { path } => *path = join(base, path),
            CityRef::Csv { features, boundaries } => {
                *features = join(base, features);
                if let Some(b) = boundaries {
                    *b = join(base, b);
                }
            }
            CityRef::Synthetic { .. } => {}
        }
    }
}

/// A scenario given by file path or inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioRef {
    Path(PathBuf),
    Inline(ScenarioPlan),
}

impl ScenarioRef {
    pub fn load(&self) -> Result<ScenarioPlan, SimError> {
        match self {
            ScenarioRef::Path(p) => Ok(ScenarioPlan::load(p)?),
            ScenarioRef::Inline(plan) => Ok(plan.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MobilityConfig {
    pub rho: f64,
    pub gamma: f64,
    pub police_policy: PatrolPolicyKind,
}

impl Default for MobilityConfig {
    fn default() -> Self {
        let p = EprParams::default();
        MobilityConfig { rho: p.rho, gamma: p.gamma, police_policy: PatrolPolicyKind::RandomWalk }
    }
}

impl MobilityConfig {
    pub fn epr(&self) -> EprParams {
        EprParams { rho: self.rho, gamma: self.gamma }
    }
}

fn default_steps() -> u32 {
    50
}
fn default_tolerance() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Optional when the caller supplies the environment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub city: Option<CityRef>,
    #[serde(default)]
    pub counts: AgentCounts,
    #[serde(default = "default_steps")]
    pub steps: u32,
    #[serde(default)]
    pub seed: u64,
    pub engine: EngineConfig,
    #[serde(default)]
    pub mobility: MobilityConfig,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gateway: Option<GatewayConfig>,
    /// Largest tolerated fraction of failed engine calls within one step.
    #[serde(default = "default_tolerance")]
    pub failure_tolerance: f64,
    #[serde(default)]
    pub exec_mode: ExecMode,
}

/// One field-level validation problem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn join(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_owned()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// A config with every default and the given engine.
    pub fn new(engine: EngineConfig) -> Self {
        RunConfig {
            city: None,
            counts: AgentCounts::default(),
            steps: default_steps(),
            seed: 0,
            engine,
            mobility: MobilityConfig::default(),
            ablation: Ablation::default(),
            scenario: None,
            gateway: None,
            failure_tolerance: default_tolerance(),
            exec_mode: ExecMode::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        serde_json::from_str(text)
            .map_err(|e| SimError::Config(vec![FieldError { field: "<document>".into(), message: e.to_string() }]))
    }

    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = fs::read_to_string(path).map_err(|source| SimError::Io { path: path.to_owned(), source })?;
        let mut cfg = Self::from_json(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let Some(c) = &mut self.city {
            c.resolve(base);
        }
        if let Some(ScenarioRef::Path(p)) = &mut self.scenario {
            *p = join(base, p);
        }
        if let EngineConfig::Scripted { fixture } = &mut self.engine {
            *fixture = join(base, Path::new(fixture.as_str())).to_string_lossy().into_owned();
        }
        if let EngineConfig::Llm { template: Some((s, u)), .. } = &mut self.engine {
            *s = join(base, Path::new(s.as_str())).to_string_lossy().into_owned();
            *u = join(base, Path::new(u.as_str())).to_string_lossy().into_owned();
        }
    }

    /// Every field-level problem, or `Ok` when the config is runnable.
    pub fn validate(&self) -> Result<(), SimError> {
        let mut errs = Vec::new();
        let mut push = |field: &str, message: String| errs.push(FieldError { field: field.into(), message });
        if self.steps < 1 {
            push("steps", "must be >= 1".into());
        }
        for (name, n) in [
            ("counts.citizens", self.counts.citizens),
            ("counts.criminals", self.counts.criminals),
            ("counts.police", self.counts.police),
        ] {
            if n == 0 {
                push(name, "must be >= 1".into());
            }
        }
        if let Err(m) = self.mobility.epr().validate() {
            push("mobility", m);
        }
        if !(0.0..=1.0).contains(&self.failure_tolerance) {
            push("failure_tolerance", format!("must lie in [0, 1], got {}", self.failure_tolerance));
        }
        match &self.engine {
            EngineConfig::Random { p_base } | EngineConfig::Routine { p_base } | EngineConfig::Burglary { p_base } => {
                if !(0.0..=1.0).contains(p_base) {
                    push("engine.p_base", format!("must lie in [0, 1], got {p_base}"));
                }
            }
            EngineConfig::Hotspot { p_base, deterrence } => {
                if !(0.0..=1.0).contains(p_base) {
                    push("engine.p_base", format!("must lie in [0, 1], got {p_base}"));
                }
                if !(*deterrence >= 0.0 && deterrence.is_finite()) {
                    push("engine.deterrence", format!("must be >= 0, got {deterrence}"));
                }
            }
            EngineConfig::Llm { model, max_tokens, .. } => {
                if self.gateway.is_none() {
                    push("gateway", "required when engine.kind is `llm`".into());
                }
                if model.trim().is_empty() {
                    push("engine.model", "must be non-empty".into());
                }
                if *max_tokens == 0 {
                    push("engine.max_tokens", "must be >= 1".into());
                }
            }
            EngineConfig::Scripted { fixture } => {
                if fixture.trim().is_empty() {
                    push("engine.fixture", "must name a JSONL file".into());
                }
            }
        }
        if let Some(g) = &self.gateway {
            if let Err(m) = g.validate() {
                push("gateway", m);
            }
        }
        if let Some(ScenarioRef::Inline(plan)) = &self.scenario {
            if let Err(e) = plan.validate(self.steps) {
                push("scenario", e.to_string());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(SimError::Config(errs))
        }
    }
}
