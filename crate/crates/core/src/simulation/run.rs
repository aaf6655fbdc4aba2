use std::fs::File;
use std::io::BufReader;
use std::sync::Arc;

use crate::decision::{
    assemble_context, CrimeDecision, DecisionContext, DecisionError, Engine, EngineConfig, LlmEngine, PromptTemplate,
    ScriptedEngine, StepInfo,
};
use crate::env::{CityEnvironment, CrimeDistribution};
use crate::exec;
use crate::gateway::Gateway;
use crate::mobility::{epr_step, police_patrol_step, PatrolPolicy, PatrolPolicyKind};
use crate::population::{Agent, AgentKind, HistoryEvent, Population};
use crate::rng::{agent_stream, Stream};
use crate::scenario::{arrest_top_offenders, context_overlays, hotspot_policing_weights, ScenarioPlan};

use super::{ArrestRecord, CrimeEvent, Diagnostics, RunConfig, SimError, SimulationOutput};

/// Optional pieces a caller can inject instead of having them built from the
/// config.
#[derive(Debug, Default, Clone)]
pub struct RunDeps {
    pub plan: Option<ScenarioPlan>,
    pub gateway: Option<Arc<Gateway>>,
    pub population: Option<Population>,
}

/// Active police per cell, indexed by [`CellIdx`].
pub fn guardianship_snapshot(population: &Population, num_cells: usize) -> Vec<u32> {
    let mut counts = vec![0u32; num_cells];
    for a in population.agents() {
        if a.kind() == AgentKind::Police && a.is_active() {
            counts[a.state.location.get()] += 1;
        }
    }
    counts
}

/// Loads the config's city and runs it.
pub fn run(config: &RunConfig) -> Result<SimulationOutput, SimError> {
    let env = config.city.as_ref().ok_or(SimError::NoCity)?.load()?;
    run_in(&env, config)
}

pub fn run_in(env: &CityEnvironment, config: &RunConfig) -> Result<SimulationOutput, SimError> {
    Simulator::new(env, config.clone(), RunDeps::default())?.run()
}

fn build_engine(config: &RunConfig, gateway: Option<Arc<Gateway>>) -> Result<(Engine, Option<Arc<Gateway>>), SimError> {
    if let Some(rule) = config.engine.rule() {
        return Ok((Engine::Rule(rule), None));
    }
    match &config.engine {
        EngineConfig::Scripted { fixture } => {
            let file = File::open(fixture).map_err(|source| SimError::Io { path: fixture.into(), source })?;
            let engine = ScriptedEngine::from_jsonl(BufReader::new(file))
                .map_err(|e| SimError::Fixture { path: fixture.clone(), message: e.to_string() })?;
            Ok((Engine::Scripted(Arc::new(engine)), None))
        }
        EngineConfig::Llm { model, temperature, max_tokens, template } => {
            let gateway = match gateway {
                Some(g) => g,
                None => http_gateway(config)?,
            };
            let template = match template {
                Some((s, u)) => {
                    let read = |p: &str| std::fs::read_to_string(p).map_err(|source| SimError::Io { path: p.into(), source });
                    PromptTemplate::new(read(s)?, read(u)?)
                }
                None => PromptTemplate::criminal_for(&config.ablation),
            };
            let engine = LlmEngine {
                gateway: gateway.clone(),
                template,
                model: model.clone(),
                temperature: *temperature,
                max_tokens: *max_tokens,
            };
            Ok((Engine::Llm(engine), Some(gateway)))
        }
        _ => unreachable!("rule engines handled above"),
    }
}

#[cfg(feature = "http")]
fn http_gateway(config: &RunConfig) -> Result<Arc<Gateway>, SimError> {
    let cfg = config.gateway.clone().ok_or_else(|| {
        SimError::Config(vec![super::FieldError {
            field: "gateway".into(),
            message: "required when engine.kind is `llm`".into(),
        }])
    })?;
    Ok(Arc::new(Gateway::http(cfg)))
}

#[cfg(not(feature = "http"))]
fn http_gateway(_: &RunConfig) -> Result<Arc<Gateway>, SimError> {
    Err(SimError::NoTransport)
}

/// A prepared run: city, population, scenario and engine.
#[derive(Debug)]
pub struct Simulator<'e> {
    env: &'e CityEnvironment,
    config: RunConfig,
    plan: ScenarioPlan,
    engine: Engine,
    gateway: Option<Arc<Gateway>>,
    population: Population,
}

impl<'e> Simulator<'e> {
    pub fn new(env: &'e CityEnvironment, config: RunConfig, deps: RunDeps) -> Result<Self, SimError> {
        config.validate()?;
        let plan = match (deps.plan, &config.scenario) {
            (Some(p), _) => p,
            (None, Some(r)) => r.load()?,
            (None, None) => ScenarioPlan::default(),
        };
        plan.validate(config.steps)?;
        let population = match deps.population {
            Some(p) => p,
            None => Population::sample(env, config.counts, config.seed)?,
        };
        let (engine, gateway) = build_engine(&config, deps.gateway)?;
        Ok(Simulator { env, config, plan, engine, gateway, population })
    }

    pub fn population(&self) -> &Population {
        &self.population
    }

    pub fn plan(&self) -> &ScenarioPlan {
        &self.plan
    }

    fn patrol_policy(&self, step: u32, cumulative: &[u64]) -> PatrolPolicy {
        let epsilon = self.plan.hotspot_policing(step).or(match self.config.mobility.police_policy {
            PatrolPolicyKind::HotspotWeighted => Some(1.0),
            PatrolPolicyKind::RandomWalk => None,
        });
        match epsilon {
            Some(e) => {
                PatrolPolicy::HotspotWeighted { weights: hotspot_policing_weights(cumulative, e).into(), jurisdiction: None }
            }
            None => PatrolPolicy::RandomWalk,
        }
    }

    fn move_agents(&mut self, step: u32, policy: &PatrolPolicy) {
        let (env, seed, epr) = (self.env, self.config.seed, self.config.mobility.epr());
        exec::for_each_mut(self.config.exec_mode, self.population.agents_mut(), |a: &mut Agent| {
            if !a.is_active() {
                return;
            }
            let mut rng = agent_stream(seed, a.profile.agent_id.as_str(), step, Stream::Mobility);
            let cell = match a.kind() {
                AgentKind::Police => police_patrol_step(&mut a.state, env, policy, &mut rng),
                _ => epr_step(&mut a.state, env, &epr, &mut rng),
            };
            a.state.history.push(HistoryEvent::Moved { step, cell });
        });
    }

    fn decide_all(
        &self,
        step: u32,
        criminals: &[usize],
        overlays: &[String],
    ) -> Result<(Vec<DecisionContext>, Vec<Result<CrimeDecision, DecisionError>>), SimError> {
        let env = self.env;
        let agents = self.population.agents();
        let occupancy = self.population.occupancy(env.len());
        let police: Vec<u32> = env.indices().map(|c| occupancy.of(c, AgentKind::Police).len() as u32).collect();
        let mean_attractiveness =
            env.indices().map(|c| env.features(c).housing_value / (1.0 + f64::from(police[c.get()]))).sum::<f64>()
                / env.len() as f64;
        let info = StepInfo { step, mean_attractiveness };
        let mode = self.config.exec_mode;
        let ablation = self.config.ablation;

        let contexts = exec::map(mode, criminals, |&i| {
            let a = &agents[i];
            let cell = a.state.location;
            let citizens: Vec<&Agent> = occupancy.of(cell, AgentKind::Citizen).iter().map(|&j| &agents[j]).collect();
            assemble_context(a, env, &citizens, police[cell.get()], overlays, ablation)
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;

        let seed = self.config.seed;
        let decisions = match &self.engine {
            Engine::Llm(llm) => llm.decide_batch(&contexts.iter().collect::<Vec<_>>(), step),
            engine => exec::map(mode, &contexts, |ctx| {
                let mut rng = agent_stream(seed, ctx.criminal.agent_id.as_str(), step, Stream::Decision);
                engine.decide(ctx, &info, &mut rng)
            }),
        };
        Ok((contexts, decisions))
    }

    /// Runs every step. An engine failure rate above the configured
    /// tolerance in some step stops the run with `complete = false`.
    pub fn run(&mut self) -> Result<SimulationOutput, SimError> {
        let n = self.env.len();
        let mut cumulative = vec![0u64; n];
        let mut events = Vec::new();
        let mut per_step = Vec::with_capacity(self.config.steps as usize);
        let mut diag = Diagnostics::default();
        let mut arrests = Vec::new();
        let mut complete = true;
        let mut notes = vec![
            "at most one crime per criminal per step; citizens may be targeted more than once".to_owned(),
            "arrested offenders are not replaced".to_owned(),
        ];
        if self.config.engine.rule().is_some() {
            notes.push(format!("engine `{}` is a simplified rule reimplementation, not the original model", self.engine.name()));
        }
        let criminals: Vec<usize> =
            (0..self.population.agents().len()).filter(|&i| self.population.agents()[i].kind() == AgentKind::Criminal).collect();

        let mut steps_completed = 0;
        for step in 1..=self.config.steps {
            let overlays = context_overlays(&self.plan, step);
            let policy = self.patrol_policy(step, &cumulative);
            self.move_agents(step, &policy);

            let active: Vec<usize> = criminals.iter().copied().filter(|&i| self.population.agents()[i].is_active()).collect();
            let (contexts, decisions) = self.decide_all(step, &active, &overlays)?;

            let mut failures = 0usize;
            let mut step_events = 0u64;
            let agents = self.population.agents_mut();
            for ((&i, ctx), decision) in active.iter().zip(&contexts).zip(decisions) {
                diag.decisions += 1;
                let d = match decision {
                    Ok(d) => d,
                    Err(DecisionError::ParseFailure(m)) => {
                        tracing::debug!(step, agent = %ctx.criminal.agent_id, "parse failure: {m}");
                        diag.parse_failures += 1;
                        continue;
                    }
                    Err(DecisionError::InvalidTarget(t)) => {
                        tracing::debug!(step, agent = %ctx.criminal.agent_id, "invalid target {t:?}");
                        diag.invalid_targets += 1;
                        continue;
                    }
                    Err(DecisionError::EngineUnavailable(m)) => {
                        tracing::warn!(step, agent = %ctx.criminal.agent_id, "engine unavailable: {m}");
                        diag.transport_errors += 1;
                        failures += 1;
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                };
                let Some(target) = d.target_id.filter(|_| d.commit) else { continue };
                let a = &mut agents[i];
                let cell = a.state.location;
                a.state.crimes_committed += 1;
                a.state.history.push(HistoryEvent::Crime { step, cell, target: target.to_string() });
                cumulative[cell.get()] += 1;
                step_events += 1;
                events.push(CrimeEvent {
                    step,
                    cell_id: self.env.cell_id(cell).clone(),
                    criminal_id: a.profile.agent_id.clone(),
                    target_id: target.to_string(),
                    reasoning: d.reasoning,
                });
            }
            per_step.push(step_events);

            let quota = self.plan.removal_quota(step);
            if quota > 0 {
                for agent_id in arrest_top_offenders(&mut self.population, quota, step) {
                    arrests.push(ArrestRecord { step, agent_id });
                    diag.arrests += 1;
                }
            }
            steps_completed = step;

            if !active.is_empty() && failures as f64 > self.config.failure_tolerance * active.len() as f64 {
                complete = false;
                notes.push(format!(
                    "aborted after step {step}: {failures} of {} engine calls failed (tolerance {})",
                    active.len(),
                    self.config.failure_tolerance
                ));
                break;
            }
        }

        let transcript = self.gateway.as_ref().map(|g| g.take_transcript()).unwrap_or_default();
        let dense: Vec<u64> = cumulative;
        Ok(SimulationOutput {
            events,
            per_cell_counts: CrimeDistribution::from_dense(self.env, &dense),
            per_step_counts: per_step,
            diagnostics: diag,
            arrests,
            config_echo: self.config.clone(),
            seed: self.config.seed,
            engine: self.engine.name().to_owned(),
            complete,
            steps_completed,
            notes,
            transcript,
        })
    }
}
