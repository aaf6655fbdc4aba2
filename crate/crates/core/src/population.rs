//! Heterogeneous agent population: citizens, criminals and police.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{CityEnvironment, EnvError};
use crate::ids::{AgentId, CellId, CellIdx};
use crate::rng::{self, Stream};

#[derive(Debug, thiserror::Error)]
pub enum PopulationError {
    #[error("agent counts must be positive: {0}")]
    InvalidCounts(String),
    #[error("environment has zero total population")]
    ZeroPopulation,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("duplicate agent id `{0}`")]
    DuplicateAgent(AgentId),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Citizen,
    Criminal,
    Police,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentCounts {
    pub citizens: usize,
    pub criminals: usize,
    pub police: usize,
}

impl Default for AgentCounts {
    /// Experiment-scale defaults: 4,000 citizens, 1,000 criminals, 500 police.
    fn default() -> Self {
        AgentCounts { citizens: 4000, criminals: 1000, police: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub agent_id: AgentId,
    pub kind: AgentKind,
    pub gender: String,
    pub race: String,
    pub residence: CellIdx,
    #[serde(default)]
    pub criminal_record: Vec<String>,
}

/// One entry of an agent's mutable history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum HistoryEvent {
    Moved { step: u32, cell: CellIdx },
    Crime { step: u32, cell: CellIdx, target: String },
    Arrested { step: u32 },
}

impl HistoryEvent {
    /// Short human-readable rendering used in prompts.
    pub fn describe(&self, env: &CityEnvironment) -> String {
        match self {
            HistoryEvent::Moved { step, cell } => format!("t{step} moved to {}", env.cell_id(*cell)),
            HistoryEvent::Crime { step, cell, target } => {
                format!("t{step} committed a crime against {target} in {}", env.cell_id(*cell))
            }
            HistoryEvent::Arrested { step } => format!("t{step} arrested"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub location: CellIdx,
    pub visit_counts: BTreeMap<CellIdx, u32>,
    pub history: Vec<HistoryEvent>,
    pub crimes_committed: u32,
    pub arrested: bool,
}

impl AgentState {
    /// Fresh state at `home`, with the home cell counted as visited once.
    pub fn at(home: CellIdx) -> Self {
        AgentState {
            location: home,
            visit_counts: BTreeMap::from([(home, 1)]),
            history: Vec::new(),
            crimes_committed: 0,
            arrested: false,
        }
    }

    pub fn distinct_visited(&self) -> usize {
        self.visit_counts.len()
    }

    pub fn move_to(&mut self, cell: CellIdx) {
        self.location = cell;
        *self.visit_counts.entry(cell).or_insert(0) += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub profile: AgentProfile,
    pub state: AgentState,
}

impl Agent {
    pub fn id(&self) -> &AgentId {
        &self.profile.agent_id
    }

    pub fn kind(&self) -> AgentKind {
        self.profile.kind
    }

    pub fn is_active(&self) -> bool {
        !self.state.arrested
    }
}

/// Agents sorted by id. Mutation happens only in the simulation step loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    agents: Vec<Agent>,
    counts: AgentCounts,
}

const OFFENSES: [&str; 8] = [
    "theft",
    "burglary",
    "robbery",
    "assault",
    "criminal damage",
    "motor vehicle theft",
    "narcotics possession",
    "deceptive practice",
];

fn pick_label(map: &BTreeMap<String, f64>, rng: &mut impl Rng) -> String {
    if map.is_empty() {
        return "unknown".into();
    }
    let u: f64 = rng.random::<f64>() * map.values().sum::<f64>();
    let mut acc = 0.0;
    for (k, v) in map {
        acc += v;
        if u < acc {
            return k.clone();
        }
    }
    map.keys().next_back().cloned().unwrap_or_default()
}

/// Largest-remainder apportionment of `n` seats by `weights`; ties in the
/// remainder go to the lower index.
pub fn apportion(n: usize, weights: &[u64]) -> Vec<usize> {
    let total: u64 = weights.iter().sum();
    if total == 0 {
        return vec![0; weights.len()];
    }
    let mut seats: Vec<usize> = Vec::with_capacity(weights.len());
    let mut rema: Vec<(u128, usize)> = Vec::with_capacity(weights.len());
    for (i, &w) in weights.iter().enumerate() {
        let num = n as u128 * w as u128;
        seats.push((num / total as u128) as usize);
        rema.push((num % total as u128, i));
    }
    let left = n - seats.iter().sum::<usize>();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rema.iter().take(left) {
        seats[i] += 1;
    }
    seats
}

impl Population {
    /// Samples a population. Residences follow cell population; gender and
    /// race follow the residence cell's composition; police stations are
    /// apportioned to cells by population.
    pub fn sample(env: &CityEnvironment, counts: AgentCounts, seed: u64) -> Result<Self, PopulationError> {
        if counts.citizens == 0 || counts.criminals == 0 || counts.police == 0 {
            return Err(PopulationError::InvalidCounts(format!("{counts:?}")));
        }
        let pops: Vec<u64> = env.indices().map(|i| env.features(i).population).collect();
        if pops.iter().all(|&p| p == 0) {
            return Err(PopulationError::ZeroPopulation);
        }
        let residence = WeightedIndex::new(&pops).map_err(|_| PopulationError::ZeroPopulation)?;
        let mut rng = rng::purpose_stream(seed, Stream::Population);

        let mut agents = Vec::with_capacity(counts.citizens + counts.criminals + counts.police);
        let width = |n: usize| n.to_string().len().max(4);

        let mut resident = |kind: AgentKind, prefix: char, n: usize, rng: &mut rng::SimRng| {
            let w = width(n);
            for i in 0..n {
                let home = CellIdx::from(residence.sample(rng));
                let f = env.features(home);
                let gender = if rng.random::<f64>() < f.gender_ratio { "male" } else { "female" };
                let race = pick_label(&f.race_composition, rng);
                let criminal_record = if kind == AgentKind::Criminal {
                    let k = rng.random_range(0..=3);
                    (0..k)
                        .map(|_| {
                            let years = rng.random_range(1..=10);
                            format!("{} ({years} years ago)", OFFENSES[rng.random_range(0..OFFENSES.len())])
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                agents.push(Agent {
                    profile: AgentProfile {
                        agent_id: AgentId::new(format!("{prefix}{i:0w$}")),
                        kind,
                        gender: gender.into(),
                        race,
                        residence: home,
                        criminal_record,
                    },
                    state: AgentState::at(home),
                });
            }
        };
        resident(AgentKind::Citizen, 'r', counts.citizens, &mut rng);
        resident(AgentKind::Criminal, 'c', counts.criminals, &mut rng);

        let stations = apportion(counts.police, &pops);
        let w = width(counts.police);
        let mut i = 0;
        for (cell, &k) in stations.iter().enumerate() {
            for _ in 0..k {
                let home = CellIdx::from(cell);
                let gender = if rng.random::<f64>() < env.features(home).gender_ratio { "male" } else { "female" };
                let race = pick_label(&env.features(home).race_composition, &mut rng);
                agents.push(Agent {
                    profile: AgentProfile {
                        agent_id: AgentId::new(format!("p{i:0w$}")),
                        kind: AgentKind::Police,
                        gender: gender.into(),
                        race,
                        residence: home,
                        criminal_record: Vec::new(),
                    },
                    state: AgentState::at(home),
                });
                i += 1;
            }
        }
        Self::from_agents(agents)
    }

    pub fn from_agents(mut agents: Vec<Agent>) -> Result<Self, PopulationError> {
        agents.sort_by(|a, b| a.profile.agent_id.cmp(&b.profile.agent_id));
        if let Some(w) = agents.windows(2).find(|w| w[0].profile.agent_id == w[1].profile.agent_id) {
            return Err(PopulationError::DuplicateAgent(w[0].profile.agent_id.clone()));
        }
        let mut counts = AgentCounts { citizens: 0, criminals: 0, police: 0 };
        for a in &agents {
            match a.kind() {
                AgentKind::Citizen => counts.citizens += 1,
                AgentKind::Criminal => counts.criminals += 1,
                AgentKind::Police => counts.police += 1,
            }
        }
        Ok(Population { agents, counts })
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn agents_mut(&mut self) -> &mut [Agent] {
        &mut self.agents
    }

    pub fn counts(&self) -> AgentCounts {
        self.counts
    }

    pub fn get(&self, id: &str) -> Option<&Agent> {
        self.agents.binary_search_by(|a| a.profile.agent_id.as_str().cmp(id)).ok().map(|i| &self.agents[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.agents.binary_search_by(|a| a.profile.agent_id.as_str().cmp(id)).ok()
    }

    /// Active agents of each role at `cell`.
    pub fn colocated(&self, env: &CityEnvironment, cell: &str) -> Result<Colocated<'_>, PopulationError> {
        let idx = env.require(cell)?;
        let mut out = Colocated::default();
        for a in self.agents.iter().filter(|a| a.is_active() && a.state.location == idx) {
            out.push(a);
        }
        Ok(out)
    }

    /// Per-cell index of active agents, built once per step.
    pub fn occupancy(&self, num_cells: usize) -> Occupancy {
        let mut by_cell = vec![[Vec::new(), Vec::new(), Vec::new()]; num_cells];
        for (i, a) in self.agents.iter().enumerate() {
            if a.is_active() {
                by_cell[a.state.location.get()][a.kind() as usize].push(i);
            }
        }
        Occupancy { by_cell }
    }

    /// One agent per line, cells written as ids.
    pub fn write_jsonl<W: Write>(&self, env: &CityEnvironment, mut out: W) -> Result<(), PopulationError> {
        for a in &self.agents {
            let rec = AgentRecord::from_agent(a, env);
            serde_json::to_writer(&mut out, &rec).map_err(|source| PopulationError::Json { line: 0, source })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(env: &CityEnvironment, input: R) -> Result<Self, PopulationError> {
        let mut agents = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: AgentRecord = serde_json::from_str(&line).map_err(|source| PopulationError::Json { line: i + 1, source })?;
            agents.push(rec.into_agent(env)?);
        }
        Self::from_agents(agents)
    }
}

#[derive(Debug, Default)]
pub struct Colocated<'a> {
    pub citizens: Vec<&'a Agent>,
    pub criminals: Vec<&'a Agent>,
    pub police: Vec<&'a Agent>,
}

impl<'a> Colocated<'a> {
    fn push(&mut self, a: &'a Agent) {
        match a.kind() {
            AgentKind::Citizen => self.citizens.push(a),
            AgentKind::Criminal => self.criminals.push(a),
            AgentKind::Police => self.police.push(a),
        }
    }
}

/// Agent positions (into [`Population::agents`]) per cell and role.
#[derive(Debug, Clone)]
pub struct Occupancy {
    by_cell: Vec<[Vec<usize>; 3]>,
}

impl Occupancy {
    pub fn of(&self, cell: CellIdx, kind: AgentKind) -> &[usize] {
        &self.by_cell[cell.get()][kind as usize]
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AgentRecord {
    agent_id: AgentId,
    kind: AgentKind,
    gender: String,
    race: String,
    residence: CellId,
    #[serde(default)]
    criminal_record: Vec<String>,
    location: CellId,
    visit_counts: BTreeMap<CellId, u32>,
    #[serde(default)]
    history: Vec<RecordEvent>,
    #[serde(default)]
    crimes_committed: u32,
    #[serde(default)]
    arrested: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum RecordEvent {
    Moved { step: u32, cell: CellId },
    Crime { step: u32, cell: CellId, target: String },
    Arrested { step: u32 },
}

impl AgentRecord {
    fn from_agent(a: &Agent, env: &CityEnvironment) -> Self {
        let id = |c: CellIdx| env.cell_id(c).clone();
        AgentRecord {
            agent_id: a.profile.agent_id.clone(),
            kind: a.profile.kind,
            gender: a.profile.gender.clone(),
            race: a.profile.race.clone(),
            residence: id(a.profile.residence),
            criminal_record: a.profile.criminal_record.clone(),
            location: id(a.state.location),
            visit_counts: a.state.visit_counts.iter().map(|(&c, &n)| (id(c), n)).collect(),
            history: a
                .state
                .history
                .iter()
                .map(|h| match h {
                    HistoryEvent::Moved { step, cell } => RecordEvent::Moved { step: *step, cell: id(*cell) },
                    HistoryEvent::Crime { step, cell, target } => {
                        RecordEvent::Crime { step: *step, cell: id(*cell), target: target.clone() }
                    }
                    HistoryEvent::Arrested { step } => RecordEvent::Arrested { step: *step },
                })
                .collect(),
            crimes_committed: a.state.crimes_committed,
            arrested: a.state.arrested,
        }
    }

    fn into_agent(self, env: &CityEnvironment) -> Result<Agent, EnvError> {
        let idx = |c: &CellId| env.require(c.as_str());
        let mut visit_counts = BTreeMap::new();
        for (c, n) in &self.visit_counts {
            visit_counts.insert(idx(c)?, *n);
        }
        let mut history = Vec::with_capacity(self.history.len());
        for h in self.history {
            history.push(match h {
                RecordEvent::Moved { step, cell } => HistoryEvent::Moved { step, cell: idx(&cell)? },
                RecordEvent::Crime { step, cell, target } => HistoryEvent::Crime { step, cell: idx(&cell)?, target },
                RecordEvent::Arrested { step } => HistoryEvent::Arrested { step },
            });
        }
        Ok(Agent {
            profile: AgentProfile {
                agent_id: self.agent_id,
                kind: self.kind,
                gender: self.gender,
                race: self.race,
                residence: idx(&self.residence)?,
                criminal_record: self.criminal_record,
            },
            state: AgentState {
                location: idx(&self.location)?,
                visit_counts,
                history,
                crimes_committed: self.crimes_committed,
                arrested: self.arrested,
            },
        })
    }
}
