//! Agent movement.
//!
//! Citizens and criminals follow exploration and preferential return: with
//! probability `rho * S^-gamma` (S = distinct cells visited so far) the agent
//! explores an unvisited cell, drawn with weight `1/d^2` from its current
//! cell; otherwise it returns to a visited cell with probability proportional
//! to past visits. Police move by a [`PatrolPolicy`].

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::CityEnvironment;
use crate::ids::CellIdx;
use crate::population::AgentState;

/// Distances below this are clamped so coincident centroids stay drawable.
const MIN_DISTANCE_KM: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EprParams {
    pub rho: f64,
    pub gamma: f64,
}

impl Default for EprParams {
    fn default() -> Self {
        EprParams { rho: 0.6, gamma: 0.21 }
    }
}

impl EprParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(format!("rho must lie in (0, 1], got {}", self.rho));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(format!("gamma must be >= 0, got {}", self.gamma));
        }
        Ok(())
    }

    /// Exploration probability after visiting `distinct` cells.
    pub fn p_new(&self, distinct: usize) -> f64 {
        (self.rho * (distinct.max(1) as f64).powf(-self.gamma)).clamp(0.0, 1.0)
    }
}

/// Draws a visited cell with probability proportional to its visit count.
pub fn preferential_return(state: &AgentState, rng: &mut impl Rng) -> CellIdx {
    let total: u64 = state.visit_counts.values().map(|&v| u64::from(v)).sum();
    if total == 0 {
        return state.location;
    }
    let mut u = rng.random_range(0..total);
    for (&cell, &v) in &state.visit_counts {
        let v = u64::from(v);
        if u < v {
            return cell;
        }
        u -= v;
    }
    state.location
}

/// Draws an unvisited cell with weight `1/d^2` from the current location.
/// Returns `None` when every cell has been visited.
pub fn explore(state: &AgentState, env: &CityEnvironment, rng: &mut impl Rng) -> Option<CellIdx> {
    if state.visit_counts.len() >= env.len() {
        return None;
    }
    let here = env.unit(state.location);
    let mut cum = Vec::with_capacity(env.len() - state.visit_counts.len());
    let mut total = 0.0;
    let mut visited = state.visit_counts.keys().peekable();
    for idx in env.indices() {
        if visited.peek() == Some(&&idx) {
            visited.next();
            continue;
        }
        let d = crate::geo::unit_distance_km(here, env.unit(idx)).max(MIN_DISTANCE_KM);
        total += 1.0 / (d * d);
        cum.push((total, idx));
    }
    let u = rng.random::<f64>() * total;
    let pos = cum.partition_point(|&(c, _)| c <= u);
    cum.get(pos.min(cum.len() - 1)).map(|&(_, idx)| idx)
}

/// One EPR move. Updates location and visit counts and returns the new cell.
pub fn epr_step(state: &mut AgentState, env: &CityEnvironment, params: &EprParams, rng: &mut impl Rng) -> CellIdx {
    let p_new = params.p_new(state.distinct_visited());
    let explore_now = rng.random::<f64>() < p_new;
    let next = if explore_now {
        explore(state, env, rng).unwrap_or_else(|| preferential_return(state, rng))
    } else {
        preferential_return(state, rng)
    };
    state.move_to(next);
    next
}

/// How police choose their next cell.
#[derive(Debug, Clone, PartialEq)]
pub enum PatrolPolicy {
    /// Uniform over the current cell and its neighbors.
    RandomWalk,
    /// Draw proportional to per-cell weights (indexed by [`CellIdx`]),
    /// optionally restricted to a jurisdiction.
    HotspotWeighted { weights: Arc<[f64]>, jurisdiction: Option<Arc<[CellIdx]>> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatrolPolicyKind {
    #[default]
    RandomWalk,
    HotspotWeighted,
}

fn random_walk(state: &AgentState, env: &CityEnvironment, rng: &mut impl Rng) -> CellIdx {
    let nbrs = env.neighbors(state.location);
    let k = rng.random_range(0..=nbrs.len());
    if k == 0 {
        state.location
    } else {
        nbrs[k - 1]
    }
}

fn weighted_draw(candidates: impl Iterator<Item = (CellIdx, f64)>, rng: &mut impl Rng) -> Option<CellIdx> {
    let mut cum = Vec::new();
    let mut total = 0.0;
    for (idx, w) in candidates {
        if w > 0.0 && w.is_finite() {
            total += w;
            cum.push((total, idx));
        }
    }
    if cum.is_empty() {
        return None;
    }
    let u = rng.random::<f64>() * total;
    let pos = cum.partition_point(|&(c, _)| c <= u);
    Some(cum[pos.min(cum.len() - 1)].1)
}

/// One police move. All-zero weights fall back to the random walk.
pub fn police_patrol_step(state: &mut AgentState, env: &CityEnvironment, policy: &PatrolPolicy, rng: &mut impl Rng) -> CellIdx {
    let next = match policy {
        PatrolPolicy::RandomWalk => random_walk(state, env, rng),
        PatrolPolicy::HotspotWeighted { weights, jurisdiction } => {
            let drawn = match jurisdiction {
                Some(cells) => weighted_draw(cells.iter().map(|&c| (c, weights.get(c.get()).copied().unwrap_or(0.0))), rng),
                None => weighted_draw(weights.iter().enumerate().map(|(i, &w)| (CellIdx::from(i), w)), rng),
            };
            drawn.unwrap_or_else(|| random_walk(state, env, rng))
        }
    };
    state.move_to(next);
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::synthetic::SyntheticCity;
    use std::collections::BTreeMap;

    #[test]
    fn p_new_formula() {
        let p = EprParams { rho: 0.6, gamma: 0.21 };
        assert!((p.p_new(1) - 0.6).abs() < 1e-15);
        // 0.6 * 16^-0.21 = 0.6 * exp(-0.21 ln 16)
        let expected = 0.6 * (-0.21 * 16f64.ln()).exp();
        assert!((p.p_new(16) - expected).abs() < 1e-12);
        assert!((p.p_new(16) - 0.33519).abs() < 1e-5);
    }

    #[test]
    fn param_validation() {
        assert!(EprParams::default().validate().is_ok());
        assert!(EprParams { rho: 1.2, gamma: 0.2 }.validate().is_err());
        assert!(EprParams { rho: 0.5, gamma: -0.1 }.validate().is_err());
    }

    #[test]
    fn preferential_return_frequencies() {
        let mut st = AgentState::at(CellIdx(0));
        st.visit_counts = BTreeMap::from([(CellIdx(0), 3), (CellIdx(1), 1)]);
        let mut rng = seeded(99);
        let n = 100_000;
        let hits = (0..n).filter(|_| preferential_return(&st, &mut rng) == CellIdx(0)).count();
        let f = hits as f64 / n as f64;
        assert!((f - 0.75).abs() < 0.01, "{f}");
    }

    #[test]
    fn exploration_prefers_near_cells_and_never_leaves_env() {
        let env = SyntheticCity::grid(5, 5, 1).build();
        let start = env.index("g0012").unwrap();
        let mut rng = seeded(5);
        let mut near = 0;
        for _ in 0..2000 {
            let st = AgentState::at(start);
            let c = explore(&st, &env, &mut rng).unwrap();
            assert_ne!(c, start);
            assert!(c.get() < env.len());
            if env.neighbors(start).contains(&c) {
                near += 1;
            }
        }
        // Four neighbours carry weight 4/1 out of sum_{j} 1/d_j^2, well over a third.
        assert!(near > 700, "{near}");
    }

    #[test]
    fn exhausted_exploration_falls_back() {
        let env = SyntheticCity::grid(1, 2, 1).build();
        let mut st = AgentState::at(CellIdx(0));
        st.move_to(CellIdx(1));
        assert!(explore(&st, &env, &mut seeded(1)).is_none());
        let p = EprParams { rho: 1.0, gamma: 0.0 };
        for s in 0..50 {
            let c = epr_step(&mut st, &env, &p, &mut seeded(s));
            assert!(c.get() < 2);
        }
    }

    #[test]
    fn epr_step_is_deterministic_per_seed() {
        let env = SyntheticCity::grid(6, 6, 2).build();
        let run = |seed| {
            let mut st = AgentState::at(CellIdx(7));
            let mut rng = seeded(seed);
            (0..100).map(|_| epr_step(&mut st, &env, &EprParams::default(), &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn random_walk_is_uniform_over_stay_and_neighbors() {
        let env = SyntheticCity::grid(3, 3, 1).build();
        // Edge-middle cell g0001 has 3 neighbours.
        let here = env.index("g0001").unwrap();
        assert_eq!(env.neighbors(here).len(), 3);
        let mut rng = seeded(17);
        let mut freq: BTreeMap<CellIdx, usize> = BTreeMap::new();
        let n = 100_000;
        for _ in 0..n {
            let mut st = AgentState::at(here);
            *freq.entry(police_patrol_step(&mut st, &env, &PatrolPolicy::RandomWalk, &mut rng)).or_default() += 1;
        }
        assert_eq!(freq.len(), 4);
        for (_, c) in freq {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn weighted_patrol_concentrates_and_falls_back() {
        let env = SyntheticCity::grid(3, 3, 1).build();
        let mut w = vec![0.0; env.len()];
        w[8] = 1.0;
        let policy = PatrolPolicy::HotspotWeighted { weights: w.into(), jurisdiction: None };
        let mut rng = seeded(1);
        for _ in 0..200 {
            let mut st = AgentState::at(CellIdx(0));
            assert_eq!(police_patrol_step(&mut st, &env, &policy, &mut rng), CellIdx(8));
        }
        let zero = PatrolPolicy::HotspotWeighted { weights: vec![0.0; env.len()].into(), jurisdiction: None };
        for _ in 0..200 {
            let mut st = AgentState::at(CellIdx(0));
            let c = police_patrol_step(&mut st, &env, &zero, &mut rng);
            assert!(c == CellIdx(0) || env.neighbors(CellIdx(0)).contains(&c));
        }
        let restricted = PatrolPolicy::HotspotWeighted {
            weights: vec![1.0; env.len()].into(),
            jurisdiction: Some(vec![CellIdx(4), CellIdx(5)].into()),
        };
        for _ in 0..200 {
            let mut st = AgentState::at(CellIdx(0));
            let c = police_patrol_step(&mut st, &env, &restricted, &mut rng);
            assert!(c == CellIdx(4) || c == CellIdx(5));
        }
    }
}
