//! Distribution comparison metrics.
//!
//! Distributions are compared on a shared support. Wherever two raw
//! distributions meet, the support is the union of their cell ids and absent
//! cells count as zero.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::env::{ceil_count, extract_hotspots, rank_cells, CityEnvironment, CrimeDistribution, EnvError};
use crate::geo::haversine_km;
use crate::ids::CellId;
use crate::population::Population;
use crate::simulation::CrimeEvent;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("distributions have different supports ({left} vs {right} cells)")]
    SupportMismatch { left: usize, right: usize },
    #[error("alpha must lie in (0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("K must be positive, got {0}")]
    InvalidK(f64),
    #[error("distribution has no crimes")]
    EmptyDistribution,
    #[error("support is empty")]
    EmptySupport,
    #[error("no events to average over")]
    NoEvents,
    #[error("event references unknown criminal `{0}`")]
    UnknownAgent(String),
    #[error("event references unknown cell `{0}`")]
    UnknownCell(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("cannot write comparison table: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot write comparison table: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Per-cell shares summing to one over `support`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedDistribution {
    shares: BTreeMap<CellId, f64>,
}

impl NormalizedDistribution {
    /// Builds from explicit shares. No renormalisation is applied.
    pub fn from_shares<K: Into<CellId>>(shares: impl IntoIterator<Item = (K, f64)>) -> Self {
        NormalizedDistribution { shares: shares.into_iter().map(|(k, v)| (k.into(), v)).collect() }
    }

    pub fn shares(&self) -> &BTreeMap<CellId, f64> {
        &self.shares
    }

    pub fn share(&self, id: &str) -> f64 {
        self.shares.get(id).copied().unwrap_or(0.0)
    }

    pub fn support(&self) -> impl Iterator<Item = &CellId> {
        self.shares.keys()
    }

    pub fn len(&self) -> usize {
        self.shares.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shares.is_empty()
    }
}

/// Shares of `dist` over `support`. A zero total yields the uniform
/// distribution. Counts outside the support are ignored.
pub fn normalize<'a>(dist: &CrimeDistribution, support: impl IntoIterator<Item = &'a CellId>) -> NormalizedDistribution {
    let support: BTreeSet<&CellId> = support.into_iter().collect();
    let total: u64 = support.iter().map(|id| dist.count(id.as_str())).sum();
    let n = support.len() as f64;
    let shares = support
        .into_iter()
        .map(|id| {
            let s = if total == 0 { 1.0 / n } else { dist.count(id.as_str()) as f64 / total as f64 };
            (id.clone(), s)
        })
        .collect();
    NormalizedDistribution { shares }
}

/// Union of both distributions' cell ids.
pub fn union_support(a: &CrimeDistribution, b: &CrimeDistribution) -> BTreeSet<CellId> {
    a.counts().keys().chain(b.counts().keys()).cloned().collect()
}

fn aligned<'a>(p: &'a NormalizedDistribution, q: &'a NormalizedDistribution) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    if p.len() != q.len() || p.shares.keys().zip(q.shares.keys()).any(|(a, b)| a != b) {
        return Err(MetricsError::SupportMismatch { left: p.len(), right: q.len() });
    }
    Ok(p.shares.values().copied().zip(q.shares.values().copied()))
}

/// Jensen-Shannon divergence in nats.
pub fn jsd(p: &NormalizedDistribution, q: &NormalizedDistribution) -> Result<f64> {
    let term = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    Ok(aligned(p, q)?
        .map(|(a, b)| {
            let m = 0.5 * (a + b);
            0.5 * term(a, m) + 0.5 * term(b, m)
        })
        .sum::<f64>()
        .max(0.0))
}

pub fn rmse(p: &NormalizedDistribution, q: &NormalizedDistribution) -> Result<f64> {
    let n = p.len();
    if n == 0 {
        return Err(MetricsError::EmptySupport);
    }
    let sq: f64 = aligned(p, q)?.map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sq / n as f64).sqrt())
}

fn on_union(a: &CrimeDistribution, b: &CrimeDistribution) -> (CrimeDistribution, CrimeDistribution) {
    let support = union_support(a, b);
    let (mut a, mut b) = (a.clone(), b.clone());
    a.extend_support(&support);
    b.extend_support(&support);
    (a, b)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(MetricsError::InvalidAlpha(alpha))
    }
}

/// Top `n` cells of `dist` by count, ties by ascending id.
pub fn top_cells(dist: &CrimeDistribution, n: usize) -> BTreeSet<CellId> {
    rank_cells(dist).into_iter().take(n).map(|(k, _)| k.clone()).collect()
}

/// HR@K: fraction of real hotspots found among the top `ceil(K * |H_real|)`
/// simulated cells.
pub fn hit_rate(real: &CrimeDistribution, sim: &CrimeDistribution, alpha: f64, k: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !(k > 0.0 && k.is_finite()) {
        return Err(MetricsError::InvalidK(k));
    }
    let (real, sim) = on_union(real, sim);
    let h_real = extract_hotspots(&real, alpha)?;
    let h_real: BTreeSet<CellId> = h_real.cell_ids.into_iter().collect();
    let h_sim = top_cells(&sim, ceil_count(k * h_real.len() as f64));
    Ok(h_real.intersection(&h_sim).count() as f64 / h_real.len() as f64)
}

/// Overlap between hotspots newly appearing in the real event period and
/// those newly appearing in the simulated one. When no real hotspot is new
/// the value is 1 if no simulated hotspot is new either, else 0.
pub fn new_hotspot_concordance(
    real_base: &CrimeDistribution,
    real_event: &CrimeDistribution,
    sim_base: &CrimeDistribution,
    sim_event: &CrimeDistribution,
    alpha: f64,
) -> Result<f64> {
    check_alpha(alpha)?;
    let mut support = union_support(real_base, real_event);
    support.extend(union_support(sim_base, sim_event));
    let hot = |d: &CrimeDistribution| -> Result<BTreeSet<CellId>> {
        let mut d = d.clone();
        d.extend_support(&support);
        Ok(extract_hotspots(&d, alpha)?.cell_ids.into_iter().collect())
    };
    let new_real: BTreeSet<CellId> = hot(real_event)?.difference(&hot(real_base)?).cloned().collect();
    let new_sim: BTreeSet<CellId> = hot(sim_event)?.difference(&hot(sim_base)?).cloned().collect();
    if new_real.is_empty() {
        return Ok(if new_sim.is_empty() { 1.0 } else { 0.0 });
    }
    Ok(new_real.intersection(&new_sim).count() as f64 / new_real.len() as f64)
}

/// Share of all crime falling inside the distribution's own hotspots.
pub fn hotspot_crime_ratio(dist: &CrimeDistribution, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if dist.total() == 0 {
        return Err(MetricsError::EmptyDistribution);
    }
    Ok(extract_hotspots(dist, alpha)?.achieved_coverage)
}

/// Mean great-circle distance between each crime's cell and the offender's
/// residence cell, in kilometres.
pub fn mean_residence_crime_distance(events: &[CrimeEvent], population: &Population, env: &CityEnvironment) -> Result<f64> {
    if events.is_empty() {
        return Err(MetricsError::NoEvents);
    }
    let mut sum = 0.0;
    for ev in events {
        let agent =
            population.get(ev.criminal_id.as_str()).ok_or_else(|| MetricsError::UnknownAgent(ev.criminal_id.to_string()))?;
        let cell = env.index(ev.cell_id.as_str()).ok_or_else(|| MetricsError::UnknownCell(ev.cell_id.to_string()))?;
        sum += haversine_km(env.cell(cell).centroid, env.cell(agent.profile.residence).centroid);
    }
    Ok(sum / events.len() as f64)
}

/// Map key used for HR@K entries: `1.0`, `1.5`, `2.0`.
pub fn k_key(k: f64) -> String {
    if k.fract() == 0.0 {
        format!("{k:.1}")
    } else {
        format!("{k}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub alpha: f64,
    pub hr: BTreeMap<String, f64>,
    pub jsd: f64,
    pub rmse: f64,
    /// Hotspot crime ratio of the simulated distribution.
    pub hotspot_crime_ratio: f64,
    pub real_hotspot_crime_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nhc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_distance_km: Option<f64>,
    pub support_size: usize,
    pub real_total: u64,
    pub sim_total: u64,
    #[serde(default)]
    pub notes: Vec<String>,
}

/// Baseline distributions for the new-hotspot comparison.
#[derive(Debug, Clone, Copy)]
pub struct Baselines<'a> {
    pub real_base: &'a CrimeDistribution,
    pub sim_base: &'a CrimeDistribution,
}

pub fn evaluate(
    real: &CrimeDistribution,
    sim: &CrimeDistribution,
    alpha: f64,
    ks: &[f64],
    baselines: Option<Baselines<'_>>,
) -> Result<EvaluationReport> {
    check_alpha(alpha)?;
    let support = union_support(real, sim);
    if support.is_empty() {
        return Err(MetricsError::EmptySupport);
    }
    let (p, q) = (normalize(real, &support), normalize(sim, &support));
    let mut hr = BTreeMap::new();
    for &k in ks {
        hr.insert(k_key(k), hit_rate(real, sim, alpha, k)?);
    }
    let (real_u, sim_u) = on_union(real, sim);
    let hcr = if sim.total() == 0 { 0.0 } else { hotspot_crime_ratio(&sim_u, alpha)? };
    let nhc = baselines.map(|b| new_hotspot_concordance(b.real_base, real, b.sim_base, sim, alpha)).transpose()?;
    let mut notes = vec!["HR@K takes the top ceil(K * |H_real|) simulated cells".to_owned()];
    if sim.total() == 0 {
        notes.push("simulated distribution is empty; shares taken as uniform".into());
    }
    Ok(EvaluationReport {
        alpha,
        hr,
        jsd: jsd(&p, &q)?,
        rmse: rmse(&p, &q)?,
        hotspot_crime_ratio: hcr,
        real_hotspot_crime_ratio: hotspot_crime_ratio(&real_u, alpha)?,
        nhc,
        mean_distance_km: None,
        support_size: support.len(),
        real_total: real.total(),
        sim_total: sim.total(),
        notes,
    })
}

/// Writes `cell_id,real_share,sim_share,in_real_hotspot,in_sim_hotspot`.
pub fn write_cell_comparison<W: Write>(real: &CrimeDistribution, sim: &CrimeDistribution, alpha: f64, out: W) -> Result<()> {
    check_alpha(alpha)?;
    let support = union_support(real, sim);
    let (p, q) = (normalize(real, &support), normalize(sim, &support));
    let (real_u, sim_u) = on_union(real, sim);
    let hot = |d: &CrimeDistribution| -> Result<BTreeSet<CellId>> {
        if d.total() == 0 {
            return Ok(BTreeSet::new());
        }
        Ok(extract_hotspots(d, alpha)?.cell_ids.into_iter().collect())
    };
    let (hr, hs) = (hot(&real_u)?, hot(&sim_u)?);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["cell_id", "real_share", "sim_share", "in_real_hotspot", "in_sim_hotspot"])?;
    for id in &support {
        w.write_record([
            id.as_str(),
            &p.share(id.as_str()).to_string(),
            &q.share(id.as_str()).to_string(),
            &hr.contains(id).to_string(),
            &hs.contains(id).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(counts: &[u64]) -> CrimeDistribution {
        CrimeDistribution::from_counts(counts.iter().enumerate().map(|(i, &c)| (format!("c{i:02}"), c)))
    }

    fn nd(shares: &[f64]) -> NormalizedDistribution {
        NormalizedDistribution::from_shares(shares.iter().enumerate().map(|(i, &s)| (format!("c{i:02}"), s)))
    }

    #[test]
    fn normalize_cases() {
        let d = CrimeDistribution::from_counts([("A", 3), ("B", 1)]);
        let s: Vec<CellId> = vec!["A".into(), "B".into()];
        let n = normalize(&d, &s);
        assert_eq!(n.share("A"), 0.75);
        assert_eq!(n.share("B"), 0.25);

        let d = CrimeDistribution::from_counts([("A", 3)]);
        let s: Vec<CellId> = vec!["A".into(), "B".into(), "C".into()];
        let n = normalize(&d, &s);
        assert_eq!((n.share("A"), n.share("B"), n.share("C")), (1.0, 0.0, 0.0));

        let n = normalize(&CrimeDistribution::from_counts([("A", 0)]), &s);
        assert!(n.shares().values().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn jsd_and_rmse_basics() {
        assert_eq!(jsd(&nd(&[0.3, 0.7]), &nd(&[0.3, 0.7])).unwrap(), 0.0);
        assert!((jsd(&nd(&[1.0, 0.0]), &nd(&[0.0, 1.0])).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((rmse(&nd(&[0.5, 0.5]), &nd(&[1.0, 0.0])).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(jsd(&nd(&[1.0]), &nd(&[0.5, 0.5])), Err(MetricsError::SupportMismatch { .. })));
    }

    #[test]
    fn worked_hit_rate() {
        let real = dist(&[10, 9, 8, 1, 1, 1, 1, 1, 1, 1]);
        let sim = dist(&[2, 9, 8, 7, 1, 0, 0, 0, 0, 0]);
        assert_eq!(hit_rate(&real, &sim, 0.2, 1.0).unwrap(), 0.5);
        assert_eq!(hit_rate(&real, &sim, 0.2, 2.0).unwrap(), 1.0);
        assert_eq!(hit_rate(&real, &real, 0.2, 1.0).unwrap(), 1.0);
        assert!(matches!(hit_rate(&real, &sim, 0.0, 1.0), Err(MetricsError::InvalidAlpha(_))));
        assert!(matches!(hit_rate(&real, &sim, 0.2, 0.0), Err(MetricsError::InvalidK(_))));
    }

    #[test]
    fn nhc_conventions() {
        let base = dist(&[5, 4, 1, 1, 1]);
        assert_eq!(new_hotspot_concordance(&base, &base, &base, &base, 0.2).unwrap(), 1.0);
        let event = dist(&[1, 1, 9, 1, 1]);
        assert_eq!(new_hotspot_concordance(&base, &base, &base, &event, 0.2).unwrap(), 0.0);
        assert_eq!(new_hotspot_concordance(&base, &event, &base, &event, 0.2).unwrap(), 1.0);
    }

    #[test]
    fn hotspot_ratio_examples() {
        let d = dist(&[10, 9, 8, 1, 1, 1, 1, 1, 1, 1]);
        assert!((hotspot_crime_ratio(&d, 0.2).unwrap() - 19.0 / 34.0).abs() < 1e-12);
        assert!((hotspot_crime_ratio(&dist(&[3; 10]), 0.2).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(hotspot_crime_ratio(&dist(&[0, 0, 7]), 0.2).unwrap(), 1.0);
        assert!(matches!(hotspot_crime_ratio(&dist(&[0, 0]), 0.2), Err(MetricsError::EmptyDistribution)));
    }

    #[test]
    fn k_keys() {
        assert_eq!(k_key(1.0), "1.0");
        assert_eq!(k_key(1.5), "1.5");
        assert_eq!(k_key(2.0), "2.0");
    }

    #[test]
    fn report_and_csv() {
        let real = dist(&[10, 9, 8, 1, 1, 1, 1, 1, 1, 1]);
        let sim = dist(&[2, 9, 8, 7, 1, 0, 0, 0, 0, 0]);
        let r = evaluate(&real, &sim, 0.2, &[1.0, 1.5, 2.0], None).unwrap();
        assert_eq!(r.hr.len(), 3);
        assert_eq!(r.hr["1.0"], 0.5);
        assert!(r.jsd > 0.0 && r.jsd < 2f64.ln());
        let mut buf = Vec::new();
        write_cell_comparison(&real, &sim, 0.2, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("cell_id,real_share,sim_share,in_real_hotspot,in_sim_hotspot\n"));
        assert!(text.contains("c00,0.29411764705882354,0.07407407407407407,true,false"));
        assert_eq!(text.lines().count(), 11);
    }
}
