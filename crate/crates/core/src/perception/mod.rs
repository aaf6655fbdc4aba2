//! Street-level safety perception.
//!
//! Per-image safety scores are averaged into per-cell profiles, human
//! annotations are turned into discrete reference scores, and the scoring
//! prompt is refined against those references by an optimizer loop.

mod align;
mod annotations;
mod stats;

pub use align::{
    align_prompt, split_ids, AlignAbort, AlignConfig, AlignmentResult, FixtureScorer, GatewayOptimizer, GatewayScorer,
    OptimizerRequest, PromptOptimizer, SafetyScorer, ScoredSample, ScriptedOptimizer, TraceEntry,
};
pub use annotations::{aggregate_annotations, quantize, AnnotationSet, Rating, Triplet, LEVELS};
pub use stats::{cronbach_alpha, pearson};

use std::collections::BTreeMap;
use std::io::Read;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::CityEnvironment;
use crate::gateway::{CompletionRequest, Gateway};
use crate::ids::CellId;

/// Verbatim street-view scoring prompt used as the alignment starting point.
pub const PERCEIVED_SCORE_PROMPT: &str = include_str!("../../templates/perceived_score.txt");

#[derive(Debug, thiserror::Error)]
pub enum PerceptionError {
    #[error("row {row}: {reason}")]
    MalformedRow { row: u64, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("cell `{0}` has no image scores")]
    NoRecords(String),
    #[error("unknown cell `{0}`")]
    UnknownCell(String),
    #[error("{0}")]
    Statistic(String),
    #[error("invalid annotations: {0}")]
    Annotations(String),
    #[error("scorer failed: {0}")]
    Scorer(String),
    #[error("optimizer failed: {0}")]
    Optimizer(String),
    #[error("summarizer failed: {0}")]
    Summarizer(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScoreRecord {
    pub image_id: String,
    pub cell_id: CellId,
    pub safety_score: f64,
    pub descriptors: Vec<String>,
}

/// Reads `image_id,cell_id,safety_score,descriptors_json`. With an
/// environment, cell ids are checked against it.
pub fn read_image_scores<R: Read>(input: R, env: Option<&CityEnvironment>) -> Result<Vec<ImageScoreRecord>, PerceptionError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec.position().map_or(0, |p| p.line());
        let bad = |reason: String| PerceptionError::MalformedRow { row, reason };
        let get = |i: usize, name: &str| rec.get(i).ok_or_else(|| bad(format!("missing `{name}`")));
        let image_id = get(0, "image_id")?.to_owned();
        let cell_id = CellId::from(get(1, "cell_id")?);
        let score: f64 = get(2, "safety_score")?.parse().map_err(|e| bad(format!("safety_score: {e}")))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(bad(format!("safety_score {score} outside [0, 1]")));
        }
        let raw = get(3, "descriptors_json")?;
        let descriptors: Vec<String> = if raw.is_empty() {
            Vec::new()
        } else {
            serde_json::from_str(raw).map_err(|e| bad(format!("descriptors_json: {e}")))?
        };
        if let Some(env) = env {
            if env.index(cell_id.as_str()).is_none() {
                return Err(PerceptionError::UnknownCell(cell_id.to_string()));
            }
        }
        out.push(ImageScoreRecord { image_id, cell_id, safety_score: score, descriptors });
    }
    Ok(out)
}

/// Turns a cell's image descriptors into one description.
pub trait Summarizer: Sync {
    fn summarize(&self, cell_id: &str, descriptors: &[&str]) -> Result<String, PerceptionError>;
}

/// The five most frequent descriptors, ties by first appearance, joined by
/// `, `.
#[derive(Debug, Clone, Copy, Default)]
pub struct FallbackSummarizer;

impl Summarizer for FallbackSummarizer {
    fn summarize(&self, _cell_id: &str, descriptors: &[&str]) -> Result<String, PerceptionError> {
        let mut seen: Vec<(&str, usize)> = Vec::new();
        for d in descriptors {
            match seen.iter_mut().find(|(s, _)| s == d) {
                Some((_, n)) => *n += 1,
                None => seen.push((d, 1)),
            }
        }
        seen.sort_by_key(|e| std::cmp::Reverse(e.1));
        Ok(seen.iter().take(5).map(|(s, _)| *s).collect::<Vec<_>>().join(", "))
    }
}

/// Summaries from a chat model.
#[derive(Debug, Clone)]
pub struct GatewaySummarizer {
    pub gateway: Arc<Gateway>,
    pub model: String,
    pub max_tokens: u32,
}

impl Summarizer for GatewaySummarizer {
    fn summarize(&self, cell_id: &str, descriptors: &[&str]) -> Result<String, PerceptionError> {
        let req = CompletionRequest {
            system_text: "You summarize street-level observations of an urban neighborhood in one or two sentences.".into(),
            user_text: format!("Observations from street images of area {cell_id}:\n- {}", descriptors.join("\n- ")),
            model: self.model.clone(),
            temperature: 0.0,
            max_tokens: self.max_tokens,
            tag: format!("summary:{cell_id}"),
        };
        self.gateway.complete(&req).map(|c| c.text.trim().to_owned()).map_err(|e| PerceptionError::Summarizer(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPerception {
    pub safety_score: f64,
    pub semantic_description: String,
    pub images: usize,
}

/// Mean score and summarized description for one cell's records.
pub fn aggregate_cell_perception(
    records: &[&ImageScoreRecord],
    summarizer: &dyn Summarizer,
) -> Result<CellPerception, PerceptionError> {
    let first = records.first().ok_or_else(|| PerceptionError::NoRecords(String::new()))?;
    let mean = records.iter().map(|r| r.safety_score).sum::<f64>() / records.len() as f64;
    let descriptors: Vec<&str> = records.iter().flat_map(|r| r.descriptors.iter().map(String::as_str)).collect();
    Ok(CellPerception {
        safety_score: mean,
        semantic_description: summarizer.summarize(first.cell_id.as_str(), &descriptors)?,
        images: records.len(),
    })
}

/// Aggregates every cell that has at least one record.
pub fn aggregate_by_cell(
    records: &[ImageScoreRecord],
    summarizer: &dyn Summarizer,
) -> Result<BTreeMap<CellId, CellPerception>, PerceptionError> {
    let mut groups: BTreeMap<&CellId, Vec<&ImageScoreRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(&r.cell_id).or_default().push(r);
    }
    groups.into_iter().map(|(id, recs)| Ok((id.clone(), aggregate_cell_perception(&recs, summarizer)?))).collect()
}

/// Writes aggregated perception into the environment's feature bundles.
/// Returns the ids of cells without any record.
pub fn apply_perception(env: &mut CityEnvironment, perception: &BTreeMap<CellId, CellPerception>) -> Vec<CellId> {
    let mut missing = Vec::new();
    for idx in env.indices().collect::<Vec<_>>() {
        let id = env.cell_id(idx).clone();
        match perception.get(&id) {
            Some(p) => {
                let f = env.features_mut(idx);
                f.safety_score = p.safety_score;
                f.semantic_description = p.semantic_description.clone();
            }
            None => missing.push(id),
        }
    }
    missing
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(cell: &str, score: f64, d: &[&str]) -> ImageScoreRecord {
        ImageScoreRecord {
            image_id: format!("{cell}-{score}"),
            cell_id: cell.into(),
            safety_score: score,
            descriptors: d.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn mean_and_fallback_summary() {
        let a = rec("A", 0.2, &["graffiti", "dim lighting"]);
        let b = rec("A", 0.4, &["dim lighting", "clean", "graffiti", "dim lighting"]);
        let p = aggregate_cell_perception(&[&a, &b], &FallbackSummarizer).unwrap();
        assert!((p.safety_score - 0.3).abs() < 1e-12);
        assert_eq!(p.semantic_description, "dim lighting, graffiti, clean");

        let single = rec("B", 0.7, &["tree-lined", "busy sidewalk"]);
        let p = aggregate_cell_perception(&[&single], &FallbackSummarizer).unwrap();
        assert_eq!((p.safety_score, p.semantic_description.as_str()), (0.7, "tree-lined, busy sidewalk"));

        assert!(matches!(aggregate_cell_perception(&[], &FallbackSummarizer), Err(PerceptionError::NoRecords(_))));
    }

    #[test]
    fn fallback_keeps_five() {
        let d = ["a", "b", "c", "d", "e", "f", "f"];
        assert_eq!(FallbackSummarizer.summarize("x", &d).unwrap(), "f, a, b, c, d");
    }

    #[test]
    fn reads_csv() {
        let csv = "image_id,cell_id,safety_score,descriptors_json\n\
                   i1,A,0.25,\"[\"\"graffiti\"\"]\"\n\
                   i2,A,0.75,\"[]\"\n";
        let recs = read_image_scores(csv.as_bytes(), None).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].descriptors, vec!["graffiti"]);
        let bad = "image_id,cell_id,safety_score,descriptors_json\ni1,A,1.5,[]\n";
        assert!(matches!(read_image_scores(bad.as_bytes(), None), Err(PerceptionError::MalformedRow { row: 2, .. })));
    }

    #[test]
    fn groups_by_cell() {
        let recs = vec![rec("B", 0.5, &["x"]), rec("A", 0.1, &["y"]), rec("B", 0.7, &["x"])];
        let m = aggregate_by_cell(&recs, &FallbackSummarizer).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[&CellId::from("B")].images, 2);
    }
}
