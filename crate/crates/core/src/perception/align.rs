use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::gateway::{CompletionRequest, Gateway};
use crate::rng::{mix, seeded, Stream};

use super::{pearson, PerceptionError};

/// Scores images under a prompt. Output is aligned with `image_ids`.
pub trait SafetyScorer: Sync {
    fn score(&self, prompt: &str, image_ids: &[&str]) -> Result<Vec<f64>, PerceptionError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub image_id: String,
    pub predicted: f64,
    pub human: f64,
}

/// What the optimizer sees each iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRequest {
    pub iteration: u32,
    pub prompt: String,
    pub train_pearson: Option<f64>,
    /// Samples with the largest absolute error, worst first.
    pub worst: Vec<ScoredSample>,
}

/// Proposes a revised prompt.
pub trait PromptOptimizer {
    fn propose(&mut self, request: &OptimizerRequest) -> Result<String, PerceptionError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub max_iters: u32,
    /// Consecutive non-improving proposals before stopping.
    pub patience: u32,
    pub worst_k: usize,
    pub train_fraction: f64,
    pub split_seed: u64,
    /// Stop as soon as the best train correlation reaches this value.
    pub target_pearson: Option<f64>,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig { max_iters: 10, patience: 3, worst_k: 10, train_fraction: 0.7, split_seed: 0, target_pearson: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: u32,
    pub prompt: String,
    pub train_pearson: Option<f64>,
    pub eval_pearson: Option<f64>,
    pub adopted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub best_prompt: String,
    pub best_train_pearson: Option<f64>,
    pub best_eval_pearson: Option<f64>,
    pub trace: Vec<TraceEntry>,
    /// Whether `target_pearson` was reached.
    pub converged: bool,
    pub train_ids: Vec<String>,
    pub eval_ids: Vec<String>,
}

impl AlignmentResult {
    /// Best train correlation seen up to each trace entry.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        self.trace
            .iter()
            .map(|e| {
                if e.adopted {
                    best = best.max(e.train_pearson.unwrap_or(f64::NEG_INFINITY));
                }
                best
            })
            .collect()
    }
}

/// The loop stopped on an engine failure; `partial` holds the trace so far.
#[derive(Debug, thiserror::Error)]
#[error("alignment aborted: {error}")]
pub struct AlignAbort {
    pub error: PerceptionError,
    pub partial: AlignmentResult,
}

/// Seeded shuffle, then the first `round(fraction * n)` ids form the train
/// split.
pub fn split_ids(ids: &[&str], fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut v: Vec<String> = ids.iter().map(|s| (*s).to_owned()).collect();
    v.sort();
    v.shuffle(&mut seeded(mix(&[seed, Stream::Split as u64])));
    let k = ((fraction * v.len() as f64).round() as usize).min(v.len());
    let eval = v.split_off(k);
    (v, eval)
}

struct Scored {
    train: Vec<f64>,
    train_r: Option<f64>,
    eval_r: Option<f64>,
}

fn score_prompt(
    scorer: &dyn SafetyScorer,
    prompt: &str,
    train: &[&str],
    eval: &[&str],
    human_train: &[f64],
    human_eval: &[f64],
) -> Result<Scored, PerceptionError> {
    let train_scores = scorer.score(prompt, train)?;
    let eval_scores = scorer.score(prompt, eval)?;
    if train_scores.len() != train.len() || eval_scores.len() != eval.len() {
        return Err(PerceptionError::Scorer("scorer returned the wrong number of scores".into()));
    }
    Ok(Scored {
        train_r: pearson(&train_scores, human_train).ok(),
        eval_r: pearson(&eval_scores, human_eval).ok(),
        train: train_scores,
    })
}

fn worst(ids: &[&str], predicted: &[f64], human: &[f64], k: usize) -> Vec<ScoredSample> {
    let mut v: Vec<ScoredSample> = ids
        .iter()
        .zip(predicted.iter().zip(human))
        .map(|(id, (&p, &h))| ScoredSample { image_id: (*id).to_owned(), predicted: p, human: h })
        .collect();
    v.sort_by(|a, b| (b.predicted - b.human).abs().total_cmp(&(a.predicted - a.human).abs()).then(a.image_id.cmp(&b.image_id)));
    v.truncate(k);
    v
}

fn better(new: Option<f64>, old: Option<f64>) -> bool {
    match (new, old) {
        (Some(n), Some(o)) => n > o,
        (Some(_), None) => true,
        _ => false,
    }
}

/// Refines `initial_prompt` so scorer output correlates with `human`.
///
/// Each iteration sends the current best prompt, its train correlation and
/// the worst-scored train samples to the optimizer. The proposal is adopted
/// only if it raises the train correlation; otherwise a stall is counted.
pub fn align_prompt(
    human: &BTreeMap<String, f64>,
    initial_prompt: &str,
    scorer: &dyn SafetyScorer,
    optimizer: &mut dyn PromptOptimizer,
    config: &AlignConfig,
) -> Result<AlignmentResult, AlignAbort> {
    let ids: Vec<&str> = human.keys().map(String::as_str).collect();
    let (train_ids, eval_ids) = split_ids(&ids, config.train_fraction, config.split_seed);
    let train: Vec<&str> = train_ids.iter().map(String::as_str).collect();
    let eval: Vec<&str> = eval_ids.iter().map(String::as_str).collect();
    let human_train: Vec<f64> = train.iter().map(|id| human[*id]).collect();
    let human_eval: Vec<f64> = eval.iter().map(|id| human[*id]).collect();

    let mut result = AlignmentResult {
        best_prompt: initial_prompt.to_owned(),
        best_train_pearson: None,
        best_eval_pearson: None,
        trace: Vec::new(),
        converged: false,
        train_ids: train_ids.clone(),
        eval_ids: eval_ids.clone(),
    };
    let reached = |r: Option<f64>| matches!((r, config.target_pearson), (Some(r), Some(t)) if r >= t);

    let mut current = match score_prompt(scorer, initial_prompt, &train, &eval, &human_train, &human_eval) {
        Ok(s) => s,
        Err(error) => return Err(AlignAbort { error, partial: result }),
    };
    result.best_train_pearson = current.train_r;
    result.best_eval_pearson = current.eval_r;
    result.trace.push(TraceEntry {
        iteration: 0,
        prompt: initial_prompt.to_owned(),
        train_pearson: current.train_r,
        eval_pearson: current.eval_r,
        adopted: true,
    });
    if reached(current.train_r) {
        result.converged = true;
        return Ok(result);
    }

    let mut stalls = 0;
    for iteration in 1..=config.max_iters {
        let request = OptimizerRequest {
            iteration,
            prompt: result.best_prompt.clone(),
            train_pearson: current.train_r,
            worst: worst(&train, &current.train, &human_train, config.worst_k),
        };
        let proposal = match optimizer.propose(&request) {
            Ok(p) => p,
            Err(error) => return Err(AlignAbort { error, partial: result }),
        };
        let scored = match score_prompt(scorer, &proposal, &train, &eval, &human_train, &human_eval) {
            Ok(s) => s,
            Err(error) => return Err(AlignAbort { error, partial: result }),
        };
        let adopted = better(scored.train_r, current.train_r);
        result.trace.push(TraceEntry {
            iteration,
            prompt: proposal.clone(),
            train_pearson: scored.train_r,
            eval_pearson: scored.eval_r,
            adopted,
        });
        if adopted {
            tracing::info!(iteration, train = ?scored.train_r, "adopted revised prompt");
            result.best_prompt = proposal;
            result.best_train_pearson = scored.train_r;
            result.best_eval_pearson = scored.eval_r;
            current = scored;
            stalls = 0;
            if reached(current.train_r) {
                result.converged = true;
                break;
            }
        } else {
            stalls += 1;
            if stalls >= config.patience {
                break;
            }
        }
    }
    Ok(result)
}

/// Scores looked up from a table keyed by prompt, then image id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FixtureScorer {
    pub scores: BTreeMap<String, BTreeMap<String, f64>>,
}

impl SafetyScorer for FixtureScorer {
    fn score(&self, prompt: &str, image_ids: &[&str]) -> Result<Vec<f64>, PerceptionError> {
        let table = self.scores.get(prompt).ok_or_else(|| {
            PerceptionError::Scorer(format!(
                "no fixture scores for prompt starting {:?}",
                prompt.chars().take(40).collect::<String>()
            ))
        })?;
        image_ids
            .iter()
            .map(|id| {
                table.get(*id).copied().ok_or_else(|| PerceptionError::Scorer(format!("no fixture score for image `{id}`")))
            })
            .collect()
    }
}

/// Proposes prompts from a fixed list; the last one repeats once the list
/// runs out.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedOptimizer {
    pub proposals: Vec<String>,
    #[serde(skip)]
    next: usize,
}

impl ScriptedOptimizer {
    pub fn new(proposals: impl IntoIterator<Item = impl Into<String>>) -> Self {
        ScriptedOptimizer { proposals: proposals.into_iter().map(Into::into).collect(), next: 0 }
    }
}

impl PromptOptimizer for ScriptedOptimizer {
    fn propose(&mut self, _: &OptimizerRequest) -> Result<String, PerceptionError> {
        let p = self
            .proposals
            .get(self.next.min(self.proposals.len().saturating_sub(1)))
            .cloned()
            .ok_or_else(|| PerceptionError::Optimizer("scripted optimizer has no proposals".into()))?;
        self.next += 1;
        Ok(p)
    }
}

/// Parses a scoring reply: `overall_safety_score` on the 1-5 rubric, mapped
/// to `[0, 1]`, or a direct `safety_score` in `[0, 1]`.
fn parse_score(text: &str) -> Option<f64> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    let v: serde_json::Value = serde_json::from_str(text.get(start..=end)?).ok()?;
    if let Some(s) = v.get("overall_safety_score").and_then(serde_json::Value::as_f64) {
        return Some(((s - 1.0) / 4.0).clamp(0.0, 1.0));
    }
    v.get("safety_score").and_then(serde_json::Value::as_f64).map(|s| s.clamp(0.0, 1.0))
}

/// Scores images through a vision-capable chat endpoint. The image is
/// referenced by URL built from `image_url_template` (`{image_id}` is
/// replaced).
#[derive(Debug, Clone)]
pub struct GatewayScorer {
    pub gateway: Arc<Gateway>,
    pub model: String,
    pub image_url_template: String,
    pub max_tokens: u32,
}

impl SafetyScorer for GatewayScorer {
    fn score(&self, prompt: &str, image_ids: &[&str]) -> Result<Vec<f64>, PerceptionError> {
        let prompt_tag = crate::rng::stable_hash(prompt);
        let requests: Vec<CompletionRequest> = image_ids
            .iter()
            .map(|id| CompletionRequest {
                system_text: prompt.to_owned(),
                user_text: format!("Image: {}", self.image_url_template.replace("{image_id}", id)),
                model: self.model.clone(),
                temperature: 0.0,
                max_tokens: self.max_tokens,
                tag: format!("score:{prompt_tag:016x}:{id}"),
            })
            .collect();
        let results = self.gateway.complete_batch(&requests);
        requests
            .iter()
            .map(|r| match results.get(&r.tag) {
                Some(Ok(c)) => {
                    parse_score(&c.text).ok_or_else(|| PerceptionError::Scorer(format!("unparsable score for `{}`", r.tag)))
                }
                Some(Err(e)) => Err(PerceptionError::Scorer(e.to_string())),
                None => Err(PerceptionError::Scorer(format!("no result for `{}`", r.tag))),
            })
            .collect()
    }
}

/// Asks a chat model to rewrite the scoring prompt.
#[derive(Debug, Clone)]
pub struct GatewayOptimizer {
    pub gateway: Arc<Gateway>,
    pub model: String,
    pub max_tokens: u32,
}

impl PromptOptimizer for GatewayOptimizer {
    fn propose(&mut self, request: &OptimizerRequest) -> Result<String, PerceptionError> {
        let samples = request
            .worst
            .iter()
            .map(|s| format!("- {}: model {:.3}, human {:.3}", s.image_id, s.predicted, s.human))
            .collect::<Vec<_>>()
            .join("\n");
        let metric = request.train_pearson.map_or("undefined".to_owned(), |r| format!("{r:.4}"));
        let req = CompletionRequest {
            system_text: "You improve prompts for rating street-level safety from images so that the ratings agree with human judgments. Reply with the full revised prompt only.".into(),
            user_text: format!(
                "Current prompt:\n<<<\n{}\n>>>\n\nPearson correlation with human scores on the training images: {metric}\n\nImages with the largest disagreement:\n{samples}\n\nRevise the prompt and its scoring criteria to reduce these disagreements.",
                request.prompt
            ),
            model: self.model.clone(),
            temperature: 0.7,
            max_tokens: self.max_tokens,
            tag: format!("optimize:{}", request.iteration),
        };
        let text = self.gateway.complete(&req).map_err(|e| PerceptionError::Optimizer(e.to_string()))?.text;
        let trimmed = text.trim().trim_start_matches("```").trim_end_matches("```").trim();
        if trimmed.is_empty() {
            return Err(PerceptionError::Optimizer("optimizer returned an empty prompt".into()));
        }
        Ok(trimmed.to_owned())
    }
}
