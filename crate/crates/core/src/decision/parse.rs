use serde_json::Value;

use super::context::DecisionContext;
use super::{CrimeDecision, DecisionError};

/// Yields every balanced `{...}` span in `text`, outermost first, skipping
/// braces inside JSON strings.
fn object_spans(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut start = 0;
    while let Some(off) = text[start..].find('{') {
        let open = start + off;
        let mut depth = 0usize;
        let mut in_str = false;
        let mut escaped = false;
        let mut end = None;
        for (i, &b) in bytes.iter().enumerate().skip(open) {
            if in_str {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_str = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(i);
                        break;
                    }
                }
                _ => {}
            }
        }
        match end {
            Some(e) => {
                spans.push(&text[open..=e]);
                start = e + 1;
            }
            None => break,
        }
    }
    spans
}

fn as_bool(v: &Value) -> Option<bool> {
    match v {
        Value::Bool(b) => Some(*b),
        Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        },
        _ => None,
    }
}

/// Parses a model completion into a decision.
///
/// Takes the first balanced top-level object that parses as JSON and has a
/// `status` key; surrounding prose is ignored. A positive decision must name
/// an `objective_id` among the context's targets.
pub fn parse_decision(raw_text: &str, context: &DecisionContext) -> Result<CrimeDecision, DecisionError> {
    let obj = object_spans(raw_text)
        .into_iter()
        .filter_map(|s| serde_json::from_str::<Value>(s).ok())
        .find(|v| v.get("status").is_some())
        .ok_or_else(|| {
            let preview: String = raw_text.chars().take(80).collect();
            DecisionError::ParseFailure(format!("no object with `status` in {preview:?}"))
        })?;
    let status = as_bool(&obj["status"])
        .ok_or_else(|| DecisionError::ParseFailure(format!("`status` is not a boolean: {}", obj["status"])))?;
    let reasoning = obj.get("reasoning").and_then(Value::as_str).unwrap_or_default().to_owned();
    if !status {
        return Ok(CrimeDecision::no_crime(reasoning));
    }
    let target = match obj.get("objective_id") {
        Some(Value::String(s)) => Some(s.trim().to_owned()),
        Some(Value::Number(n)) => Some(n.to_string()),
        _ => None,
    };
    match target {
        Some(t) if context.has_target(&t) => Ok(CrimeDecision::crime(t, reasoning)),
        other => Err(DecisionError::InvalidTarget(other)),
    }
}
