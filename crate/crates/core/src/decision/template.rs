use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::context::{Ablation, DecisionContext};

pub const CRIMINAL_SYSTEM: &str = include_str!("../../templates/criminal_system.txt");
pub const CRIMINAL_USER: &str = include_str!("../../templates/criminal_user.txt");
pub const CRIMINAL_USER_FLAT: &str = include_str!("../../templates/criminal_user_flat.txt");

/// Heading placed above scenario overlays, which are prepended to the user
/// message.
pub const OVERLAY_HEADING: &str = "**Current Events and Situational Context:**";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RenderError {
    #[error("template placeholder `{{{0}}}` has no binding")]
    Unbound(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub system_text: String,
    pub user_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub system_text: String,
    pub user_text: String,
    pub placeholder_set: BTreeSet<String>,
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase() || c == '_')
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

/// Splits `text` into literal and placeholder segments. Only `{ident}` with a
/// lowercase identifier counts as a placeholder; other braces are literal.
fn segments(text: &str) -> Vec<(bool, &str)> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_ident(&after[..close]) => {
                if open > 0 {
                    out.push((false, &rest[..open]));
                }
                out.push((true, &after[..close]));
                rest = &after[close + 1..];
            }
            _ => {
                out.push((false, &rest[..=open]));
                rest = after;
            }
        }
    }
    if !rest.is_empty() {
        out.push((false, rest));
    }
    out
}

fn placeholders(text: &str) -> impl Iterator<Item = &str> {
    segments(text).into_iter().filter(|(p, _)| *p).map(|(_, s)| s)
}

impl PromptTemplate {
    pub fn new(system_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        let system_text = system_text.into();
        let user_text = user_text.into();
        let placeholder_set = placeholders(&system_text).chain(placeholders(&user_text)).map(str::to_owned).collect();
        PromptTemplate { system_text, user_text, placeholder_set }
    }

    /// The routine-activity criminal template, unmodified.
    pub fn criminal() -> Self {
        Self::new(CRIMINAL_SYSTEM, CRIMINAL_USER)
    }

    /// Criminal template adapted to `ablation`: the flat variant when the
    /// routine-activity structure is off, minus lines carrying ablated fields.
    pub fn criminal_for(ablation: &Ablation) -> Self {
        let base = if ablation.rat_structure { CRIMINAL_USER } else { CRIMINAL_USER_FLAT };
        Self::new(CRIMINAL_SYSTEM, base).without_fields(&ablated_fields(ablation))
    }

    /// Drops every user-text line that mentions one of `fields`.
    pub fn without_fields(&self, fields: &[&str]) -> Self {
        if fields.is_empty() {
            return self.clone();
        }
        let mut user = String::with_capacity(self.user_text.len());
        for line in self.user_text.split_inclusive('\n') {
            if !placeholders(line).any(|p| fields.contains(&p)) {
                user.push_str(line);
            }
        }
        Self::new(self.system_text.clone(), user)
    }

    pub fn render(&self, bindings: &BTreeMap<&str, String>) -> Result<RenderedPrompt, RenderError> {
        Ok(RenderedPrompt {
            system_text: substitute(&self.system_text, bindings)?,
            user_text: substitute(&self.user_text, bindings)?,
        })
    }
}

fn ablated_fields(a: &Ablation) -> Vec<&'static str> {
    let mut f = Vec::new();
    if !a.safety_score {
        f.push("score");
    }
    if !a.semantic_description {
        f.push("desc");
    }
    if !a.static_features {
        f.extend(["poi_count", "population", "income", "poverty_ratio", "housing_value"]);
    }
    f
}

fn substitute(text: &str, bindings: &BTreeMap<&str, String>) -> Result<String, RenderError> {
    let mut out = String::with_capacity(text.len() + 256);
    for (is_placeholder, s) in segments(text) {
        if is_placeholder {
            let v = bindings.get(s).ok_or_else(|| RenderError::Unbound(s.to_owned()))?;
            out.push_str(v);
        } else {
            out.push_str(s);
        }
    }
    Ok(out)
}

/// Renders `template` for `context`. Scenario overlays, when present, are
/// prepended to the user message in order.
pub fn render_prompt(context: &DecisionContext, template: &PromptTemplate) -> Result<RenderedPrompt, RenderError> {
    let mut rendered = template.render(&context.bindings())?;
    if !context.overlays.is_empty() {
        let mut user = String::from(OVERLAY_HEADING);
        user.push('\n');
        for o in &context.overlays {
            user.push_str(o.trim_end());
            user.push('\n');
        }
        user.push('\n');
        user.push_str(&rendered.user_text);
        rendered.user_text = user;
    }
    Ok(rendered)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placeholder_detection_ignores_json_braces() {
        let t = PromptTemplate::criminal();
        assert!(!t.placeholder_set.contains("status"));
        assert!(t.system_text.contains("{  \"status\": true,"));
        let expected: BTreeSet<String> = [
            "agent_id",
            "city",
            "criminal_record",
            "current_location",
            "desc",
            "gender",
            "historical_trajectory",
            "housing_value",
            "income",
            "mayor",
            "party",
            "poi_count",
            "police_count",
            "population",
            "poverty_ratio",
            "race",
            "residence",
            "score",
            "strategy",
            "target_str",
        ]
        .into_iter()
        .map(String::from)
        .collect();
        assert_eq!(t.placeholder_set, expected);
        let flat = PromptTemplate::new(CRIMINAL_SYSTEM, CRIMINAL_USER_FLAT);
        assert_eq!(flat.placeholder_set, expected);
    }

    #[test]
    fn render_is_byte_exact_and_reports_unbound() {
        let t = PromptTemplate::new("S {a}", "x{a}y {b} {not json} {}");
        let b = BTreeMap::from([("a", "1".to_string()), ("b", "{a}".to_string())]);
        let r = t.render(&b).unwrap();
        assert_eq!(r.system_text, "S 1");
        // Substituted values are not re-expanded.
        assert_eq!(r.user_text, "x1y {a} {not json} {}");
        let missing = BTreeMap::from([("a", "1".to_string())]);
        assert_eq!(t.render(&missing), Err(RenderError::Unbound("b".into())));
    }

    #[test]
    fn ablation_strips_lines() {
        let a = Ablation { safety_score: false, ..Ablation::default() };
        let t = PromptTemplate::criminal_for(&a);
        assert!(!t.placeholder_set.contains("score"));
        assert!(!t.user_text.contains("Environmental Safety Score(0-1)"));
        assert!(t.placeholder_set.contains("desc"));
        let all = Ablation { rat_structure: false, safety_score: false, semantic_description: false, static_features: false };
        let t = PromptTemplate::criminal_for(&all);
        assert!(!t.user_text.contains("**Step 1"));
        for f in ["score", "desc", "income", "population", "poi_count"] {
            assert!(!t.placeholder_set.contains(f), "{f}");
        }
        assert!(t.placeholder_set.contains("police_count"));
    }
}
