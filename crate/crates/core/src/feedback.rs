//! Episode comparison and templated verbal feedback.
//!
//! Feedback is a pure function of two consecutive episodes' metrics and the
//! preference. Its phrasing lives in `templates/feedback.json`; a different
//! template file can be supplied at run time.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Environment, FeatureClass};
use crate::metrics::{EpisodeMetrics, LevelShare, PreferenceSpec};

const DEFAULT_TEMPLATE: &str = include_str!("../templates/feedback.json");

#[derive(Debug, Error)]
pub enum FeedbackError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("coverage levels differ between episodes")]
    CoverageMismatch,
    #[error("feedback template: {0}")]
    Template(String),
}

/// Phrases and thresholds used to render feedback and prompts.
///
/// Utility changes below `small_change_threshold` of the previous utility
/// (or of 1, whichever is larger) are called small.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackTemplate {
    pub small_change_threshold: f64,
    pub max_directives: usize,
    pub qualifier_small: String,
    pub qualifier_large: String,
    pub direction_up: String,
    pub direction_down: String,
    pub utility_changed: String,
    pub utility_unchanged: String,
    pub coverage_changed: String,
    pub coverage_unchanged: String,
    pub increase: String,
    pub decrease: String,
    pub aligned: String,
    pub task: String,
    pub context: String,
    pub instruction: String,
    pub output: String,
    pub separator: String,
    pub reflection_heading: String,
    pub digest: String,
    pub format_reminder: String,
}

impl Default for FeedbackTemplate {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_TEMPLATE).expect("bundled feedback template is valid")
    }
}

impl FeedbackTemplate {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, FeedbackError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| FeedbackError::Template(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| FeedbackError::Template(e.to_string()))
    }
}

/// Replaces `{name}` placeholders in one pass; substituted text is not
/// rescanned and unknown placeholders are left verbatim.
pub fn fill(template: &str, vars: &[(&str, String)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open + 1..];
        let name_len = tail
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(tail.len());
        let value = (tail[name_len..].starts_with('}'))
            .then(|| vars.iter().find(|(k, _)| *k == &tail[..name_len]))
            .flatten();
        match value {
            Some((_, v)) => {
                out.push_str(v);
                rest = &tail[name_len + 1..];
            }
            None => {
                out.push('{');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Fixed-point rendering with trailing zeros trimmed.
pub fn fmt_num(x: f64, decimals: usize) -> String {
    let s = format!("{x:.decimals$}");
    let s = if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    };
    if s == "-0" {
        "0".to_string()
    } else {
        s
    }
}

fn signed(x: f64, decimals: usize) -> String {
    let s = fmt_num(x, decimals);
    if s.starts_with('-') || s == "0" {
        s
    } else {
        format!("+{s}")
    }
}

fn percent(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

/// Changes between consecutive episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub du: f64,
    pub dd: Vec<f64>,
    pub dcoverage: Vec<LevelShare>,
}

pub fn compare(curr: &EpisodeMetrics, prev: &EpisodeMetrics) -> Result<Deltas, FeedbackError> {
    let (a, b) = (curr.distribution.as_slice(), prev.distribution.as_slice());
    if a.len() != b.len() {
        return Err(FeedbackError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if curr.coverage.0.len() != prev.coverage.0.len() {
        return Err(FeedbackError::CoverageMismatch);
    }
    let mut dcoverage = Vec::with_capacity(curr.coverage.0.len());
    for (c, p) in curr.coverage.0.iter().zip(&prev.coverage.0) {
        if c.dimension != p.dimension || c.level != p.level {
            return Err(FeedbackError::CoverageMismatch);
        }
        dcoverage.push(LevelShare {
            dimension: c.dimension.clone(),
            level: c.level.clone(),
            proportion: c.proportion - p.proportion,
        });
    }
    Ok(Deltas {
        du: curr.utility - prev.utility,
        dd: a.iter().zip(b).map(|(x, y)| x - y).collect(),
        dcoverage,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerbalFeedback {
    pub text: String,
    pub deltas: Deltas,
    /// Under-served classes, most under-served first.
    pub increase: Vec<usize>,
    /// Over-served classes, most over-served first.
    pub decrease: Vec<usize>,
}

/// Classes whose share deviates from the target in the given direction,
/// ranked by absolute deviation then class id.
fn ranked(curr: &[f64], target: &[f64], under: bool, cap: usize) -> Vec<usize> {
    const TOL: f64 = 1e-12;
    let mut ids: Vec<usize> = (0..curr.len())
        .filter(|&z| {
            let gap = curr[z] - target[z];
            if under {
                gap < -TOL
            } else {
                gap > TOL
            }
        })
        .collect();
    ids.sort_by(|&a, &b| {
        let da = (curr[a] - target[a]).abs();
        let db = (curr[b] - target[b]).abs();
        db.total_cmp(&da).then(a.cmp(&b))
    });
    ids.truncate(cap);
    ids
}

pub fn render_feedback(
    deltas: &Deltas,
    pref: &PreferenceSpec,
    curr: &EpisodeMetrics,
    classes: &[FeatureClass],
    template: &FeedbackTemplate,
) -> VerbalFeedback {
    let mut sentences = Vec::new();

    let previous_u = curr.utility - deltas.du;
    if deltas.du == 0.0 {
        sentences.push(fill(
            &template.utility_unchanged,
            &[("current", fmt_num(curr.utility, 3))],
        ));
    } else {
        let relative = deltas.du.abs() / previous_u.abs().max(1.0);
        let qualifier = if relative < template.small_change_threshold {
            &template.qualifier_small
        } else {
            &template.qualifier_large
        };
        let direction = if deltas.du > 0.0 {
            &template.direction_up
        } else {
            &template.direction_down
        };
        sentences.push(fill(
            &template.utility_changed,
            &[
                ("direction", direction.clone()),
                ("qualifier", qualifier.clone()),
                ("delta", signed(deltas.du, 3)),
                ("current", fmt_num(curr.utility, 3)),
            ],
        ));
    }

    for (share, delta) in curr.coverage.0.iter().zip(&deltas.dcoverage) {
        let reported = match &pref.focus {
            Some(f) => f.dimension == share.dimension && f.level == share.level,
            None => true,
        };
        if !reported {
            continue;
        }
        let vars = [
            ("dimension", share.dimension.clone()),
            ("level", share.level.clone()),
            ("previous", percent(share.proportion - delta.proportion)),
            ("current", percent(share.proportion)),
            ("delta", signed(100.0 * delta.proportion, 1)),
        ];
        let t = if percent(delta.proportion.abs()) == "0.0" {
            &template.coverage_unchanged
        } else {
            &template.coverage_changed
        };
        sentences.push(fill(t, &vars));
    }

    let d = curr.distribution.as_slice();
    let target = pref.target.as_slice();
    let increase = ranked(d, target, true, template.max_directives);
    let decrease = ranked(d, target, false, template.max_directives);
    let mut lines = vec![sentences.join(" ")];
    if increase.is_empty() && decrease.is_empty() {
        lines.push(template.aligned.clone());
    }
    for (ids, t) in [(&increase, &template.increase), (&decrease, &template.decrease)] {
        for &z in ids {
            lines.push(fill(
                t,
                &[
                    ("class", classes.get(z).map_or_else(|| format!("class {z}"), |c| c.to_string())),
                    ("share", percent(d[z])),
                    ("target", percent(target[z])),
                ],
            ));
        }
    }

    VerbalFeedback {
        text: lines.join("\n"),
        deltas: deltas.clone(),
        increase,
        decrease,
    }
}

/// Fixed task block plus an append-only list of reflections.
///
/// With a cap, entries beyond the most recent `cap` are folded into a
/// one-line digest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    pub fixed: String,
    pub editable: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<Digest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Digest {
    pub count: usize,
    pub summary: Vec<String>,
}

impl PromptState {
    pub fn new(fixed: impl Into<String>) -> Self {
        Self {
            fixed: fixed.into(),
            ..Self::default()
        }
    }

    pub fn with_cap(mut self, cap: Option<usize>) -> Self {
        self.cap = cap;
        self
    }

    /// Reflections recorded so far, including digested ones.
    pub fn rounds(&self) -> usize {
        self.editable.len() + self.digest.as_ref().map_or(0, |d| d.count)
    }
}

fn first_sentence(text: &str) -> String {
    let line = text.lines().next().unwrap_or_default();
    match line.find(". ") {
        Some(i) => line[..=i].to_string(),
        None => line.to_string(),
    }
}

/// Returns a new state with `fb` appended.
pub fn update_prompt(p: &PromptState, fb: &VerbalFeedback) -> PromptState {
    let mut next = p.clone();
    next.editable.push(fb.text.clone());
    if let Some(cap) = next.cap {
        while next.editable.len() > cap.max(1) {
            let old = next.editable.remove(0);
            let digest = next.digest.get_or_insert_with(Digest::default);
            digest.count += 1;
            digest.summary.push(first_sentence(&old));
        }
    }
    next
}

pub fn render_prompt(p: &PromptState, template: &FeedbackTemplate) -> String {
    let mut out = p.fixed.clone();
    out.push_str(&template.separator);
    if let Some(d) = &p.digest {
        out.push_str(&fill(
            &template.digest,
            &[
                ("count", d.count.to_string()),
                ("summary", d.summary.join(" ")),
            ],
        ));
        out.push('\n');
    }
    if p.editable.is_empty() {
        out.push_str(&template.reflection_heading);
        out.push('\n');
    }
    for entry in &p.editable {
        out.push_str(&template.reflection_heading);
        out.push('\n');
        out.push_str(entry);
        out.push_str("\n\n");
    }
    out
}

/// The fixed task block describing the environment, preference and output
/// contract.
pub fn fixed_prompt(
    env: &Environment,
    pref: &PreferenceSpec,
    r_max: f64,
    template: &FeedbackTemplate,
) -> String {
    let classes: Vec<String> = env
        .classes()
        .iter()
        .zip(env.class_sizes())
        .map(|(c, n)| format!("  {}: {} ({} arms)", c.id, c, n))
        .collect();
    let targets: Vec<String> = pref
        .target
        .as_slice()
        .iter()
        .enumerate()
        .map(|(z, t)| format!("  {z}: {}%", percent(*t)))
        .collect();
    let example = format!(
        "{{{}}}",
        (0..env.n_classes())
            .map(|z| format!("\"{z}\": 0.0"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    let directive = match &pref.focus {
        Some(d) => d.to_string(),
        None => pref.directive_text.clone(),
    };
    let r = fmt_num(r_max, 6);
    [
        fill(
            &template.task,
            &[
                ("budget", env.budget().to_string()),
                ("n", env.n_arms().to_string()),
                ("horizon", env.horizon().to_string()),
                ("directive", directive),
            ],
        ),
        fill(
            &template.context,
            &[("classes", classes.join("\n")), ("targets", targets.join("\n"))],
        ),
        fill(&template.instruction, &[("r_max", r.clone())]),
        fill(&template.output, &[("example", example)]),
    ]
    .join("\n")
}
