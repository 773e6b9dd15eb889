use std::path::Path;

use serde_json::Value;

use super::{RewardShaper, ShaperContext, ShaperError, ShaperOutput};
use crate::shaping::ShapingReward;

/// Replays a fixed list of shaping vectors, one per episode.
///
/// Scripts are JSON: a list of vectors, a `{"vectors": [...]}` object, or
/// a JSON-lines episode log whose records carry a `shaping` field. Vectors
/// may be arrays or objects keyed by class id.
#[derive(Clone, Debug)]
pub struct ScriptedShaper {
    vectors: Vec<ShapingReward>,
    r_max: f64,
}

impl ScriptedShaper {
    pub fn new(vectors: Vec<ShapingReward>, r_max: f64) -> Self {
        Self { vectors, r_max }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn from_path(path: impl AsRef<Path>, r_max: f64) -> Result<Self, ShaperError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ShaperError::Script(format!("{}: {e}", path.display())))?;
        Self::from_text(&text, r_max)
    }

    pub fn from_text(text: &str, r_max: f64) -> Result<Self, ShaperError> {
        let vectors = match serde_json::from_str::<Value>(text) {
            Ok(Value::Array(items)) => items.iter().map(vector).collect::<Result<_, _>>()?,
            Ok(Value::Object(map)) if map.contains_key("vectors") => match &map["vectors"] {
                Value::Array(items) => items.iter().map(vector).collect::<Result<_, _>>()?,
                _ => return Err(ShaperError::Script("`vectors` must be a list".into())),
            },
            // A single object is the first line of an episode log.
            Ok(_) | Err(_) => text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .enumerate()
                .map(|(i, line)| {
                    let v: Value = serde_json::from_str(line)
                        .map_err(|e| ShaperError::Script(format!("line {}: {e}", i + 1)))?;
                    v.get("shaping")
                        .ok_or_else(|| ShaperError::Script(format!("line {}: no `shaping` field", i + 1)))
                        .and_then(vector)
                })
                .collect::<Result<_, _>>()?,
        };
        Ok(Self { vectors, r_max })
    }
}

fn vector(v: &Value) -> Result<ShapingReward, ShaperError> {
    let number = |x: &Value| {
        x.as_f64()
            .ok_or_else(|| ShaperError::Script(format!("non-numeric entry {x}")))
    };
    match v {
        Value::Array(xs) => xs.iter().map(number).collect::<Result<_, _>>().map(ShapingReward),
        Value::Object(map) => {
            let mut entries = Vec::with_capacity(map.len());
            for (k, x) in map {
                let z: usize = k
                    .parse()
                    .map_err(|_| ShaperError::Script(format!("class key `{k}` is not an integer")))?;
                entries.push((z, number(x)?));
            }
            entries.sort_by_key(|e| e.0);
            if entries.iter().enumerate().any(|(i, e)| e.0 != i) {
                return Err(ShaperError::Script("class keys must be contiguous from 0".into()));
            }
            Ok(ShapingReward(entries.into_iter().map(|e| e.1).collect()))
        }
        other => Err(ShaperError::Script(format!("expected a vector, found {other}"))),
    }
}

impl RewardShaper for ScriptedShaper {
    fn tag(&self) -> &'static str {
        "scripted"
    }

    fn propose(&mut self, ctx: &ShaperContext<'_>) -> Result<ShaperOutput, ShaperError> {
        let v = self.vectors.get(ctx.k).ok_or(ShaperError::Exhausted {
            k: ctx.k,
            len: self.vectors.len(),
        })?;
        v.validate(ctx.env.n_classes(), self.r_max)
            .map_err(|source| ShaperError::Invalid { k: ctx.k, source })?;
        Ok(ShaperOutput {
            shaping: v.clone(),
            rationale: None,
            backend: self.tag().into(),
            gradient: None,
            warnings: Vec::new(),
        })
    }
}
