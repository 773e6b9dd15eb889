//! Reward-shaper backends.
//!
//! A backend proposes the shaping vector for episode `k` from the prompt,
//! the metrics of episodes `0..k` and the preference. Every proposal is
//! validated before it reaches the solver.

mod analytic;
mod remote;
mod scripted;

pub use analytic::AnalyticShaper;
pub use remote::{extract_first_object, Exchange, RemoteConfig, RemoteShaper, DEFAULT_API_KEY_ENV};
pub use scripted::ScriptedShaper;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Environment;
use crate::feedback::{FeedbackTemplate, PromptState};
use crate::metrics::{EpisodeMetrics, PreferenceSpec};
use crate::shaping::{ShapingError, ShapingReward};

#[derive(Debug, Error)]
pub enum ShaperError {
    #[error("script exhausted: episode {k} requested, script holds {len} vectors")]
    Exhausted { k: usize, len: usize },
    #[error("episode {k}: invalid shaping vector: {source}")]
    Invalid {
        k: usize,
        #[source]
        source: ShapingError,
    },
    #[error("episode {k} needs the metrics of episode {}", .k - 1)]
    MissingHistory { k: usize },
    #[error("script: {0}")]
    Script(String),
    #[error("credential variable `{0}` is not set")]
    MissingCredential(String),
    #[error("network failure after {attempts} attempts: {message}")]
    Network { attempts: usize, message: String },
    #[error("remote returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("could not parse a shaping object from the response: {0}")]
    Parse(String),
    #[error("response is missing classes {missing:?}")]
    Incomplete { missing: Vec<usize> },
}

/// Everything a backend may look at when proposing episode `k`.
#[derive(Clone, Copy, Debug)]
pub struct ShaperContext<'a> {
    pub k: usize,
    pub prompt: &'a PromptState,
    /// Metrics of episodes `0..k`.
    pub history: &'a [EpisodeMetrics],
    pub pref: &'a PreferenceSpec,
    pub env: &'a Environment,
    pub template: &'a FeedbackTemplate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShaperOutput {
    pub shaping: ShapingReward,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    pub backend: String,
    /// Ascent direction used for this proposal, when the backend has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub trait RewardShaper {
    /// Short backend name recorded in manifests.
    fn tag(&self) -> &'static str;

    fn propose(&mut self, ctx: &ShaperContext<'_>) -> Result<ShaperOutput, ShaperError>;

    /// Request/response log, for backends that talk to a service.
    fn transcript(&self) -> Vec<Exchange> {
        Vec::new()
    }
}

impl<S: RewardShaper + ?Sized> RewardShaper for Box<S> {
    fn tag(&self) -> &'static str {
        (**self).tag()
    }

    fn propose(&mut self, ctx: &ShaperContext<'_>) -> Result<ShaperOutput, ShaperError> {
        (**self).propose(ctx)
    }

    fn transcript(&self) -> Vec<Exchange> {
        (**self).transcript()
    }
}
