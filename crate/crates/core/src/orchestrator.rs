//! The episode loop, λ sweeps, run artifacts and replay.
//!
//! A run alternates proposal, planning, rollout, measurement and reflection
//! for `K` episodes. Everything it records is a pure function of the
//! config, the environment and the backend's answers, so a recorded run
//! can be replayed through the scripted backend and compared byte for byte.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::backends::{
    AnalyticShaper, Exchange, RemoteConfig, RemoteShaper, RewardShaper, ScriptedShaper,
    ShaperContext, ShaperError,
};
use crate::env::{rollout, BudgetMode, EnvError, Environment, Trajectory};
use crate::feedback::{
    compare, fixed_prompt, render_feedback, render_prompt, update_prompt, Deltas, FeedbackError,
    FeedbackTemplate, PromptState,
};
use crate::metrics::{
    ArchivePoint, Coverage, DivergenceKind, EpisodeMetrics, FeatureDistribution, MetricsError,
    ParetoArchive, PreferenceSpec, DEFAULT_RHO,
};
use crate::rng;
use crate::shaping::{
    scalarized_objective, ScalarizationConfig, ShapingError, ShapingReward, UtilityScale,
    DEFAULT_ETA0, DEFAULT_R_MAX,
};
use crate::solver::{evaluate_exact, solve_policy, IndexKind, SolverError};

pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARETO_FILE: &str = "pareto.csv";
pub const COVERAGE_FILE: &str = "coverage.csv";
pub const PROMPT_FILE: &str = "prompt.txt";
pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Shaping(#[from] ShapingError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error(transparent)]
    Shaper(#[from] ShaperError),
    #[error("episode {k}: {source}")]
    Proposal {
        k: usize,
        #[source]
        source: ShaperError,
        /// Episodes completed before the failure.
        partial: Box<RunResult>,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, message: impl ToString) -> RunError {
    RunError::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Analytic,
    Scripted,
    Remote,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "analytic" => Ok(Self::Analytic),
            "scripted" => Ok(Self::Scripted),
            "remote" => Ok(Self::Remote),
            other => Err(format!("unknown backend `{other}`")),
        }
    }
}

/// How an episode's metrics are obtained from its policy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evaluation {
    /// One seeded rollout.
    #[default]
    Sampled,
    /// Expected values by joint-state enumeration (small populations only).
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStop {
    pub enabled: bool,
    /// Max-norm shaping change counted as "no change".
    pub tol: f64,
    /// Consecutive unchanged episodes before stopping.
    pub patience: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            enabled: true,
            tol: 1e-3,
            patience: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `builtin:<name>`, a builtin name, or a path to an environment file.
    pub env: String,
    /// Overrides the environment's horizon.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget_mode: Option<BudgetMode>,
    pub directive: String,
    pub rho: f64,
    pub divergence: DivergenceKind,
    pub backend: BackendKind,
    pub lambda: f64,
    pub eta0: f64,
    pub r_max: f64,
    pub utility_scale: UtilityScale,
    pub index: IndexKind,
    pub episodes: usize,
    pub seed: u64,
    /// Reuse one environment stream for every episode.
    pub crn: bool,
    pub early_stop: EarlyStop,
    pub evaluation: Evaluation,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    pub remote: RemoteConfig,
    /// Reflections kept verbatim once the run is longer than this.
    pub prompt_cap: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feedback_template: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: "builtin:armman".into(),
            horizon: None,
            budget_mode: None,
            directive: "favor LI".into(),
            rho: DEFAULT_RHO,
            divergence: DivergenceKind::Kl,
            backend: BackendKind::Analytic,
            lambda: 0.5,
            eta0: DEFAULT_ETA0,
            r_max: DEFAULT_R_MAX,
            utility_scale: UtilityScale::default(),
            index: IndexKind::default(),
            episodes: 10,
            seed: 0,
            crn: true,
            early_stop: EarlyStop::default(),
            evaluation: Evaluation::default(),
            script: None,
            remote: RemoteConfig::default(),
            prompt_cap: Some(10),
            feedback_template: None,
            out: None,
        }
    }
}

fn is_builtin(reference: &str) -> bool {
    reference.starts_with("builtin:") || Environment::builtin(reference).is_ok()
}

impl RunConfig {
    /// Reads a JSON config. Relative paths are taken from the config's
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, RunError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| format_err(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if !is_builtin(&cfg.env) && Path::new(&cfg.env).is_relative() {
            cfg.env = base.join(&cfg.env).to_string_lossy().into_owned();
        }
        cfg.script.as_mut().map(rebase);
        cfg.feedback_template.as_mut().map(rebase);
        cfg.out.as_mut().map(rebase);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        if self.episodes == 0 {
            return Err(RunError::Config("episodes must be at least 1".into()));
        }
        if !is_builtin(&self.env) && !Path::new(&self.env).is_file() {
            return Err(RunError::Config(format!("environment file `{}` does not exist", self.env)));
        }
        match (&self.backend, &self.script) {
            (BackendKind::Scripted, None) => {
                return Err(RunError::Config("the scripted backend needs `script`".into()))
            }
            (_, Some(p)) if self.backend == BackendKind::Scripted && !p.is_file() => {
                return Err(RunError::Config(format!("script `{}` does not exist", p.display())))
            }
            _ => {}
        }
        if let Some(p) = &self.feedback_template {
            if !p.is_file() {
                return Err(RunError::Config(format!("template `{}` does not exist", p.display())));
            }
        }
        if !(self.early_stop.tol >= 0.0) {
            return Err(RunError::Config("early-stop tolerance must be non-negative".into()));
        }
        Ok(())
    }

    pub fn environment(&self) -> Result<Environment, RunError> {
        let mut env = Environment::resolve(&self.env)?;
        if let Some(t) = self.horizon {
            env = env.with_horizon(t)?;
        }
        if let Some(m) = self.budget_mode {
            env = env.with_budget_mode(m);
        }
        Ok(env)
    }

    pub fn template(&self) -> Result<FeedbackTemplate, RunError> {
        Ok(match &self.feedback_template {
            Some(p) => FeedbackTemplate::from_path(p)?,
            None => FeedbackTemplate::default(),
        })
    }

    pub fn scalarization(&self, env: &Environment) -> ScalarizationConfig {
        ScalarizationConfig {
            eta0: self.eta0,
            r_max: self.r_max,
            utility_scale: self.utility_scale,
            ..ScalarizationConfig::new(self.lambda, self.divergence, env.pulls_per_round(), env.horizon())
        }
    }

    /// Builds the configured backend.
    pub fn shaper(&self, env: &Environment) -> Result<Box<dyn RewardShaper>, RunError> {
        Ok(match self.backend {
            BackendKind::Analytic => {
                let sc = self.scalarization(env);
                sc.validate()?;
                Box::new(AnalyticShaper::new(sc))
            }
            BackendKind::Scripted => {
                let p = self
                    .script
                    .as_ref()
                    .ok_or_else(|| RunError::Config("the scripted backend needs `script`".into()))?;
                Box::new(ScriptedShaper::from_path(p, self.r_max)?)
            }
            BackendKind::Remote => Box::new(RemoteShaper::new(self.remote.clone(), self.r_max)?),
        })
    }

    /// Environment stream seed for episode `k`.
    pub fn episode_seed(&self, k: usize) -> u64 {
        if self.crn {
            rng::derive_seed(self.seed, "env", 0)
        } else {
            rng::derive_seed(self.seed, "episode", k as u64)
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of every acted set in a trajectory.
pub fn actions_digest(traj: &Trajectory) -> String {
    let mut h = Sha256::new();
    for r in &traj.records {
        for a in &r.actions {
            h.update((*a as u64).to_le_bytes());
        }
        h.update(u64::MAX.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Everything recorded about one episode. Wall-clock time lives in the
/// manifest so that records stay reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub k: usize,
    pub seed: u64,
    pub shaping: ShapingReward,
    pub utility: f64,
    pub distribution: FeatureDistribution,
    pub divergence: f64,
    /// Scalarized objective of this episode.
    pub objective: f64,
    pub coverage: Coverage,
    pub total_pulls: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deltas: Option<Deltas>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<String>,
    /// SHA-256 over the acted sets; absent under exact evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actions_digest: Option<String>,
}

impl EpisodeRecord {
    pub fn metrics(&self) -> EpisodeMetrics {
        EpisodeMetrics {
            utility: self.utility,
            distribution: self.distribution.clone(),
            divergence: self.divergence,
            coverage: self.coverage.clone(),
            total_pulls: self.total_pulls,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSummary {
    pub name: String,
    pub n_arms: usize,
    pub budget: usize,
    pub horizon: usize,
    pub n_classes: usize,
    pub budget_mode: BudgetMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub environment: EnvSummary,
    pub backend: String,
    /// Scalarization weight; only the analytic backend has an observable one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub divergence: DivergenceKind,
    pub episodes_completed: usize,
    pub stopped_early: bool,
    pub wall_times_ms: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub episodes: Vec<EpisodeRecord>,
    pub prompt: PromptState,
    /// Rendered final prompt.
    pub prompt_text: String,
    /// One point per episode, unfiltered.
    pub archive: ParetoArchive,
    pub manifest: Manifest,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transcript: Vec<Exchange>,
}

impl RunResult {
    pub fn last(&self) -> Option<&EpisodeRecord> {
        self.episodes.last()
    }

    pub fn stopped_early(&self) -> bool {
        self.manifest.stopped_early
    }

    /// The episode log as JSON lines.
    pub fn episodes_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.episodes {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Runs the configured backend and persists to `cfg.out` when set, also
/// after a failed proposal.
pub fn run_vortex(cfg: &RunConfig) -> Result<RunResult, RunError> {
    cfg.validate()?;
    let env = cfg.environment()?;
    let mut shaper = cfg.shaper(&env)?;
    let outcome = run_with_shaper(cfg, &env, shaper.as_mut());
    if let Some(dir) = &cfg.out {
        match &outcome {
            Ok(r) => persist(r, dir)?,
            Err(RunError::Proposal { partial, .. }) => persist(partial, dir)?,
            Err(_) => {}
        }
    }
    outcome
}

/// The episode loop with a caller-supplied backend. Nothing is written.
pub fn run_with_shaper(
    cfg: &RunConfig,
    env: &Environment,
    shaper: &mut dyn RewardShaper,
) -> Result<RunResult, RunError> {
    let pref = PreferenceSpec::from_directive(env, &cfg.directive, cfg.rho, cfg.divergence)?;
    let template = cfg.template()?;
    let sc = cfg.scalarization(env);
    let cap = cfg.prompt_cap.filter(|&c| cfg.episodes > c);
    let mut prompt = PromptState::new(fixed_prompt(env, &pref, cfg.r_max, &template)).with_cap(cap);
    let mut history: Vec<EpisodeMetrics> = Vec::with_capacity(cfg.episodes);
    let mut episodes: Vec<EpisodeRecord> = Vec::with_capacity(cfg.episodes);
    let mut wall = Vec::with_capacity(cfg.episodes);
    let mut unchanged = 0usize;
    let mut stopped_early = false;

    let finish = |episodes: Vec<EpisodeRecord>,
                  prompt: PromptState,
                  wall: Vec<f64>,
                  stopped_early: bool,
                  error: Option<String>,
                  transcript: Vec<Exchange>| {
        let mut archive = ParetoArchive::default();
        for r in &episodes {
            archive.push(ArchivePoint {
                utility: r.utility,
                divergence: r.divergence,
                tag: format!("k={}", r.k),
                shaping_id: r.k,
            });
        }
        let manifest = Manifest {
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: cfg.hash(),
            config: cfg.clone(),
            environment: EnvSummary {
                name: env.name().into(),
                n_arms: env.n_arms(),
                budget: env.budget(),
                horizon: env.horizon(),
                n_classes: env.n_classes(),
                budget_mode: env.budget_mode(),
            },
            backend: shaper_tag(cfg.backend).into(),
            lambda: (cfg.backend == BackendKind::Analytic).then_some(cfg.lambda),
            divergence: cfg.divergence,
            episodes_completed: episodes.len(),
            stopped_early,
            wall_times_ms: wall,
            error,
        };
        RunResult {
            prompt_text: render_prompt(&prompt, &template),
            episodes,
            prompt,
            archive,
            manifest,
            transcript,
        }
    };

    for k in 0..cfg.episodes {
        let started = Instant::now();
        let ctx = ShaperContext {
            k,
            prompt: &prompt,
            history: &history,
            pref: &pref,
            env,
            template: &template,
        };
        let proposal = match shaper.propose(&ctx) {
            Ok(p) => p,
            Err(source) => {
                let partial = finish(
                    episodes,
                    prompt,
                    wall,
                    false,
                    Some(format!("episode {k}: {source}")),
                    shaper.transcript(),
                );
                return Err(RunError::Proposal {
                    k,
                    source,
                    partial: Box::new(partial),
                });
            }
        };
        for w in &proposal.warnings {
            log::warn!("episode {k}: {w}");
        }
        let shaping = proposal.shaping;
        let policy = solve_policy(env, &shaping, cfg.index)?;
        let seed = cfg.episode_seed(k);
        let (metrics, digest) = match cfg.evaluation {
            Evaluation::Sampled => {
                let traj = rollout(env, &mut policy.clone(), env.horizon(), &mut rng::stream(seed))?;
                let m = EpisodeMetrics::from_trajectory(&traj, env, &pref)?;
                (m, Some(actions_digest(&traj)))
            }
            Evaluation::Exact => {
                let out = evaluate_exact(env, &shaping, &mut |t, s| policy.act(env, t, s))?;
                let m = EpisodeMetrics::from_counts(env, out.utility, &out.class_pulls, &pref)?;
                (m, None)
            }
        };
        let objective = scalarized_objective(sc.scaled_utility(metrics.utility), metrics.divergence, cfg.lambda);

        let (deltas, feedback) = match history.last() {
            Some(prev) => {
                let d = compare(&metrics, prev)?;
                let fb = render_feedback(&d, &pref, &metrics, env.classes(), &template);
                prompt = update_prompt(&prompt, &fb);
                (Some(d), Some(fb.text))
            }
            None => (None, None),
        };
        if let Some(prev) = episodes.last() {
            if shaping.max_abs_diff(&prev.shaping) < cfg.early_stop.tol {
                unchanged += 1;
            } else {
                unchanged = 0;
            }
        }
        episodes.push(EpisodeRecord {
            k,
            seed,
            shaping,
            utility: metrics.utility,
            distribution: metrics.distribution.clone(),
            divergence: metrics.divergence,
            objective,
            coverage: metrics.coverage.clone(),
            total_pulls: metrics.total_pulls,
            deltas,
            feedback,
            actions_digest: digest,
        });
        history.push(metrics);
        wall.push(started.elapsed().as_secs_f64() * 1e3);
        log::info!(
            "episode {k}: U={:.3} C={:.4} J={:.4}",
            episodes[k].utility,
            episodes[k].divergence,
            objective
        );
        if cfg.early_stop.enabled && unchanged >= cfg.early_stop.patience.max(1) && k + 1 < cfg.episodes {
            stopped_early = true;
            break;
        }
    }
    Ok(finish(episodes, prompt, wall, stopped_early, None, shaper.transcript()))
}

fn shaper_tag(kind: BackendKind) -> &'static str {
    match kind {
        BackendKind::Analytic => "analytic",
        BackendKind::Scripted => "scripted",
        BackendKind::Remote => "remote",
    }
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ParetoRow {
    k: usize,
    #[serde(rename = "U")]
    u: f64,
    #[serde(rename = "C")]
    c: f64,
    dominated: bool,
}

#[derive(Serialize)]
struct CoverageRow<'a> {
    k: usize,
    dimension: &'a str,
    level: &'a str,
    proportion: f64,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), RunError> {
    let mut f = File::create(path).map_err(io_err(path))?;
    f.write_all(contents).map_err(io_err(path))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> RunError + '_ {
    move |e| format_err(path, e)
}

/// Writes the run artifacts into `dir`, creating it if needed.
pub fn persist(result: &RunResult, dir: impl AsRef<Path>) -> Result<(), RunError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    write_file(&dir.join(EPISODES_FILE), result.episodes_jsonl().as_bytes())?;
    let manifest = serde_json::to_string_pretty(&result.manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), format!("{manifest}\n").as_bytes())?;
    write_file(&dir.join(PROMPT_FILE), result.prompt_text.as_bytes())?;

    let path = dir.join(PARETO_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    for (r, dominated) in result.episodes.iter().zip(result.archive.dominated_flags()) {
        w.serialize(ParetoRow {
            k: r.k,
            u: r.utility,
            c: r.divergence,
            dominated,
        })
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join(COVERAGE_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    for r in &result.episodes {
        for s in &r.coverage.0 {
            w.serialize(CoverageRow {
                k: r.k,
                dimension: &s.dimension,
                level: &s.level,
                proportion: s.proportion,
            })
            .map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(io_err(&path))?;

    if !result.transcript.is_empty() {
        let mut text = String::new();
        for e in &result.transcript {
            text.push_str(&serde_json::to_string(e).expect("exchange serializes"));
            text.push('\n');
        }
        write_file(&dir.join(TRANSCRIPT_FILE), text.as_bytes())?;
    }
    Ok(())
}

pub fn load_episodes(path: impl AsRef<Path>) -> Result<Vec<EpisodeRecord>, RunError> {
    let path = path.as_ref();
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, RunError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e))
}

/// `(k, U, C)` rows of a run's `pareto.csv`.
pub fn load_pareto(path: impl AsRef<Path>) -> Result<Vec<(usize, f64, f64, bool)>, RunError> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize::<ParetoRow>()
        .map(|row| row.map(|p| (p.k, p.u, p.c, p.dominated)).map_err(csv_err(path)))
        .collect()
}

/// Non-dominated points across several run directories.
pub fn merge_pareto<P: AsRef<Path>>(dirs: &[P]) -> Result<ParetoArchive, RunError> {
    let mut all = ParetoArchive::default();
    for d in dirs {
        let d = d.as_ref();
        for (k, u, c, _) in load_pareto(d.join(PARETO_FILE))? {
            all.push(ArchivePoint {
                utility: u,
                divergence: c,
                tag: d.display().to_string(),
                shaping_id: k,
            });
        }
    }
    Ok(all.filtered())
}

/// Writes an archive as `source,k,U,C`.
pub fn write_archive_csv(archive: &ParetoArchive, path: impl AsRef<Path>) -> Result<(), RunError> {
    #[derive(Serialize)]
    struct Row<'a> {
        source: &'a str,
        k: usize,
        #[serde(rename = "U")]
        u: f64,
        #[serde(rename = "C")]
        c: f64,
    }
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for p in &archive.points {
        w.serialize(Row {
            source: &p.tag,
            k: p.shaping_id,
            u: p.utility,
            c: p.divergence,
        })
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Replay
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayReport {
    pub episodes: usize,
    /// First episode whose serialized record differs, if any.
    pub first_mismatch: Option<usize>,
    pub result: RunResult,
}

impl ReplayReport {
    pub fn identical(&self) -> bool {
        self.first_mismatch.is_none()
    }
}

/// Re-runs a recorded run through the scripted backend and compares the
/// serialized episode records.
pub fn replay(dir: impl AsRef<Path>) -> Result<ReplayReport, RunError> {
    let dir = dir.as_ref();
    let manifest = load_manifest(dir.join(MANIFEST_FILE))?;
    let episodes_path = dir.join(EPISODES_FILE);
    let recorded = fs::read_to_string(&episodes_path).map_err(io_err(&episodes_path))?;
    let n = recorded.lines().filter(|l| !l.trim().is_empty()).count();
    if n == 0 {
        return Err(format_err(&episodes_path, "no episodes recorded"));
    }
    let mut cfg = manifest.config;
    cfg.episodes = n;
    cfg.out = None;
    let env = cfg.environment()?;
    let mut shaper = ScriptedShaper::from_text(&recorded, cfg.r_max)?;
    let result = run_with_shaper(&cfg, &env, &mut shaper)?;
    let replayed = result.episodes_jsonl();
    let first_mismatch = recorded
        .lines()
        .filter(|l| !l.trim().is_empty())
        .zip(replayed.lines())
        .position(|(a, b)| a != b)
        .or_else(|| (result.episodes.len() != n).then_some(result.episodes.len().min(n)));
    Ok(ReplayReport {
        episodes: n,
        first_mismatch,
        result,
    })
}

// ---------------------------------------------------------------------------
// λ sweep
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    /// Final-episode metrics; absent when the run failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utility: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// One entry per requested λ, in request order.
    pub points: Vec<SweepPoint>,
    /// Non-dominated final points; `shaping_id` is the position in `points`.
    pub archive: ParetoArchive,
}

/// Runs the analytic backend once per λ, in parallel. A failing λ is
/// reported in its point and does not stop the others. With `cfg.out` set,
/// run `i` writes to `out/lambda-<i>`.
pub fn sweep_lambda(cfg: &RunConfig, lambdas: &[f64]) -> Result<SweepResult, RunError> {
    if cfg.backend != BackendKind::Analytic {
        return Err(RunError::Config("sweeps need the analytic backend".into()));
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut points: Vec<SweepPoint> = Vec::with_capacity(lambdas.len());
    let indexed: Vec<(usize, f64)> = lambdas.iter().copied().enumerate().collect();
    for chunk in indexed.chunks(workers.max(1)) {
        let done: Vec<SweepPoint> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&(i, lambda)| {
                    let mut c = cfg.clone();
                    c.lambda = lambda;
                    c.out = cfg.out.as_ref().map(|o| o.join(format!("lambda-{i:02}")));
                    s.spawn(move || run_vortex(&c))
                })
                .collect();
            handles
                .into_iter()
                .zip(chunk)
                .map(|(h, &(_, lambda))| match h.join() {
                    Ok(Ok(r)) => {
                        let last = r.last().expect("at least one episode");
                        SweepPoint {
                            lambda,
                            utility: Some(last.utility),
                            divergence: Some(last.divergence),
                            error: None,
                        }
                    }
                    Ok(Err(e)) => SweepPoint {
                        lambda,
                        utility: None,
                        divergence: None,
                        error: Some(e.to_string()),
                    },
                    Err(_) => SweepPoint {
                        lambda,
                        utility: None,
                        divergence: None,
                        error: Some("run panicked".into()),
                    },
                })
                .collect()
        });
        points.extend(done);
    }
    let mut archive = ParetoArchive::default();
    for (i, p) in points.iter().enumerate() {
        if let (Some(u), Some(c)) = (p.utility, p.divergence) {
            archive.push(ArchivePoint {
                utility: u,
                divergence: c,
                tag: format!("lambda={}", p.lambda),
                shaping_id: i,
            });
        }
    }
    Ok(SweepResult {
        points,
        archive: archive.filtered(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            env: "builtin:armman".into(),
            horizon: Some(10),
            episodes: 4,
            seed: 3,
            ..RunConfig::default()
        }
    }

    #[test]
    fn single_episode_has_no_feedback() {
        let cfg = RunConfig { episodes: 1, ..small() };
        let r = run_vortex(&cfg).unwrap();
        assert_eq!(r.episodes.len(), 1);
        assert!(r.episodes[0].deltas.is_none() && r.episodes[0].feedback.is_none());
        assert!(r.prompt.editable.is_empty());
        assert_eq!(r.archive.points.len(), 1);
    }

    #[test]
    fn feedback_from_second_episode() {
        let r = run_vortex(&RunConfig { early_stop: EarlyStop { enabled: false, ..EarlyStop::default() }, ..small() }).unwrap();
        assert_eq!(r.episodes.len(), 4);
        assert!(r.episodes[1..].iter().all(|e| e.feedback.is_some() && e.deltas.is_some()));
        assert_eq!(r.prompt.editable.len(), 3);
        assert_eq!(r.manifest.lambda, Some(0.5));
    }

    #[test]
    fn crn_reuses_one_stream() {
        let r = run_vortex(&small()).unwrap();
        assert!(r.episodes.iter().all(|e| e.seed == r.episodes[0].seed));
        let r = run_vortex(&RunConfig { crn: false, ..small() }).unwrap();
        assert_ne!(r.episodes[0].seed, r.episodes[1].seed);
    }

    #[test]
    fn early_stop_keeps_prefix() {
        // eta0 = 0 freezes the shaping, so the run stops after `patience`
        // unchanged episodes.
        let base = RunConfig { eta0: 0.0, episodes: 8, ..small() };
        let stopped = run_vortex(&base).unwrap();
        assert!(stopped.stopped_early());
        assert_eq!(stopped.episodes.len(), 4);
        let full = run_vortex(&RunConfig {
            early_stop: EarlyStop { enabled: false, ..EarlyStop::default() },
            ..base
        })
        .unwrap();
        assert_eq!(full.episodes.len(), 8);
        assert_eq!(&full.episodes[..4], &stopped.episodes[..]);
    }

    #[test]
    fn proposal_failure_keeps_partial() {
        let env = small().environment().unwrap();
        let mut shaper = ScriptedShaper::new(vec![ShapingReward::zeros(env.n_classes()); 2], 1.0);
        match run_with_shaper(&small(), &env, &mut shaper) {
            Err(RunError::Proposal { k, partial, .. }) => {
                assert_eq!(k, 2);
                assert_eq!(partial.episodes.len(), 2);
                assert!(partial.manifest.error.is_some());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig { episodes: 0, ..small() }.validate().is_err());
        assert!(RunConfig { env: "/no/such/env.json".into(), ..small() }.validate().is_err());
        assert!(RunConfig { backend: BackendKind::Scripted, ..small() }.validate().is_err());
        let json = r#"{"episodes": 2, "bogus": 1}"#;
        assert!(serde_json::from_str::<RunConfig>(json).is_err());
    }

    #[test]
    fn sweep_rejects_other_backends() {
        let cfg = RunConfig { backend: BackendKind::Scripted, ..small() };
        assert!(sweep_lambda(&cfg, &[0.5]).is_err());
    }

    #[test]
    fn sweep_reports_failures_per_lambda() {
        let cfg = RunConfig { episodes: 2, ..small() };
        let s = sweep_lambda(&cfg, &[0.5, 0.0, 0.5]).unwrap();
        assert_eq!(s.points.len(), 3);
        assert!(s.points[1].error.is_some());
        assert_eq!(s.points[0], s.points[2]);
    }
}
