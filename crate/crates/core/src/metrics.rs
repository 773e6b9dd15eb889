//! Episode accounting: utility, feature visitation, divergence, coverage
//! and Pareto dominance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Environment, Trajectory};

/// Additive smoothing inside the KL logarithm, shared with the shaping
/// formulas so measured and optimised divergences agree.
pub const KL_EPSILON: f64 = 1e-9;

/// Default target mass placed on the favoured level by a directive.
pub const DEFAULT_RHO: f64 = 0.75;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("feature distribution undefined: the trajectory contains no pulls")]
    NoPulls,
    #[error("dimension mismatch: {left} classes vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("cannot resolve directive `{0}`")]
    UnknownDirective(String),
    #[error("directive `{0}` is ambiguous in this environment")]
    AmbiguousDirective(String),
    #[error("rho must lie in (0, 1), got {0}")]
    InvalidRho(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceKind {
    #[default]
    Kl,
    Tv,
}

impl std::str::FromStr for DivergenceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "kl" => Ok(Self::Kl),
            "tv" => Ok(Self::Tv),
            other => Err(format!("unknown divergence `{other}` (expected kl or tv)")),
        }
    }
}

/// Share of pulls per feature class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureDistribution(pub Vec<f64>);

impl FeatureDistribution {
    /// Normalises non-negative counts. Fails if they sum to zero.
    pub fn from_counts(counts: &[f64]) -> Result<Self, MetricsError> {
        let total: f64 = counts.iter().sum();
        if total <= 0.0 {
            return Err(MetricsError::NoPulls);
        }
        Ok(Self(counts.iter().map(|c| c / total).collect()))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.0.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(MetricsError::InvalidDistribution(
                "entries must be finite and non-negative".into(),
            ));
        }
        let s: f64 = self.0.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(MetricsError::InvalidDistribution(format!(
                "entries sum to {s}"
            )));
        }
        Ok(())
    }
}

/// "Favour level `level` of dimension `dimension`".
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Directive {
    pub dimension: String,
    pub level: String,
}

impl Directive {
    /// Resolves a directive against the environment's features.
    ///
    /// Accepted forms, case-insensitive: `dimension=level`, a level name
    /// that is unique across dimensions (`Old`), or the two-letter code of
    /// level and dimension initials (`LI` for Low income). An optional
    /// `favor`/`favour` prefix is ignored.
    pub fn resolve(env: &Environment, text: &str) -> Result<Self, MetricsError> {
        let raw = text.trim();
        let body = ["favor-", "favour-", "favor ", "favour "]
            .iter()
            .find_map(|p| {
                raw.get(..p.len())
                    .filter(|head| head.eq_ignore_ascii_case(p))
                    .map(|_| raw[p.len()..].trim())
            })
            .unwrap_or(raw);

        let mut hits = Vec::new();
        if let Some((d, l)) = body.split_once('=') {
            for f in env.features() {
                if f.name.eq_ignore_ascii_case(d.trim()) {
                    for lv in &f.levels {
                        if lv.eq_ignore_ascii_case(l.trim()) {
                            hits.push((f.name.clone(), lv.clone()));
                        }
                    }
                }
            }
        } else {
            for f in env.features() {
                for lv in &f.levels {
                    let code = format!(
                        "{}{}",
                        lv.chars().next().unwrap_or_default(),
                        f.name.chars().next().unwrap_or_default()
                    );
                    if lv.eq_ignore_ascii_case(body) || code.eq_ignore_ascii_case(body) {
                        hits.push((f.name.clone(), lv.clone()));
                    }
                }
            }
        }
        hits.dedup();
        match hits.len() {
            0 => Err(MetricsError::UnknownDirective(text.to_string())),
            1 => {
                let (dimension, level) = hits.remove(0);
                Ok(Self { dimension, level })
            }
            _ => Err(MetricsError::AmbiguousDirective(text.to_string())),
        }
    }

    /// Target distribution giving mass `rho` to matching classes, split
    /// within each side in proportion to class population.
    pub fn target(&self, env: &Environment, rho: f64) -> Result<FeatureDistribution, MetricsError> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(MetricsError::InvalidRho(rho));
        }
        let sizes = env.class_sizes();
        let matches: Vec<bool> = env
            .classes()
            .iter()
            .map(|c| c.has_level(&self.dimension, &self.level))
            .collect();
        let inside: usize = sizes.iter().zip(&matches).filter(|p| *p.1).map(|p| p.0).sum();
        let outside: usize = sizes.iter().sum::<usize>() - inside;
        if inside == 0 || outside == 0 {
            return Err(MetricsError::InvalidDistribution(format!(
                "directive {}={} does not split the population",
                self.dimension, self.level
            )));
        }
        Ok(FeatureDistribution(
            sizes
                .iter()
                .zip(&matches)
                .map(|(&n, &m)| {
                    if m {
                        rho * n as f64 / inside as f64
                    } else {
                        (1.0 - rho) * n as f64 / outside as f64
                    }
                })
                .collect(),
        ))
    }
}

impl std::fmt::Display for Directive {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "favor {}={}", self.dimension, self.level)
    }
}

/// The stakeholder preference: a target visitation and the divergence used
/// to measure violation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSpec {
    pub directive_text: String,
    pub target: FeatureDistribution,
    pub kind: DivergenceKind,
    /// The favoured level, when compiled from a directive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focus: Option<Directive>,
}

impl PreferenceSpec {
    pub fn new(
        directive_text: impl Into<String>,
        target: FeatureDistribution,
        kind: DivergenceKind,
    ) -> Result<Self, MetricsError> {
        target.validate()?;
        Ok(Self {
            directive_text: directive_text.into(),
            target,
            kind,
            focus: None,
        })
    }

    pub fn from_directive(
        env: &Environment,
        text: &str,
        rho: f64,
        kind: DivergenceKind,
    ) -> Result<Self, MetricsError> {
        let d = Directive::resolve(env, text)?;
        Ok(Self {
            directive_text: text.to_string(),
            target: d.target(env, rho)?,
            kind,
            focus: Some(d),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelShare {
    pub dimension: String,
    pub level: String,
    pub proportion: f64,
}

/// Pull share per feature level, in dimension then level order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Coverage(pub Vec<LevelShare>);

impl Coverage {
    pub fn get(&self, dimension: &str, level: &str) -> Option<f64> {
        self.0
            .iter()
            .find(|s| s.dimension == dimension && s.level == level)
            .map(|s| s.proportion)
    }

    /// Projects a class distribution onto feature levels.
    pub fn from_distribution(env: &Environment, d: &FeatureDistribution) -> Self {
        let mut out = Vec::new();
        for f in env.features() {
            for lv in &f.levels {
                let proportion = env
                    .classes()
                    .iter()
                    .zip(d.as_slice())
                    .filter(|(c, _)| c.has_level(&f.name, lv))
                    .map(|(_, p)| p)
                    .sum();
                out.push(LevelShare {
                    dimension: f.name.clone(),
                    level: lv.clone(),
                    proportion,
                });
            }
        }
        Self(out)
    }
}

/// Aggregates of one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Cumulative base reward.
    pub utility: f64,
    pub distribution: FeatureDistribution,
    /// Divergence of `distribution` from the preference target.
    pub divergence: f64,
    pub coverage: Coverage,
    pub total_pulls: f64,
}

impl EpisodeMetrics {
    pub fn from_trajectory(
        traj: &Trajectory,
        env: &Environment,
        pref: &PreferenceSpec,
    ) -> Result<Self, MetricsError> {
        let counts = class_pull_counts(traj, env);
        Self::from_counts(env, utility(traj), &counts, pref)
    }

    /// Builds metrics from (possibly expected) per-class pull counts.
    pub fn from_counts(
        env: &Environment,
        utility: f64,
        counts: &[f64],
        pref: &PreferenceSpec,
    ) -> Result<Self, MetricsError> {
        let distribution = FeatureDistribution::from_counts(counts)?;
        let divergence = divergence(&distribution, pref)?;
        Ok(Self {
            utility,
            coverage: Coverage::from_distribution(env, &distribution),
            distribution,
            divergence,
            total_pulls: counts.iter().sum(),
        })
    }
}

/// Total realised base reward.
pub fn utility(traj: &Trajectory) -> f64 {
    traj.records
        .iter()
        .map(|r| r.base_rewards.iter().sum::<f64>())
        .sum()
}

fn class_pull_counts(traj: &Trajectory, env: &Environment) -> Vec<f64> {
    let mut counts = vec![0.0; env.n_classes()];
    for r in &traj.records {
        for &i in &r.actions {
            counts[env.class_of_arm(i)] += 1.0;
        }
    }
    counts
}

pub fn feature_distribution(
    traj: &Trajectory,
    env: &Environment,
) -> Result<FeatureDistribution, MetricsError> {
    FeatureDistribution::from_counts(&class_pull_counts(traj, env))
}

/// KL with shared smoothing, or total variation.
pub fn divergence_between(
    d: &[f64],
    target: &[f64],
    kind: DivergenceKind,
) -> Result<f64, MetricsError> {
    if d.len() != target.len() {
        return Err(MetricsError::DimensionMismatch {
            left: d.len(),
            right: target.len(),
        });
    }
    let pairs = d.iter().zip(target);
    Ok(match kind {
        DivergenceKind::Kl => pairs
            .map(|(&p, &q)| p * ((p + KL_EPSILON) / (q + KL_EPSILON)).ln())
            .sum(),
        DivergenceKind::Tv => 0.5 * pairs.map(|(p, q)| (p - q).abs()).sum::<f64>(),
    })
}

pub fn divergence(d: &FeatureDistribution, pref: &PreferenceSpec) -> Result<f64, MetricsError> {
    divergence_between(d.as_slice(), pref.target.as_slice(), pref.kind)
}

pub fn coverage(traj: &Trajectory, env: &Environment) -> Result<Coverage, MetricsError> {
    Ok(Coverage::from_distribution(env, &feature_distribution(traj, env)?))
}

fn dominates(q: (f64, f64), p: (f64, f64)) -> bool {
    q.0 >= p.0 && q.1 <= p.1 && (q.0 > p.0 || q.1 < p.1)
}

/// `true` for each `(U, C)` point dominated by another point.
pub fn dominated_flags(points: &[(f64, f64)]) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    // Sweep by U descending, C ascending: a point is dominated iff some
    // earlier point has C strictly lower, or equal C with strictly higher U.
    idx.sort_by(|&a, &b| {
        points[b]
            .0
            .total_cmp(&points[a].0)
            .then(points[a].1.total_cmp(&points[b].1))
    });
    let mut flags = vec![false; points.len()];
    let mut best: Option<(f64, f64)> = None;
    for &i in &idx {
        let p = points[i];
        if let Some(b) = best {
            flags[i] = dominates(b, p);
            if p.1 < b.1 {
                best = Some(p);
            }
        } else {
            best = Some(p);
        }
    }
    flags
}

/// Non-dominated subset in input order, equal points kept once.
pub fn pareto_filter(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let flags = dominated_flags(points);
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (p, dominated) in points.iter().zip(flags) {
        if !dominated && !out.iter().any(|q| q == p) {
            out.push(*p);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchivePoint {
    pub utility: f64,
    pub divergence: f64,
    /// Free-form origin, e.g. `k=3` or `lambda=0.5`.
    pub tag: String,
    /// Index of the shaping vector that produced the point.
    pub shaping_id: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParetoArchive {
    pub points: Vec<ArchivePoint>,
}

impl ParetoArchive {
    pub fn push(&mut self, p: ArchivePoint) {
        self.points.push(p);
    }

    pub fn coordinates(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.utility, p.divergence)).collect()
    }

    pub fn dominated_flags(&self) -> Vec<bool> {
        dominated_flags(&self.coordinates())
    }

    /// Archive restricted to its non-dominated points, duplicates dropped.
    pub fn filtered(&self) -> Self {
        let mut seen: Vec<(f64, f64)> = Vec::new();
        let points = self
            .points
            .iter()
            .zip(self.dominated_flags())
            .filter(|(p, dominated)| {
                let xy = (p.utility, p.divergence);
                let fresh = !*dominated && !seen.contains(&xy);
                if fresh {
                    seen.push(xy);
                }
                fresh
            })
            .map(|(p, _)| p.clone())
            .collect();
        Self { points }
    }
}
