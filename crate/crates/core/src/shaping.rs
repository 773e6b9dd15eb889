//! Scalarization of utility against preference violation, and the shaping
//! rewards derived from it.
//!
//! With `J = lambda * U - (1 - lambda) * C`, the shaping bonus that aligns
//! the solver with the preference is proportional to the derivative of the
//! divergence with respect to each class share. Utility may be measured as
//! a raw total or per pull, which changes how the bonus compares with the
//! base reward (see [`UtilityScale`]).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{DivergenceKind, EpisodeMetrics, FeatureDistribution, PreferenceSpec, KL_EPSILON};

pub const DEFAULT_R_MAX: f64 = 1.0;
/// Base step of the `eta0 / k` schedule.
pub const DEFAULT_ETA0: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum ShapingError {
    #[error("lambda must lie in (0, 1], got {0}")]
    InvalidLambda(f64),
    #[error("eta0 must be non-negative and finite, got {0}")]
    InvalidStep(f64),
    #[error("r_max must be positive and finite, got {0}")]
    InvalidClamp(f64),
    #[error("budget and horizon must be positive")]
    InvalidScale,
    #[error("class index {index} out of range for {n} classes")]
    InvalidClass { index: usize, n: usize },
    #[error("shaping has {got} entries, environment has {expected} classes")]
    Incomplete { got: usize, expected: usize },
    #[error("class {class}: shaping value {value} is not finite")]
    NonFinite { class: usize, value: f64 },
    #[error("class {class}: shaping value {value} exceeds the clamp {r_max}")]
    OutOfRange { class: usize, value: f64, r_max: f64 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
}

/// Per-class bonus added to the reward of acted arms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShapingReward(pub Vec<f64>);

impl ShapingReward {
    pub fn zeros(n_classes: usize) -> Self {
        Self(vec![0.0; n_classes])
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

    /// Rejects incomplete, non-finite or out-of-range vectors.
    pub fn validate(&self, n_classes: usize, r_max: f64) -> Result<(), ShapingError> {
        if self.0.len() != n_classes {
            return Err(ShapingError::Incomplete {
                got: self.0.len(),
                expected: n_classes,
            });
        }
        for (class, &value) in self.0.iter().enumerate() {
            if !value.is_finite() {
                return Err(ShapingError::NonFinite { class, value });
            }
            if value.abs() > r_max {
                return Err(ShapingError::OutOfRange { class, value, r_max });
            }
        }
        Ok(())
    }

    pub fn clamped(mut self, r_max: f64) -> Self {
        for v in &mut self.0 {
            *v = v.clamp(-r_max, r_max);
        }
        self
    }

    /// Largest absolute componentwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// How utility enters the scalarized objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityScale {
    /// Raw cumulative base reward. At full scale the resulting bonus is of
    /// order `1 / (B T)` and too small to move the solver.
    Total,
    /// Utility divided by the pull count `B T`, comparable to one
    /// round's base reward.
    #[default]
    PerPull,
}

impl UtilityScale {
    /// Divisor applied to utility: 1 or `B T`.
    pub fn divisor(self, budget: usize, horizon: usize) -> f64 {
        match self {
            UtilityScale::Total => 1.0,
            UtilityScale::PerPull => (budget * horizon) as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarizationConfig {
    pub lambda: f64,
    pub kind: DivergenceKind,
    pub budget: usize,
    pub horizon: usize,
    pub eta0: f64,
    pub r_max: f64,
    pub utility_scale: UtilityScale,
}

impl ScalarizationConfig {
    pub fn new(lambda: f64, kind: DivergenceKind, budget: usize, horizon: usize) -> Self {
        Self {
            lambda,
            kind,
            budget,
            horizon,
            eta0: DEFAULT_ETA0,
            r_max: DEFAULT_R_MAX,
            utility_scale: UtilityScale::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ShapingError> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(ShapingError::InvalidLambda(self.lambda));
        }
        // eta0 = 0 is allowed and freezes the shaping at its cold start.
        if !(self.eta0 >= 0.0 && self.eta0.is_finite()) {
            return Err(ShapingError::InvalidStep(self.eta0));
        }
        if !(self.r_max > 0.0 && self.r_max.is_finite()) {
            return Err(ShapingError::InvalidClamp(self.r_max));
        }
        if self.budget == 0 || self.horizon == 0 {
            return Err(ShapingError::InvalidScale);
        }
        Ok(())
    }

    fn pulls(&self) -> f64 {
        (self.budget * self.horizon) as f64
    }

    /// Utility in the units used by the objective.
    pub fn scaled_utility(&self, u: f64) -> f64 {
        u / self.utility_scale.divisor(self.budget, self.horizon)
    }
}

/// `lambda * U - (1 - lambda) * C`.
pub fn scalarized_objective(u: f64, c: f64, lambda: f64) -> f64 {
    lambda * u - (1.0 - lambda) * c
}

/// Derivative of the divergence generator at ratio `t`.
fn f_prime(kind: DivergenceKind, t: f64) -> f64 {
    match kind {
        DivergenceKind::Kl => t.ln() + 1.0,
        DivergenceKind::Tv => {
            if t > 1.0 {
                0.5
            } else if t < 1.0 {
                -0.5
            } else {
                0.0
            }
        }
    }
}

fn smoothed_ratio(d: f64, target: f64) -> f64 {
    (d + KL_EPSILON) / (target + KL_EPSILON)
}

/// Partial derivative of the divergence with respect to the raw class
/// share `d(z)`, holding the other shares fixed.
pub fn divergence_partial(
    d: &FeatureDistribution,
    pref: &PreferenceSpec,
    z: usize,
) -> Result<f64, ShapingError> {
    let n = pref.target.len();
    if d.len() != n {
        return Err(ShapingError::DimensionMismatch { left: d.len(), right: n });
    }
    if z >= n {
        return Err(ShapingError::InvalidClass { index: z, n });
    }
    let (p, q) = (d.as_slice()[z], pref.target.as_slice()[z]);
    Ok(match pref.kind {
        // d/dp [p ln((p+e)/(q+e))] = ln((p+e)/(q+e)) + p/(p+e); the second
        // term differs from 1 by at most e/(p+e).
        DivergenceKind::Kl => smoothed_ratio(p, q).ln() + p / (p + KL_EPSILON),
        DivergenceKind::Tv => f_prime(DivergenceKind::Tv, smoothed_ratio(p, q)),
    })
}

/// `f'` at the smoothed ratio, the form used by the shaping formulas.
fn generator_slopes(d: &FeatureDistribution, pref: &PreferenceSpec) -> Result<Vec<f64>, ShapingError> {
    let n = pref.target.len();
    if d.len() != n {
        return Err(ShapingError::DimensionMismatch { left: d.len(), right: n });
    }
    Ok(d.as_slice()
        .iter()
        .zip(pref.target.as_slice())
        .map(|(&p, &q)| f_prime(pref.kind, smoothed_ratio(p, q)))
        .collect())
}

/// Closed-form shaping `-(1 - lambda) S / (lambda B T) * f'(D / D_pref)`,
/// with `S` the utility divisor, clamped to `r_max`.
pub fn analytic_shaping(
    d_pi: &FeatureDistribution,
    pref: &PreferenceSpec,
    cfg: &ScalarizationConfig,
) -> Result<ShapingReward, ShapingError> {
    cfg.validate()?;
    let scale = cfg.utility_scale.divisor(cfg.budget, cfg.horizon);
    let coef = -(1.0 - cfg.lambda) * scale / (cfg.lambda * cfg.pulls());
    let r = generator_slopes(d_pi, pref)?
        .into_iter()
        .map(|fp| coef * fp)
        .collect();
    Ok(ShapingReward(r).clamped(cfg.r_max))
}

/// Composite ascent direction for the shaping vector after one episode.
///
/// The utility term is the visitation count `B T D(z)` divided by the
/// utility scale; the preference term is the generator slope.
pub fn gradient_estimate(
    metrics: &EpisodeMetrics,
    pref: &PreferenceSpec,
    cfg: &ScalarizationConfig,
) -> Result<Vec<f64>, ShapingError> {
    let visits = cfg.pulls() / cfg.utility_scale.divisor(cfg.budget, cfg.horizon);
    let d = &metrics.distribution;
    (0..d.len())
        .map(|z| {
            let partial = divergence_partial(d, pref, z)?;
            Ok(cfg.lambda * visits * d.as_slice()[z] - (1.0 - cfg.lambda) * partial)
        })
        .collect()
}

/// Step size `eta0 / k`.
pub fn step_size(eta0: f64, k: usize) -> f64 {
    eta0 / k.max(1) as f64
}

/// `R + eta_k g`, clamped.
pub fn sa_update(
    r: &ShapingReward,
    g: &[f64],
    k: usize,
    cfg: &ScalarizationConfig,
) -> Result<ShapingReward, ShapingError> {
    if g.len() != r.len() {
        return Err(ShapingError::DimensionMismatch { left: r.len(), right: g.len() });
    }
    let eta = step_size(cfg.eta0, k);
    Ok(ShapingReward(r.0.iter().zip(g).map(|(a, b)| a + eta * b).collect()).clamped(cfg.r_max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Environment;
    use crate::metrics::{divergence_between, Coverage};
    use proptest::prelude::*;

    fn pref(target: Vec<f64>, kind: DivergenceKind) -> PreferenceSpec {
        PreferenceSpec::new("test", FeatureDistribution(target), kind).unwrap()
    }

    fn cfg(lambda: f64, b: usize, t: usize) -> ScalarizationConfig {
        ScalarizationConfig {
            utility_scale: UtilityScale::Total,
            ..ScalarizationConfig::new(lambda, DivergenceKind::Kl, b, t)
        }
    }

    fn metrics(d: Vec<f64>) -> EpisodeMetrics {
        EpisodeMetrics {
            utility: 0.0,
            distribution: FeatureDistribution(d),
            divergence: 0.0,
            coverage: Coverage(Vec::new()),
            total_pulls: 1.0,
        }
    }

    #[test]
    fn objective_arithmetic() {
        assert_eq!(scalarized_objective(7.0, 3.0, 1.0), 7.0);
        assert_eq!(scalarized_objective(7.0, 3.0, 0.0), -3.0);
        assert_eq!(scalarized_objective(10.0, 2.0, 0.5), 4.0);
    }

    #[test]
    fn lambda_one_gives_zero_shaping() {
        let p = pref(vec![0.5, 0.5], DivergenceKind::Kl);
        let d = FeatureDistribution(vec![0.9, 0.1]);
        let r = analytic_shaping(&d, &p, &cfg(1.0, 400, 50)).unwrap();
        assert!(r.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matched_distribution_gives_uniform_shaping() {
        let p = pref(vec![0.25, 0.75], DivergenceKind::Kl);
        let c = cfg(0.5, 2, 5);
        let r = analytic_shaping(&p.target.clone(), &p, &c).unwrap();
        for v in r.0 {
            assert!((v - (-0.5 / (0.5 * 10.0))).abs() < 1e-12);
        }
    }

    #[test]
    fn per_pull_scale_drops_budget_factor() {
        let p = pref(vec![0.5, 0.5], DivergenceKind::Kl);
        let c = ScalarizationConfig {
            utility_scale: UtilityScale::PerPull,
            ..cfg(0.5, 400, 50)
        };
        let r = analytic_shaping(&p.target.clone(), &p, &c).unwrap();
        assert!(r.0.iter().all(|&v| (v + 1.0).abs() < 1e-12));
    }

    #[test]
    fn over_served_class_gets_less() {
        let p = pref(vec![0.5, 0.5], DivergenceKind::Kl);
        let r = analytic_shaping(&FeatureDistribution(vec![0.75, 0.25]), &p, &cfg(0.5, 1, 1)).unwrap();
        assert!(r.0[0] < r.0[1]);
    }

    #[test]
    fn zero_lambda_rejected() {
        let p = pref(vec![0.5, 0.5], DivergenceKind::Kl);
        assert_eq!(
            analytic_shaping(&p.target.clone(), &p, &cfg(0.0, 1, 1)),
            Err(ShapingError::InvalidLambda(0.0))
        );
    }

    #[test]
    fn partial_examples() {
        let p = pref(vec![0.3, 0.7], DivergenceKind::Kl);
        for z in 0..2 {
            let v = divergence_partial(&p.target.clone(), &p, z).unwrap();
            assert!((v - 1.0).abs() < 1e-8);
        }
        let tv = pref(vec![0.3, 0.7], DivergenceKind::Tv);
        let d = FeatureDistribution(vec![0.6, 0.4]);
        assert_eq!(divergence_partial(&d, &tv, 0).unwrap(), 0.5);
        assert_eq!(divergence_partial(&d, &tv, 1).unwrap(), -0.5);
        assert_eq!(divergence_partial(&tv.target.clone(), &tv, 1).unwrap(), 0.0);
        assert!(matches!(
            divergence_partial(&d, &tv, 2),
            Err(ShapingError::InvalidClass { index: 2, n: 2 })
        ));
    }

    #[test]
    fn gradient_examples() {
        let p = pref(vec![0.5, 0.5], DivergenceKind::Kl);
        let g = gradient_estimate(&metrics(vec![0.5, 0.5]), &p, &cfg(1.0, 1, 2)).unwrap();
        assert_eq!(g, vec![1.0, 1.0]);

        // lambda = 0 bypasses validation here: only the preference term remains.
        let c0 = ScalarizationConfig { lambda: 0.0, ..cfg(1.0, 3, 3) };
        let g = gradient_estimate(&metrics(vec![0.5, 0.5]), &p, &c0).unwrap();
        for v in g {
            assert!((v + 1.0).abs() < 1e-8);
        }

        let d = vec![0.7, 0.3];
        let c = cfg(0.4, 2, 3);
        let g = gradient_estimate(&metrics(d.clone()), &p, &c).unwrap();
        for z in 0..2 {
            let visit = 0.4 * 6.0 * d[z];
            let pref_term = 0.6 * (((d[z] + KL_EPSILON) / (0.5 + KL_EPSILON)).ln() + 1.0);
            assert!((g[z] - (visit - pref_term)).abs() < 1e-8);
        }
    }

    #[test]
    fn sa_update_examples() {
        let c = ScalarizationConfig { eta0: 0.1, ..cfg(0.5, 1, 1) };
        let r = sa_update(&ShapingReward::zeros(2), &[1.0, -1.0], 1, &c).unwrap();
        assert_eq!(r.0, vec![0.1, -0.1]);
        let r0 = ShapingReward(vec![0.3, -0.2]);
        assert_eq!(sa_update(&r0, &[0.0, 0.0], 7, &c).unwrap(), r0);
        let hi = sa_update(&ShapingReward(vec![0.99, 0.0]), &[100.0, 0.0], 1, &c).unwrap();
        assert_eq!(hi.0[0], 1.0);
    }

    #[test]
    fn step_sizes_robbins_monro() {
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut checkpoints = Vec::new();
        for k in 1..=1_000_000usize {
            let e = step_size(0.5, k);
            sum += e;
            sq += e * e;
            if k.is_power_of_two() {
                checkpoints.push(sum);
            }
        }
        // Partial sums keep growing by ~eta0 ln 2 per doubling; squares converge.
        for w in checkpoints.windows(2).skip(4) {
            assert!(w[1] - w[0] > 0.3);
        }
        assert!(sq < 0.5 * 0.5 * std::f64::consts::PI.powi(2) / 6.0 + 1e-12);
    }

    #[test]
    fn validation_names_class() {
        let r = ShapingReward(vec![0.0, 2.0, 0.0]);
        assert_eq!(
            r.validate(3, 1.0),
            Err(ShapingError::OutOfRange { class: 1, value: 2.0, r_max: 1.0 })
        );
        assert!(matches!(
            ShapingReward(vec![0.0, f64::NAN]).validate(2, 1.0),
            Err(ShapingError::NonFinite { class: 1, .. })
        ));
        assert!(matches!(
            ShapingReward(vec![0.0]).validate(2, 1.0),
            Err(ShapingError::Incomplete { got: 1, expected: 2 })
        ));
    }

    #[test]
    fn per_pull_gradient_on_armman() {
        let env = Environment::builtin("armman").unwrap();
        let p = crate::metrics::PreferenceSpec::from_directive(&env, "LI", 0.75, DivergenceKind::Kl).unwrap();
        let c = ScalarizationConfig::new(0.5, DivergenceKind::Kl, 400, 50);
        let g = gradient_estimate(&metrics(p.target.0.clone()), &p, &c).unwrap();
        for (gz, dz) in g.iter().zip(p.target.as_slice()) {
            assert!((gz - (0.5 * dz - 0.5)).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn kl_shaping_decreasing_in_share(a in 0.01f64..0.98, da in 0.001f64..0.01) {
            let p = pref(vec![0.4, 0.6], DivergenceKind::Kl);
            let c = ScalarizationConfig { r_max: 1e6, ..cfg(0.3, 1, 1) };
            let lo = analytic_shaping(&FeatureDistribution(vec![a, 1.0 - a]), &p, &c).unwrap();
            let hi = analytic_shaping(&FeatureDistribution(vec![a + da, 1.0 - a]), &p, &c).unwrap();
            prop_assert!(hi.0[0] < lo.0[0]);
        }

        #[test]
        fn partial_matches_central_difference(d in prop::collection::vec(0.05f64..1.0, 4), t in prop::collection::vec(0.05f64..1.0, 4)) {
            let s: f64 = d.iter().sum();
            let d: Vec<f64> = d.iter().map(|v| v / s).collect();
            let s: f64 = t.iter().sum();
            let t: Vec<f64> = t.iter().map(|v| v / s).collect();
            let p = pref(t.clone(), DivergenceKind::Kl);
            let h = 1e-5;
            for z in 0..4 {
                let mut up = d.clone();
                up[z] += h;
                let mut dn = d.clone();
                dn[z] -= h;
                let fd = (divergence_between(&up, &t, DivergenceKind::Kl).unwrap()
                    - divergence_between(&dn, &t, DivergenceKind::Kl).unwrap()) / (2.0 * h);
                let an = divergence_partial(&FeatureDistribution(d.clone()), &p, z).unwrap();
                prop_assert!((fd - an).abs() < 1e-6);
            }
        }

        #[test]
        fn sa_zero_gradient_identity(r in prop::collection::vec(-1.0f64..1.0, 1..9), k in 1usize..1000) {
            let c = cfg(0.5, 1, 1);
            let zero = vec![0.0; r.len()];
            let r = ShapingReward(r);
            prop_assert_eq!(sa_update(&r, &zero, k, &c).unwrap(), r);
        }
    }
}
