//! Restless-bandit environment model.
//!
//! A population of `N` arms, each a two-state controlled Markov chain. Arms
//! are grouped into types that share a transition kernel, a state-dependent
//! base reward and a feature class. At every round a planner may act on a
//! budgeted number of arms; every arm then transitions by sampling the
//! kernel row for its `(state, action)` pair.
//!
//! Environments are loaded from a JSON document (see [`EnvironmentSpec`]);
//! two are bundled, see [`Environment::builtin`].

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for a kernel row to count as normalized at load time.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

const ARMMAN_SPEC: &str = include_str!("../envs/armman.json");
const CONSERVATION_SPEC: &str = include_str!("../envs/conservation.json");

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("malformed environment document: {0}")]
    Malformed(String),
    #[error("type {type_id}: transition row s{state}_a{action} sums to {sum} (expected 1)")]
    RowSum {
        type_id: usize,
        state: usize,
        action: usize,
        sum: f64,
    },
    #[error("type {type_id}: probability {value} in row s{state}_a{action} is outside [0, 1]")]
    Probability {
        type_id: usize,
        state: usize,
        action: usize,
        value: f64,
    },
    #[error("type {type_id}: unknown transition key `{key}` (expected s0_a0, s0_a1, s1_a0, s1_a1)")]
    UnknownTransition { type_id: usize, key: String },
    #[error("type {type_id}: missing transition row `{key}`")]
    MissingTransition { type_id: usize, key: String },
    #[error("type {type_id}: unknown state `{key}` in base_reward")]
    UnknownState { type_id: usize, key: String },
    #[error("budget B={budget} exceeds population N={n}")]
    BudgetExceedsPopulation { budget: usize, n: usize },
    #[error("invalid environment: {0}")]
    Invalid(String),
    #[error("action set of size {size} exceeds budget {budget}")]
    OverBudget { size: usize, budget: usize },
    #[error("arm index {index} out of range for population of {n}")]
    InvalidArm { index: usize, n: usize },
    #[error("arm {0} appears more than once in the action set")]
    DuplicateArm(usize),
    #[error("horizon exhausted: round {round} of {horizon}")]
    HorizonExhausted { round: usize, horizon: usize },
    #[error("unknown builtin environment `{0}` (available: armman, conservation)")]
    UnknownBuiltin(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// How the per-round budget constrains the action set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    /// Act on exactly `min(B, N)` arms every round.
    #[default]
    Exact,
    /// Act on at most `B` arms.
    AtMost,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDimension {
    pub name: String,
    pub levels: Vec<String>,
}

/// A combination of feature levels, the unit of preference accounting.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureClass {
    pub id: usize,
    /// `(dimension, level)` pairs in the environment's dimension order.
    pub labels: Vec<(String, String)>,
}

impl FeatureClass {
    pub fn level_of(&self, dimension: &str) -> Option<&str> {
        self.labels
            .iter()
            .find(|(d, _)| d == dimension)
            .map(|(_, l)| l.as_str())
    }

    pub fn has_level(&self, dimension: &str, level: &str) -> bool {
        self.level_of(dimension) == Some(level)
    }
}

impl fmt::Display for FeatureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (d, l)) in self.labels.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{d}={l}")?;
        }
        Ok(())
    }
}

/// `p[s][a][s']` for a two-state, two-action chain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionKernel {
    p: [[[f64; 2]; 2]; 2],
}

impl TransitionKernel {
    /// Builds a kernel from `p(s'=1 | s, a)`, indexed `[s][a]`.
    ///
    /// Rows are stored as `[1 - p, p]`, so each sums to one exactly.
    pub fn from_up_probabilities(up: [[f64; 2]; 2]) -> Result<Self, EnvError> {
        let mut p = [[[0.0; 2]; 2]; 2];
        for s in 0..2 {
            for a in 0..2 {
                let v = up[s][a];
                if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                    return Err(EnvError::Probability {
                        type_id: 0,
                        state: s,
                        action: a,
                        value: v,
                    });
                }
                p[s][a] = [1.0 - v, v];
            }
        }
        Ok(Self { p })
    }

    /// Kernel whose rows are identical under both actions.
    pub fn action_invariant(up_from_0: f64, up_from_1: f64) -> Result<Self, EnvError> {
        Self::from_up_probabilities([[up_from_0, up_from_0], [up_from_1, up_from_1]])
    }

    pub fn prob(&self, state: u8, action: u8, next: u8) -> f64 {
        self.p[state as usize][action as usize][next as usize]
    }

    /// `p(s'=1 | s, a)`.
    pub fn up(&self, state: u8, action: u8) -> f64 {
        self.p[state as usize][action as usize][1]
    }

    pub fn row(&self, state: u8, action: u8) -> [f64; 2] {
        self.p[state as usize][action as usize]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmType {
    pub id: usize,
    /// Index into [`Environment::classes`].
    pub class: usize,
    pub kernel: TransitionKernel,
    /// Reward by state, `[R(0), R(1)]`.
    pub base_reward: [f64; 2],
    pub count: usize,
    pub initial_state: u8,
}

/// The validated environment. Immutable after construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    name: String,
    features: Vec<FeatureDimension>,
    classes: Vec<FeatureClass>,
    types: Vec<ArmType>,
    arm_type: Vec<usize>,
    budget: usize,
    horizon: usize,
    budget_mode: BudgetMode,
}

impl Environment {
    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        let spec: EnvironmentSpec =
            serde_json::from_str(text).map_err(|e| EnvError::Malformed(e.to_string()))?;
        spec.build()
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, EnvError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| EnvError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// One of the bundled environments: `armman` or `conservation`.
    pub fn builtin(name: &str) -> Result<Self, EnvError> {
        Self::from_json(builtin_spec(name)?)
    }

    /// Resolves `builtin:<name>` or a bare builtin name, otherwise a file path.
    pub fn resolve(reference: &str) -> Result<Self, EnvError> {
        match reference.strip_prefix("builtin:") {
            Some(name) => Self::builtin(name),
            None if !Path::new(reference).exists() && builtin_spec(reference).is_ok() => {
                Self::builtin(reference)
            }
            None => Self::from_path(reference),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_arms(&self) -> usize {
        self.arm_type.len()
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn budget_mode(&self) -> BudgetMode {
        self.budget_mode
    }

    /// Number of arms acted on per round in exact mode: `min(B, N)`.
    pub fn pulls_per_round(&self) -> usize {
        self.budget.min(self.n_arms())
    }

    pub fn with_budget_mode(mut self, mode: BudgetMode) -> Self {
        self.budget_mode = mode;
        self
    }

    /// Copy of this environment with a different horizon.
    pub fn with_horizon(mut self, horizon: usize) -> Result<Self, EnvError> {
        if horizon == 0 {
            return Err(EnvError::Invalid("horizon T must be at least 1".into()));
        }
        self.horizon = horizon;
        Ok(self)
    }

    pub fn features(&self) -> &[FeatureDimension] {
        &self.features
    }

    pub fn classes(&self) -> &[FeatureClass] {
        &self.classes
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn types(&self) -> &[ArmType] {
        &self.types
    }

    pub fn type_of_arm(&self, arm: usize) -> usize {
        self.arm_type[arm]
    }

    pub fn arm_type_of(&self, arm: usize) -> &ArmType {
        &self.types[self.arm_type[arm]]
    }

    pub fn class_of_arm(&self, arm: usize) -> usize {
        self.types[self.arm_type[arm]].class
    }

    /// Number of arms in each feature class.
    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.classes.len()];
        for t in &self.types {
            sizes[t.class] += t.count;
        }
        sizes
    }

    pub fn initial_population(&self) -> PopulationState {
        PopulationState {
            states: self
                .arm_type
                .iter()
                .map(|&t| self.types[t].initial_state)
                .collect(),
            round: 0,
        }
    }

    pub fn base_reward(&self, arm: usize, state: u8) -> f64 {
        self.arm_type_of(arm).base_reward[state as usize]
    }

    /// Multi-line report used by `validate-env`.
    pub fn summary(&self) -> String {
        let mut out = format!(
            "{}: N={}, B={}, T={}, {} types, {} classes, all rows valid\n",
            self.name,
            self.n_arms(),
            self.budget,
            self.horizon,
            self.types.len(),
            self.classes.len()
        );
        for t in &self.types {
            out.push_str(&format!(
                "  type {} [{}] count={} R=({}, {}) p(1|0,0)={:.3} p(1|0,1)={:.3} p(1|1,0)={:.3} p(1|1,1)={:.3}\n",
                t.id,
                self.classes[t.class],
                t.count,
                t.base_reward[0],
                t.base_reward[1],
                t.kernel.up(0, 0),
                t.kernel.up(0, 1),
                t.kernel.up(1, 0),
                t.kernel.up(1, 1),
            ));
        }
        out
    }
}

fn builtin_spec(name: &str) -> Result<&'static str, EnvError> {
    match name {
        "armman" => Ok(ARMMAN_SPEC),
        "conservation" => Ok(CONSERVATION_SPEC),
        other => Err(EnvError::UnknownBuiltin(other.to_string())),
    }
}

/// States of every arm at a given round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopulationState {
    pub states: Vec<u8>,
    pub round: usize,
}

/// One round of a trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// Acted arms, ascending.
    pub actions: Vec<usize>,
    pub states_before: Vec<u8>,
    pub base_rewards: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<RoundRecord>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_pulls(&self) -> usize {
        self.records.iter().map(|r| r.actions.len()).sum()
    }
}

/// A per-round action selector.
pub trait Policy {
    fn select(&mut self, env: &Environment, pop: &PopulationState) -> Vec<usize>;
}

impl<F> Policy for F
where
    F: FnMut(&Environment, &PopulationState) -> Vec<usize>,
{
    fn select(&mut self, env: &Environment, pop: &PopulationState) -> Vec<usize> {
        self(env, pop)
    }
}

fn action_mask(env: &Environment, actions: &[usize]) -> Result<Vec<u8>, EnvError> {
    let n = env.n_arms();
    if actions.len() > env.budget {
        return Err(EnvError::OverBudget {
            size: actions.len(),
            budget: env.budget,
        });
    }
    let mut mask = vec![0u8; n];
    for &i in actions {
        if i >= n {
            return Err(EnvError::InvalidArm { index: i, n });
        }
        if mask[i] == 1 {
            return Err(EnvError::DuplicateArm(i));
        }
        mask[i] = 1;
    }
    Ok(mask)
}

/// Advances the population one round.
///
/// Rewards are read from the pre-transition state. One uniform draw is
/// consumed per arm, in arm order, whatever the action set; two policies
/// evaluated on the same stream therefore see identical noise per arm.
pub fn step<R: Rng + ?Sized>(
    env: &Environment,
    pop: &PopulationState,
    actions: &[usize],
    rng: &mut R,
) -> Result<(PopulationState, Vec<f64>), EnvError> {
    if pop.round >= env.horizon {
        return Err(EnvError::HorizonExhausted {
            round: pop.round,
            horizon: env.horizon,
        });
    }
    if pop.states.len() != env.n_arms() {
        return Err(EnvError::Invalid(format!(
            "population state has {} arms, environment has {}",
            pop.states.len(),
            env.n_arms()
        )));
    }
    let mask = action_mask(env, actions)?;
    let mut next = Vec::with_capacity(pop.states.len());
    let mut rewards = Vec::with_capacity(pop.states.len());
    for (i, (&s, &a)) in pop.states.iter().zip(&mask).enumerate() {
        let ty = env.arm_type_of(i);
        rewards.push(ty.base_reward[s as usize]);
        let u: f64 = rng.random();
        next.push(u8::from(u < ty.kernel.up(s, a)));
    }
    Ok((
        PopulationState {
            states: next,
            round: pop.round + 1,
        },
        rewards,
    ))
}

/// Runs `policy` for `rounds` rounds from the initial population.
pub fn rollout<P, R>(
    env: &Environment,
    policy: &mut P,
    rounds: usize,
    rng: &mut R,
) -> Result<Trajectory, EnvError>
where
    P: Policy + ?Sized,
    R: Rng + ?Sized,
{
    let mut pop = env.initial_population();
    let mut records = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let mut actions = policy.select(env, &pop);
        actions.sort_unstable();
        let (next, rewards) = step(env, &pop, &actions, rng)?;
        records.push(RoundRecord {
            actions,
            states_before: std::mem::replace(&mut pop, next).states,
            base_rewards: rewards,
        });
    }
    Ok(Trajectory { records })
}

// ---------------------------------------------------------------------------
// File schema
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub name: String,
    pub levels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypeSpec {
    pub id: usize,
    pub features: BTreeMap<String, String>,
    pub count: usize,
    pub base_reward: BTreeMap<String, f64>,
    pub transitions: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub initial_state: u8,
}

/// The on-disk environment document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub name: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "B")]
    pub budget: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub features: Vec<FeatureSpec>,
    pub types: Vec<TypeSpec>,
    #[serde(default, skip_serializing_if = "is_default_mode")]
    pub budget_mode: BudgetMode,
}

fn is_default_mode(m: &BudgetMode) -> bool {
    *m == BudgetMode::Exact
}

fn parse_indexed_key(key: &str) -> Option<(usize, usize)> {
    let rest = key.strip_prefix('s')?;
    let (s, a) = rest.split_once("_a")?;
    let s: usize = s.parse().ok()?;
    let a: usize = a.parse().ok()?;
    (s < 2 && a < 2).then_some((s, a))
}

impl EnvironmentSpec {
    pub fn build(&self) -> Result<Environment, EnvError> {
        if self.horizon == 0 {
            return Err(EnvError::Invalid("horizon T must be at least 1".into()));
        }
        if self.budget == 0 {
            return Err(EnvError::Invalid("budget B must be at least 1".into()));
        }
        if self.budget > self.n {
            return Err(EnvError::BudgetExceedsPopulation {
                budget: self.budget,
                n: self.n,
            });
        }
        if self.types.is_empty() {
            return Err(EnvError::Invalid("no arm types declared".into()));
        }
        let mut dims = HashSet::new();
        for f in &self.features {
            if !dims.insert(f.name.as_str()) {
                return Err(EnvError::Invalid(format!(
                    "feature `{}` declared twice",
                    f.name
                )));
            }
            if f.levels.is_empty() {
                return Err(EnvError::Invalid(format!("feature `{}` has no levels", f.name)));
            }
        }

        let mut classes: Vec<FeatureClass> = Vec::new();
        let mut types = Vec::with_capacity(self.types.len());
        for (pos, t) in self.types.iter().enumerate() {
            if t.id != pos {
                return Err(EnvError::Invalid(format!(
                    "type ids must be contiguous from 0; found id {} at position {pos}",
                    t.id
                )));
            }
            let labels = self.class_labels(t)?;
            let class = match classes.iter().position(|c| c.labels == labels) {
                Some(c) => c,
                None => {
                    classes.push(FeatureClass {
                        id: classes.len(),
                        labels,
                    });
                    classes.len() - 1
                }
            };
            types.push(ArmType {
                id: t.id,
                class,
                kernel: Self::kernel(t)?,
                base_reward: Self::base_reward(t)?,
                count: t.count,
                initial_state: match t.initial_state {
                    s @ (0 | 1) => s,
                    s => {
                        return Err(EnvError::Invalid(format!(
                            "type {}: initial_state {s} is not 0 or 1",
                            t.id
                        )))
                    }
                },
            });
        }

        let total: usize = types.iter().map(|t| t.count).sum();
        if total != self.n {
            return Err(EnvError::Invalid(format!(
                "type counts sum to {total}, but N={}",
                self.n
            )));
        }
        let arm_type = types
            .iter()
            .flat_map(|t| std::iter::repeat(t.id).take(t.count))
            .collect();

        Ok(Environment {
            name: self.name.clone(),
            features: self
                .features
                .iter()
                .map(|f| FeatureDimension {
                    name: f.name.clone(),
                    levels: f.levels.clone(),
                })
                .collect(),
            classes,
            types,
            arm_type,
            budget: self.budget,
            horizon: self.horizon,
            budget_mode: self.budget_mode,
        })
    }

    fn class_labels(&self, t: &TypeSpec) -> Result<Vec<(String, String)>, EnvError> {
        for key in t.features.keys() {
            if !self.features.iter().any(|f| &f.name == key) {
                return Err(EnvError::Invalid(format!(
                    "type {}: unknown feature `{key}`",
                    t.id
                )));
            }
        }
        self.features
            .iter()
            .map(|f| {
                let level = t.features.get(&f.name).ok_or_else(|| {
                    EnvError::Invalid(format!("type {}: missing feature `{}`", t.id, f.name))
                })?;
                if !f.levels.contains(level) {
                    return Err(EnvError::Invalid(format!(
                        "type {}: `{level}` is not a level of `{}`",
                        t.id, f.name
                    )));
                }
                Ok((f.name.clone(), level.clone()))
            })
            .collect()
    }

    fn kernel(t: &TypeSpec) -> Result<TransitionKernel, EnvError> {
        let mut up = [[None; 2]; 2];
        for (key, row) in &t.transitions {
            let (s, a) = parse_indexed_key(key).ok_or_else(|| EnvError::UnknownTransition {
                type_id: t.id,
                key: key.clone(),
            })?;
            if row.len() != 2 {
                return Err(EnvError::Malformed(format!(
                    "type {}: row `{key}` has {} entries, expected 2",
                    t.id,
                    row.len()
                )));
            }
            for &v in row {
                if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                    return Err(EnvError::Probability {
                        type_id: t.id,
                        state: s,
                        action: a,
                        value: v,
                    });
                }
            }
            let sum = row[0] + row[1];
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(EnvError::RowSum {
                    type_id: t.id,
                    state: s,
                    action: a,
                    sum,
                });
            }
            up[s][a] = Some(row[1]);
        }
        let mut out = [[0.0; 2]; 2];
        for s in 0..2 {
            for a in 0..2 {
                out[s][a] = up[s][a].ok_or_else(|| EnvError::MissingTransition {
                    type_id: t.id,
                    key: format!("s{s}_a{a}"),
                })?;
            }
        }
        TransitionKernel::from_up_probabilities(out).map_err(|e| match e {
            EnvError::Probability {
                state,
                action,
                value,
                ..
            } => EnvError::Probability {
                type_id: t.id,
                state,
                action,
                value,
            },
            other => other,
        })
    }

    fn base_reward(t: &TypeSpec) -> Result<[f64; 2], EnvError> {
        let mut r = [None; 2];
        for (key, &v) in &t.base_reward {
            let s = match key.as_str() {
                "0" => 0,
                "1" => 1,
                _ => {
                    return Err(EnvError::UnknownState {
                        type_id: t.id,
                        key: key.clone(),
                    })
                }
            };
            if !v.is_finite() {
                return Err(EnvError::Invalid(format!(
                    "type {}: base_reward for state {s} is not finite",
                    t.id
                )));
            }
            r[s] = Some(v);
        }
        match r {
            [Some(a), Some(b)] => Ok([a, b]),
            _ => Err(EnvError::Invalid(format!(
                "type {}: base_reward must define states 0 and 1",
                t.id
            ))),
        }
    }
}

/// Programmatic construction of small environments.
#[derive(Clone, Debug)]
pub struct EnvBuilder {
    spec: EnvironmentSpec,
}

impl EnvBuilder {
    pub fn new(name: &str, budget: usize, horizon: usize) -> Self {
        Self {
            spec: EnvironmentSpec {
                name: name.to_string(),
                n: 0,
                budget,
                horizon,
                features: Vec::new(),
                types: Vec::new(),
                budget_mode: BudgetMode::Exact,
            },
        }
    }

    pub fn feature(mut self, name: &str, levels: &[&str]) -> Self {
        self.spec.features.push(FeatureSpec {
            name: name.to_string(),
            levels: levels.iter().map(|s| s.to_string()).collect(),
        });
        self
    }

    /// Adds a type. `up[s][a]` is `p(s'=1 | s, a)`.
    pub fn arm_type(
        mut self,
        features: &[(&str, &str)],
        up: [[f64; 2]; 2],
        base_reward: [f64; 2],
        count: usize,
    ) -> Self {
        let id = self.spec.types.len();
        let transitions = (0..2)
            .flat_map(|s| (0..2).map(move |a| (s, a)))
            .map(|(s, a)| (format!("s{s}_a{a}"), vec![1.0 - up[s][a], up[s][a]]))
            .collect();
        self.spec.types.push(TypeSpec {
            id,
            features: features
                .iter()
                .map(|(d, l)| (d.to_string(), l.to_string()))
                .collect(),
            count,
            base_reward: [("0".to_string(), base_reward[0]), ("1".to_string(), base_reward[1])]
                .into_iter()
                .collect(),
            transitions,
            initial_state: 0,
        });
        self.spec.n += count;
        self
    }

    /// Sets the initial state of the most recently added type.
    pub fn initial_state(mut self, state: u8) -> Self {
        if let Some(t) = self.spec.types.last_mut() {
            t.initial_state = state;
        }
        self
    }

    pub fn budget_mode(mut self, mode: BudgetMode) -> Self {
        self.spec.budget_mode = mode;
        self
    }

    pub fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    pub fn build(self) -> Result<Environment, EnvError> {
        self.spec.build()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn two_arm_env() -> Environment {
        EnvBuilder::new("pair", 1, 3)
            .feature("group", &["A", "B"])
            .arm_type(&[("group", "A")], [[0.0, 1.0], [1.0, 1.0]], [0.2, 0.8], 1)
            .arm_type(&[("group", "B")], [[0.3, 0.6], [0.5, 0.9]], [0.2, 0.8], 1)
            .initial_state(1)
            .build()
            .unwrap()
    }

    #[test]
    fn bundled_armman() {
        let env = Environment::builtin("armman").unwrap();
        assert_eq!(env.n_arms(), 800);
        assert_eq!(env.budget(), 400);
        assert_eq!(env.horizon(), 50);
        assert_eq!(env.types().len(), 8);
        assert_eq!(env.n_classes(), 8);
        for t in env.types() {
            assert_eq!(t.base_reward, [0.2, 0.8]);
            assert_eq!(t.count, 100);
        }
        // Type 2 of the published table: high income, high education, young.
        let t = &env.types()[1];
        assert_eq!(env.classes()[t.class].level_of("age"), Some("Young"));
        assert!((t.kernel.up(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn bundled_conservation() {
        let env = Environment::builtin("conservation").unwrap();
        assert_eq!(
            (env.n_arms(), env.budget(), env.horizon(), env.types().len()),
            (400, 100, 52, 4)
        );
        assert!(env.types().iter().all(|t| t.base_reward == [0.1, 0.9]));
    }

    #[test]
    fn rows_normalized_after_load() {
        for name in ["armman", "conservation"] {
            let env = Environment::builtin(name).unwrap();
            for t in env.types() {
                for s in 0..2 {
                    for a in 0..2 {
                        let row = t.kernel.row(s, a);
                        assert!((row[0] + row[1] - 1.0).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    fn armman_spec() -> EnvironmentSpec {
        serde_json::from_str(ARMMAN_SPEC).unwrap()
    }

    #[test]
    fn bad_row_sum_names_row() {
        let mut spec = armman_spec();
        spec.types[3].transitions.insert("s1_a0".into(), vec![0.5, 0.4]);
        let err = spec.build().unwrap_err();
        match err {
            EnvError::RowSum {
                type_id,
                state,
                action,
                sum,
            } => {
                assert_eq!((type_id, state, action), (3, 1, 0));
                assert!((sum - 0.9).abs() < 1e-12);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn unknown_indices_rejected() {
        let mut spec = armman_spec();
        spec.types[0].transitions.insert("s2_a0".into(), vec![0.5, 0.5]);
        assert!(matches!(
            spec.build(),
            Err(EnvError::UnknownTransition { type_id: 0, .. })
        ));

        let mut spec = armman_spec();
        spec.types[0].base_reward.insert("3".into(), 1.0);
        assert!(matches!(spec.build(), Err(EnvError::UnknownState { .. })));

        let mut spec = armman_spec();
        spec.types[0].transitions.remove("s0_a1");
        assert!(matches!(spec.build(), Err(EnvError::MissingTransition { .. })));
    }

    #[test]
    fn budget_above_population_rejected() {
        let mut spec = armman_spec();
        spec.budget = 801;
        assert!(matches!(
            spec.build(),
            Err(EnvError::BudgetExceedsPopulation { budget: 801, n: 800 })
        ));
    }

    #[test]
    fn malformed_document() {
        assert!(matches!(
            Environment::from_json("{\"name\": 3}"),
            Err(EnvError::Malformed(_))
        ));
        assert!(matches!(
            Environment::from_json("not json"),
            Err(EnvError::Malformed(_))
        ));
    }

    #[test]
    fn count_mismatch_rejected() {
        let mut spec = armman_spec();
        spec.n = 700;
        spec.budget = 300;
        assert!(spec.build().is_err());
    }

    #[test]
    fn deterministic_uplift_moves_to_one() {
        let env = EnvBuilder::new("det", 1, 2)
            .feature("g", &["x"])
            .arm_type(&[("g", "x")], [[0.0, 1.0], [1.0, 1.0]], [0.2, 0.8], 1)
            .build()
            .unwrap();
        let pop = env.initial_population();
        let (next, r) = step(&env, &pop, &[0], &mut rng::stream(1)).unwrap();
        assert_eq!(next.states, vec![1]);
        assert_eq!(next.round, 1);
        assert_eq!(r, vec![0.2]);
    }

    #[test]
    fn reward_reads_pre_transition_state() {
        let env = two_arm_env();
        let pop = PopulationState {
            states: vec![0, 1],
            round: 0,
        };
        for actions in [vec![], vec![0], vec![1]] {
            let (_, r) = step(&env, &pop, &actions, &mut rng::stream(3)).unwrap();
            assert_eq!(r, vec![0.2, 0.8]);
        }
    }

    #[test]
    fn step_errors() {
        let env = two_arm_env();
        let pop = env.initial_population();
        let mut s = rng::stream(0);
        assert!(matches!(
            step(&env, &pop, &[0, 1], &mut s),
            Err(EnvError::OverBudget { size: 2, budget: 1 })
        ));
        assert!(matches!(
            step(&env, &pop, &[5], &mut s),
            Err(EnvError::InvalidArm { index: 5, n: 2 })
        ));
        let late = PopulationState {
            states: vec![0, 0],
            round: 3,
        };
        assert!(matches!(
            step(&env, &late, &[0], &mut s),
            Err(EnvError::HorizonExhausted { .. })
        ));
    }

    #[test]
    fn empirical_frequency_matches_kernel() {
        let env = Environment::builtin("armman").unwrap();
        let kernel = env.types()[1].kernel;
        let mut s = rng::stream(2024);
        let draws = 100_000;
        let mut ups = 0usize;
        for _ in 0..draws {
            let u: f64 = s.random();
            ups += usize::from(u < kernel.up(0, 1));
        }
        let freq = ups as f64 / draws as f64;
        assert!((freq - 0.750).abs() < 0.01, "frequency {freq}");
    }

    #[test]
    fn rollout_single_round() {
        let env = two_arm_env();
        let mut policy = |_: &Environment, _: &PopulationState| vec![0];
        let traj = rollout(&env, &mut policy, 1, &mut rng::stream(9)).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.records[0].actions, vec![0]);
    }

    #[test]
    fn rollout_deterministic_per_seed() {
        let env = Environment::builtin("armman").unwrap();
        let mut policy = |e: &Environment, _: &PopulationState| (0..e.budget()).collect();
        let a = rollout(&env, &mut policy, 10, &mut rng::stream(5)).unwrap();
        let b = rollout(&env, &mut policy, 10, &mut rng::stream(5)).unwrap();
        let c = rollout(&env, &mut policy, 10, &mut rng::stream(6)).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
        assert_ne!(a, c);
    }

    #[test]
    fn class_labels_display() {
        let env = Environment::builtin("armman").unwrap();
        assert_eq!(
            env.classes()[7].to_string(),
            "income=Low, education=Low, age=Young"
        );
    }

    #[test]
    fn resolve_builtin_names() {
        assert_eq!(Environment::resolve("builtin:armman").unwrap().n_arms(), 800);
        assert_eq!(Environment::resolve("conservation").unwrap().n_arms(), 400);
        assert!(matches!(
            Environment::resolve("builtin:nope"),
            Err(EnvError::UnknownBuiltin(_))
        ));
    }
}
