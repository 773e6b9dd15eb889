//! Exact joint-state computations for tiny instances.
//!
//! Joint states are bit masks: bit `i` holds the state of arm `i`.

use super::{check_shaping, SolverError};
use crate::env::{BudgetMode, Environment};
use crate::metrics::{divergence, FeatureDistribution, PreferenceSpec};
use crate::shaping::{scalarized_objective, ShapingReward};

pub const MAX_BRUTE_ARMS: usize = 4;
pub const MAX_BRUTE_BUDGET: usize = 2;
pub const MAX_BRUTE_HORIZON: usize = 4;
/// Largest population for exact policy evaluation.
pub const MAX_EXACT_ARMS: usize = 10;
const MAX_ENUMERATED_POLICIES: u64 = 1 << 16;

fn decode(mask: u32, n: usize) -> Vec<u8> {
    (0..n).map(|i| ((mask >> i) & 1) as u8).collect()
}

fn encode(states: &[u8]) -> u32 {
    states
        .iter()
        .enumerate()
        .fold(0, |m, (i, &s)| m | (u32::from(s) << i))
}

fn initial_mask(env: &Environment) -> u32 {
    encode(&env.initial_population().states)
}

/// Feasible action masks, ascending.
fn action_masks(env: &Environment) -> Vec<u32> {
    let n = env.n_arms();
    let k = env.pulls_per_round();
    (0..1u32 << n)
        .filter(|m| match env.budget_mode() {
            BudgetMode::Exact => m.count_ones() as usize == k,
            BudgetMode::AtMost => m.count_ones() as usize <= env.budget(),
        })
        .collect()
}

fn round_reward(env: &Environment, shaping: &ShapingReward, states: &[u8], action: u32) -> (f64, f64) {
    let mut base = 0.0;
    let mut bonus = 0.0;
    for (i, &s) in states.iter().enumerate() {
        base += env.base_reward(i, s);
        if (action >> i) & 1 == 1 {
            bonus += shaping.as_slice()[env.class_of_arm(i)];
        }
    }
    (base, bonus)
}

/// Distribution over next joint states, as `(mask, probability)` pairs.
fn successors(env: &Environment, states: &[u8], action: u32) -> Vec<(u32, f64)> {
    let mut out = vec![(0u32, 1.0f64)];
    for (i, &s) in states.iter().enumerate() {
        let a = ((action >> i) & 1) as u8;
        let up = env.arm_type_of(i).kernel.up(s, a);
        let mut next = Vec::with_capacity(out.len() * 2);
        for &(m, p) in &out {
            if up < 1.0 {
                next.push((m, p * (1.0 - up)));
            }
            if up > 0.0 {
                next.push((m | 1 << i, p * up));
            }
        }
        out = next;
    }
    out
}

fn check_size(env: &Environment, max_arms: usize) -> Result<(), SolverError> {
    if env.n_arms() > max_arms {
        return Err(SolverError::Intractable(format!(
            "N={} exceeds {max_arms}",
            env.n_arms()
        )));
    }
    Ok(())
}

/// An action table by `(round, joint state)`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointPolicy {
    n: usize,
    /// `actions[t][mask]` is the acted-arm mask.
    actions: Vec<Vec<u32>>,
}

impl JointPolicy {
    pub fn act(&self, round: usize, states: &[u8]) -> Vec<usize> {
        let m = self.actions[round][encode(states) as usize];
        (0..self.n).filter(|i| (m >> i) & 1 == 1).collect()
    }
}

/// Optimal expected shaped return over all feasible joint policies.
pub fn brute_force_optimal(
    env: &Environment,
    shaping: &ShapingReward,
) -> Result<(f64, JointPolicy), SolverError> {
    check_shaping(env, shaping)?;
    if env.n_arms() > MAX_BRUTE_ARMS || env.budget() > MAX_BRUTE_BUDGET || env.horizon() > MAX_BRUTE_HORIZON {
        return Err(SolverError::Intractable(format!(
            "N={}, B={}, T={} exceeds N<={MAX_BRUTE_ARMS}, B<={MAX_BRUTE_BUDGET}, T<={MAX_BRUTE_HORIZON}",
            env.n_arms(),
            env.budget(),
            env.horizon()
        )));
    }
    let n = env.n_arms();
    let size = 1usize << n;
    let masks = action_masks(env);
    let mut value = vec![0.0f64; size];
    let mut actions = vec![vec![0u32; size]; env.horizon()];
    for t in (0..env.horizon()).rev() {
        let mut next_value = vec![0.0f64; size];
        for s in 0..size {
            let states = decode(s as u32, n);
            let mut best = f64::NEG_INFINITY;
            for &a in &masks {
                let (base, bonus) = round_reward(env, shaping, &states, a);
                let cont: f64 = successors(env, &states, a)
                    .iter()
                    .map(|&(m, p)| p * value[m as usize])
                    .sum();
                let q = base + bonus + cont;
                if q > best {
                    best = q;
                    actions[t][s] = a;
                }
            }
            next_value[s] = best;
        }
        value = next_value;
    }
    Ok((value[initial_mask(env) as usize], JointPolicy { n, actions }))
}

/// Expected quantities of a deterministic Markov policy.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactOutcome {
    /// Base reward plus shaping bonus.
    pub shaped_return: f64,
    pub utility: f64,
    pub class_pulls: Vec<f64>,
}

impl ExactOutcome {
    pub fn distribution(&self) -> Option<FeatureDistribution> {
        FeatureDistribution::from_counts(&self.class_pulls).ok()
    }
}

/// Propagates the joint-state distribution under `policy` and accumulates
/// expected returns and pull counts.
pub fn evaluate_exact(
    env: &Environment,
    shaping: &ShapingReward,
    policy: &mut dyn FnMut(usize, &[u8]) -> Vec<usize>,
) -> Result<ExactOutcome, SolverError> {
    check_shaping(env, shaping)?;
    check_size(env, MAX_EXACT_ARMS)?;
    let n = env.n_arms();
    let size = 1usize << n;
    let mut dist = vec![0.0f64; size];
    dist[initial_mask(env) as usize] = 1.0;
    let mut out = ExactOutcome {
        shaped_return: 0.0,
        utility: 0.0,
        class_pulls: vec![0.0; env.n_classes()],
    };
    for t in 0..env.horizon() {
        let mut next = vec![0.0f64; size];
        for (s, &p) in dist.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let states = decode(s as u32, n);
            let acted = policy(t, &states);
            let a = feasible_mask(env, t, &acted)?;
            let (base, bonus) = round_reward(env, shaping, &states, a);
            out.utility += p * base;
            out.shaped_return += p * (base + bonus);
            for &i in &acted {
                out.class_pulls[env.class_of_arm(i)] += p;
            }
            for (m, q) in successors(env, &states, a) {
                next[m as usize] += p * q;
            }
        }
        dist = next;
    }
    Ok(out)
}

fn feasible_mask(env: &Environment, round: usize, acted: &[usize]) -> Result<u32, SolverError> {
    let infeasible = |reason: String| SolverError::Infeasible { round, reason };
    let mut m = 0u32;
    for &i in acted {
        if i >= env.n_arms() {
            return Err(infeasible(format!("arm {i} out of range")));
        }
        if (m >> i) & 1 == 1 {
            return Err(infeasible(format!("arm {i} repeated")));
        }
        m |= 1 << i;
    }
    let ok = match env.budget_mode() {
        BudgetMode::Exact => acted.len() == env.pulls_per_round(),
        BudgetMode::AtMost => acted.len() <= env.budget(),
    };
    if !ok {
        return Err(infeasible(format!("{} arms acted", acted.len())));
    }
    Ok(m)
}

/// Every joint state reachable at each round under some feasible policy.
fn reachable(env: &Environment, masks: &[u32]) -> Vec<Vec<u32>> {
    let n = env.n_arms();
    let mut layers = vec![vec![initial_mask(env)]];
    for _ in 1..env.horizon() {
        let mut seen = vec![false; 1 << n];
        for &s in layers.last().unwrap() {
            let states = decode(s, n);
            for &a in masks {
                for (m, _) in successors(env, &states, a) {
                    seen[m as usize] = true;
                }
            }
        }
        layers.push((0..1u32 << n).filter(|&m| seen[m as usize]).collect());
    }
    layers
}

/// Expected `(U, C)` of every deterministic Markov policy that differs on
/// reachable states, in mixed-radix enumeration order.
pub fn achievable_points(
    env: &Environment,
    pref: &PreferenceSpec,
) -> Result<Vec<(f64, f64)>, SolverError> {
    check_size(env, MAX_BRUTE_ARMS)?;
    let masks = action_masks(env);
    let layers = reachable(env, &masks);
    let decisions: Vec<(usize, u32)> = layers
        .iter()
        .enumerate()
        .flat_map(|(t, l)| l.iter().map(move |&s| (t, s)))
        .collect();
    let radix = masks.len() as u64;
    let count = decisions
        .iter()
        .try_fold(1u64, |c, _| c.checked_mul(radix).filter(|&c| c <= MAX_ENUMERATED_POLICIES))
        .ok_or_else(|| {
            SolverError::Intractable(format!(
                "{} decision points with {radix} actions each exceed {MAX_ENUMERATED_POLICIES} policies",
                decisions.len()
            ))
        })?;

    let n = env.n_arms();
    let zero = ShapingReward::zeros(env.n_classes());
    let mut digits = vec![0usize; decisions.len()];
    let mut table = vec![vec![0u32; 1 << n]; env.horizon()];
    let mut points = Vec::with_capacity(count as usize);
    for _ in 0..count {
        for (d, &(t, s)) in digits.iter().zip(&decisions) {
            table[t][s as usize] = masks[*d];
        }
        let mut policy = |t: usize, states: &[u8]| {
            let m = table[t][encode(states) as usize];
            (0..n).filter(|i| (m >> i) & 1 == 1).collect::<Vec<_>>()
        };
        let outcome = evaluate_exact(env, &zero, &mut policy)?;
        let c = match outcome.distribution() {
            Some(d) => divergence(&d, pref).map_err(|e| SolverError::Intractable(e.to_string()))?,
            None => 0.0,
        };
        points.push((outcome.utility, c));
        for d in digits.iter_mut() {
            *d += 1;
            if *d < masks.len() {
                break;
            }
            *d = 0;
        }
    }
    Ok(points)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarizedOptimum {
    pub lambda: f64,
    pub utility: f64,
    pub divergence: f64,
    pub objective: f64,
    /// Position in the enumeration.
    pub policy: usize,
}

/// Maximiser of `lambda * U / scale - (1 - lambda) * C`; ties prefer larger
/// `U`, then smaller `C`, then the earliest policy.
pub fn scalarized_optimum(points: &[(f64, f64)], lambda: f64, scale: f64) -> Option<ScalarizedOptimum> {
    let mut best: Option<ScalarizedOptimum> = None;
    for (i, &(u, c)) in points.iter().enumerate() {
        let j = scalarized_objective(u / scale, c, lambda);
        let better = match best {
            None => true,
            Some(b) => j > b.objective || (j == b.objective && (u > b.utility || (u == b.utility && c < b.divergence))),
        };
        if better {
            best = Some(ScalarizedOptimum {
                lambda,
                utility: u,
                divergence: c,
                objective: j,
                policy: i,
            });
        }
    }
    best
}
