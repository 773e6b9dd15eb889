//! Budget-constrained policies over shaped rewards.
//!
//! Acting on an arm of class `z` pays `base(s) + R(z)` for that round;
//! leaving it passive pays `base(s)`. Each arm type gets a table of
//! priority indices by state and remaining horizon, and every round the
//! `min(B, N)` arms with the highest index are acted on.

mod exact;
mod index;

pub use exact::{
    achievable_points, brute_force_optimal, evaluate_exact, scalarized_optimum, ExactOutcome,
    JointPolicy, ScalarizedOptimum, MAX_BRUTE_ARMS, MAX_BRUTE_BUDGET, MAX_BRUTE_HORIZON,
    MAX_EXACT_ARMS,
};
pub use index::{compute_indices, IndexKind, IndexTable};

use thiserror::Error;

use crate::env::{BudgetMode, Environment, Policy, PopulationState};
use crate::shaping::ShapingReward;

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("shaping defines {got} classes, environment has {expected}")]
    MissingClass { got: usize, expected: usize },
    #[error("class {class}: shaping value {value} is not finite")]
    NonFinite { class: usize, value: f64 },
    #[error("instance too large for exact enumeration: {0}")]
    Intractable(String),
    #[error("policy returned an infeasible action set at round {round}: {reason}")]
    Infeasible { round: usize, reason: String },
}

pub(crate) fn check_shaping(env: &Environment, shaping: &ShapingReward) -> Result<(), SolverError> {
    if shaping.len() != env.n_classes() {
        return Err(SolverError::MissingClass {
            got: shaping.len(),
            expected: env.n_classes(),
        });
    }
    for (class, &value) in shaping.as_slice().iter().enumerate() {
        if !value.is_finite() {
            return Err(SolverError::NonFinite { class, value });
        }
    }
    Ok(())
}

/// Arms to act on, given one priority per arm.
///
/// Exact mode returns the `min(budget, N)` highest priorities; at-most mode
/// keeps only strictly positive priorities within the budget. Ties go to the
/// lowest arm index. The result is ascending.
pub fn top_b(priorities: &[f64], budget: usize, mode: BudgetMode) -> Vec<usize> {
    let mut order: Vec<usize> = (0..priorities.len()).collect();
    // partial_cmp, not total_cmp: -0.0 and 0.0 must tie.
    order.sort_by(|&a, &b| {
        priorities[b]
            .partial_cmp(&priorities[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(budget.min(priorities.len()));
    if mode == BudgetMode::AtMost {
        order.retain(|&i| priorities[i] > 0.0);
    }
    order.sort_unstable();
    order
}

/// Acted set for a population at remaining horizon `h`.
pub fn select_actions(
    env: &Environment,
    indices: &IndexTable,
    pop: &PopulationState,
    remaining: usize,
) -> Vec<usize> {
    let priorities = arm_priorities(env, indices, &pop.states, remaining);
    top_b(&priorities, env.budget(), env.budget_mode())
}

pub(crate) fn arm_priorities(
    env: &Environment,
    indices: &IndexTable,
    states: &[u8],
    remaining: usize,
) -> Vec<f64> {
    states
        .iter()
        .enumerate()
        .map(|(i, &s)| indices.get(env.type_of_arm(i), s, remaining))
        .collect()
}

/// Closed-loop index policy: at round `t` it ranks arms by their index at
/// remaining horizon `T - t`.
#[derive(Clone, Debug)]
pub struct IndexPolicy {
    indices: IndexTable,
    horizon: usize,
}

impl IndexPolicy {
    pub fn new(indices: IndexTable, horizon: usize) -> Self {
        Self { indices, horizon }
    }

    pub fn indices(&self) -> &IndexTable {
        &self.indices
    }

    /// Acted set for joint state `states` at round `round`.
    pub fn act(&self, env: &Environment, round: usize, states: &[u8]) -> Vec<usize> {
        let remaining = self.horizon.saturating_sub(round).max(1);
        let priorities = arm_priorities(env, &self.indices, states, remaining);
        top_b(&priorities, env.budget(), env.budget_mode())
    }
}

impl Policy for IndexPolicy {
    fn select(&mut self, env: &Environment, pop: &PopulationState) -> Vec<usize> {
        self.act(env, pop.round, &pop.states)
    }
}

pub fn solve_policy(
    env: &Environment,
    shaping: &ShapingReward,
    kind: IndexKind,
) -> Result<IndexPolicy, SolverError> {
    let indices = compute_indices(env, shaping, env.horizon(), kind)?;
    Ok(IndexPolicy::new(indices, env.horizon()))
}
