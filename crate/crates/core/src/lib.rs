//! Budget-constrained sequential allocation over restless bandits with
//! preference-aligned reward shaping.
//!
//! The crate is organised bottom-up:
//!
//! - [`env`] holds the arm population model and its stochastic dynamics.
//! - [`solver`] turns a shaping vector into a budget-feasible policy and
//!   provides exact joint-state oracles for tiny instances.
//! - [`metrics`] and [`shaping`] compute utility, feature visitation,
//!   divergence from a target and the scalarization quantities.
//! - [`feedback`] compares consecutive episodes and renders verbal feedback.
//! - [`backends`] proposes shaping vectors (analytic, scripted, remote).
//! - [`orchestrator`] runs the episode loop and persists artifacts.

pub mod backends;
pub mod cli;
pub mod env;
pub mod feedback;
pub mod metrics;
pub mod orchestrator;
pub mod rng;
pub mod shaping;
pub mod solver;

pub use backends::{RewardShaper, ShaperContext, ShaperError, ShaperOutput};
pub use env::{
    rollout, step, BudgetMode, EnvBuilder, EnvError, Environment, FeatureClass, PopulationState,
    Trajectory, TransitionKernel,
};
pub use metrics::{
    coverage, divergence, feature_distribution, pareto_filter, utility, DivergenceKind,
    EpisodeMetrics, FeatureDistribution, PreferenceSpec,
};
pub use orchestrator::{run_vortex, sweep_lambda, EpisodeRecord, RunConfig, RunError, RunResult};
pub use shaping::{ScalarizationConfig, ShapingReward, UtilityScale};
pub use solver::{compute_indices, select_actions, solve_policy, IndexKind, IndexPolicy};
