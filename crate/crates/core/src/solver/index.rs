use serde::{Deserialize, Serialize};

use super::{check_shaping, SolverError};
use crate::env::{ArmType, Environment};
use crate::shaping::ShapingReward;

/// Which per-arm priority to compute.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    /// One-step advantage of acting now over staying passive, with every
    /// later round valued as passive.
    #[default]
    Advantage,
    /// Finite-horizon subsidy index: the passive subsidy at which acting
    /// and resting are equally valuable under optimal continuation.
    Whittle,
}

impl std::str::FromStr for IndexKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "advantage" => Ok(Self::Advantage),
            "whittle" => Ok(Self::Whittle),
            other => Err(format!("unknown index `{other}` (expected advantage or whittle)")),
        }
    }
}

/// Priority by `(type, state, remaining horizon)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexTable {
    horizon: usize,
    /// `values[type][state][h - 1]`.
    values: Vec<[Vec<f64>; 2]>,
}

impl IndexTable {
    /// Index at remaining horizon `h` in `1..=horizon`; larger `h` is
    /// capped at the horizon.
    pub fn get(&self, type_id: usize, state: u8, h: usize) -> f64 {
        let h = h.clamp(1, self.horizon);
        self.values[type_id][state as usize][h - 1]
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_types(&self) -> usize {
        self.values.len()
    }
}

pub fn compute_indices(
    env: &Environment,
    shaping: &ShapingReward,
    horizon: usize,
    kind: IndexKind,
) -> Result<IndexTable, SolverError> {
    check_shaping(env, shaping)?;
    let horizon = horizon.max(1);
    let values = env
        .types()
        .iter()
        .map(|t| {
            let bonus = shaping.as_slice()[t.class];
            match kind {
                IndexKind::Advantage => advantage(t, bonus, horizon),
                IndexKind::Whittle => whittle(t, bonus, horizon),
            }
        })
        .collect();
    Ok(IndexTable { horizon, values })
}

fn expect(t: &ArmType, s: u8, a: u8, v: &[f64; 2]) -> f64 {
    t.kernel.prob(s, a, 0) * v[0] + t.kernel.prob(s, a, 1) * v[1]
}

fn advantage(t: &ArmType, bonus: f64, horizon: usize) -> [Vec<f64>; 2] {
    let mut out = [Vec::with_capacity(horizon), Vec::with_capacity(horizon)];
    // Passive value with h - 1 rounds to go.
    let mut passive = [0.0f64; 2];
    for _ in 0..horizon {
        for s in 0..2u8 {
            let act = bonus + expect(t, s, 1, &passive);
            let rest = expect(t, s, 0, &passive);
            out[s as usize].push(act - rest);
        }
        passive = [0u8, 1].map(|s| t.base_reward[s as usize] + expect(t, s, 0, &passive));
    }
    out
}

/// Value advantage of acting at `(s, h)` when resting pays `subsidy` and
/// later rounds are played optimally under the same subsidy.
fn subsidy_gap(t: &ArmType, bonus: f64, subsidy: f64, s: u8, h: usize) -> f64 {
    let mut v = [0.0f64; 2];
    for _ in 1..h {
        v = [0u8, 1].map(|x| {
            let base = t.base_reward[x as usize];
            let act = base + bonus + expect(t, x, 1, &v);
            let rest = base + subsidy + expect(t, x, 0, &v);
            act.max(rest)
        });
    }
    (bonus + expect(t, s, 1, &v)) - (subsidy + expect(t, s, 0, &v))
}

fn whittle(t: &ArmType, bonus: f64, horizon: usize) -> [Vec<f64>; 2] {
    // The gap is non-increasing in the subsidy for indexable arms and
    // changes by at most h per unit of subsidy, so [-span, span] brackets it.
    let spread = (t.base_reward[1] - t.base_reward[0]).abs() + bonus.abs() + 1.0;
    let mut out = [Vec::with_capacity(horizon), Vec::with_capacity(horizon)];
    for h in 1..=horizon {
        for s in 0..2u8 {
            let span = spread * h as f64;
            let (mut lo, mut hi) = (-span, span);
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if subsidy_gap(t, bonus, mid, s, h) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo < 1e-12 {
                    break;
                }
            }
            out[s as usize].push(0.5 * (lo + hi));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvBuilder, TransitionKernel};

    fn single(up: [[f64; 2]; 2], horizon: usize) -> Environment {
        EnvBuilder::new("one", 1, horizon)
            .feature("g", &["x"])
            .arm_type(&[("g", "x")], up, [0.2, 0.8], 1)
            .build()
            .unwrap()
    }

    /// Value of a single arm by exhaustive enumeration of action sequences
    /// from `(s, h)` with the first action fixed, remaining ones passive.
    fn enumerate_first(t: &ArmType, bonus: f64, s: u8, h: usize, first: u8) -> f64 {
        fn go(t: &ArmType, bonus: f64, s: u8, h: usize, a: u8) -> f64 {
            if h == 0 {
                return 0.0;
            }
            let r = t.base_reward[s as usize] + f64::from(a) * bonus;
            r + (0..2u8)
                .map(|n| t.kernel.prob(s, a, n) * go(t, bonus, n, h - 1, 0))
                .sum::<f64>()
        }
        go(t, bonus, s, h, first)
    }

    #[test]
    fn action_invariant_kernel_zero_index() {
        let env = single([[0.3, 0.3], [0.7, 0.7]], 8);
        for kind in [IndexKind::Advantage, IndexKind::Whittle] {
            let idx = compute_indices(&env, &ShapingReward::zeros(1), 8, kind).unwrap();
            for h in 1..=8 {
                for s in 0..2 {
                    assert!(idx.get(0, s, h).abs() < 1e-9, "{kind:?} h={h} s={s}");
                }
            }
        }
        assert!(TransitionKernel::action_invariant(0.3, 0.7).is_ok());
    }

    #[test]
    fn myopic_index_is_bonus() {
        let env = Environment::builtin("armman").unwrap();
        let r = ShapingReward(vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.5, 0.05, 1.0]);
        for kind in [IndexKind::Advantage, IndexKind::Whittle] {
            let idx = compute_indices(&env, &r, 1, kind).unwrap();
            for (ti, t) in env.types().iter().enumerate() {
                for s in 0..2 {
                    assert!((idx.get(ti, s, 1) - r.0[t.class]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn advantage_matches_enumeration() {
        let env = Environment::builtin("armman").unwrap();
        let idx = compute_indices(&env, &ShapingReward(vec![0.2; 8]), 10, IndexKind::Advantage).unwrap();
        for (ti, t) in env.types().iter().enumerate() {
            for s in 0..2u8 {
                for h in [1, 2, 5, 10] {
                    let oracle = enumerate_first(t, 0.2, s, h, 1) - enumerate_first(t, 0.2, s, h, 0);
                    assert!((idx.get(ti, s, h) - oracle).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn stronger_uplift_ranks_higher() {
        // Published types 6 and 3 are ids 5 and 2.
        let env = Environment::builtin("armman").unwrap();
        let idx = compute_indices(&env, &ShapingReward::zeros(8), 10, IndexKind::Advantage).unwrap();
        assert!(idx.get(5, 0, 10) > idx.get(2, 0, 10));
        let t5 = &env.types()[5];
        assert!((t5.kernel.up(0, 1) - 0.85).abs() < 1e-12);
        assert!((t5.kernel.up(0, 0) - 0.20).abs() < 1e-12);
    }

    #[test]
    fn whittle_indifference() {
        let env = Environment::builtin("conservation").unwrap();
        let idx = compute_indices(&env, &ShapingReward(vec![0.1; 4]), 12, IndexKind::Whittle).unwrap();
        for (ti, t) in env.types().iter().enumerate() {
            for s in 0..2u8 {
                for h in [1, 4, 12] {
                    let w = idx.get(ti, s, h);
                    assert!(subsidy_gap(t, 0.1, w, s, h).abs() < 1e-8);
                }
            }
        }
    }
}
