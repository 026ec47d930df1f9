//! Optimal Bellman operators, exact value iteration, occupancy measures and
//! exact policy evaluation on dense tables.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::local::LocalModel;
use super::tabular::TabularGame;
use crate::error::{Error, Result};
use crate::game::AgentId;

/// Slack allowed when checking that a table lies in `[0, V_max]`.
const RANGE_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "support", rename_all = "snake_case")]
pub enum Support {
    Joint,
    Local { owner: AgentId, members: Vec<AgentId> },
}

/// Dense action-value table `values[s * actions + a]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub support: Support,
    pub states: usize,
    pub actions: usize,
    pub values: Vec<f64>,
}

impl QTable {
    pub fn zeros(support: Support, states: usize, actions: usize) -> Self {
        Self::constant(support, states, actions, 0.0)
    }

    pub fn constant(support: Support, states: usize, actions: usize, c: f64) -> Self {
        Self {
            support,
            states,
            actions,
            values: vec![c; states * actions],
        }
    }

    pub fn joint_zeros(game: &TabularGame) -> Self {
        Self::zeros(Support::Joint, game.num_states(), game.num_actions())
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.actions..(s + 1) * self.actions]
    }

    pub fn max_at(&self, s: usize) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Maximizing action with ties broken by the lowest action id.
    pub fn greedy_at(&self, s: usize) -> usize {
        let row = self.row(s);
        let mut best = 0;
        for (a, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = a;
            }
        }
        best
    }

    pub fn sup_distance(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn check_range(&self, v_max: f64) -> Result<()> {
        let slack = RANGE_SLACK * v_max.max(1.0);
        match self.values.iter().find(|&&v| !(v >= -slack && v <= v_max + slack)) {
            Some(&value) => Err(Error::OutOfRange { value, v_max }),
            None => Ok(()),
        }
    }
}

/// Joint stochastic policy `probs[s * |A| + a]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointPolicy {
    pub states: usize,
    pub actions: usize,
    pub probs: Vec<f64>,
}

impl JointPolicy {
    pub fn uniform(game: &TabularGame) -> Self {
        let (ns, na) = (game.num_states(), game.num_actions());
        Self {
            states: ns,
            actions: na,
            probs: vec![1.0 / na as f64; ns * na],
        }
    }

    pub fn deterministic(game: &TabularGame, choice: &[usize]) -> Result<Self> {
        let (ns, na) = (game.num_states(), game.num_actions());
        if choice.len() != ns || choice.iter().any(|&a| a >= na) {
            return Err(Error::arg("deterministic policy needs one valid action per state"));
        }
        let mut probs = vec![0.0; ns * na];
        for (s, &a) in choice.iter().enumerate() {
            probs[s * na + a] = 1.0;
        }
        Ok(Self {
            states: ns,
            actions: na,
            probs,
        })
    }

    pub fn greedy(q: &QTable) -> Self {
        let mut probs = vec![0.0; q.states * q.actions];
        for s in 0..q.states {
            probs[s * q.actions + q.greedy_at(s)] = 1.0;
        }
        Self {
            states: q.states,
            actions: q.actions,
            probs,
        }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.actions + a]
    }

    fn check(&self, game: &TabularGame) -> Result<()> {
        if self.states != game.num_states() || self.actions != game.num_actions() {
            return Err(Error::arg("policy shape does not match the game"));
        }
        for s in 0..self.states {
            let row = &self.probs[s * self.actions..(s + 1) * self.actions];
            if row.iter().any(|&p| !(p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::arg(format!("policy row {s} is not a distribution")));
            }
        }
        Ok(())
    }
}

/// `T f(s,a) = r(s,a) + gamma E_{s'} max_a' f(s',a')`.
///
/// The input must lie in `[0, V_max]`; the output is then clamped to the same
/// range to absorb rounding.
pub fn centralized_bellman(f: &QTable, game: &TabularGame) -> Result<QTable> {
    let (ns, na) = (game.num_states(), game.num_actions());
    if f.support != Support::Joint || f.states != ns || f.actions != na {
        return Err(Error::arg("centralized operator needs a joint-supported table"));
    }
    let v_max = game.v_max();
    f.check_range(v_max)?;
    let next_max: Vec<f64> = (0..ns).map(|s| f.max_at(s)).collect();
    let gamma = game.gamma();
    let mut values = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            let ev: f64 = game
                .next_dist(s, a)
                .iter()
                .zip(&next_max)
                .map(|(p, v)| p * v)
                .sum();
            values.push((game.total_reward(s, a) + gamma * ev).clamp(0.0, v_max));
        }
    }
    Ok(QTable {
        support: Support::Joint,
        states: ns,
        actions: na,
        values,
    })
}

/// `T^i f_i(u,a_i) = rbar_i(u,a_i) + gamma E_{u' ~ P^i} max_a' f_i(u',a')`.
pub fn local_bellman(f: &QTable, model: &LocalModel, gamma: f64) -> Result<QTable> {
    let (nu, na) = (model.local_states(), model.actions());
    let expected = Support::Local {
        owner: model.owner,
        members: model.members.clone(),
    };
    if f.support != expected || f.states != nu || f.actions != na {
        return Err(Error::arg("local operator needs a table on the model's support"));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::arg(format!("gamma {gamma} outside [0, 1)")));
    }
    let v_max = model.v_max;
    f.check_range(v_max)?;
    let next_max: Vec<f64> = (0..nu).map(|u| f.max_at(u)).collect();
    let mut values = Vec::with_capacity(nu * na);
    for u in 0..nu {
        for a in 0..na {
            let ev: f64 = model
                .next_dist(u, a)
                .iter()
                .zip(&next_max)
                .map(|(p, v)| p * v)
                .sum();
            values.push((model.reward(u, a) + gamma * ev).clamp(0.0, v_max));
        }
    }
    Ok(QTable {
        support: expected,
        states: nu,
        actions: na,
        values,
    })
}

pub const MAX_VALUE_ITERATIONS: usize = 1_000_000;

/// Value iteration from zero until `||Q - Q*||_inf <= tol`.
pub fn exact_q_star(game: &TabularGame, tol: f64) -> Result<QTable> {
    if !(tol > 0.0) {
        return Err(Error::arg("tolerance must be positive"));
    }
    let gamma = game.gamma();
    // ||T Q_k - Q_k|| <= eps implies ||T Q_k - Q*|| <= gamma eps / (1 - gamma).
    let stop = if gamma == 0.0 {
        f64::INFINITY
    } else {
        tol * (1.0 - gamma) / (2.0 * gamma)
    };
    let mut q = QTable::joint_zeros(game);
    for _ in 0..MAX_VALUE_ITERATIONS {
        let next = centralized_bellman(&q, game)?;
        let residual = next.sup_distance(&q);
        q = next;
        if residual <= stop {
            return Ok(q);
        }
    }
    Err(Error::Internal(format!(
        "value iteration did not converge within {MAX_VALUE_ITERATIONS} sweeps"
    )))
}

/// State-to-state kernel under a joint policy.
fn policy_kernel(game: &TabularGame, policy: &JointPolicy) -> DMatrix<f64> {
    let (ns, na) = (game.num_states(), game.num_actions());
    let mut k = DMatrix::zeros(ns, ns);
    for s in 0..ns {
        for a in 0..na {
            let pa = policy.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            for (s2, &p) in game.next_dist(s, a).iter().enumerate() {
                k[(s, s2)] += pa * p;
            }
        }
    }
    k
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occupancy {
    /// `d(s)`.
    pub state: Vec<f64>,
    /// `d(s) pi(a|s)`, flattened as `[s * |A| + a]`.
    pub state_action: Vec<f64>,
}

/// Normalized discounted occupancy `(1-gamma) sum_t gamma^t Pr(s_t = s)`,
/// obtained by solving `(I - gamma K^T) d = (1-gamma) mu`.
pub fn occupancy(game: &TabularGame, policy: &JointPolicy, mu: &[f64]) -> Result<Occupancy> {
    policy.check(game)?;
    let (ns, na) = (game.num_states(), game.num_actions());
    if mu.len() != ns {
        return Err(Error::arg("initial distribution has the wrong length"));
    }
    let gamma = game.gamma();
    let state: Vec<f64> = if gamma == 0.0 {
        mu.to_vec()
    } else {
        let k = policy_kernel(game, policy);
        let lhs = DMatrix::identity(ns, ns) - k.transpose() * gamma;
        let rhs = DVector::from_iterator(ns, mu.iter().map(|m| (1.0 - gamma) * m));
        let d = lhs
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Internal("occupancy system is singular".into()))?;
        d.iter().map(|v| v.max(0.0)).collect()
    };
    let state_action = (0..ns * na).map(|k| state[k / na] * policy.prob(k / na, k % na)).collect();
    Ok(Occupancy { state, state_action })
}

/// Exact `V^pi` by solving `(I - gamma K) v = r_pi`, with rewards summed over agents.
pub fn policy_value(game: &TabularGame, policy: &JointPolicy) -> Result<Vec<f64>> {
    policy.check(game)?;
    let (ns, na) = (game.num_states(), game.num_actions());
    let k = policy_kernel(game, policy);
    let r = DVector::from_iterator(
        ns,
        (0..ns).map(|s| (0..na).map(|a| policy.prob(s, a) * game.total_reward(s, a)).sum::<f64>()),
    );
    let lhs = DMatrix::identity(ns, ns) - k * game.gamma();
    let v = lhs
        .lu()
        .solve(&r)
        .ok_or_else(|| Error::Internal("policy evaluation system is singular".into()))?;
    Ok(v.iter().copied().collect())
}

/// `E_{s ~ mu} V(s)`.
pub fn expected_start_value(game: &TabularGame, v: &[f64]) -> f64 {
    game.mu().iter().zip(v).map(|(m, x)| m * x).sum()
}
