//! Local models induced by a sharing graph and the bias terms they carry.
//!
//! Local transitions and rewards are the `nu`-conditional expectations of the
//! joint model given the agent's observed components and its own action.

use serde::{Deserialize, Serialize};

use super::bellman::{occupancy, JointPolicy, QTable, Support};
use super::tabular::{Radix, TabularGame};
use crate::error::{Error, Result};
use crate::game::AgentId;

/// Data distribution `nu` over joint state-action pairs, `probs[s * |A| + a]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataDistribution {
    pub probs: Vec<f64>,
}

impl DataDistribution {
    pub fn new(game: &TabularGame, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != game.num_states() * game.num_actions() {
            return Err(Error::arg("data distribution has the wrong length"));
        }
        if probs.iter().any(|&p| !(p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::arg("data distribution must be non-negative and sum to 1"));
        }
        Ok(Self { probs })
    }

    pub fn uniform(game: &TabularGame) -> Self {
        let n = game.num_states() * game.num_actions();
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    /// `d^pi ∘ pi` started from the game's `mu`.
    pub fn from_policy(game: &TabularGame, policy: &JointPolicy) -> Result<Self> {
        Ok(Self {
            probs: occupancy(game, policy, game.mu())?.state_action,
        })
    }

    pub fn get(&self, game: &TabularGame, s: usize, a: usize) -> f64 {
        self.probs[s * game.num_actions() + a]
    }
}

/// Agent-local transitions `P^i(u'|u,a_i)` and rewards `rbar_i(u,a_i)` over `u = s_{N_i}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalModel {
    pub owner: AgentId,
    pub members: Vec<AgentId>,
    pub member_sizes: Vec<usize>,
    pub action_count: usize,
    /// `[(u * |A_i| + a_i) * |U| + u']`.
    pub transitions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub v_max: f64,
}

impl LocalModel {
    pub fn local_states(&self) -> usize {
        self.member_sizes.iter().product()
    }

    pub fn actions(&self) -> usize {
        self.action_count
    }

    pub fn next_dist(&self, u: usize, a: usize) -> &[f64] {
        let nu = self.local_states();
        let row = u * self.action_count + a;
        &self.transitions[row * nu..(row + 1) * nu]
    }

    pub fn reward(&self, u: usize, a: usize) -> f64 {
        self.rewards[u * self.action_count + a]
    }

    pub fn support(&self) -> Support {
        Support::Local {
            owner: self.owner,
            members: self.members.clone(),
        }
    }

    pub fn zeros(&self) -> QTable {
        QTable::zeros(self.support(), self.local_states(), self.action_count)
    }
}

/// Precomputed joint-to-local index maps for one agent.
pub(crate) struct Projection {
    pub local: Radix,
    /// `u` for every joint state.
    pub state: Vec<usize>,
    /// `a_i` for every joint action.
    pub action: Vec<usize>,
}

impl Projection {
    pub fn new(game: &TabularGame, owner: AgentId, members: &[AgentId]) -> Result<Self> {
        let n = game.agent_count();
        if owner.0 >= n {
            return Err(Error::arg(format!("owner {owner} outside 0..{n}")));
        }
        if members.is_empty() || !members.windows(2).all(|w| w[0] < w[1]) || members.iter().any(|m| m.0 >= n) {
            return Err(Error::arg("members must be sorted, distinct and valid"));
        }
        let idx: Vec<usize> = members.iter().map(|m| m.0).collect();
        Ok(Self {
            local: game.states().sub(&idx),
            state: (0..game.num_states()).map(|s| game.states().project(s, &idx)).collect(),
            action: (0..game.num_actions()).map(|a| game.actions().digit(a, owner.0)).collect(),
        })
    }
}

pub fn induce_local_model(
    game: &TabularGame,
    nu: &DataDistribution,
    owner: AgentId,
    members: &[AgentId],
) -> Result<LocalModel> {
    let proj = Projection::new(game, owner, members)?;
    let (ns, na) = (game.num_states(), game.num_actions());
    let n_local = proj.local.size();
    let n_act = game.action_sizes()[owner.0];
    let mut mass = vec![0.0; n_local * n_act];
    let mut rewards = vec![0.0; n_local * n_act];
    let mut transitions = vec![0.0; n_local * n_act * n_local];
    for s in 0..ns {
        for a in 0..na {
            let w = nu.get(game, s, a);
            if w == 0.0 {
                continue;
            }
            let slot = proj.state[s] * n_act + proj.action[a];
            mass[slot] += w;
            rewards[slot] += w * game.reward(owner.0, s, a);
            let row = &mut transitions[slot * n_local..(slot + 1) * n_local];
            for (s2, &p) in game.next_dist(s, a).iter().enumerate() {
                row[proj.state[s2]] += w * p;
            }
        }
    }
    for (slot, &m) in mass.iter().enumerate() {
        if m <= 0.0 {
            return Err(Error::DegenerateSlice {
                owner: owner.0,
                local_state: slot / n_act,
                action: slot % n_act,
            });
        }
        rewards[slot] /= m;
        transitions[slot * n_local..(slot + 1) * n_local]
            .iter_mut()
            .for_each(|p| *p /= m);
    }
    Ok(LocalModel {
        owner,
        members: members.to_vec(),
        member_sizes: proj.local.sizes().to_vec(),
        action_count: n_act,
        transitions,
        rewards,
        v_max: game.v_max(),
    })
}

/// `(eps_r, eps_P)`: summed over agents, the `nu`-expected absolute reward gap
/// and the `nu`-expected L1 distance between the projected joint transition and
/// the local transition.
pub fn epsilon_terms(game: &TabularGame, models: &[LocalModel], nu: &DataDistribution) -> Result<(f64, f64)> {
    let n = game.agent_count();
    let mut seen = vec![false; n];
    for m in models {
        match seen.get_mut(m.owner.0) {
            Some(flag) if !*flag => *flag = true,
            _ => return Err(Error::arg(format!("unexpected or duplicate local model for agent {}", m.owner))),
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::arg(format!("missing local model for agent {i}")));
    }
    let (ns, na) = (game.num_states(), game.num_actions());
    let (mut eps_r, mut eps_p) = (0.0, 0.0);
    for m in models {
        let proj = Projection::new(game, m.owner, &m.members)?;
        let n_local = proj.local.size();
        let mut projected = vec![0.0; n_local];
        for s in 0..ns {
            for a in 0..na {
                let w = nu.get(game, s, a);
                if w == 0.0 {
                    continue;
                }
                let (u, ai) = (proj.state[s], proj.action[a]);
                eps_r += w * (game.reward(m.owner.0, s, a) - m.reward(u, ai)).abs();
                projected.iter_mut().for_each(|p| *p = 0.0);
                for (s2, &p) in game.next_dist(s, a).iter().enumerate() {
                    projected[proj.state[s2]] += p;
                }
                let l1: f64 = projected
                    .iter()
                    .zip(m.next_dist(u, ai))
                    .map(|(x, y)| (x - y).abs())
                    .sum();
                eps_p += w * l1;
            }
        }
    }
    Ok((eps_r, eps_p))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concentrability {
    /// Max over the supplied policies of `max_{s,a} d^pi(s,a) / nu(s,a)`.
    pub empirical: Option<f64>,
    /// `1 / min_{s,a} nu(s,a)`, valid for every policy.
    pub universal: f64,
}

pub fn concentrability(game: &TabularGame, nu: &DataDistribution, policies: &[JointPolicy]) -> Result<Concentrability> {
    if let Some(k) = nu.probs.iter().position(|&p| p <= 0.0) {
        return Err(Error::UnboundedConcentrability(k));
    }
    let min = nu.probs.iter().copied().fold(f64::INFINITY, f64::min);
    let mut empirical: Option<f64> = None;
    for pi in policies {
        let d = occupancy(game, pi, game.mu())?;
        let ratio = d
            .state_action
            .iter()
            .zip(&nu.probs)
            .map(|(d, v)| d / v)
            .fold(0.0, f64::max);
        empirical = Some(empirical.map_or(ratio, |e| e.max(ratio)));
    }
    Ok(Concentrability {
        empirical,
        universal: 1.0 / min,
    })
}

/// Largest game for which deterministic policies are enumerated.
pub const MAX_ENUMERATED_ENTRIES: usize = 64;
const MAX_ENUMERATED_POLICIES: f64 = 1_048_576.0;

/// All deterministic stationary joint policies. Because every occupancy
/// measure is a mixture of deterministic ones, the maximal density ratio over
/// this list equals the supremum over all policies.
pub fn deterministic_policies(game: &TabularGame) -> Result<Vec<JointPolicy>> {
    let (ns, na) = (game.num_states(), game.num_actions());
    let count = (na as f64).powi(ns as i32);
    if ns * na > MAX_ENUMERATED_ENTRIES || count > MAX_ENUMERATED_POLICIES {
        return Err(Error::TooLarge {
            entries: ns * na,
            cap: MAX_ENUMERATED_ENTRIES,
        });
    }
    let radix = Radix::new(&vec![na; ns]);
    (0..radix.size())
        .map(|k| JointPolicy::deterministic(game, &radix.decode(k)))
        .collect()
}

/// Best achievable `nu`-weighted squared error of a function of
/// `(s_{N_i}, a_i)` (restricted) and of `(s, a_i)` (full) against `target`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InherentError {
    pub restricted: f64,
    pub sigma_sq: f64,
}

/// `E_nu[Var(target | key)]` for a key function over joint `(s, a)`.
fn conditional_variance(
    game: &TabularGame,
    nu: &DataDistribution,
    target: &QTable,
    keys: usize,
    key: impl Fn(usize, usize) -> usize,
    owner: usize,
) -> Result<f64> {
    let (ns, na) = (game.num_states(), game.num_actions());
    let mut mass = vec![0.0; keys];
    let mut sum = vec![0.0; keys];
    for s in 0..ns {
        for a in 0..na {
            let w = nu.get(game, s, a);
            let k = key(s, a);
            mass[k] += w;
            sum[k] += w * target.get(s, a);
        }
    }
    let n_act = game.action_sizes()[owner];
    if let Some(k) = mass.iter().position(|&m| m <= 0.0) {
        return Err(Error::DegenerateSlice {
            owner,
            local_state: k / n_act,
            action: k % n_act,
        });
    }
    let mean: Vec<f64> = sum.iter().zip(&mass).map(|(s, m)| s / m).collect();
    let mut err = 0.0;
    for s in 0..ns {
        for a in 0..na {
            let d = target.get(s, a) - mean[key(s, a)];
            err += nu.get(game, s, a) * d * d;
        }
    }
    Ok(err)
}

pub fn inherent_error(
    game: &TabularGame,
    nu: &DataDistribution,
    owner: AgentId,
    members: &[AgentId],
    target: &QTable,
) -> Result<InherentError> {
    if target.support != Support::Joint || target.states != game.num_states() || target.actions != game.num_actions() {
        return Err(Error::arg("target must be a joint-supported table"));
    }
    let proj = Projection::new(game, owner, members)?;
    let n_act = game.action_sizes()[owner.0];
    let restricted = conditional_variance(
        game,
        nu,
        target,
        proj.local.size() * n_act,
        |s, a| proj.state[s] * n_act + proj.action[a],
        owner.0,
    )?;
    let sigma_sq = conditional_variance(
        game,
        nu,
        target,
        game.num_states() * n_act,
        |s, a| s * n_act + proj.action[a],
        owner.0,
    )?;
    Ok(InherentError { restricted, sigma_sq })
}

/// Agent `owner`'s one-step target under the true dynamics,
/// `r_i(s,a) + gamma E_{s'~P(.|s,a)} max_a' f(s'_{N_i}, a')`, as a joint table.
/// Its `nu`-conditional mean given `(s_{N_i}, a_i)` is the local Bellman image of `f`.
pub fn bellman_target(game: &TabularGame, owner: AgentId, members: &[AgentId], f: &QTable) -> Result<QTable> {
    let proj = Projection::new(game, owner, members)?;
    if f.states != proj.local.size() || f.actions != game.action_sizes()[owner.0] {
        return Err(Error::arg("previous iterate does not match the agent's local support"));
    }
    let (ns, na) = (game.num_states(), game.num_actions());
    let next_max: Vec<f64> = (0..ns).map(|s2| f.max_at(proj.state[s2])).collect();
    let mut values = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            let ev: f64 = game.next_dist(s, a).iter().zip(&next_max).map(|(p, v)| p * v).sum();
            values.push(game.reward(owner.0, s, a) + game.gamma() * ev);
        }
    }
    Ok(QTable {
        support: Support::Joint,
        states: ns,
        actions: na,
        values,
    })
}
