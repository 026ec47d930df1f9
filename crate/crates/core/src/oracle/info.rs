//! Plug-in conditional mutual information on explicit discrete joints.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::bellman::{QTable, Support};
use super::local::DataDistribution;
use super::tabular::{Radix, TabularGame};
use crate::error::{Error, Result};
use crate::game::AgentId;

/// Distribution over `(Y, X_0, ..., X_{m-1})`, `probs[y * |X| + x]` with `x`
/// the mixed-radix index of the factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    pub y_size: usize,
    pub factor_sizes: Vec<usize>,
    pub probs: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(y_size: usize, factor_sizes: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        let x: usize = factor_sizes.iter().product();
        if y_size == 0 || factor_sizes.contains(&0) || probs.len() != y_size * x {
            return Err(Error::arg("joint table does not match the declared sizes"));
        }
        if probs.iter().any(|&p| !(p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::arg("joint must be non-negative and sum to 1"));
        }
        Ok(Self {
            y_size,
            factor_sizes,
            probs,
        })
    }

    fn x_size(&self) -> usize {
        self.factor_sizes.iter().product()
    }
}

/// `I(Y; X_{-members} | X_members)` in nats, clamped at zero.
pub fn cmi(joint: &DiscreteJoint, members: &[usize]) -> Result<f64> {
    let m = joint.factor_sizes.len();
    if members.iter().any(|&k| k >= m) {
        return Err(Error::arg("member index outside the factor list"));
    }
    let inside: Vec<usize> = (0..m).filter(|k| members.contains(k)).collect();
    let outside: Vec<usize> = (0..m).filter(|k| !members.contains(k)).collect();
    let radix = Radix::new(&joint.factor_sizes);
    let (ur, vr) = (radix.sub(&inside), radix.sub(&outside));
    let (nu, nv, ny) = (ur.size(), vr.size(), joint.y_size);
    let nx = joint.x_size();
    let mut p_yuv = vec![0.0; ny * nu * nv];
    for y in 0..ny {
        for x in 0..nx {
            let p = joint.probs[y * nx + x];
            let (u, v) = (radix.project(x, &inside), radix.project(x, &outside));
            p_yuv[(y * nu + u) * nv + v] += p;
        }
    }
    let mut p_u = vec![0.0; nu];
    let mut p_yu = vec![0.0; ny * nu];
    let mut p_uv = vec![0.0; nu * nv];
    for y in 0..ny {
        for u in 0..nu {
            for v in 0..nv {
                let p = p_yuv[(y * nu + u) * nv + v];
                p_u[u] += p;
                p_yu[y * nu + u] += p;
                p_uv[u * nv + v] += p;
            }
        }
    }
    let mut total = 0.0;
    for y in 0..ny {
        for u in 0..nu {
            for v in 0..nv {
                let p = p_yuv[(y * nu + u) * nv + v];
                if p > 0.0 {
                    total += p * (p * p_u[u] / (p_yu[y * nu + u] * p_uv[u * nv + v])).ln();
                }
            }
        }
    }
    Ok(total.max(0.0))
}

/// Joint of `(Y, s_0, ..., s_{N-1}, a_i)` under `nu`, where `Y` is the value of
/// a joint-supported target. Distinct target values become the symbols of `Y`.
pub fn target_joint(game: &TabularGame, nu: &DataDistribution, owner: AgentId, target: &QTable) -> Result<(DiscreteJoint, Vec<f64>)> {
    if target.support != Support::Joint || target.states != game.num_states() || target.actions != game.num_actions() {
        return Err(Error::arg("target must be a joint-supported table"));
    }
    if owner.0 >= game.agent_count() {
        return Err(Error::arg(format!("owner {owner} outside 0..{}", game.agent_count())));
    }
    let mut symbols: BTreeMap<u64, usize> = BTreeMap::new();
    for &v in &target.values {
        let len = symbols.len();
        symbols.entry(v.to_bits()).or_insert(len);
    }
    let mut y_values = vec![0.0; symbols.len()];
    for (&bits, &k) in &symbols {
        y_values[k] = f64::from_bits(bits);
    }
    let n_act = game.action_sizes()[owner.0];
    let mut factor_sizes = game.state_sizes().to_vec();
    factor_sizes.push(n_act);
    let nx = game.num_states() * n_act;
    let mut probs = vec![0.0; y_values.len() * nx];
    for s in 0..game.num_states() {
        for a in 0..game.num_actions() {
            let y = symbols[&target.get(s, a).to_bits()];
            let ai = game.actions().digit(a, owner.0);
            probs[y * nx + s * n_act + ai] += nu.get(game, s, a);
        }
    }
    Ok((
        DiscreteJoint {
            y_size: y_values.len(),
            factor_sizes,
            probs,
        },
        y_values,
    ))
}

/// `I(Y; s_{-N_i} | s_{N_i}, a_i)` for the given target.
pub fn target_cmi(game: &TabularGame, nu: &DataDistribution, owner: AgentId, members: &[AgentId], target: &QTable) -> Result<f64> {
    let (joint, _) = target_joint(game, nu, owner, target)?;
    let mut idx: Vec<usize> = members.iter().map(|m| m.0).collect();
    idx.push(game.agent_count());
    cmi(&joint, &idx)
}
