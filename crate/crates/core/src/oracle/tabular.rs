//! Explicitly enumerated factored games.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{
    AgentId, FactoredState, JointAction, LocalCode, MarkovGame, ObservationEncoder, ShareMode, Transition,
};
use crate::regression::FeatureKind;
use crate::rng::SimRng;

/// Cap on `|S|·|A|` for dense tables.
pub const MAX_TABLE_ENTRIES: usize = 100_000;

const ROW_TOLERANCE: f64 = 1e-12;

/// Mixed-radix indexing of factored values; component 0 is most significant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Radix {
    sizes: Vec<usize>,
    strides: Vec<usize>,
    size: usize,
}

impl Radix {
    pub fn new(sizes: &[usize]) -> Self {
        let mut strides = vec![1; sizes.len()];
        for k in (0..sizes.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * sizes[k + 1];
        }
        Self {
            sizes: sizes.to_vec(),
            strides,
            size: sizes.iter().product(),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn encode(&self, digits: &[usize]) -> usize {
        digits.iter().zip(&self.strides).map(|(d, s)| d * s).sum()
    }

    pub fn digit(&self, index: usize, k: usize) -> usize {
        (index / self.strides[k]) % self.sizes[k]
    }

    pub fn decode(&self, index: usize) -> Vec<usize> {
        (0..self.sizes.len()).map(|k| self.digit(index, k)).collect()
    }

    /// Index of the sub-tuple formed by `components` (in the given order).
    pub fn project(&self, index: usize, components: &[usize]) -> usize {
        components
            .iter()
            .fold(0, |acc, &k| acc * self.sizes[k] + self.digit(index, k))
    }

    pub fn sub(&self, components: &[usize]) -> Radix {
        Radix::new(&components.iter().map(|&k| self.sizes[k]).collect::<Vec<_>>())
    }
}

/// Dense factored Markov game. Joint states and joint actions are mixed-radix
/// indices over the per-agent components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GameFile", into = "GameFile")]
pub struct TabularGame {
    state_sizes: Vec<usize>,
    action_sizes: Vec<usize>,
    states: Radix,
    actions: Radix,
    /// `P[(s * |A| + a) * |S| + s']`.
    transitions: Vec<f64>,
    /// Per agent, `r_i[s * |A| + a]`.
    rewards: Vec<Vec<f64>>,
    gamma: f64,
    mu: Vec<f64>,
    reward_max: f64,
}

/// On-disk shape: `{state_sizes, action_sizes, P, rewards, gamma, mu}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GameFile {
    pub state_sizes: Vec<usize>,
    pub action_sizes: Vec<usize>,
    /// `P[s][a][s']`.
    #[serde(rename = "P")]
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `rewards[i][s][a]`.
    pub rewards: Vec<Vec<Vec<f64>>>,
    pub gamma: f64,
    pub mu: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_max: Option<f64>,
}

impl TryFrom<GameFile> for TabularGame {
    type Error = Error;

    fn try_from(f: GameFile) -> Result<Self> {
        let flat_p: Vec<f64> = f.transitions.iter().flatten().flatten().copied().collect();
        let shape_ok = f.transitions.iter().all(|row| row.iter().all(|p| p.len() == f.transitions.len()));
        if !shape_ok {
            return Err(Error::arg("P must be |S| x |A| x |S|"));
        }
        let rewards = f
            .rewards
            .iter()
            .map(|r| r.iter().flatten().copied().collect())
            .collect();
        TabularGame::new(f.state_sizes, f.action_sizes, flat_p, rewards, f.gamma, f.mu, f.reward_max)
    }
}

impl From<TabularGame> for GameFile {
    fn from(g: TabularGame) -> Self {
        let (ns, na) = (g.num_states(), g.num_actions());
        GameFile {
            transitions: (0..ns)
                .map(|s| (0..na).map(|a| g.next_dist(s, a).to_vec()).collect())
                .collect(),
            rewards: g
                .rewards
                .iter()
                .map(|r| r.chunks(na).map(<[f64]>::to_vec).collect())
                .collect(),
            state_sizes: g.state_sizes,
            action_sizes: g.action_sizes,
            gamma: g.gamma,
            mu: g.mu,
            reward_max: Some(g.reward_max),
        }
    }
}

impl TabularGame {
    /// Validates and builds a game from flat tables (`P[s][a][s']`, `r_i[s][a]`).
    /// `reward_max` defaults to `N · max r_i`.
    pub fn new(
        state_sizes: Vec<usize>,
        action_sizes: Vec<usize>,
        transitions: Vec<f64>,
        rewards: Vec<Vec<f64>>,
        gamma: f64,
        mu: Vec<f64>,
        reward_max: Option<f64>,
    ) -> Result<Self> {
        let n = state_sizes.len();
        if n == 0 || action_sizes.len() != n {
            return Err(Error::arg("state_sizes and action_sizes must list every agent"));
        }
        if state_sizes.iter().chain(&action_sizes).any(|&k| k == 0) {
            return Err(Error::arg("component sizes must be positive"));
        }
        let states = Radix::new(&state_sizes);
        let actions = Radix::new(&action_sizes);
        let (ns, na) = (states.size(), actions.size());
        if ns.saturating_mul(na) > MAX_TABLE_ENTRIES {
            return Err(Error::TooLarge {
                entries: ns.saturating_mul(na),
                cap: MAX_TABLE_ENTRIES,
            });
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::arg(format!("gamma {gamma} outside [0, 1)")));
        }
        if transitions.len() != ns * na * ns {
            return Err(Error::arg(format!(
                "P has {} entries, expected {}",
                transitions.len(),
                ns * na * ns
            )));
        }
        for (row, chunk) in transitions.chunks(ns).enumerate() {
            let sum: f64 = chunk.iter().sum();
            if chunk.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::arg(format!(
                    "P row for (s, a) = ({}, {}) is not a distribution (sum {sum})",
                    row / na,
                    row % na
                )));
            }
        }
        if rewards.len() != n || rewards.iter().any(|r| r.len() != ns * na) {
            return Err(Error::arg("rewards must be N x |S| x |A|"));
        }
        if rewards.iter().flatten().any(|&r| !(r >= 0.0 && r.is_finite())) {
            return Err(Error::arg("rewards must be finite and non-negative"));
        }
        if mu.len() != ns || mu.iter().any(|&p| !(p >= 0.0)) || (mu.iter().sum::<f64>() - 1.0).abs() > ROW_TOLERANCE {
            return Err(Error::arg("mu must be a distribution over joint states"));
        }
        let max_r = rewards.iter().flatten().fold(0.0_f64, |m, &r| m.max(r));
        let reward_max = reward_max.unwrap_or(n as f64 * max_r);
        let max_total = (0..ns * na)
            .map(|k| rewards.iter().map(|r| r[k]).sum::<f64>())
            .fold(0.0_f64, f64::max);
        if max_total > reward_max * (1.0 + 1e-12) {
            return Err(Error::arg(format!(
                "summed reward {max_total} exceeds reward_max {reward_max}"
            )));
        }
        Ok(Self {
            state_sizes,
            action_sizes,
            states,
            actions,
            transitions,
            rewards,
            gamma,
            mu,
            reward_max,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Uniformly random game with strictly positive transition rows.
    pub fn random(state_sizes: &[usize], action_sizes: &[usize], gamma: f64, rng: &mut impl Rng) -> Result<Self> {
        let ns: usize = state_sizes.iter().product();
        let na: usize = action_sizes.iter().product();
        let mut transitions = Vec::with_capacity(ns * na * ns);
        for _ in 0..ns * na {
            let row: Vec<f64> = (0..ns).map(|_| rng.gen_range(0.05..1.0)).collect();
            let total: f64 = row.iter().sum();
            transitions.extend(row.iter().map(|p| p / total));
            let start = transitions.len() - ns;
            fix_row_sum(&mut transitions[start..]);
        }
        let rewards = (0..state_sizes.len())
            .map(|_| (0..ns * na).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let mut mu: Vec<f64> = (0..ns).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = mu.iter().sum();
        mu.iter_mut().for_each(|p| *p /= total);
        fix_row_sum(&mut mu);
        Self::new(state_sizes.to_vec(), action_sizes.to_vec(), transitions, rewards, gamma, mu, None)
    }

    pub fn agent_count(&self) -> usize {
        self.state_sizes.len()
    }

    pub fn state_sizes(&self) -> &[usize] {
        &self.state_sizes
    }

    pub fn action_sizes(&self) -> &[usize] {
        &self.action_sizes
    }

    pub fn states(&self) -> &Radix {
        &self.states
    }

    pub fn actions(&self) -> &Radix {
        &self.actions
    }

    pub fn num_states(&self) -> usize {
        self.states.size()
    }

    pub fn num_actions(&self) -> usize {
        self.actions.size()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn reward_max(&self) -> f64 {
        self.reward_max
    }

    pub fn v_max(&self) -> f64 {
        self.reward_max / (1.0 - self.gamma)
    }

    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let ns = self.num_states();
        let row = s * self.num_actions() + a;
        &self.transitions[row * ns..(row + 1) * ns]
    }

    pub fn reward(&self, agent: usize, s: usize, a: usize) -> f64 {
        self.rewards[agent][s * self.num_actions() + a]
    }

    pub fn total_reward(&self, s: usize, a: usize) -> f64 {
        (0..self.agent_count()).map(|i| self.reward(i, s, a)).sum()
    }

    /// Same game with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(
            self.state_sizes.clone(),
            self.action_sizes.clone(),
            self.transitions.clone(),
            self.rewards.clone(),
            gamma,
            self.mu.clone(),
            Some(self.reward_max),
        )
    }
}

/// Rounds the last positive entry so the row sums to one as closely as possible.
pub(crate) fn fix_row_sum(row: &mut [f64]) {
    let total: f64 = row.iter().sum();
    if let Some(last) = row.iter_mut().rev().find(|p| **p > 0.0) {
        *last += 1.0 - total;
    }
}

/// Episode termination used when a tabular game is run as an environment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Termination {
    Never,
    /// Terminate after each step with probability `1 - gamma`, so that the
    /// per-step visitation frequency of long runs equals the discounted occupancy.
    Geometric,
}

#[derive(Clone, Debug)]
pub struct TabularEnv {
    pub game: TabularGame,
    pub termination: Termination,
}

impl TabularEnv {
    pub fn new(game: TabularGame, termination: Termination) -> Self {
        Self { game, termination }
    }
}

fn sample_index(dist: &[f64], rng: &mut SimRng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

impl ObservationEncoder<usize> for TabularEnv {
    fn encode(&self, local: &usize, mode: ShareMode) -> LocalCode {
        match mode {
            ShareMode::Full => vec![*local as i64],
            ShareMode::Compressed => vec![(*local != 0) as i64],
        }
    }
}

impl MarkovGame for TabularEnv {
    type Local = usize;

    fn env_id(&self) -> String {
        format!("tabular:{:?}x{:?}", self.game.state_sizes, self.game.action_sizes)
    }

    fn agent_count(&self) -> usize {
        self.game.agent_count()
    }

    fn action_count(&self, agent: AgentId) -> usize {
        self.game.action_sizes[agent.0]
    }

    fn gamma(&self) -> f64 {
        self.game.gamma
    }

    fn reward_max(&self) -> f64 {
        self.game.reward_max
    }

    fn feature_kind(&self) -> FeatureKind {
        FeatureKind::Raw {
            full_width: 1,
            compressed_width: 1,
        }
    }

    fn reset(&self, rng: &mut SimRng) -> FactoredState<usize> {
        let s = sample_index(&self.game.mu, rng);
        FactoredState::new(self.game.states.decode(s))
    }

    fn step(&self, state: &FactoredState<usize>, action: &JointAction, rng: &mut SimRng) -> Result<Transition<usize>> {
        let n = self.game.agent_count();
        if state.components.len() != n || action.components.len() != n {
            return Err(Error::arg(format!("expected {n} agents")));
        }
        if let Some(i) = (0..n).find(|&i| action.components[i] >= self.game.action_sizes[i]) {
            return Err(Error::arg(format!("action {} illegal for agent {i}", action.components[i])));
        }
        let s = self.game.states.encode(&state.components);
        let a = self.game.actions.encode(&action.components);
        let next = sample_index(self.game.next_dist(s, a), rng);
        let rewards = (0..n).map(|i| self.game.reward(i, s, a)).collect();
        let done = match self.termination {
            Termination::Never => false,
            Termination::Geometric => rng.gen::<f64>() >= self.game.gamma,
        };
        Ok(Transition {
            next: FactoredState::new(self.game.states.decode(next)),
            rewards,
            done,
            applied: action.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn radix_round_trip_and_projection() {
        let r = Radix::new(&[2, 3, 4]);
        assert_eq!(r.size(), 24);
        for idx in 0..24 {
            let d = r.decode(idx);
            assert_eq!(r.encode(&d), idx);
            assert_eq!(r.project(idx, &[0, 2]), d[0] * 4 + d[2]);
        }
        assert_eq!(r.encode(&[1, 0, 0]), 12);
    }

    #[test]
    fn json_round_trip() {
        let g = TabularGame::random(&[2, 2], &[2, 1], 0.9, &mut stream(1, &[])).unwrap();
        let text = serde_json::to_string(&g).unwrap();
        let back: TabularGame = serde_json::from_str(&text).unwrap();
        assert_eq!(back, g);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v.get("P").is_some() && v.get("mu").is_some());
    }

    #[test]
    fn validation_rejects_bad_tables() {
        let ok = || (vec![1usize], vec![1usize], vec![1.0], vec![vec![0.5]], 0.5, vec![1.0]);
        let (s, a, p, r, g, m) = ok();
        assert!(TabularGame::new(s, a, p, r, g, m, None).is_ok());
        let (s, a, _, r, g, m) = ok();
        assert!(TabularGame::new(s, a, vec![0.9], r, g, m, None).is_err());
        let (s, a, p, _, g, m) = ok();
        assert!(TabularGame::new(s, a, p, vec![vec![-1.0]], g, m, None).is_err());
        let (s, a, p, r, _, m) = ok();
        assert!(TabularGame::new(s, a, p, r, 1.0, m, None).is_err());
        let (s, a, p, r, g, _) = ok();
        assert!(TabularGame::new(s, a, p, r, g, vec![0.5], None).is_err());
    }

    #[test]
    fn size_guard() {
        let err = TabularGame::new(vec![400, 400], vec![1, 1], vec![], vec![vec![], vec![]], 0.5, vec![], None);
        assert!(matches!(err, Err(Error::TooLarge { .. })));
    }

    #[test]
    fn env_samples_from_the_table() {
        let g = TabularGame::random(&[3], &[2], 0.5, &mut stream(2, &[])).unwrap();
        let env = TabularEnv::new(g.clone(), Termination::Never);
        let mut rng = stream(3, &[]);
        let s = env.reset(&mut rng);
        let mut counts = [0usize; 3];
        for _ in 0..20_000 {
            let tr = env.step(&s, &JointAction::new(vec![1]), &mut rng).unwrap();
            counts[tr.next.components[0]] += 1;
        }
        let dist = g.next_dist(s.components[0], 1);
        for k in 0..3 {
            let freq = counts[k] as f64 / 20_000.0;
            let sd = (dist[k] * (1.0 - dist[k]) / 20_000.0).sqrt();
            assert!((freq - dist[k]).abs() < 4.0 * sd);
        }
    }
}
