//! Multi-agent production scheduling on a densely connected plant.
//!
//! Agents sit on a grid and route products between each other. Every product
//! carries an ordered list of operations, the last of which removes it from the
//! plant at an exit agent. Time advances in integer ticks:
//!
//! * an agent only acts on the head of its buffer, and only while idle;
//! * `PROCESS` starts the head product's next operation, which is consumed
//!   `duration` ticks later (a removal deletes the product at that point);
//! * `SEND(k)` moves the head product to the tail of the `k`-th neighbor's
//!   buffer, arriving on the next tick.
//!
//! Rewards are retroactive: an agent that acts on product `p` at tick `t` is
//! charged the ticks until it next sees `p` (in its buffer and not under its own
//! processing), or until `p` was committed to removal, or until the episode
//! ended. Raw rewards are non-positive; they are shifted by the horizon so that
//! stored rewards are non-negative.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{
    Adjacency, AgentId, Episode, FactoredState, JointAction, LocalCode, MarkovGame, ObservationEncoder,
    ShareMode, Transition,
};
use crate::regression::FeatureKind;
use crate::rng::SimRng;

pub const NOOP: usize = 0;
pub const PROCESS: usize = 1;
/// Action id of `SEND(k)` is `SEND_BASE + k`.
pub const SEND_BASE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchedAction {
    Noop,
    Process,
    Send(usize),
}

impl SchedAction {
    pub fn id(self) -> usize {
        match self {
            SchedAction::Noop => NOOP,
            SchedAction::Process => PROCESS,
            SchedAction::Send(k) => SEND_BASE + k,
        }
    }

    pub fn from_id(id: usize) -> Self {
        match id {
            NOOP => SchedAction::Noop,
            PROCESS => SchedAction::Process,
            k => SchedAction::Send(k - SEND_BASE),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub rows: usize,
    pub cols: usize,
    /// Explicit undirected links overriding the 8-neighborhood grid.
    #[serde(default)]
    pub links: Option<Vec<(usize, usize)>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationSpec {
    pub id: u32,
    pub duration: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductSpec {
    /// Productive operation ids; the removal is appended automatically.
    pub ops: Vec<u32>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReseenBy {
    #[default]
    #[serde(rename = "self")]
    SelfAgent,
    Any,
}

fn default_remove_duration() -> u32 {
    1
}

fn default_horizon() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub layout: LayoutSpec,
    pub operations: Vec<OperationSpec>,
    #[serde(default = "default_remove_duration")]
    pub remove_duration: u32,
    /// Agent id → productive operation ids it can perform.
    pub capabilities: BTreeMap<usize, Vec<u32>>,
    pub products: Vec<ProductSpec>,
    pub entries: Vec<usize>,
    /// Agents able to perform the removal.
    pub exits: Vec<usize>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub busy_means_processing_only: bool,
    #[serde(default)]
    pub reward_reseen_by: ReseenBy,
    /// Whether an idle agent holding a product may wait instead of processing
    /// or sending it. Off by default: actions are routing choices.
    #[serde(default)]
    pub idle_may_wait: bool,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn agent_count(&self) -> usize {
        self.layout.rows * self.layout.cols
    }

    pub fn adjacency(&self) -> Result<Adjacency> {
        match &self.layout.links {
            Some(links) => Adjacency::from_links(self.agent_count(), links),
            None => Adjacency::dense_grid(self.layout.rows, self.layout.cols),
        }
    }

    fn op_index(&self, id: u32) -> Result<usize> {
        self.operations
            .iter()
            .position(|o| o.id == id)
            .ok_or_else(|| Error::Config(format!("unknown operation id {id}")))
    }

    /// Sum of operation durations of the longest product, ignoring routing and contention.
    pub fn makespan_lower_bound(&self) -> Result<usize> {
        let mut best = 0usize;
        for p in &self.products {
            let mut total = self.remove_duration as usize;
            for &op in &p.ops {
                total += self.operations[self.op_index(op)?].duration as usize;
            }
            best = best.max(total);
        }
        Ok(best)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.agent_count();
        if n == 0 {
            return Err(Error::Config("layout has no agents".into()));
        }
        self.adjacency()?;
        if self.products.is_empty() {
            return Err(Error::Config("scenario has no products".into()));
        }
        if self.entries.is_empty() || self.exits.is_empty() {
            return Err(Error::Config("scenario needs entry and exit agents".into()));
        }
        if let Some(&bad) = self.entries.iter().chain(&self.exits).find(|&&a| a >= n) {
            return Err(Error::Config(format!("agent {bad} outside the layout")));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if self.remove_duration == 0 || self.operations.iter().any(|o| o.duration == 0) {
            return Err(Error::Config("operation durations must be at least one tick".into()));
        }
        for (k, o) in self.operations.iter().enumerate() {
            if self.operations[..k].iter().any(|p| p.id == o.id) {
                return Err(Error::Config(format!("duplicate operation id {}", o.id)));
            }
        }
        for (&agent, ops) in &self.capabilities {
            if agent >= n {
                return Err(Error::Config(format!("capabilities for missing agent {agent}")));
            }
            for &op in ops {
                self.op_index(op)?;
            }
        }
        for (k, p) in self.products.iter().enumerate() {
            for &op in &p.ops {
                self.op_index(op)?;
                if !self.capabilities.values().any(|ops| ops.contains(&op)) {
                    return Err(Error::Config(format!(
                        "product {k} requires operation {op}, which no agent can perform"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Product {
    pub id: usize,
    /// Operation indices still to perform; the last one is always the removal.
    pub remaining_ops: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentLocalState {
    pub buffer: Vec<Product>,
    pub busy_remaining: u32,
}

impl AgentLocalState {
    pub fn head(&self) -> Option<&Product> {
        self.buffer.first()
    }

    pub fn is_idle(&self) -> bool {
        self.busy_remaining == 0
    }
}

pub type SchedState = FactoredState<AgentLocalState>;

#[derive(Clone, Debug)]
pub struct SchedEnv {
    scenario: Scenario,
    adjacency: Adjacency,
    gamma: f64,
    /// Duration per operation index; the last entry is the removal.
    durations: Vec<u32>,
    /// Capability mask per agent over operation indices.
    capable: Vec<Vec<bool>>,
    products: Vec<Vec<usize>>,
}

impl SchedEnv {
    pub fn new(scenario: Scenario, gamma: f64) -> Result<Self> {
        scenario.validate()?;
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Config(format!("gamma {gamma} outside [0, 1)")));
        }
        let adjacency = scenario.adjacency()?;
        let n = scenario.agent_count();
        let remove = scenario.operations.len();
        let mut durations: Vec<u32> = scenario.operations.iter().map(|o| o.duration).collect();
        durations.push(scenario.remove_duration);
        let mut capable = vec![vec![false; remove + 1]; n];
        for (&agent, ops) in &scenario.capabilities {
            for &op in ops {
                capable[agent][scenario.op_index(op)?] = true;
            }
        }
        for &exit in &scenario.exits {
            capable[exit][remove] = true;
        }
        let products = scenario
            .products
            .iter()
            .map(|p| {
                let mut ops = p.ops.iter().map(|&op| scenario.op_index(op)).collect::<Result<Vec<_>>>()?;
                ops.push(remove);
                Ok(ops)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            scenario,
            adjacency,
            gamma,
            durations,
            capable,
            products,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn horizon(&self) -> usize {
        self.scenario.horizon
    }

    pub fn remove_op(&self) -> usize {
        self.durations.len() - 1
    }

    pub fn operation_count(&self) -> usize {
        self.durations.len()
    }

    pub fn product_count(&self) -> usize {
        self.products.len()
    }

    /// Products placed round-robin on the entry agents, everyone idle.
    pub fn initial_state(&self) -> SchedState {
        let mut comps = vec![AgentLocalState::default(); self.scenario.agent_count()];
        for (id, ops) in self.products.iter().enumerate() {
            let entry = self.scenario.entries[id % self.scenario.entries.len()];
            comps[entry].buffer.push(Product {
                id,
                remaining_ops: ops.clone(),
            });
        }
        FactoredState::new(comps)
    }

    pub fn is_legal(&self, state: &SchedState, agent: usize, action: usize) -> bool {
        let local = &state.components[agent];
        if action >= SEND_BASE + self.adjacency.neighbors(agent).len() {
            return false;
        }
        match (local.head(), local.is_idle()) {
            (Some(head), true) => match SchedAction::from_id(action) {
                SchedAction::Noop => self.scenario.idle_may_wait,
                SchedAction::Send(_) => true,
                SchedAction::Process => self.capable[agent][head.remaining_ops[0]],
            },
            _ => action == NOOP,
        }
    }

    /// Whether an agent counts as busy for compressed sharing.
    pub fn busy_flag(&self, local: &AgentLocalState) -> bool {
        local.busy_remaining > 0 || (!self.scenario.busy_means_processing_only && !local.buffer.is_empty())
    }

    /// Deterministic transition; illegal actions are coerced to `NOOP`.
    pub fn advance(&self, state: &SchedState, action: &JointAction) -> Result<(SchedState, JointAction)> {
        let n = self.scenario.agent_count();
        if action.components.len() != n || state.components.len() != n {
            return Err(Error::arg(format!("expected {n} agents")));
        }
        let applied: Vec<usize> = (0..n)
            .map(|i| {
                let a = action.components[i];
                if self.is_legal(state, i, a) {
                    a
                } else {
                    NOOP
                }
            })
            .collect();
        let mut next = state.clone();
        let mut moves = Vec::new();
        for (i, &a) in applied.iter().enumerate() {
            match SchedAction::from_id(a) {
                SchedAction::Noop => {}
                SchedAction::Process => {
                    let op = next.components[i].buffer[0].remaining_ops[0];
                    next.components[i].busy_remaining = self.durations[op];
                }
                SchedAction::Send(k) => {
                    let p = next.components[i].buffer.remove(0);
                    moves.push((self.adjacency.neighbors(i)[k], p));
                }
            }
        }
        for (to, p) in moves {
            next.components[to].buffer.push(p);
        }
        let remove = self.remove_op();
        for local in &mut next.components {
            if local.busy_remaining > 0 {
                local.busy_remaining -= 1;
                if local.busy_remaining == 0 {
                    let op = local.buffer[0].remaining_ops.remove(0);
                    if op == remove {
                        local.buffer.remove(0);
                    }
                }
            }
        }
        Ok((next, JointAction::new(applied)))
    }

    pub fn is_done(state: &SchedState) -> bool {
        state.components.iter().all(|c| c.buffer.is_empty())
    }

    /// Raw (non-positive) retroactive rewards, indexed `[step][agent]`.
    pub fn raw_rewards(&self, episode: &Episode<AgentLocalState>) -> Result<Vec<Vec<f64>>> {
        let steps = episode.actions.len();
        if episode.states.len() != steps + 1 || episode.rewards.len() != steps {
            return Err(Error::arg(format!(
                "incomplete episode buffer: {} states, {} actions, {} reward rows",
                episode.states.len(),
                steps,
                episode.rewards.len()
            )));
        }
        let n = self.scenario.agent_count();
        let remove = self.remove_op();
        let any = self.scenario.reward_reseen_by == ReseenBy::Any;

        // Ticks at which product p sits in an agent's buffer without being processed there.
        let mut seen: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (u, s) in episode.states.iter().enumerate().skip(1) {
            for (j, local) in s.components.iter().enumerate() {
                for (k, p) in local.buffer.iter().enumerate() {
                    if k == 0 && local.busy_remaining > 0 {
                        continue;
                    }
                    let key = if any { (usize::MAX, p.id) } else { (j, p.id) };
                    let ticks = seen.entry(key).or_default();
                    if ticks.last() != Some(&u) {
                        ticks.push(u);
                    }
                }
            }
        }
        let mut removal: HashMap<usize, usize> = HashMap::new();
        for (t, (s, a)) in episode.states.iter().zip(&episode.actions).enumerate() {
            for (i, &act) in a.components.iter().enumerate() {
                if act == PROCESS {
                    let head = s.components[i].head().ok_or_else(|| {
                        Error::arg(format!("step {t}: agent {i} processes an empty buffer"))
                    })?;
                    if head.remaining_ops[0] == remove {
                        removal.insert(head.id, t);
                    }
                }
            }
        }

        let mut out = vec![vec![0.0; n]; steps];
        for (t, s) in episode.states[..steps].iter().enumerate() {
            for (i, local) in s.components.iter().enumerate() {
                let Some(head) = local.head() else { continue };
                if !local.is_idle() {
                    continue;
                }
                let key = if any { (usize::MAX, head.id) } else { (i, head.id) };
                let next_seen = seen.get(&key).and_then(|ticks| {
                    let k = ticks.partition_point(|&u| u <= t);
                    ticks.get(k).copied()
                });
                let until = next_seen
                    .or_else(|| removal.get(&head.id).copied().filter(|&r| r >= t))
                    .unwrap_or(steps);
                out[t][i] = -((until - t) as f64);
            }
        }
        Ok(out)
    }
}

impl ObservationEncoder<AgentLocalState> for SchedEnv {
    /// Full: `[busy, len, (id, n_ops, ops...)*]`. Compressed: `[busy_flag]`.
    fn encode(&self, local: &AgentLocalState, mode: ShareMode) -> LocalCode {
        match mode {
            ShareMode::Full => {
                let mut code = vec![local.busy_remaining as i64, local.buffer.len() as i64];
                for p in &local.buffer {
                    code.push(p.id as i64);
                    code.push(p.remaining_ops.len() as i64);
                    code.extend(p.remaining_ops.iter().map(|&o| o as i64));
                }
                code
            }
            ShareMode::Compressed => vec![self.busy_flag(local) as i64],
        }
    }
}

/// Expands a full scheduling code into `[occupancy, head op counts.., busy]`.
pub fn full_code_features(code: &[i64], operation_count: usize, out: &mut Vec<f64>) -> Result<()> {
    let malformed = || Error::arg("malformed scheduling code");
    let (&busy, &len) = (code.first().ok_or_else(malformed)?, code.get(1).ok_or_else(malformed)?);
    out.push(len as f64);
    let start = out.len();
    out.resize(start + operation_count, 0.0);
    if len > 0 {
        let n_ops = *code.get(3).ok_or_else(malformed)? as usize;
        let ops = code.get(4..4 + n_ops).ok_or_else(malformed)?;
        for &op in ops {
            let slot = out.get_mut(start + op as usize).ok_or_else(malformed)?;
            *slot += 1.0;
        }
    }
    out.push(busy as f64);
    Ok(())
}

impl MarkovGame for SchedEnv {
    type Local = AgentLocalState;

    fn env_id(&self) -> String {
        format!("sched:{}", self.scenario.name)
    }

    fn agent_count(&self) -> usize {
        self.scenario.agent_count()
    }

    fn action_count(&self, agent: AgentId) -> usize {
        SEND_BASE + self.adjacency.neighbors(agent.0).len()
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn reward_max(&self) -> f64 {
        (self.agent_count() * self.scenario.horizon) as f64
    }

    fn reward_shift(&self) -> f64 {
        self.scenario.horizon as f64
    }

    fn feature_kind(&self) -> FeatureKind {
        FeatureKind::Scheduling {
            operation_count: self.operation_count(),
        }
    }

    fn reset(&self, _rng: &mut SimRng) -> SchedState {
        self.initial_state()
    }

    fn step(&self, state: &SchedState, action: &JointAction, _rng: &mut SimRng) -> Result<Transition<AgentLocalState>> {
        let (next, applied) = self.advance(state, action)?;
        Ok(Transition {
            done: Self::is_done(&next),
            rewards: vec![0.0; self.agent_count()],
            next,
            applied,
        })
    }

    fn legal_actions(&self, state: &SchedState, agent: AgentId) -> Vec<bool> {
        (0..self.action_count(agent))
            .map(|a| self.is_legal(state, agent.0, a))
            .collect()
    }

    fn finalize_rewards(&self, episode: &Episode<AgentLocalState>) -> Result<Vec<Vec<f64>>> {
        if episode.len() > self.scenario.horizon {
            return Err(Error::arg(format!(
                "episode of {} ticks exceeds the scenario horizon {}",
                episode.len(),
                self.scenario.horizon
            )));
        }
        let shift = self.reward_shift();
        Ok(self
            .raw_rewards(episode)?
            .into_iter()
            .map(|row| row.into_iter().map(|r| r + shift).collect())
            .collect())
    }
}
