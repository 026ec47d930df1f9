//! Factored Markov games, information-sharing graphs and observation projection.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Debug;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regression::FeatureKind;
use crate::rng::SimRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub usize);

impl AgentId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl std::fmt::Display for AgentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// How a neighbor's local state is shared with an observing agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShareMode {
    Full,
    Compressed,
}

impl ShareMode {
    pub fn label(self) -> &'static str {
        match self {
            ShareMode::Full => "full",
            ShareMode::Compressed => "compressed",
        }
    }
}

impl std::str::FromStr for ShareMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" | "f" => Ok(ShareMode::Full),
            "compressed" | "c" => Ok(ShareMode::Compressed),
            other => Err(Error::arg(format!("unknown sharing mode `{other}`"))),
        }
    }
}

/// Directed communication graph. An edge `(i, j)` means agent `j` shares its
/// local state with agent `i`. Self-loops are always present.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph")]
pub struct SharingGraph {
    agent_count: usize,
    edges: BTreeSet<(usize, usize)>,
}

#[derive(Deserialize)]
struct RawGraph {
    agent_count: usize,
    edges: Vec<(usize, usize)>,
}

impl TryFrom<RawGraph> for SharingGraph {
    type Error = Error;

    fn try_from(raw: RawGraph) -> Result<Self> {
        SharingGraph::new(raw.agent_count, raw.edges)
    }
}

impl SharingGraph {
    /// Builds a graph from directed edges; self-loops are added for every agent.
    pub fn new(agent_count: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if agent_count == 0 {
            return Err(Error::arg("sharing graph needs at least one agent"));
        }
        let mut set: BTreeSet<(usize, usize)> = (0..agent_count).map(|i| (i, i)).collect();
        for (i, j) in edges {
            if i >= agent_count || j >= agent_count {
                return Err(Error::arg(format!(
                    "edge ({i}, {j}) references an agent outside 0..{agent_count}"
                )));
            }
            set.insert((i, j));
        }
        Ok(Self { agent_count, edges: set })
    }

    pub fn self_only(agent_count: usize) -> Result<Self> {
        Self::new(agent_count, [])
    }

    pub fn complete(agent_count: usize) -> Result<Self> {
        Self::new(
            agent_count,
            (0..agent_count).flat_map(|i| (0..agent_count).map(move |j| (i, j))),
        )
    }

    /// Rebuilds a graph from each agent's neighborhood (`N_i` for agent `i`).
    pub fn from_neighborhoods(neighborhoods: &[Vec<AgentId>]) -> Result<Self> {
        let n = neighborhoods.len();
        Self::new(
            n,
            neighborhoods
                .iter()
                .enumerate()
                .flat_map(|(i, ns)| ns.iter().map(move |j| (i, j.0))),
        )
    }

    pub fn agent_count(&self) -> usize {
        self.agent_count
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    /// Agents whose state agent `i` observes, sorted ascending, always including `i`.
    pub fn neighborhood(&self, i: AgentId) -> Result<Vec<AgentId>> {
        if i.0 >= self.agent_count {
            return Err(Error::arg(format!(
                "agent {i} outside 0..{}",
                self.agent_count
            )));
        }
        Ok(self
            .edges
            .range((i.0, 0)..=(i.0, usize::MAX))
            .map(|&(_, j)| AgentId(j))
            .collect())
    }

    pub fn neighborhoods(&self) -> Vec<Vec<AgentId>> {
        (0..self.agent_count)
            .map(|i| self.neighborhood(AgentId(i)).expect("index in range"))
            .collect()
    }
}

/// Undirected plant adjacency used for hop distances.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adjacency {
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    /// Validates symmetry and connectivity. Neighbor lists are sorted and deduplicated.
    pub fn new(mut neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = neighbors.len();
        if n == 0 {
            return Err(Error::arg("adjacency needs at least one node"));
        }
        for (i, ns) in neighbors.iter_mut().enumerate() {
            ns.sort_unstable();
            ns.dedup();
            ns.retain(|&j| j != i);
            if let Some(&bad) = ns.iter().find(|&&j| j >= n) {
                return Err(Error::arg(format!("link {i}-{bad} references a missing node")));
            }
        }
        for (i, ns) in neighbors.iter().enumerate() {
            for &j in ns {
                if neighbors[j].binary_search(&i).is_err() {
                    return Err(Error::arg(format!("adjacency not symmetric on link {i}-{j}")));
                }
            }
        }
        let adj = Self { neighbors };
        if adj.hops_from(0).iter().any(Option::is_none) {
            return Err(Error::arg("adjacency is not connected"));
        }
        Ok(adj)
    }

    pub fn from_links(node_count: usize, links: &[(usize, usize)]) -> Result<Self> {
        let mut neighbors = vec![Vec::new(); node_count];
        for &(a, b) in links {
            if a >= node_count || b >= node_count {
                return Err(Error::arg(format!("link {a}-{b} references a missing node")));
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        Self::new(neighbors)
    }

    /// Grid with links between all cells at Chebyshev distance 1, row-major ids.
    pub fn dense_grid(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::arg("grid dimensions must be positive"));
        }
        let mut neighbors = vec![Vec::new(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                        if rr >= 0 && cc >= 0 && (rr as usize) < rows && (cc as usize) < cols {
                            neighbors[r * cols + c].push(rr as usize * cols + cc as usize);
                        }
                    }
                }
            }
        }
        Self::new(neighbors)
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// BFS hop counts from `source`; `None` for unreachable nodes.
    pub fn hops_from(&self, source: usize) -> Vec<Option<usize>> {
        let mut hops = vec![None; self.neighbors.len()];
        hops[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let next = hops[u].map(|h| h + 1);
            for &v in &self.neighbors[u] {
                if hops[v].is_none() {
                    hops[v] = next;
                    queue.push_back(v);
                }
            }
        }
        hops
    }
}

/// Agents at hop distance strictly less than `d` from `i`, plus `i` itself.
pub fn distance_neighborhood(layout: &Adjacency, i: AgentId, d: usize) -> Result<Vec<AgentId>> {
    if i.0 >= layout.node_count() {
        return Err(Error::arg(format!(
            "agent {i} outside 0..{}",
            layout.node_count()
        )));
    }
    let hops = layout.hops_from(i.0);
    Ok(hops
        .iter()
        .enumerate()
        .filter(|&(j, h)| j == i.0 || matches!(h, Some(h) if *h < d))
        .map(|(j, _)| AgentId(j))
        .collect())
}

/// Sharing graph in which each agent observes everyone closer than `d` hops.
pub fn distance_graph(layout: &Adjacency, d: usize) -> Result<SharingGraph> {
    let neighborhoods = (0..layout.node_count())
        .map(|i| distance_neighborhood(layout, AgentId(i), d))
        .collect::<Result<Vec<_>>>()?;
    SharingGraph::from_neighborhoods(&neighborhoods)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactoredState<L> {
    pub components: Vec<L>,
}

impl<L> FactoredState<L> {
    pub fn new(components: Vec<L>) -> Self {
        Self { components }
    }

    pub fn agent_count(&self) -> usize {
        self.components.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JointAction {
    pub components: Vec<usize>,
}

impl JointAction {
    pub fn new(components: Vec<usize>) -> Self {
        Self { components }
    }
}

/// Encoded local state. Opaque to everything but the environment's feature schema.
pub type LocalCode = Vec<i64>;

/// Agent `owner`'s view of the state: the encoded local states of `members` (= N_i).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub owner: AgentId,
    pub members: Vec<AgentId>,
    pub values: Vec<LocalCode>,
    pub mode: ShareMode,
}

impl Observation {
    pub fn value_of(&self, agent: AgentId) -> Option<&LocalCode> {
        self.members
            .binary_search(&agent)
            .ok()
            .map(|k| &self.values[k])
    }

    /// Restricts the observation to a subset of its members.
    pub fn restrict(&self, members: &[AgentId]) -> Result<Observation> {
        let values = members
            .iter()
            .map(|m| {
                self.value_of(*m)
                    .cloned()
                    .ok_or_else(|| Error::arg(format!("agent {m} is not observed by {}", self.owner)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Observation {
            owner: self.owner,
            members: members.to_vec(),
            values,
            mode: self.mode,
        })
    }
}

pub trait ObservationEncoder<L> {
    /// `Full` must be injective on the local state space; `Compressed` may be lossy.
    fn encode(&self, local: &L, mode: ShareMode) -> LocalCode;
}

/// Projects a joint state onto `members`. The owner is always encoded in full.
pub fn project<L, E>(
    state: &FactoredState<L>,
    owner: AgentId,
    members: &[AgentId],
    encoder: &E,
    mode: ShareMode,
) -> Result<Observation>
where
    E: ObservationEncoder<L> + ?Sized,
{
    if members.is_empty() {
        return Err(Error::arg("projection needs at least one member"));
    }
    if !members.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::arg("projection members must be sorted and distinct"));
    }
    if members.binary_search(&owner).is_err() {
        return Err(Error::arg(format!("owner {owner} missing from its own members")));
    }
    let values = members
        .iter()
        .map(|m| {
            let local = state.components.get(m.0).ok_or_else(|| {
                Error::arg(format!(
                    "member {m} outside 0..{}",
                    state.components.len()
                ))
            })?;
            let m_mode = if *m == owner { ShareMode::Full } else { mode };
            Ok(encoder.encode(local, m_mode))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Observation {
        owner,
        members: members.to_vec(),
        values,
        mode,
    })
}

/// Result of one environment step.
#[derive(Clone, Debug)]
pub struct Transition<L> {
    pub next: FactoredState<L>,
    /// Instantaneous per-agent rewards (before any retroactive finalization).
    pub rewards: Vec<f64>,
    pub done: bool,
    /// Joint action actually executed after legality coercion.
    pub applied: JointAction,
}

/// A complete buffered episode: `states.len() == actions.len() + 1`.
#[derive(Clone, Debug)]
pub struct Episode<L> {
    pub states: Vec<FactoredState<L>>,
    pub actions: Vec<JointAction>,
    pub rewards: Vec<Vec<f64>>,
    pub done: bool,
}

impl<L> Episode<L> {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Factored N-agent game `{N, S, A, P, r, gamma, mu}`.
///
/// Per-agent rewards lie in `[0, reward_max / agent_count]`. Stepping takes the
/// random stream explicitly, so independent instances (or a shared immutable
/// one) can run episodes concurrently.
pub trait MarkovGame: ObservationEncoder<Self::Local> {
    type Local: Clone + Eq + Hash + Debug;

    fn env_id(&self) -> String;
    fn agent_count(&self) -> usize;
    fn action_count(&self, agent: AgentId) -> usize;
    fn gamma(&self) -> f64;
    fn reward_max(&self) -> f64;

    /// Constant added to every raw per-agent reward to make it non-negative.
    fn reward_shift(&self) -> f64 {
        0.0
    }

    fn feature_kind(&self) -> FeatureKind;

    fn reset(&self, rng: &mut SimRng) -> FactoredState<Self::Local>;

    fn step(
        &self,
        state: &FactoredState<Self::Local>,
        action: &JointAction,
        rng: &mut SimRng,
    ) -> Result<Transition<Self::Local>>;

    fn legal_actions(&self, _state: &FactoredState<Self::Local>, agent: AgentId) -> Vec<bool> {
        vec![true; self.action_count(agent)]
    }

    /// Final per-step, per-agent rewards for a complete episode. Environments
    /// with instantaneous rewards return them unchanged.
    fn finalize_rewards(&self, episode: &Episode<Self::Local>) -> Result<Vec<Vec<f64>>> {
        Ok(episode.rewards.clone())
    }

    fn v_max(&self) -> f64 {
        self.reward_max() / (1.0 - self.gamma())
    }
}

pub fn observe<G: MarkovGame + ?Sized>(
    game: &G,
    state: &FactoredState<G::Local>,
    graph: &SharingGraph,
    owner: AgentId,
    mode: ShareMode,
) -> Result<Observation> {
    let members = graph.neighborhood(owner)?;
    project(state, owner, &members, game, mode)
}
