//! Offline per-agent datasets: collection under a behavior policy and JSON-lines storage.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::game::{observe, AgentId, Episode, JointAction, MarkovGame, Observation, ShareMode, SharingGraph};
use crate::regression::FeatureKind;
use crate::rng::{self, SimRng};

/// Stream coordinate reserved for the environment; agent streams use the agent index.
const ENV_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub obs: Observation,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Observation,
    /// Legal actions of the owner in the next state.
    pub next_legal: Vec<bool>,
    pub done: bool,
    pub episode: usize,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub episode_count: usize,
    pub horizon: usize,
    pub env_id: String,
    pub behavior_policy_id: String,
    pub gamma: f64,
    pub reward_max: f64,
    pub reward_shift: f64,
    pub action_count: usize,
    pub feature_kind: FeatureKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentDataset {
    pub owner: AgentId,
    pub members: Vec<AgentId>,
    pub mode: ShareMode,
    pub meta: DatasetMeta,
    pub records: Vec<TransitionRecord>,
}

impl AgentDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn v_max(&self) -> f64 {
        self.meta.reward_max / (1.0 - self.meta.gamma)
    }
}

pub trait BehaviorPolicy {
    fn id(&self) -> String;

    /// Draws an action for `agent`. `legal` is never all-false.
    fn sample(&self, agent: AgentId, obs: &Observation, legal: &[bool], rng: &mut SimRng) -> Result<usize>;
}

/// Uniform over the legal actions.
#[derive(Clone, Copy, Debug, Default)]
pub struct UniformPolicy;

/// Inverse-CDF draw from a probability vector using a single uniform number.
pub fn sample_from(probs: &[f64], rng: &mut SimRng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

pub fn uniform_legal(legal: &[bool]) -> Result<Vec<f64>> {
    let count = legal.iter().filter(|&&l| l).count();
    if count == 0 {
        return Err(Error::arg("no legal action"));
    }
    let p = 1.0 / count as f64;
    Ok(legal.iter().map(|&l| if l { p } else { 0.0 }).collect())
}

impl BehaviorPolicy for UniformPolicy {
    fn id(&self) -> String {
        "uniform".into()
    }

    fn sample(&self, _agent: AgentId, _obs: &Observation, legal: &[bool], rng: &mut SimRng) -> Result<usize> {
        Ok(sample_from(&uniform_legal(legal)?, rng))
    }
}

/// One rolled-out episode together with every agent's observations.
pub struct Rollout<G: MarkovGame + ?Sized> {
    pub episode: Episode<G::Local>,
    /// `obs[t][i]` for `t = 0..=len`.
    pub obs: Vec<Vec<Observation>>,
    /// `legal[t][i]` for `t = 0..=len`.
    pub legal: Vec<Vec<Vec<bool>>>,
    /// Final rewards `rewards[t][i]`.
    pub rewards: Vec<Vec<f64>>,
    /// Agent actions the environment replaced because they were illegal.
    pub coercions: usize,
}

/// Plays one episode. Randomness comes from `(seed, episode, agent)` streams
/// for the agents and a separate `(seed, episode)` stream for the environment.
pub fn rollout<G, P>(
    env: &G,
    graph: &SharingGraph,
    mode: ShareMode,
    policy: &P,
    horizon: usize,
    seed: u64,
    episode: usize,
) -> Result<Rollout<G>>
where
    G: MarkovGame + ?Sized,
    P: BehaviorPolicy + ?Sized,
{
    let n = env.agent_count();
    if graph.agent_count() != n {
        return Err(Error::arg(format!(
            "graph has {} agents, environment has {n}",
            graph.agent_count()
        )));
    }
    let ctx = |step: usize| move |e: Error| Error::Step {
        episode,
        step,
        source: Box::new(e),
    };
    let mut env_rng = rng::stream(seed, &[episode as u64, ENV_STREAM]);
    let mut agent_rngs: Vec<SimRng> = (0..n).map(|i| rng::stream(seed, &[episode as u64, i as u64])).collect();
    let observe_all = |s: &_| -> Result<Vec<Observation>> {
        (0..n).map(|i| observe(env, s, graph, AgentId(i), mode)).collect()
    };
    let mut state = env.reset(&mut env_rng);
    let mut ep = Episode {
        states: vec![state.clone()],
        actions: Vec::new(),
        rewards: Vec::new(),
        done: false,
    };
    let legal_all = |s: &_| -> Vec<Vec<bool>> { (0..n).map(|i| env.legal_actions(s, AgentId(i))).collect() };
    let mut obs = vec![observe_all(&state).map_err(ctx(0))?];
    let mut legal = vec![legal_all(&state)];
    let mut coercions = 0;
    for t in 0..horizon {
        let (current, mask) = (&obs[t], &legal[t]);
        let mut joint = Vec::with_capacity(n);
        for i in 0..n {
            let a = policy
                .sample(AgentId(i), &current[i], &mask[i], &mut agent_rngs[i])
                .map_err(ctx(t))?;
            joint.push(a);
        }
        let tr = env.step(&state, &JointAction::new(joint.clone()), &mut env_rng).map_err(ctx(t))?;
        coercions += joint.iter().zip(&tr.applied.components).filter(|(a, b)| a != b).count();
        obs.push(observe_all(&tr.next).map_err(ctx(t + 1))?);
        legal.push(legal_all(&tr.next));
        ep.actions.push(tr.applied);
        ep.rewards.push(tr.rewards);
        ep.states.push(tr.next.clone());
        state = tr.next;
        if tr.done {
            ep.done = true;
            break;
        }
    }
    let rewards = env.finalize_rewards(&ep).map_err(ctx(ep.len()))?;
    if rewards.len() != ep.len() || rewards.iter().any(|r| r.len() != n || r.iter().any(|v| !v.is_finite())) {
        return Err(ctx(ep.len())(Error::Internal("finalized rewards do not match the episode".into())));
    }
    Ok(Rollout {
        episode: ep,
        obs,
        legal,
        rewards,
        coercions,
    })
}

/// Collects one dataset per agent. Records are ordered by episode, then step.
pub fn collect<G, P>(
    env: &G,
    graph: &SharingGraph,
    mode: ShareMode,
    policy: &P,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<AgentDataset>>
where
    G: MarkovGame + ?Sized,
    P: BehaviorPolicy + ?Sized,
{
    if episodes == 0 || horizon == 0 {
        return Err(Error::arg("episodes and horizon must be at least 1"));
    }
    let n = env.agent_count();
    let mut datasets = (0..n)
        .map(|i| {
            Ok(AgentDataset {
                owner: AgentId(i),
                members: graph.neighborhood(AgentId(i))?,
                mode,
                meta: DatasetMeta {
                    seed,
                    episode_count: episodes,
                    horizon,
                    env_id: env.env_id(),
                    behavior_policy_id: policy.id(),
                    gamma: env.gamma(),
                    reward_max: env.reward_max(),
                    reward_shift: env.reward_shift(),
                    action_count: env.action_count(AgentId(i)),
                    feature_kind: env.feature_kind(),
                },
                records: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for e in 0..episodes {
        let r = rollout(env, graph, mode, policy, horizon, seed, e)?;
        let len = r.episode.len();
        for t in 0..len {
            for (i, d) in datasets.iter_mut().enumerate() {
                d.records.push(TransitionRecord {
                    obs: r.obs[t][i].clone(),
                    action: r.episode.actions[t].components[i],
                    reward: r.rewards[t][i],
                    next_obs: r.obs[t + 1][i].clone(),
                    next_legal: r.legal[t + 1][i].clone(),
                    done: r.episode.done && t + 1 == len,
                    episode: e,
                    step: t,
                });
            }
        }
    }
    Ok(datasets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub file: String,
    pub sha256: String,
    pub record_count: usize,
    pub owner: AgentId,
    pub members: Vec<AgentId>,
    pub mode: ShareMode,
    pub meta: DatasetMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub env_id: Option<String>,
    pub graph: Option<SharingGraph>,
    pub mode: Option<ShareMode>,
    pub seed: Option<u64>,
    pub episodes: Option<usize>,
    pub horizon: Option<usize>,
    pub datasets: Vec<DatasetHeader>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn encode_records(records: &[TransitionRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

/// Writes `agent_<i>.jsonl` per dataset plus `manifest.json` into `dir`.
pub fn save(datasets: &[AgentDataset], dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut headers = Vec::with_capacity(datasets.len());
    for d in datasets {
        let file = format!("agent_{}.jsonl", d.owner.0);
        let bytes = encode_records(&d.records)?;
        fs::File::create(dir.join(&file))?.write_all(&bytes)?;
        headers.push(DatasetHeader {
            file,
            sha256: hex_digest(&bytes),
            record_count: d.records.len(),
            owner: d.owner,
            members: d.members.clone(),
            mode: d.mode,
            meta: d.meta.clone(),
        });
    }
    let first = datasets.first();
    let graph = if datasets.is_empty() {
        None
    } else {
        let mut hoods = vec![Vec::new(); datasets.len()];
        for d in datasets {
            let slot = hoods
                .get_mut(d.owner.0)
                .ok_or_else(|| Error::arg("dataset owners must be 0..n"))?;
            *slot = d.members.clone();
        }
        Some(SharingGraph::from_neighborhoods(&hoods)?)
    };
    let manifest = Manifest {
        env_id: first.map(|d| d.meta.env_id.clone()),
        graph,
        mode: first.map(|d| d.mode),
        seed: first.map(|d| d.meta.seed),
        episodes: first.map(|d| d.meta.episode_count),
        horizon: first.map(|d| d.meta.horizon),
        datasets: headers,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path,
        line: e.line(),
        message: e.to_string(),
    })
}

fn parse_records(path: &Path, bytes: &[u8]) -> Result<Vec<TransitionRecord>> {
    let mut out = Vec::new();
    for (k, line) in BufReader::new(bytes).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads datasets written by [`save`], verifying each file's digest.
pub fn load(dir: &Path) -> Result<Vec<AgentDataset>> {
    let manifest = load_manifest(dir)?;
    manifest
        .datasets
        .into_iter()
        .map(|h| {
            let path: PathBuf = dir.join(&h.file);
            let bytes = fs::read(&path)?;
            if hex_digest(&bytes) != h.sha256 {
                return Err(Error::Digest(path));
            }
            let records = parse_records(&path, &bytes)?;
            if records.len() != h.record_count {
                return Err(Error::Parse {
                    path,
                    line: records.len(),
                    message: format!("expected {} records", h.record_count),
                });
            }
            Ok(AgentDataset {
                owner: h.owner,
                members: h.members,
                mode: h.mode,
                meta: h.meta,
                records,
            })
        })
        .collect()
}
