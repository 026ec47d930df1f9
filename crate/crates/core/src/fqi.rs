//! Decentralized fitted Q-iteration: each agent regresses its own one-step
//! targets on its own dataset, restricted to the observations its graph allows.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{rollout, sample_from, uniform_legal, AgentDataset, BehaviorPolicy, UniformPolicy};
use crate::error::{Error, Result};
use crate::game::{AgentId, MarkovGame, Observation, ShareMode, SharingGraph};
use crate::regression::{FeatureSchema, FeatureVector, Model, Regressor, RegressorConfig};
use crate::rng::{derive_seed, SimRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum QFunction {
    Constant { value: f64 },
    Fitted { model: Model },
}

/// One agent's action-value estimate over `(s_{N_i}, a_i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QApprox {
    pub schema: FeatureSchema,
    pub function: QFunction,
    pub v_max: f64,
    pub clip: bool,
}

impl QApprox {
    pub fn constant(schema: FeatureSchema, value: f64, v_max: f64, clip: bool) -> Self {
        Self {
            schema,
            function: QFunction::Constant { value },
            v_max,
            clip,
        }
    }

    pub fn owner(&self) -> AgentId {
        self.schema.owner
    }

    pub fn action_count(&self) -> usize {
        self.schema.action_count
    }

    fn clipped(&self, v: f64) -> f64 {
        if self.clip {
            v.clamp(0.0, self.v_max)
        } else {
            v
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.function, QFunction::Constant { .. })
    }

    /// Values of every action at `obs`.
    pub fn values(&self, obs: &Observation) -> Result<Vec<f64>> {
        let na = self.schema.action_count;
        if let QFunction::Constant { value } = self.function {
            self.schema.check(obs)?;
            return Ok(vec![self.clipped(value); na]);
        }
        let mut x = Vec::with_capacity(self.schema.width());
        self.schema.encode_state_into(obs, &mut x)?;
        let base = x.len();
        x.resize(base + na, 0.0);
        let mut out = Vec::with_capacity(na);
        for a in 0..na {
            x[base + a] = 1.0;
            out.push(self.predict_features(&x));
            x[base + a] = 0.0;
        }
        Ok(out)
    }

    fn predict_features(&self, x: &[f64]) -> f64 {
        match &self.function {
            QFunction::Constant { value } => self.clipped(*value),
            QFunction::Fitted { model } => self.clipped(model.predict(x)),
        }
    }

    pub fn value(&self, obs: &Observation, action: usize) -> Result<f64> {
        let x = self.schema.encode(obs, action)?;
        Ok(self.predict_features(&x.0))
    }

    /// Maximal value over the actions allowed by `legal` (all when `None`).
    pub fn max_value(&self, obs: &Observation, legal: Option<&[bool]>) -> Result<f64> {
        let values = self.values(obs)?;
        let a = argmax(&values, legal)?;
        Ok(values[a])
    }

    pub fn greedy(&self, obs: &Observation, legal: Option<&[bool]>) -> Result<usize> {
        argmax(&self.values(obs)?, legal)
    }
}

/// Index of the largest allowed value; ties go to the lowest index.
pub fn argmax(values: &[f64], legal: Option<&[bool]>) -> Result<usize> {
    if let Some(l) = legal {
        if l.len() != values.len() {
            return Err(Error::arg("legal mask length differs from the action count"));
        }
    }
    let mut best: Option<usize> = None;
    for (a, &v) in values.iter().enumerate() {
        if legal.is_some_and(|l| !l[a]) {
            continue;
        }
        if best.is_none_or(|b| v > values[b]) {
            best = Some(a);
        }
    }
    best.ok_or_else(|| Error::arg("no legal action"))
}

/// epsilon-greedy over the legal actions. A constant estimate has no greedy
/// action, so it yields the uniform policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentPolicy {
    pub q: QApprox,
    pub epsilon: f64,
}

impl AgentPolicy {
    pub fn new(q: QApprox, epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::arg(format!("epsilon {epsilon} outside [0, 1]")));
        }
        Ok(Self { q, epsilon })
    }

    pub fn probabilities(&self, obs: &Observation, legal: &[bool]) -> Result<Vec<f64>> {
        let mut p = uniform_legal(legal)?;
        if self.q.is_constant() {
            return Ok(p);
        }
        let g = self.q.greedy(obs, Some(legal))?;
        p.iter_mut().for_each(|x| *x *= self.epsilon);
        p[g] += 1.0 - self.epsilon;
        Ok(p)
    }
}

/// One policy per agent, indexed by owner.
#[derive(Clone, Debug)]
pub struct JointPolicySet {
    pub policies: Vec<AgentPolicy>,
}

impl BehaviorPolicy for JointPolicySet {
    fn id(&self) -> String {
        match self.policies.first() {
            Some(p) => format!("epsilon_greedy:{}", p.epsilon),
            None => "epsilon_greedy".into(),
        }
    }

    fn sample(&self, agent: AgentId, obs: &Observation, legal: &[bool], rng: &mut SimRng) -> Result<usize> {
        let p = self
            .policies
            .get(agent.0)
            .ok_or_else(|| Error::arg(format!("no policy for agent {agent}")))?;
        Ok(sample_from(&p.probabilities(obs, legal)?, rng))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub gamma: f64,
    pub epsilon: f64,
    pub regressor: RegressorConfig,
    pub clip_to_vmax: bool,
    pub terminal_bootstrap_zero: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 10,
            gamma: 0.99,
            epsilon: 0.15,
            regressor: RegressorConfig::default(),
            clip_to_vmax: true,
            terminal_bootstrap_zero: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::arg("K must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::arg(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::arg(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        Ok(())
    }
}

pub fn schema_of(dataset: &AgentDataset) -> FeatureSchema {
    FeatureSchema {
        owner: dataset.owner,
        members: dataset.members.clone(),
        mode: dataset.mode,
        action_count: dataset.meta.action_count,
        kind: dataset.meta.feature_kind.clone(),
    }
}

/// Value of a state in which the reward stream is the shift forever
/// (zero raw reward). Terminal states take this value.
pub fn absorbing_value(dataset: &AgentDataset, gamma: f64) -> f64 {
    dataset.meta.reward_shift / (1.0 - gamma)
}

/// `q^0`: the constant absorbing value, which is zero when rewards are unshifted.
pub fn initial_q(dataset: &AgentDataset, config: &TrainConfig) -> QApprox {
    QApprox::constant(
        schema_of(dataset),
        absorbing_value(dataset, config.gamma),
        dataset.meta.reward_max / (1.0 - config.gamma),
        config.clip_to_vmax,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub x: Vec<FeatureVector>,
    pub y: Vec<f64>,
}

/// `y_t = r_t + gamma max_{a'} q_prev(next_obs_t, a')`, the max taken over the
/// legal next actions. Terminal records bootstrap from the absorbing value
/// instead when `terminal_bootstrap_zero` is set.
pub fn build_targets(dataset: &AgentDataset, q_prev: &QApprox, gamma: f64, terminal_bootstrap_zero: bool) -> Result<Targets> {
    let schema = schema_of(dataset);
    if q_prev.schema != schema {
        return Err(Error::arg(format!(
            "q_prev schema does not match the dataset of agent {}",
            dataset.owner
        )));
    }
    let terminal = absorbing_value(dataset, gamma);
    let mut cache: HashMap<(&Observation, &[bool]), f64> = HashMap::new();
    let mut x = Vec::with_capacity(dataset.records.len());
    let mut y = Vec::with_capacity(dataset.records.len());
    for r in &dataset.records {
        let next = if r.done && terminal_bootstrap_zero {
            terminal
        } else if gamma == 0.0 {
            0.0
        } else {
            let key = (&r.next_obs, r.next_legal.as_slice());
            match cache.get(&key) {
                Some(v) => *v,
                None => {
                    let v = q_prev.max_value(&r.next_obs, Some(&r.next_legal))?;
                    cache.insert(key, v);
                    v
                }
            }
        };
        x.push(schema.encode(&r.obs, r.action)?);
        y.push(r.reward + gamma * next);
    }
    Ok(Targets { x, y })
}

/// Collapses identical `(x, y)` rows into weighted rows in a canonical order.
pub fn dedup_rows(targets: &Targets) -> (Vec<FeatureVector>, Vec<f64>, Vec<f64>) {
    let mut rows: BTreeMap<(Vec<u64>, u64), (usize, f64)> = BTreeMap::new();
    for (k, (x, &y)) in targets.x.iter().zip(&targets.y).enumerate() {
        let key = (x.0.iter().map(|v| (v + 0.0).to_bits()).collect(), (y + 0.0).to_bits());
        rows.entry(key).or_insert((k, 0.0)).1 += 1.0;
    }
    let mut xs = Vec::with_capacity(rows.len());
    let mut ys = Vec::with_capacity(rows.len());
    let mut ws = Vec::with_capacity(rows.len());
    for (_, (k, w)) in rows {
        xs.push(targets.x[k].clone());
        ys.push(targets.y[k]);
        ws.push(w);
    }
    (xs, ys, ws)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    pub train_mse: f64,
    pub rows: usize,
    pub distinct_rows: usize,
}

/// Fits `q^k` for one agent. The regressor seed depends only on the run seed
/// and `k`, so agents with identical data produce identical models.
pub fn fit_iteration(dataset: &AgentDataset, q_prev: &QApprox, config: &TrainConfig, k: usize) -> Result<(QApprox, FitStats)> {
    let ctx = |e: Error| Error::Fit {
        agent: dataset.owner.0,
        iteration: k,
        source: Box::new(e),
    };
    if dataset.records.is_empty() {
        return Err(ctx(Error::arg("empty dataset")));
    }
    let targets = build_targets(dataset, q_prev, config.gamma, config.terminal_bootstrap_zero).map_err(ctx)?;
    let (x, y, w) = dedup_rows(&targets);
    let model = config
        .regressor
        .reseeded(derive_seed(config.seed, &[k as u64]))
        .fit_weighted(&x, &y, &w)
        .map_err(ctx)?;
    let q = QApprox {
        schema: q_prev.schema.clone(),
        function: QFunction::Fitted { model },
        v_max: q_prev.v_max,
        clip: config.clip_to_vmax,
    };
    let sse: f64 = x
        .iter()
        .zip(&y)
        .zip(&w)
        .map(|((xi, yi), wi)| wi * (q.predict_features(&xi.0) - yi).powi(2))
        .sum();
    Ok((
        q,
        FitStats {
            train_mse: sse / targets.y.len() as f64,
            rows: targets.y.len(),
            distinct_rows: y.len(),
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub agent: usize,
    pub train_mse: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// `iterations[k][i]` is `q_i^k` for `k = 0..=K`.
    pub iterations: Vec<Vec<QApprox>>,
    pub log: Vec<LogRow>,
}

impl TrainOutput {
    pub fn policies(&self, k: usize, epsilon: f64) -> Result<JointPolicySet> {
        let qs = self
            .iterations
            .get(k)
            .ok_or_else(|| Error::arg(format!("iteration {k} was not trained")))?;
        Ok(JointPolicySet {
            policies: qs.iter().map(|q| AgentPolicy::new(q.clone(), epsilon)).collect::<Result<_>>()?,
        })
    }
}

/// Runs `K` synchronized iterations. Each agent uses only its own dataset.
pub fn train(datasets: &[AgentDataset], config: &TrainConfig, checkpoints: Option<&Path>) -> Result<TrainOutput> {
    config.validate()?;
    let mut order: Vec<&AgentDataset> = datasets.iter().collect();
    order.sort_by_key(|d| d.owner);
    if order.iter().enumerate().any(|(i, d)| d.owner.0 != i) {
        return Err(Error::arg("expected exactly one dataset per agent 0..n"));
    }
    let mut iterations = vec![order.iter().map(|d| initial_q(d, config)).collect::<Vec<_>>()];
    if let Some(dir) = checkpoints {
        write_checkpoint(dir, 0, &iterations[0])?;
    }
    let mut log = Vec::new();
    for k in 1..=config.k {
        let prev = &iterations[k - 1];
        let mut current = Vec::with_capacity(order.len());
        for (d, q_prev) in order.iter().zip(prev) {
            let start = Instant::now();
            let (q, stats) = fit_iteration(d, q_prev, config, k)?;
            log.push(LogRow {
                iteration: k,
                agent: d.owner.0,
                train_mse: stats.train_mse,
                wall_time: start.elapsed().as_secs_f64(),
            });
            current.push(q);
        }
        if let Some(dir) = checkpoints {
            write_checkpoint(dir, k, &current)?;
        }
        iterations.push(current);
    }
    if let Some(dir) = checkpoints {
        write_log(dir, &log)?;
    }
    Ok(TrainOutput { iterations, log })
}

pub fn write_checkpoint(dir: &Path, k: usize, qs: &[QApprox]) -> Result<()> {
    let sub = dir.join(format!("iter_{k}"));
    fs::create_dir_all(&sub)?;
    for q in qs {
        fs::write(sub.join(format!("agent_{}.json", q.owner().0)), serde_json::to_vec(q)?)?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path, k: usize, agents: usize) -> Result<Vec<QApprox>> {
    (0..agents)
        .map(|i| {
            let path = dir.join(format!("iter_{k}")).join(format!("agent_{i}.json"));
            Ok(serde_json::from_slice(&fs::read(&path)?)?)
        })
        .collect()
}

fn write_log(dir: &Path, log: &[LogRow]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut text = String::from("iteration,agent,train_mse,wall_time\n");
    for r in log {
        text.push_str(&format!("{},{},{},{}\n", r.iteration, r.agent, r.train_mse, r.wall_time));
    }
    fs::write(dir.join("train_log.csv"), text)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episode: usize,
    /// Discounted team return with any reward shift removed.
    pub discounted_return: f64,
    pub undiscounted_return: f64,
    /// Ticks until termination, or the horizon if the episode was cut off.
    pub makespan: usize,
    pub completed: bool,
    pub coercions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_return: f64,
    pub mean_makespan: f64,
    pub completion_rate: f64,
    pub episodes: Vec<EpisodeStats>,
}

/// Rolls out `policy` (or the uniform baseline when `None`) for `episodes`
/// episodes. Episode `e` uses the same random streams for any policy.
pub fn evaluate<G, P>(
    env: &G,
    policy: &P,
    graph: &SharingGraph,
    mode: ShareMode,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<EvalReport>
where
    G: MarkovGame + ?Sized,
    P: BehaviorPolicy + ?Sized,
{
    if episodes == 0 || horizon == 0 {
        return Err(Error::arg("episodes and horizon must be at least 1"));
    }
    let (gamma, shift) = (env.gamma(), env.reward_shift());
    let mut stats = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let r = rollout(env, graph, mode, policy, horizon, seed, e)?;
        let (mut disc, mut total, mut g) = (0.0, 0.0, 1.0);
        for step in &r.rewards {
            let raw: f64 = step.iter().map(|v| v - shift).sum();
            disc += g * raw;
            total += raw;
            g *= gamma;
        }
        stats.push(EpisodeStats {
            episode: e,
            discounted_return: disc,
            undiscounted_return: total,
            makespan: r.episode.len(),
            completed: r.episode.done,
            coercions: r.coercions,
        });
    }
    let n = episodes as f64;
    Ok(EvalReport {
        mean_return: stats.iter().map(|s| s.discounted_return).sum::<f64>() / n,
        mean_makespan: stats.iter().map(|s| s.makespan as f64).sum::<f64>() / n,
        completion_rate: stats.iter().filter(|s| s.completed).count() as f64 / n,
        episodes: stats,
    })
}

/// Evaluates iteration `k` of a training run with the given epsilon.
pub fn evaluate_iteration<G: MarkovGame + ?Sized>(
    env: &G,
    trained: &TrainOutput,
    k: usize,
    epsilon: f64,
    graph: &SharingGraph,
    mode: ShareMode,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<EvalReport> {
    evaluate(env, &trained.policies(k, epsilon)?, graph, mode, episodes, horizon, seed)
}

pub fn evaluate_uniform<G: MarkovGame + ?Sized>(
    env: &G,
    graph: &SharingGraph,
    mode: ShareMode,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<EvalReport> {
    evaluate(env, &UniformPolicy, graph, mode, episodes, horizon, seed)
}
