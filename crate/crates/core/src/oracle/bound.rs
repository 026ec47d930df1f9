//! Performance bound for SCAM-FQI and an exact population study on tabular games.

use serde::{Deserialize, Serialize};

use super::bellman::{exact_q_star, expected_start_value, local_bellman, policy_value, JointPolicy, QTable};
use super::info::target_cmi;
use super::local::{
    bellman_target, concentrability, deterministic_policies, epsilon_terms, induce_local_model, inherent_error,
    DataDistribution, LocalModel, Projection,
};
use super::tabular::TabularGame;
use crate::error::{Error, Result};
use crate::game::{AgentId, SharingGraph};

/// An infinite dataset size is written as `null`.
mod unbounded {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub eps_r: f64,
    pub eps_p: f64,
    pub eps_inh: f64,
    pub c: f64,
    pub v_max: f64,
    pub k: usize,
    pub n: usize,
    pub gamma: f64,
    pub delta: f64,
    /// May be infinite, which removes the sample term.
    #[serde(with = "unbounded")]
    pub dataset_size: f64,
    /// Cardinality of the per-agent function class. Tree ensembles have no
    /// finite class, so this is a user-chosen stand-in.
    pub function_class_size: f64,
    #[serde(default)]
    pub cmi_per_agent: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub eps_r: f64,
    #[serde(rename = "eps_P")]
    pub eps_p: f64,
    pub eps_inh: f64,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "V_max")]
    pub v_max: f64,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub gamma: f64,
    pub delta: f64,
    #[serde(with = "unbounded")]
    pub dataset_size: f64,
    pub function_class_size: f64,
    pub cmi_per_agent: Vec<f64>,
    pub bound_value: f64,
}

pub fn theorem_bound(inputs: &BoundInputs) -> Result<BoundReport> {
    let i = inputs;
    let scalars = [i.eps_r, i.eps_p, i.eps_inh, i.c, i.v_max];
    if scalars.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || i.cmi_per_agent.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::arg("bound inputs must be finite and non-negative"));
    }
    if !(0.0..1.0).contains(&i.gamma) {
        return Err(Error::arg(format!("gamma {} outside [0, 1)", i.gamma)));
    }
    if !(i.delta > 0.0 && i.delta < 1.0) {
        return Err(Error::arg(format!("delta {} outside (0, 1)", i.delta)));
    }
    if !(i.dataset_size > 0.0) {
        return Err(Error::arg("dataset size must be positive"));
    }
    if i.k == 0 || i.n == 0 || !(i.function_class_size >= 1.0) {
        return Err(Error::arg("K, N and |F| must be at least 1"));
    }
    let g = i.gamma;
    let sc = i.c.sqrt();
    let bias = 2.0 * g.powi(i.k as i32 - 1) / (1.0 - g) * (g * i.v_max + sc * i.eps_r + sc * g / (1.0 - g) * i.eps_p);
    let sample = if i.dataset_size.is_infinite() {
        0.0
    } else {
        let log = (i.function_class_size * i.k as f64 * i.n as f64 / i.delta).ln();
        (22.0 * i.c * i.v_max * i.v_max * log / i.dataset_size).sqrt()
    };
    let fit = 2.0 * i.n as f64 / ((1.0 - g) * (1.0 - g)) * (sample + (20.0 * i.eps_inh).sqrt());
    Ok(BoundReport {
        eps_r: i.eps_r,
        eps_p: i.eps_p,
        eps_inh: i.eps_inh,
        c: i.c,
        v_max: i.v_max,
        k: i.k,
        n: i.n,
        gamma: g,
        delta: i.delta,
        dataset_size: i.dataset_size,
        function_class_size: i.function_class_size,
        cmi_per_agent: i.cmi_per_agent.clone(),
        bound_value: bias + fit,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyParams {
    pub k: usize,
    pub delta: f64,
    #[serde(with = "unbounded")]
    pub dataset_size: f64,
    pub function_class_size: f64,
}

impl Default for StudyParams {
    fn default() -> Self {
        Self {
            k: 20,
            delta: 0.05,
            dataset_size: f64::INFINITY,
            function_class_size: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentDiagnostic {
    pub agent: AgentId,
    pub members: Vec<AgentId>,
    /// Max over iterations of the restricted regression error.
    pub eps_restricted: f64,
    pub sigma_sq: f64,
    pub cmi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub bound: BoundReport,
    /// `V*_mu - V^{pi_K}_mu` computed exactly.
    pub actual_gap: f64,
    /// True when `C` was maximized over every deterministic policy.
    pub c_exact: bool,
    pub agents: Vec<AgentDiagnostic>,
}

/// Joint policy in which every agent plays its greedy local action.
pub fn decentralized_greedy(game: &TabularGame, graph: &SharingGraph, tables: &[QTable]) -> Result<JointPolicy> {
    let projections = graph
        .neighborhoods()
        .iter()
        .enumerate()
        .map(|(i, m)| Projection::new(game, AgentId(i), m))
        .collect::<Result<Vec<_>>>()?;
    let choice: Vec<usize> = (0..game.num_states())
        .map(|s| {
            let digits: Vec<usize> = projections
                .iter()
                .zip(tables)
                .map(|(p, q)| q.greedy_at(p.state[s]))
                .collect();
            game.actions().encode(&digits)
        })
        .collect();
    JointPolicy::deterministic(game, &choice)
}

/// Runs SCAM-FQI with unlimited data and a tabular class on every agent's local
/// support, then fills in every term of the bound along with the true gap.
pub fn tabular_study(game: &TabularGame, graph: &SharingGraph, nu: &DataDistribution, params: &StudyParams) -> Result<StudyReport> {
    let n = game.agent_count();
    if graph.agent_count() != n {
        return Err(Error::arg("graph and game disagree on agent count"));
    }
    if params.k == 0 {
        return Err(Error::arg("K must be at least 1"));
    }
    let neighborhoods = graph.neighborhoods();
    let models: Vec<LocalModel> = neighborhoods
        .iter()
        .enumerate()
        .map(|(i, m)| induce_local_model(game, nu, AgentId(i), m))
        .collect::<Result<_>>()?;
    let (eps_r, eps_p) = epsilon_terms(game, &models, nu)?;

    let mut agents = Vec::with_capacity(n);
    let mut finals = Vec::with_capacity(n);
    let mut eps_inh: f64 = 0.0;
    for (i, model) in models.iter().enumerate() {
        let members = &neighborhoods[i];
        let mut q = model.zeros();
        let (mut worst, mut sigma, mut info) = (0.0f64, 0.0, 0.0);
        for _ in 0..params.k {
            let target = bellman_target(game, AgentId(i), members, &q)?;
            let e = inherent_error(game, nu, AgentId(i), members, &target)?;
            if e.restricted >= worst {
                worst = e.restricted;
                sigma = e.sigma_sq;
                info = target_cmi(game, nu, AgentId(i), members, &target)?;
            }
            q = local_bellman(&q, model, game.gamma())?;
        }
        eps_inh = eps_inh.max(worst);
        agents.push(AgentDiagnostic {
            agent: AgentId(i),
            members: members.clone(),
            eps_restricted: worst,
            sigma_sq: sigma,
            cmi: info,
        });
        finals.push(q);
    }

    let (c, c_exact) = match deterministic_policies(game) {
        Ok(policies) => (concentrability(game, nu, &policies)?.empirical.unwrap_or(0.0), true),
        Err(Error::TooLarge { .. }) => (concentrability(game, nu, &[])?.universal, false),
        Err(e) => return Err(e),
    };

    let pi_k = decentralized_greedy(game, graph, &finals)?;
    let q_star = exact_q_star(game, 1e-10)?;
    let v_star: Vec<f64> = (0..game.num_states()).map(|s| q_star.max_at(s)).collect();
    let actual_gap = expected_start_value(game, &v_star) - expected_start_value(game, &policy_value(game, &pi_k)?);

    let bound = theorem_bound(&BoundInputs {
        eps_r,
        eps_p,
        eps_inh,
        c,
        v_max: game.v_max(),
        k: params.k,
        n,
        gamma: game.gamma(),
        delta: params.delta,
        dataset_size: params.dataset_size,
        function_class_size: params.function_class_size,
        cmi_per_agent: agents.iter().map(|a| a.cmi).collect(),
    })?;
    Ok(StudyReport {
        bound,
        actual_gap,
        c_exact,
        agents,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn base() -> BoundInputs {
        BoundInputs {
            eps_r: 0.0,
            eps_p: 0.0,
            eps_inh: 0.0,
            c: 1.0,
            v_max: 10.0,
            k: 1,
            n: 1,
            gamma: 0.9,
            delta: 0.5,
            dataset_size: f64::INFINITY,
            function_class_size: 1.0,
            cmi_per_agent: vec![],
        }
    }

    #[test]
    fn plug_in_k_one() {
        let r = theorem_bound(&base()).unwrap();
        assert!((r.bound_value - 2.0 * 0.9 * 10.0 / 0.1).abs() < 1e-9);
    }

    #[test]
    fn bias_only_vanishes_geometrically() {
        let mut i = base();
        i.k = 10;
        let a = theorem_bound(&i).unwrap().bound_value;
        i.k = 20;
        let b = theorem_bound(&i).unwrap().bound_value;
        assert!((b / a - 0.9f64.powi(10)).abs() < 1e-12);
    }

    #[test]
    fn worked_example() {
        let i = BoundInputs {
            eps_r: 0.1,
            eps_p: 0.05,
            eps_inh: 0.01,
            c: 2.0,
            v_max: 10.0,
            k: 5,
            n: 3,
            gamma: 0.9,
            delta: 0.05,
            dataset_size: 1e4,
            function_class_size: 100.0,
            cmi_per_agent: vec![],
        };
        let r2 = 2f64.sqrt();
        let bias = 2.0 * 0.9f64.powi(4) / 0.1 * (9.0 + r2 * 0.1 + r2 * 9.0 * 0.05);
        let sample = (22.0 * 2.0 * 100.0 * (100.0f64 * 15.0 / 0.05).ln() / 1e4).sqrt();
        let expected = bias + 600.0 * (sample + 0.2f64.sqrt());
        let got = theorem_bound(&i).unwrap().bound_value;
        assert!(((got - expected) / expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut i = base();
        i.dataset_size = 0.0;
        assert!(theorem_bound(&i).is_err());
        let mut i = base();
        i.delta = 1.0;
        assert!(theorem_bound(&i).is_err());
        let mut i = base();
        i.eps_r = -1.0;
        assert!(theorem_bound(&i).is_err());
    }

    #[test]
    fn infinite_dataset_round_trips_as_null() {
        let r = theorem_bound(&BoundInputs { dataset_size: f64::INFINITY, ..base() }).unwrap();
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"dataset_size\":null"));
        assert_eq!(serde_json::from_str::<BoundReport>(&text).unwrap(), r);
        let p: StudyParams = serde_json::from_str(r#"{"k": 7}"#).unwrap();
        assert_eq!((p.k, p.dataset_size), (7, f64::INFINITY));
    }

    #[test]
    fn report_json_keys() {
        let v = serde_json::to_value(theorem_bound(&base()).unwrap()).unwrap();
        for k in ["eps_r", "eps_P", "eps_inh", "C", "V_max", "K", "N", "gamma", "delta", "bound_value"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn study_on_single_agent_game_has_no_bias() {
        let g = TabularGame::random(&[3], &[2], 0.7, &mut stream(1, &[])).unwrap();
        let graph = SharingGraph::complete(1).unwrap();
        let nu = DataDistribution::uniform(&g);
        let r = tabular_study(&g, &graph, &nu, &StudyParams { k: 40, ..Default::default() }).unwrap();
        assert!(r.bound.eps_r < 1e-12 && r.bound.eps_p < 1e-12 && r.bound.eps_inh < 1e-12);
        assert!(r.c_exact);
        assert!(r.actual_gap.abs() < 1e-6);
        assert!(r.actual_gap <= r.bound.bound_value);
    }

    #[test]
    fn study_gap_is_below_bound() {
        let g = TabularGame::random(&[2, 2], &[2, 2], 0.6, &mut stream(2, &[])).unwrap();
        let graph = SharingGraph::self_only(2).unwrap();
        let nu = DataDistribution::uniform(&g);
        let r = tabular_study(&g, &graph, &nu, &StudyParams::default()).unwrap();
        assert!(r.actual_gap >= -1e-9);
        assert!(r.actual_gap <= r.bound.bound_value);
        assert_eq!(r.agents.len(), 2);
    }
}
