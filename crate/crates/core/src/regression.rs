//! Regressors for the per-agent least-squares step and the feature encoding of
//! `(s_{N_i}, a_i)` pairs.
//!
//! Two function classes are provided: an extremely randomized trees ensemble
//! and an exact tabular mean (the empirical conditional mean per distinct input).

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{AgentId, Observation, ShareMode};
use crate::rng;
use crate::sched;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// How an environment's local codes become numeric features.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    /// Codes are fixed-width integer vectors used verbatim.
    Raw {
        full_width: usize,
        compressed_width: usize,
    },
    /// Scheduling codes: full members expand to occupancy, head-product
    /// remaining-operation counts and busy timer; compressed members are a flag.
    Scheduling { operation_count: usize },
}

impl FeatureKind {
    fn member_width(&self, mode: ShareMode) -> usize {
        match (self, mode) {
            (FeatureKind::Raw { full_width, .. }, ShareMode::Full) => *full_width,
            (FeatureKind::Raw { compressed_width, .. }, ShareMode::Compressed) => *compressed_width,
            (FeatureKind::Scheduling { operation_count }, ShareMode::Full) => operation_count + 2,
            (FeatureKind::Scheduling { .. }, ShareMode::Compressed) => 1,
        }
    }
}

/// Fixed layout of one agent's feature vectors: member slots in ascending
/// agent order followed by a one-hot action block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub owner: AgentId,
    pub members: Vec<AgentId>,
    pub mode: ShareMode,
    pub action_count: usize,
    pub kind: FeatureKind,
}

impl FeatureSchema {
    fn member_mode(&self, m: AgentId) -> ShareMode {
        if m == self.owner {
            ShareMode::Full
        } else {
            self.mode
        }
    }

    pub fn width(&self) -> usize {
        self.members
            .iter()
            .map(|&m| self.kind.member_width(self.member_mode(m)))
            .sum::<usize>()
            + self.action_count
    }

    pub fn check(&self, obs: &Observation) -> Result<()> {
        if obs.owner != self.owner || obs.members != self.members || obs.mode != self.mode {
            return Err(Error::arg(format!(
                "observation (owner {}, {} members, {:?}) does not match schema (owner {}, {} members, {:?})",
                obs.owner,
                obs.members.len(),
                obs.mode,
                self.owner,
                self.members.len(),
                self.mode
            )));
        }
        Ok(())
    }

    /// Appends the state part of the features (everything but the action block).
    pub fn encode_state_into(&self, obs: &Observation, out: &mut Vec<f64>) -> Result<()> {
        self.check(obs)?;
        for (&m, code) in obs.members.iter().zip(&obs.values) {
            let mode = self.member_mode(m);
            let width = self.kind.member_width(mode);
            let start = out.len();
            match &self.kind {
                FeatureKind::Raw { .. } => out.extend(code.iter().map(|&v| v as f64)),
                FeatureKind::Scheduling { operation_count } => match mode {
                    ShareMode::Full => sched::full_code_features(code, *operation_count, out)?,
                    ShareMode::Compressed => out.push(code.first().copied().unwrap_or(0) as f64),
                },
            }
            if out.len() - start != width {
                return Err(Error::arg(format!(
                    "member {m} encodes to {} features, schema expects {width}",
                    out.len() - start
                )));
            }
        }
        Ok(())
    }

    pub fn encode(&self, obs: &Observation, action: usize) -> Result<FeatureVector> {
        if action >= self.action_count {
            return Err(Error::arg(format!(
                "action {action} outside 0..{}",
                self.action_count
            )));
        }
        let mut out = Vec::with_capacity(self.width());
        self.encode_state_into(obs, &mut out)?;
        out.extend((0..self.action_count).map(|a| if a == action { 1.0 } else { 0.0 }));
        Ok(FeatureVector(out))
    }
}

pub trait Regressor {
    fn predict(&self, x: &[f64]) -> f64;

    fn predict_many(&self, xs: &[FeatureVector]) -> Vec<f64> {
        xs.iter().map(|x| self.predict(&x.0)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtraTreesParams {
    pub n_trees: usize,
    /// Random cut points drawn per candidate feature at each node.
    pub k_splits_per_feature: usize,
    pub min_samples_split: usize,
    pub max_depth: Option<usize>,
    pub seed: u64,
}

impl Default for ExtraTreesParams {
    fn default() -> Self {
        Self {
            n_trees: 50,
            k_splits_per_feature: 1,
            min_samples_split: 2,
            max_depth: None,
            seed: 0,
        }
    }
}

impl ExtraTreesParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::arg("n_trees must be at least 1"));
        }
        if self.k_splits_per_feature == 0 {
            return Err(Error::arg("k_splits_per_feature must be at least 1"));
        }
        if self.min_samples_split < 2 {
            return Err(Error::arg("min_samples_split must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// A single regression tree; samples with `x[feature] <= threshold` go left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Regressor for Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[feature] <= threshold { left } else { right },
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtraTrees {
    pub params: ExtraTreesParams,
    pub width: usize,
    pub trees: Vec<Tree>,
}

impl Regressor for ExtraTrees {
    fn predict(&self, x: &[f64]) -> f64 {
        let (mut sum, mut lo, mut hi) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
        for t in &self.trees {
            let v = t.predict(x);
            sum += v;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        // Summation rounding must not move an average of equal values.
        if lo == hi {
            lo
        } else {
            (sum / self.trees.len() as f64).clamp(lo, hi)
        }
    }
}

/// Column-major training matrix with per-row weights.
struct Columns<'a> {
    cols: Vec<Vec<f64>>,
    y: &'a [f64],
    w: &'a [f64],
}

fn validate_xy(x: &[FeatureVector], y: &[f64], w: Option<&[f64]>) -> Result<usize> {
    if x.is_empty() {
        return Err(Error::arg("cannot fit a regressor on empty data"));
    }
    if x.len() != y.len() {
        return Err(Error::arg(format!("{} inputs but {} targets", x.len(), y.len())));
    }
    if let Some(w) = w {
        if w.len() != y.len() || w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::arg("weights must be positive, finite and aligned with targets"));
        }
    }
    let width = x[0].len();
    if x.iter().any(|v| v.len() != width) {
        return Err(Error::arg("feature vectors have inconsistent lengths"));
    }
    if x.iter().any(|v| v.0.iter().any(|f| !f.is_finite())) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("features and targets must be finite"));
    }
    Ok(width)
}

/// Fits an extremely randomized trees ensemble on the full sample.
pub fn extra_trees_fit(params: &ExtraTreesParams, x: &[FeatureVector], y: &[f64]) -> Result<ExtraTrees> {
    let w = vec![1.0; y.len()];
    extra_trees_fit_weighted(params, x, y, &w)
}

/// Weighted variant: a row with weight `k` behaves exactly like `k` copies of
/// that row, which lets callers collapse duplicate samples.
pub fn extra_trees_fit_weighted(
    params: &ExtraTreesParams,
    x: &[FeatureVector],
    y: &[f64],
    w: &[f64],
) -> Result<ExtraTrees> {
    params.validate()?;
    let width = validate_xy(x, y, Some(w))?;
    let data = Columns {
        cols: (0..width).map(|f| x.iter().map(|r| r.0[f]).collect()).collect(),
        y,
        w,
    };
    let trees = (0..params.n_trees)
        .map(|t| grow_tree(params, &data, &mut rng::stream(params.seed, &[t as u64])))
        .collect();
    Ok(ExtraTrees {
        params: params.clone(),
        width,
        trees,
    })
}

struct Pending {
    node: usize,
    lo: usize,
    hi: usize,
    depth: usize,
}

fn grow_tree(params: &ExtraTreesParams, data: &Columns<'_>, rng: &mut rng::SimRng) -> Tree {
    let mut index: Vec<usize> = (0..data.y.len()).collect();
    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    let mut stack = vec![Pending {
        node: 0,
        lo: 0,
        hi: index.len(),
        depth: 0,
    }];
    while let Some(Pending { node, lo, hi, depth }) = stack.pop() {
        let rows = &index[lo..hi];
        let (mut w_sum, mut wy_sum) = (0.0, 0.0);
        let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
        for &r in rows {
            w_sum += data.w[r];
            wy_sum += data.w[r] * data.y[r];
            y_min = y_min.min(data.y[r]);
            y_max = y_max.max(data.y[r]);
        }
        let mean = if y_min == y_max { y_min } else { (wy_sum / w_sum).clamp(y_min, y_max) };
        nodes[node] = Node::Leaf { value: mean };

        // Effective sample count is the total weight.
        if w_sum < params.min_samples_split as f64
            || rows.len() < 2
            || y_min == y_max
            || params.max_depth.is_some_and(|d| depth >= d)
        {
            continue;
        }

        let mut best: Option<(f64, usize, f64)> = None;
        for (f, col) in data.cols.iter().enumerate() {
            let (mut lo_v, mut hi_v) = (f64::INFINITY, f64::NEG_INFINITY);
            for &r in rows {
                lo_v = lo_v.min(col[r]);
                hi_v = hi_v.max(col[r]);
            }
            if !(hi_v > lo_v) {
                continue;
            }
            for _ in 0..params.k_splits_per_feature {
                let cut = rng.gen_range(lo_v..hi_v);
                let (mut wl, mut sl) = (0.0, 0.0);
                for &r in rows {
                    if col[r] <= cut {
                        wl += data.w[r];
                        sl += data.w[r] * data.y[r];
                    }
                }
                let (wr, sr) = (w_sum - wl, wy_sum - sl);
                if wl <= 0.0 || wr <= 0.0 {
                    continue;
                }
                // Maximizing this is equivalent to maximizing the weighted variance reduction.
                let score = sl * sl / wl + sr * sr / wr;
                // Candidates inducing the same partition tie up to rounding; keep the first.
                if best.is_none_or(|(s, _, _)| score > s + 1e-12 * s.abs().max(1.0)) {
                    best = Some((score, f, cut));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            continue;
        };

        let col = &data.cols[feature];
        let slice = &mut index[lo..hi];
        let mut split = 0;
        for k in 0..slice.len() {
            if col[slice[k]] <= threshold {
                slice.swap(split, k);
                split += 1;
            }
        }
        let (left, right) = (nodes.len(), nodes.len() + 1);
        nodes.push(Node::Leaf { value: 0.0 });
        nodes.push(Node::Leaf { value: 0.0 });
        nodes[node] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        stack.push(Pending {
            node: right,
            lo: lo + split,
            hi,
            depth: depth + 1,
        });
        stack.push(Pending {
            node: left,
            lo,
            hi: lo + split,
            depth: depth + 1,
        });
    }
    Tree { nodes }
}

fn key_of(x: &[f64]) -> Vec<u64> {
    // Normalize -0.0 so that equal feature values share a key.
    x.iter().map(|v| (v + 0.0).to_bits()).collect()
}

/// Exact empirical conditional mean of the target per distinct feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMean {
    pub default_value: f64,
    table: HashMap<Vec<u64>, f64>,
}

#[derive(Serialize, Deserialize)]
struct TabularDump {
    default_value: f64,
    entries: Vec<(Vec<f64>, f64)>,
}

impl Serialize for TabularMean {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut entries: Vec<(&Vec<u64>, f64)> = self.table.iter().map(|(k, v)| (k, *v)).collect();
        entries.sort_by(|a, b| a.0.cmp(b.0));
        TabularDump {
            default_value: self.default_value,
            entries: entries
                .into_iter()
                .map(|(k, v)| (k.iter().map(|b| f64::from_bits(*b)).collect(), v))
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TabularMean {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let dump = TabularDump::deserialize(d)?;
        Ok(Self {
            default_value: dump.default_value,
            table: dump.entries.into_iter().map(|(k, v)| (key_of(&k), v)).collect(),
        })
    }
}

impl TabularMean {
    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl Regressor for TabularMean {
    fn predict(&self, x: &[f64]) -> f64 {
        self.table.get(&key_of(x)).copied().unwrap_or(self.default_value)
    }
}

pub fn tabular_fit(x: &[FeatureVector], y: &[f64], default_value: f64) -> Result<TabularMean> {
    let w = vec![1.0; y.len()];
    tabular_fit_weighted(x, y, &w, default_value)
}

/// Per-key weighted mean. Contributions are summed in sorted order so the
/// result does not depend on row order.
pub fn tabular_fit_weighted(x: &[FeatureVector], y: &[f64], w: &[f64], default_value: f64) -> Result<TabularMean> {
    validate_xy(x, y, Some(w))?;
    let mut groups: HashMap<Vec<u64>, Vec<(f64, f64)>> = HashMap::new();
    for ((xi, &yi), &wi) in x.iter().zip(y).zip(w) {
        groups.entry(key_of(&xi.0)).or_default().push((yi, wi));
    }
    let table = groups
        .into_iter()
        .map(|(k, mut rows)| {
            rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let (sw, swy) = rows.iter().fold((0.0, 0.0), |(sw, swy), &(yv, wv)| (sw + wv, swy + wv * yv));
            (k, swy / sw)
        })
        .collect();
    Ok(TabularMean { default_value, table })
}

/// Unfitted regressor configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RegressorConfig {
    ExtraTrees(ExtraTreesParams),
    Tabular { default_value: f64 },
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig::ExtraTrees(ExtraTreesParams::default())
    }
}

impl RegressorConfig {
    /// Same configuration with the random seed replaced (no-op for tabular).
    pub fn reseeded(&self, seed: u64) -> Self {
        match self {
            RegressorConfig::ExtraTrees(p) => RegressorConfig::ExtraTrees(ExtraTreesParams { seed, ..p.clone() }),
            other => other.clone(),
        }
    }

    pub fn fit_weighted(&self, x: &[FeatureVector], y: &[f64], w: &[f64]) -> Result<Model> {
        match self {
            RegressorConfig::ExtraTrees(p) => extra_trees_fit_weighted(p, x, y, w).map(Model::ExtraTrees),
            RegressorConfig::Tabular { default_value } => {
                tabular_fit_weighted(x, y, w, *default_value).map(Model::Tabular)
            }
        }
    }

    pub fn fit(&self, x: &[FeatureVector], y: &[f64]) -> Result<Model> {
        self.fit_weighted(x, y, &vec![1.0; y.len()])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Model {
    ExtraTrees(ExtraTrees),
    Tabular(TabularMean),
}

impl Regressor for Model {
    fn predict(&self, x: &[f64]) -> f64 {
        match self {
            Model::ExtraTrees(m) => m.predict(x),
            Model::Tabular(m) => m.predict(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;
    use proptest::prelude::*;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector(v.to_vec())
    }

    fn random_rows(n: usize, width: usize, seed: u64) -> (Vec<FeatureVector>, Vec<f64>) {
        let mut r = stream(seed, &[]);
        let x: Vec<FeatureVector> = (0..n)
            .map(|_| FeatureVector((0..width).map(|_| r.gen_range(-5.0..5.0)).collect()))
            .collect();
        let y = x.iter().map(|v| v.0[0] * 2.0 - v.0[1] + r.gen_range(-1.0..1.0)).collect();
        (x, y)
    }

    #[test]
    fn constant_target_predicts_constant() {
        let (x, _) = random_rows(40, 3, 1);
        let y = vec![4.25; 40];
        let m = extra_trees_fit(&ExtraTreesParams::default(), &x, &y).unwrap();
        let (probe, _) = random_rows(20, 3, 2);
        for p in &probe {
            assert_eq!(m.predict(&p.0), 4.25);
        }
        // 0.1 has no exact binary form, so naive averaging drifts.
        let m = extra_trees_fit(&ExtraTreesParams::default(), &x, &[0.1; 40]).unwrap();
        assert!(probe.iter().all(|p| m.predict(&p.0) == 0.1));
    }

    #[test]
    fn distinct_inputs_are_interpolated() {
        let (x, y) = random_rows(200, 4, 3);
        let m = extra_trees_fit(&ExtraTreesParams::default(), &x, &y).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert!((m.predict(&xi.0) - yi).abs() <= 1e-9);
        }
    }

    #[test]
    fn linear_target_training_error() {
        let mut r = stream(11, &[]);
        let x: Vec<FeatureVector> = (0..100).map(|_| fv(&[r.gen_range(0.0..10.0)])).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v.0[0]).collect();
        let params = ExtraTreesParams {
            n_trees: 200,
            ..Default::default()
        };
        let m = extra_trees_fit(&params, &x, &y).unwrap();
        let mean_y = y.iter().sum::<f64>() / y.len() as f64;
        let std_y = (y.iter().map(|v| (v - mean_y).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
        let mae = x.iter().zip(&y).map(|(xi, yi)| (m.predict(&xi.0) - yi).abs()).sum::<f64>() / y.len() as f64;
        assert!(mae <= 0.1 * std_y, "mae {mae} vs std {std_y}");
    }

    #[test]
    fn constant_features_yield_a_single_leaf() {
        let x = vec![fv(&[1.0, 1.0]); 5];
        let y = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let m = extra_trees_fit(&ExtraTreesParams::default(), &x, &y).unwrap();
        assert!(m.trees.iter().all(|t| t.nodes.len() == 1));
        assert_eq!(m.predict(&[1.0, 1.0]), 3.0);
    }

    #[test]
    fn empty_and_mismatched_data_rejected() {
        let p = ExtraTreesParams::default();
        assert!(extra_trees_fit(&p, &[], &[]).is_err());
        assert!(extra_trees_fit(&p, &[fv(&[1.0])], &[1.0, 2.0]).is_err());
        assert!(tabular_fit(&[], &[], 0.0).is_err());
        let bad = ExtraTreesParams {
            min_samples_split: 1,
            ..Default::default()
        };
        assert!(extra_trees_fit(&bad, &[fv(&[1.0])], &[1.0]).is_err());
    }

    #[test]
    fn ensemble_is_mean_of_trees() {
        let (x, y) = random_rows(80, 3, 5);
        let params = ExtraTreesParams {
            n_trees: 7,
            min_samples_split: 10,
            ..Default::default()
        };
        let m = extra_trees_fit(&params, &x, &y).unwrap();
        let (probe, _) = random_rows(30, 3, 6);
        for p in &probe {
            let mean = m.trees.iter().map(|t| t.predict(&p.0)).sum::<f64>() / 7.0;
            assert_eq!(m.predict(&p.0), mean);
        }
    }

    #[test]
    fn weights_match_duplicated_rows() {
        let (x, y) = random_rows(30, 2, 8);
        let mut xd = Vec::new();
        let mut yd = Vec::new();
        let mut w = Vec::new();
        for (k, (xi, yi)) in x.iter().zip(&y).enumerate() {
            let copies = 1 + k % 3;
            w.push(copies as f64);
            for _ in 0..copies {
                xd.push(xi.clone());
                yd.push(*yi);
            }
        }
        let params = ExtraTreesParams {
            min_samples_split: 5,
            ..Default::default()
        };
        let weighted = extra_trees_fit_weighted(&params, &x, &y, &w).unwrap();
        let expanded = extra_trees_fit(&params, &xd, &yd).unwrap();
        let (probe, _) = random_rows(50, 2, 9);
        for p in &probe {
            assert!((weighted.predict(&p.0) - expanded.predict(&p.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn max_depth_limits_growth() {
        let (x, y) = random_rows(100, 2, 10);
        let params = ExtraTreesParams {
            max_depth: Some(1),
            ..Default::default()
        };
        let m = extra_trees_fit(&params, &x, &y).unwrap();
        assert!(m.trees.iter().all(|t| t.nodes.len() <= 3));
    }

    #[test]
    fn tabular_means() {
        let m = tabular_fit(&[fv(&[1.0, 2.0])], &[5.0], 0.0).unwrap();
        assert_eq!(m.predict(&[1.0, 2.0]), 5.0);
        let m = tabular_fit(&[fv(&[1.0]), fv(&[1.0]), fv(&[2.0])], &[4.0, 6.0, 1.0], 0.0).unwrap();
        assert_eq!(m.predict(&[1.0]), 5.0);
        assert_eq!(m.predict(&[2.0]), 1.0);
        assert_eq!(m.predict(&[3.0]), 0.0);
    }

    #[test]
    fn models_round_trip_through_json() {
        let (x, y) = random_rows(20, 2, 12);
        let cfg = RegressorConfig::ExtraTrees(ExtraTreesParams {
            n_trees: 3,
            ..Default::default()
        });
        let m = cfg.fit(&x, &y).unwrap();
        let back: Model = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        let t = RegressorConfig::Tabular { default_value: 0.0 }.fit(&x, &y).unwrap();
        let back: Model = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        for xi in &x {
            assert_eq!(back.predict(&xi.0), t.predict(&xi.0));
        }
    }

    fn obs(owner: usize, members: &[usize], values: Vec<Vec<i64>>, mode: ShareMode) -> Observation {
        Observation {
            owner: AgentId(owner),
            members: members.iter().copied().map(AgentId).collect(),
            values,
            mode,
        }
    }

    #[test]
    fn raw_schema_encoding() {
        let schema = FeatureSchema {
            owner: AgentId(0),
            members: vec![AgentId(0), AgentId(2)],
            mode: ShareMode::Full,
            action_count: 3,
            kind: FeatureKind::Raw {
                full_width: 1,
                compressed_width: 1,
            },
        };
        let o = obs(0, &[0, 2], vec![vec![4], vec![1]], ShareMode::Full);
        assert_eq!(schema.encode(&o, 2).unwrap().0, vec![4.0, 1.0, 0.0, 0.0, 1.0]);
        assert!(schema.encode(&o, 3).is_err());
        let wrong = obs(0, &[0, 1], vec![vec![4], vec![1]], ShareMode::Full);
        assert!(schema.encode(&wrong, 0).is_err());
    }

    proptest! {
        #[test]
        fn seed_determinism(seed in 0u64..1000) {
            let (x, y) = random_rows(40, 3, seed);
            let params = ExtraTreesParams { n_trees: 5, seed, ..Default::default() };
            let a = extra_trees_fit(&params, &x, &y).unwrap();
            let b = extra_trees_fit(&params, &x, &y).unwrap();
            let (probe, _) = random_rows(10, 3, seed + 1);
            for p in &probe {
                prop_assert_eq!(a.predict(&p.0).to_bits(), b.predict(&p.0).to_bits());
            }
        }

        #[test]
        fn tabular_row_order_invariance(perm_seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let mut r = stream(perm_seed, &[]);
            let rows: Vec<(FeatureVector, f64)> = (0..30)
                .map(|_| (fv(&[r.gen_range(0..4) as f64]), r.gen_range(-3.0..3.0)))
                .collect();
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut r);
            let (xa, ya): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
            let (xb, yb): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
            let a = tabular_fit(&xa, &ya, 0.0).unwrap();
            let b = tabular_fit(&xb, &yb, 0.0).unwrap();
            for k in 0..4 {
                prop_assert_eq!(a.predict(&[k as f64]).to_bits(), b.predict(&[k as f64]).to_bits());
            }
        }
    }
}
