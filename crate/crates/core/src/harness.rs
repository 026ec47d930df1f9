//! Experiment runner: sweeps sharing distance and mode over seeds, trains,
//! evaluates every iteration and aggregates learning curves.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::collect;
use crate::data::UniformPolicy;
use crate::error::{Error, Result};
use crate::fqi::{evaluate_iteration, evaluate_uniform, train, EvalReport, TrainConfig};
use crate::game::{distance_graph, AgentId, MarkovGame, ShareMode, SharingGraph};
use crate::oracle::{tabular_study, DataDistribution, StudyParams, StudyReport, TabularGame};
use crate::regression::{FeatureSchema, RegressorConfig};
use crate::rng::{derive_seed, stream};
use crate::sched::{Scenario, SchedEnv};

pub const RESULTS_FILE: &str = "results.csv";
pub const GREEDY_FILE: &str = "results_greedy.csv";
pub const BASELINE_FILE: &str = "baseline.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const SVG_FILE: &str = "curves.svg";
pub const TRENDS_FILE: &str = "trends.txt";
pub const METADATA_FILE: &str = "metadata.json";
pub const CONFIG_FILE: &str = "config.json";
pub const BOUND_FILE: &str = "boundreport.json";
pub const FAILURE_FILE: &str = "failure.json";

const DESK: &str = include_str!("../scenarios/scenario_desk.json");

/// The built-in 2x3 desk-scale scenario.
pub fn desk_scenario() -> Scenario {
    serde_json::from_str(DESK).expect("embedded scenario parses")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub level: f64,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            level: 0.95,
            resamples: 10_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Scenario JSON; the built-in desk scenario when absent.
    pub scenario: Option<PathBuf>,
    pub d_values: Vec<usize>,
    pub modes: Vec<ShareMode>,
    pub episodes_collect: usize,
    pub episodes_eval: usize,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub gamma: f64,
    pub epsilon: f64,
    pub regressor: RegressorConfig,
    /// Episode length cap; the scenario's horizon when absent.
    pub horizon: Option<usize>,
    /// Also evaluate the greedy policy of every iteration.
    pub evaluate_greedy: bool,
    pub bootstrap: BootstrapConfig,
    /// Tabular game (or oracle spec) for which a bound report is produced.
    pub tabular: Option<PathBuf>,
    pub save_datasets: bool,
    pub save_checkpoints: bool,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: None,
            d_values: vec![1, 2, 3],
            modes: vec![ShareMode::Full, ShareMode::Compressed],
            episodes_collect: 1000,
            episodes_eval: 100,
            k: 10,
            seeds: vec![0, 1, 2, 3, 4],
            gamma: 0.99,
            epsilon: 0.15,
            regressor: RegressorConfig::default(),
            horizon: None,
            evaluate_greedy: true,
            bootstrap: BootstrapConfig::default(),
            tabular: None,
            save_datasets: false,
            save_checkpoints: false,
            out: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    /// Reads TOML or JSON, chosen by extension (JSON first when unknown).
    /// Relative paths inside the file resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let is_toml = path.extension().is_some_and(|e| e == "toml");
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut config: Self = if is_toml {
            toml::from_str(&text).map_err(|e| {
                let line = e.span().map_or(0, |s| text[..s.start].lines().count().max(1));
                parse_err(line, e.message().to_string())
            })?
        } else {
            match serde_json::from_str(&text) {
                Ok(c) => c,
                Err(json) => toml::from_str(&text).map_err(|_| parse_err(json.line(), json.to_string()))?,
            }
        };
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.scenario, &mut config.tabular].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_values.is_empty() || self.modes.is_empty() || self.seeds.is_empty() {
            return bad("d_values, modes and seeds must be non-empty");
        }
        if self.d_values.contains(&0) {
            return bad("sharing distances start at 1");
        }
        if !distinct(&self.d_values) || !distinct(&self.modes) {
            return bad("d_values and modes must not repeat");
        }
        if !distinct(&self.seeds) {
            return bad("seeds must be distinct");
        }
        if self.episodes_collect == 0 || self.episodes_eval == 0 {
            return bad("episode counts must be positive");
        }
        if self.horizon == Some(0) {
            return bad("horizon must be positive");
        }
        if !(self.bootstrap.level > 0.0 && self.bootstrap.level < 1.0) || self.bootstrap.resamples == 0 {
            return bad("bootstrap needs a level in (0, 1) and at least one resample");
        }
        if let RegressorConfig::ExtraTrees(p) = &self.regressor {
            p.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.train_config(0).validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            k: self.k,
            gamma: self.gamma,
            epsilon: self.epsilon,
            regressor: self.regressor.clone(),
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn load_scenario(&self) -> Result<Scenario> {
        let scenario = match &self.scenario {
            Some(p) => Scenario::load(p)?,
            None => desk_scenario(),
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn environment(&self) -> Result<SchedEnv> {
        let mut scenario = self.load_scenario()?;
        if let Some(h) = self.horizon {
            scenario.horizon = h;
        }
        SchedEnv::new(scenario, self.gamma)
    }
}

fn distinct<T: Ord>(xs: &[T]) -> bool {
    xs.iter().collect::<BTreeSet<_>>().len() == xs.len()
}

/// Seed of the collection episodes of a run seed.
pub fn collect_seed(seed: u64) -> u64 {
    derive_seed(seed, &[0])
}

/// Seed of the evaluation episodes. Shared by every policy of a run seed.
pub fn eval_seed(seed: u64) -> u64 {
    derive_seed(seed, &[1])
}

/// One line of `results.csv`: means over the evaluation episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub d: usize,
    pub mode: ShareMode,
    pub seed: u64,
    pub iteration: usize,
    pub makespan: f64,
    #[serde(rename = "return")]
    pub ret: f64,
}

/// One uniform-policy evaluation episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub seed: u64,
    pub episode: usize,
    pub makespan: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub completed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub d: usize,
    pub mode: ShareMode,
    pub iteration: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Per-seed mean makespans in ascending seed order.
    pub samples: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CurveRecord {
    d: usize,
    mode: ShareMode,
    iteration: usize,
    mean: f64,
    ci_low: f64,
    ci_high: f64,
    seeds: usize,
    samples: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthEntry {
    pub d: usize,
    pub mode: ShareMode,
    pub neighborhood_sizes: Vec<usize>,
    /// State feature count per agent (the action block excluded).
    pub widths: Vec<usize>,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub scenario: String,
    pub env_id: String,
    pub agent_count: usize,
    pub horizon: usize,
    pub observation_widths: Vec<WidthEntry>,
}

/// Observation widths of every agent for each `(d, mode)` of the sweep.
pub fn observation_widths<G: MarkovGame>(
    env: &G,
    layout: &crate::game::Adjacency,
    d_values: &[usize],
    modes: &[ShareMode],
) -> Result<Vec<WidthEntry>> {
    let mut out = Vec::new();
    for &d in d_values {
        let graph = distance_graph(layout, d)?;
        for &mode in modes {
            let mut sizes = Vec::new();
            let mut widths = Vec::new();
            for i in 0..env.agent_count() {
                let owner = AgentId(i);
                let schema = FeatureSchema {
                    owner,
                    members: graph.neighborhood(owner)?,
                    mode,
                    action_count: env.action_count(owner),
                    kind: env.feature_kind(),
                };
                sizes.push(schema.members.len());
                widths.push(schema.width() - schema.action_count);
            }
            out.push(WidthEntry {
                d,
                mode,
                total: widths.iter().sum(),
                neighborhood_sizes: sizes,
                widths,
            });
        }
    }
    Ok(out)
}

/// Tabular study input: the game, a sharing graph (self-only when absent),
/// a data distribution (uniform when absent) and study parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub game: TabularGame,
    #[serde(default)]
    pub graph: Option<SharingGraph>,
    #[serde(default)]
    pub nu: Option<Vec<f64>>,
    #[serde(default)]
    pub params: StudyParams,
}

impl OracleSpec {
    /// Accepts a full spec or a bare game.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let spec = serde_json::from_str::<OracleSpec>(&text).or_else(|spec_err| {
            serde_json::from_str::<TabularGame>(&text)
                .map(|game| OracleSpec {
                    game,
                    graph: None,
                    nu: None,
                    params: StudyParams::default(),
                })
                .map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: spec_err.line(),
                    message: spec_err.to_string(),
                })
        })?;
        Ok(spec)
    }

    pub fn study(&self) -> Result<StudyReport> {
        let graph = match &self.graph {
            Some(g) => g.clone(),
            None => SharingGraph::self_only(self.game.agent_count())?,
        };
        let nu = match &self.nu {
            Some(p) => DataDistribution::new(&self.game, p.clone())?,
            None => DataDistribution::uniform(&self.game),
        };
        tabular_study(&self.game, &graph, &nu, &self.params)
    }
}

/// Writes `boundreport.json` and the full study next to it.
pub fn write_study(report: &StudyReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(BOUND_FILE), serde_json::to_string_pretty(&report.bound)?)?;
    fs::write(dir.join("study.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

/// Percentile bootstrap interval of the mean.
pub fn bootstrap_ci(samples: &[f64], level: f64, resamples: usize, seed: u64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::arg("bootstrap needs at least one sample"));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::arg("bootstrap samples must be finite"));
    }
    if !(level > 0.0 && level < 1.0) || resamples == 0 {
        return Err(Error::arg("bootstrap needs a level in (0, 1) and at least one resample"));
    }
    let n = samples.len();
    let mut rng = stream(seed, &[]);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| samples[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok((quantile(&means, alpha), quantile(&means, 1.0 - alpha)))
}

/// Linear interpolation between order statistics of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn mode_index(mode: ShareMode) -> u64 {
    match mode {
        ShareMode::Full => 0,
        ShareMode::Compressed => 1,
    }
}

/// Curve points from raw rows, ordered by `(d, mode, iteration)`.
pub fn aggregate(rows: &[ResultRow], bootstrap: &BootstrapConfig) -> Result<Vec<CurvePoint>> {
    let mut groups: BTreeMap<(usize, ShareMode, usize), BTreeMap<u64, f64>> = BTreeMap::new();
    for r in rows {
        if groups
            .entry((r.d, r.mode, r.iteration))
            .or_default()
            .insert(r.seed, r.makespan)
            .is_some()
        {
            return Err(Error::arg(format!(
                "duplicate row for d={}, mode={}, seed={}, iteration={}",
                r.d,
                r.mode.label(),
                r.seed,
                r.iteration
            )));
        }
    }
    groups
        .into_iter()
        .map(|((d, mode, k), by_seed)| {
            let samples: Vec<f64> = by_seed.into_values().collect();
            let mean = samples.iter().sum::<f64>() / samples.len() as f64;
            let seed = derive_seed(bootstrap.seed, &[d as u64, mode_index(mode), k as u64]);
            let (low, high) = bootstrap_ci(&samples, bootstrap.level, bootstrap.resamples, seed)?;
            Ok(CurvePoint {
                d,
                mode,
                iteration: k,
                mean,
                ci_low: low.min(mean),
                ci_high: high.max(mean),
                samples,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub name: String,
    pub label: String,
    /// `None` when the sweep cannot decide it.
    pub holds: Option<bool>,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub baseline_mean: Option<f64>,
    pub baseline_se: Option<f64>,
    pub trends: Vec<Trend>,
}

impl TrendReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        if let (Some(m), Some(se)) = (self.baseline_mean, self.baseline_se) {
            let _ = writeln!(s, "uniform baseline makespan {m:.3} (standard error {se:.3})");
        }
        for t in &self.trends {
            let verdict = match t.holds {
                Some(true) => "holds",
                Some(false) => "fails",
                None => "n/a",
            };
            let _ = writeln!(s, "[{verdict}] {} {}: {}", t.name, t.label, t.detail);
        }
        s
    }
}

/// Mean and standard error of the baseline episode makespans.
pub fn baseline_summary(rows: &[BaselineRow]) -> Option<(f64, f64)> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r.makespan as f64).sum::<f64>() / n;
    if rows.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = rows.iter().map(|r| (r.makespan as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, (var / n).sqrt()))
}

fn label(d: usize, mode: ShareMode) -> String {
    format!("d={d} {}", mode.label())
}

/// Qualitative checks over the curves. Nothing here is asserted.
pub fn trends(curves: &[CurvePoint], baseline: &[BaselineRow]) -> TrendReport {
    let mut by_label: BTreeMap<(usize, ShareMode), Vec<&CurvePoint>> = BTreeMap::new();
    for c in curves {
        by_label.entry((c.d, c.mode)).or_default().push(c);
    }
    let summary = baseline_summary(baseline);
    let mut out = TrendReport {
        baseline_mean: summary.map(|s| s.0),
        baseline_se: summary.map(|s| s.1),
        trends: Vec::new(),
    };
    let final_mean = |pts: &[&CurvePoint]| pts.last().map(|p| p.mean).unwrap_or(f64::NAN);

    for (&(d, mode), pts) in &by_label {
        let (first, last) = (pts[0].mean, final_mean(pts));
        let drops = pts.windows(2).filter(|w| w[1].mean < w[0].mean).count();
        out.trends.push(Trend {
            name: "makespan decreases over iterations".into(),
            label: label(d, mode),
            holds: Some(last < first),
            detail: format!(
                "k=0 {first:.3} -> k={} {last:.3}; {drops} of {} steps decrease",
                pts.len() - 1,
                pts.len() - 1
            ),
        });
        if let Some((m, se)) = summary {
            out.trends.push(Trend {
                name: "final policy beats uniform by one standard error".into(),
                label: label(d, mode),
                holds: Some(last <= m - se),
                detail: format!("{last:.3} vs {:.3}", m - se),
            });
        }
    }

    let modes: BTreeSet<ShareMode> = by_label.keys().map(|k| k.1).collect();
    for &mode in &modes {
        let finals: BTreeMap<usize, f64> = by_label
            .iter()
            .filter(|(k, _)| k.1 == mode)
            .map(|(k, v)| (k.0, final_mean(v)))
            .collect();
        let max_d = finals.keys().max().copied().unwrap_or(1);
        let inner: Vec<(usize, f64)> = finals.iter().filter(|(&d, _)| d > 1 && d < max_d).map(|(&d, &m)| (d, m)).collect();
        let trend = match (finals.get(&1), inner.is_empty()) {
            (Some(&own), false) => {
                let best = inner.iter().copied().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
                Trend {
                    name: "an intermediate d beats self-only".into(),
                    label: mode.label().into(),
                    holds: Some(best.1 < own),
                    detail: format!("best intermediate d={} {:.3} vs d=1 {own:.3}", best.0, best.1),
                }
            }
            _ => Trend {
                name: "an intermediate d beats self-only".into(),
                label: mode.label().into(),
                holds: None,
                detail: "sweep lacks d=1 or an intermediate distance".into(),
            },
        };
        out.trends.push(trend);
    }

    let ds: BTreeSet<usize> = by_label.keys().map(|k| k.0).collect();
    for d in ds {
        let (Some(full), Some(comp)) = (by_label.get(&(d, ShareMode::Full)), by_label.get(&(d, ShareMode::Compressed)))
        else {
            continue;
        };
        let early = |pts: &[&CurvePoint]| {
            let e: Vec<f64> = pts.iter().filter(|p| (1..=3).contains(&p.iteration)).map(|p| p.mean).collect();
            e.iter().sum::<f64>() / e.len().max(1) as f64
        };
        let (f, c) = (early(full), early(comp));
        out.trends.push(Trend {
            name: "compressed at least as fast early".into(),
            label: format!("d={d}"),
            holds: if full.len() > 1 { Some(c <= f) } else { None },
            detail: format!("mean makespan over k=1..3: compressed {c:.3}, full {f:.3}"),
        });
    }
    out
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn write_curves(path: &Path, curves: &[CurvePoint]) -> Result<()> {
    let records: Vec<CurveRecord> = curves
        .iter()
        .map(|c| CurveRecord {
            d: c.d,
            mode: c.mode,
            iteration: c.iteration,
            mean: c.mean,
            ci_low: c.ci_low,
            ci_high: c.ci_high,
            seeds: c.samples.len(),
            samples: c.samples.iter().map(f64::to_string).collect::<Vec<_>>().join(" "),
        })
        .collect();
    write_rows(path, &records)
}

pub fn read_curves(path: &Path) -> Result<Vec<CurvePoint>> {
    read_rows::<CurveRecord>(path)?
        .into_iter()
        .map(|r| {
            let samples = r
                .samples
                .split_whitespace()
                .map(|s| s.parse::<f64>().map_err(|e| Error::arg(format!("bad sample `{s}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            Ok(CurvePoint {
                d: r.d,
                mode: r.mode,
                iteration: r.iteration,
                mean: r.mean,
                ci_low: r.ci_low,
                ci_high: r.ci_high,
                samples,
            })
        })
        .collect()
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

/// Makespan against iteration, one line and CI band per `(d, mode)`, with the
/// uniform baseline dashed when given.
pub fn render_svg(curves: &[CurvePoint], baseline: Option<f64>) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (70.0, 170.0, 30.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let max_k = curves.iter().map(|c| c.iteration).max().unwrap_or(0).max(1) as f64;
    let mut lo = curves.iter().map(|c| c.ci_low).fold(f64::INFINITY, f64::min);
    let mut hi = curves.iter().map(|c| c.ci_high).fold(f64::NEG_INFINITY, f64::max);
    if let Some(b) = baseline {
        lo = lo.min(b);
        hi = hi.max(b);
    }
    if !lo.is_finite() || !hi.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(0.5);
    let (lo, hi) = (lo - pad, hi + pad);
    let x = |k: f64| left + pw * k / max_k;
    let y = |v: f64| top + ph * (hi - v) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
            left - 6.0,
            y(v) + 4.0
        );
    }
    let step = (max_k / 10.0).ceil().max(1.0) as usize;
    for k in (0..=max_k as usize).step_by(step) {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{k}</text>"#,
            x(k as f64),
            top + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">iteration</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">makespan (ticks)</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    if let Some(b) = baseline {
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#555555" stroke-dasharray="6 4"/>"##,
            y(b),
            left + pw,
            y(b)
        );
    }
    let mut groups: BTreeMap<(usize, ShareMode), Vec<&CurvePoint>> = BTreeMap::new();
    for c in curves {
        groups.entry((c.d, c.mode)).or_default().push(c);
    }
    for (n, ((d, mode), pts)) in groups.iter().enumerate() {
        let color = PALETTE[n % PALETTE.len()];
        let upper = pts.iter().map(|p| format!("{:.2},{:.2}", x(p.iteration as f64), y(p.ci_high)));
        let lower = pts.iter().rev().map(|p| format!("{:.2},{:.2}", x(p.iteration as f64), y(p.ci_low)));
        let band: Vec<String> = upper.chain(lower).collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.18" stroke="none"/>"#,
            band.join(" ")
        );
        let line: Vec<String> = pts
            .iter()
            .map(|p| format!("{:.2},{:.2}", x(p.iteration as f64), y(p.mean)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        let ly = top + 10.0 + 18.0 * n as f64;
        let lx = left + pw + 14.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            label(*d, *mode)
        );
    }
    let _ = writeln!(s, "</svg>");
    s
}

/// Writes the curves, chart and trend report derived from raw rows.
pub fn emit(rows: &[ResultRow], baseline: &[BaselineRow], bootstrap: &BootstrapConfig, dir: &Path) -> Result<(Vec<CurvePoint>, TrendReport)> {
    if rows.is_empty() {
        return Err(Error::arg("no results to emit"));
    }
    fs::create_dir_all(dir)?;
    let curves = aggregate(rows, bootstrap)?;
    let report = trends(&curves, baseline);
    write_curves(&dir.join(CURVES_FILE), &curves)?;
    fs::write(dir.join(SVG_FILE), render_svg(&curves, report.baseline_mean))?;
    fs::write(dir.join(TRENDS_FILE), report.render())?;
    fs::write(dir.join("trends.json"), serde_json::to_string_pretty(&report)?)?;
    Ok((curves, report))
}

/// Re-aggregates a finished run from its `results.csv` alone.
pub fn report(dir: &Path) -> Result<(Vec<CurvePoint>, TrendReport)> {
    let rows: Vec<ResultRow> = read_rows(&dir.join(RESULTS_FILE))?;
    let baseline_path = dir.join(BASELINE_FILE);
    let baseline: Vec<BaselineRow> = if baseline_path.exists() {
        read_rows(&baseline_path)?
    } else {
        Vec::new()
    };
    let config_path = dir.join(CONFIG_FILE);
    let bootstrap = if config_path.exists() {
        serde_json::from_str::<ExperimentConfig>(&fs::read_to_string(config_path)?)?.bootstrap
    } else {
        BootstrapConfig::default()
    };
    emit(&rows, &baseline, &bootstrap, dir)
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub results: Vec<ResultRow>,
    pub greedy: Vec<ResultRow>,
    pub baseline: Vec<BaselineRow>,
    pub curves: Vec<CurvePoint>,
    pub trends: TrendReport,
    pub metadata: Metadata,
    pub study: Option<StudyReport>,
}

#[derive(Serialize)]
struct Failure<'a> {
    d: usize,
    mode: ShareMode,
    seed: u64,
    error: String,
    completed_rows: usize,
    config: &'a ExperimentConfig,
}

fn rows_of(d: usize, mode: ShareMode, seed: u64, reports: &[EvalReport]) -> Vec<ResultRow> {
    reports
        .iter()
        .enumerate()
        .map(|(k, r)| ResultRow {
            d,
            mode,
            seed,
            iteration: k,
            makespan: r.mean_makespan,
            ret: r.mean_return,
        })
        .collect()
}

pub fn run(config: &ExperimentConfig) -> Result<RunOutput> {
    run_with(config, &mut |_| {})
}

/// Runs the sweep, calling `progress` with a line per finished stage.
pub fn run_with(config: &ExperimentConfig, progress: &mut dyn FnMut(&str)) -> Result<RunOutput> {
    config.validate()?;
    let env = config.environment()?;
    let out = &config.out;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), serde_json::to_string_pretty(config)?)?;
    let horizon = env.horizon();

    let metadata = Metadata {
        scenario: env.scenario().name.clone(),
        env_id: env.env_id(),
        agent_count: env.agent_count(),
        horizon,
        observation_widths: observation_widths(&env, env.adjacency(), &config.d_values, &config.modes)?,
    };
    fs::write(out.join(METADATA_FILE), serde_json::to_string_pretty(&metadata)?)?;

    let mut seeds = config.seeds.clone();
    seeds.sort_unstable();
    let mut d_values = config.d_values.clone();
    d_values.sort_unstable();
    let mut modes = config.modes.clone();
    modes.sort_unstable();

    let mut baseline = Vec::new();
    for &seed in &seeds {
        let graph = SharingGraph::self_only(env.agent_count())?;
        let r = evaluate_uniform(&env, &graph, ShareMode::Full, config.episodes_eval, horizon, eval_seed(seed))?;
        baseline.extend(r.episodes.iter().map(|e| BaselineRow {
            seed,
            episode: e.episode,
            makespan: e.makespan,
            ret: e.discounted_return,
            completed: e.completed,
        }));
        progress(&format!("baseline seed={seed}: makespan {:.2}", r.mean_makespan));
    }
    write_rows(&out.join(BASELINE_FILE), &baseline)?;

    let mut results = Vec::new();
    let mut greedy = Vec::new();
    for &d in &d_values {
        let graph = distance_graph(env.adjacency(), d)?;
        for &mode in &modes {
            for &seed in &seeds {
                let cell = run_cell(config, &env, &graph, d, mode, seed, progress);
                match cell {
                    Ok((eps, grd)) => {
                        results.extend(eps);
                        greedy.extend(grd);
                    }
                    Err(e) => {
                        write_rows(&out.join(RESULTS_FILE), &results)?;
                        if config.evaluate_greedy {
                            write_rows(&out.join(GREEDY_FILE), &greedy)?;
                        }
                        let failure = Failure {
                            d,
                            mode,
                            seed,
                            error: e.to_string(),
                            completed_rows: results.len(),
                            config,
                        };
                        fs::write(out.join(FAILURE_FILE), serde_json::to_string_pretty(&failure)?)?;
                        return Err(e);
                    }
                }
            }
        }
    }
    write_rows(&out.join(RESULTS_FILE), &results)?;
    if config.evaluate_greedy {
        write_rows(&out.join(GREEDY_FILE), &greedy)?;
    }
    let (curves, trends) = emit(&results, &baseline, &config.bootstrap, out)?;

    let study = match &config.tabular {
        Some(path) => {
            let report = OracleSpec::load(path)?.study()?;
            write_study(&report, out)?;
            progress(&format!("bound report: bound {:.4}, gap {:.4}", report.bound.bound_value, report.actual_gap));
            Some(report)
        }
        None => None,
    };

    Ok(RunOutput {
        results,
        greedy,
        baseline,
        curves,
        trends,
        metadata,
        study,
    })
}

type CellRows = (Vec<ResultRow>, Vec<ResultRow>);

fn run_cell(
    config: &ExperimentConfig,
    env: &SchedEnv,
    graph: &SharingGraph,
    d: usize,
    mode: ShareMode,
    seed: u64,
    progress: &mut dyn FnMut(&str),
) -> Result<CellRows> {
    let wrap = |stage: &'static str| {
        move |e: Error| Error::Cell {
            d,
            mode: mode.label().into(),
            seed,
            stage,
            source: Box::new(e),
        }
    };
    let horizon = env.horizon();
    let data = collect(env, graph, mode, &UniformPolicy, config.episodes_collect, horizon, collect_seed(seed))
        .map_err(wrap("collect"))?;
    let cell_dir = config.out.join(format!("d{d}_{}_s{seed}", mode.label()));
    if config.save_datasets {
        crate::data::save(&data, &cell_dir.join("data")).map_err(wrap("save"))?;
    }
    let checkpoints = config.save_checkpoints.then(|| cell_dir.join("checkpoints"));
    let trained = train(&data, &config.train_config(seed), checkpoints.as_deref()).map_err(wrap("train"))?;
    drop(data);

    let evaluate = |eps: f64| -> Result<Vec<EvalReport>> {
        (0..=config.k)
            .map(|k| evaluate_iteration(env, &trained, k, eps, graph, mode, config.episodes_eval, horizon, eval_seed(seed)))
            .collect()
    };
    let eps = evaluate(config.epsilon).map_err(wrap("evaluate"))?;
    let grd = if config.evaluate_greedy {
        evaluate(0.0).map_err(wrap("evaluate greedy"))?
    } else {
        Vec::new()
    };
    progress(&format!(
        "d={d} {} seed={seed}: makespan k=0 {:.2}, k={} {:.2}",
        mode.label(),
        eps[0].mean_makespan,
        config.k,
        eps[config.k].mean_makespan
    ));
    Ok((rows_of(d, mode, seed, &eps), rows_of(d, mode, seed, &grd)))
}
