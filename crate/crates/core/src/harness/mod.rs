//! Experiment configuration, seeded multi-run execution, aggregation and
//! CSV output.
//!
//! A config is a TOML file with global keys and one `[[algorithm]]` table
//! per compared method; see `README.md` for the schema. Every
//! `(algorithm, seed)` pair runs on its own RNG stream derived by hashing
//! the pair into the master seed, so output bytes do not depend on the
//! thread schedule.

pub mod cli;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::algorithms::{
    run_with_source, AlgoConfig, Algorithm, DriverOptions, EnvProblem, Run, ScoreAt, TrackerInit,
};
use crate::envs::{EnvKind, Environment};
use crate::error::AlgoError;
use crate::mirror::{GeometryKind, InnerSolver};
use crate::policies::{Family, FeatureMap};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("cannot write {path}: {message}")]
    Write { path: PathBuf, message: String },
    #[error(transparent)]
    Algo(#[from] AlgoError),
}

impl HarnessError {
    /// Exit status for the command line: 2 for anything the user can fix
    /// in the invocation or the config, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Read { .. } | HarnessError::Config { .. } => 2,
            HarnessError::Write { .. } | HarnessError::Algo(_) => 1,
        }
    }
}

fn d_env() -> String {
    "pmc".into()
}
fn d_output() -> PathBuf {
    PathBuf::from("out")
}
fn d_seeds() -> usize {
    15
}
fn d_iterations() -> usize {
    500
}
fn d_gamma() -> f64 {
    0.97
}
fn d_eta() -> f64 {
    0.005
}
fn d_sigma() -> f64 {
    1.0
}
fn d_eval_every() -> usize {
    25
}
fn d_eval_rollouts() -> usize {
    20
}
fn d_batch() -> usize {
    1
}
fn d_w_max() -> f64 {
    crate::gradients::DEFAULT_W_MAX
}
fn d_true() -> bool {
    true
}
fn d_features() -> usize {
    8
}
fn d_bandwidth() -> f64 {
    1.0
}
fn d_family() -> Family {
    Family::Gaussian
}
fn d_score_at() -> ScoreAt {
    ScoreAt::Raw
}
fn d_tracker_init() -> TrackerInit {
    TrackerInit::FirstGradient
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "d_env")]
    pub env: String,
    #[serde(default = "d_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "d_seeds")]
    pub n_seeds: usize,
    #[serde(default = "d_iterations")]
    pub iterations: usize,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_eta")]
    pub eta: f64,
    #[serde(default = "d_sigma")]
    pub sigma: f64,
    #[serde(default = "d_family")]
    pub family: Family,
    #[serde(default)]
    pub geometry: Option<GeometryKind>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub c1: Option<f64>,
    #[serde(default = "d_w_max")]
    pub w_max: f64,
    #[serde(default = "d_true")]
    pub clip: bool,
    #[serde(default = "d_eval_every")]
    pub eval_every: usize,
    #[serde(default = "d_eval_rollouts")]
    pub eval_rollouts: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_score_at")]
    pub score_at: ScoreAt,
    #[serde(default = "d_tracker_init")]
    pub tracker_init: TrackerInit,
    #[serde(default = "d_features")]
    pub n_features: usize,
    #[serde(default = "d_bandwidth")]
    pub bandwidth: f64,
    /// Measured wall time in the raw CSV. Off by default, since it is the
    /// only nondeterministic column.
    #[serde(default)]
    pub record_wall_time: bool,
    #[serde(default)]
    pub inner_solver: Option<InnerSolverSpec>,
    #[serde(default, rename = "algorithm")]
    pub algorithms: Vec<AlgorithmSpec>,
    #[serde(default)]
    pub probe: Option<ProbeSpec>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerSolverSpec {
    pub steps: Option<usize>,
    pub step_size_factor: Option<f64>,
    pub tol: Option<f64>,
    pub trust_radius: Option<f64>,
}

/// Per-algorithm table; unset keys fall back to the global ones.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSpec {
    pub name: Algorithm,
    #[serde(default)]
    pub label: Option<String>,
    pub family: Option<Family>,
    pub sigma: Option<f64>,
    pub eta: Option<f64>,
    pub beta: Option<f64>,
    pub c1: Option<f64>,
    pub geometry: Option<GeometryKind>,
    pub w_max: Option<f64>,
    pub clip: Option<bool>,
    pub tracker_init: Option<TrackerInit>,
    pub score_at: Option<ScoreAt>,
}

fn d_probe_d() -> usize {
    10
}
fn d_probe_l() -> f64 {
    5.0
}
fn d_probe_betas() -> Vec<f64> {
    vec![0.1, 0.5, 1.0]
}
fn d_probe_iterations() -> usize {
    50
}
fn d_replicates() -> usize {
    200
}

/// `[probe]` table read by `probe-tracking`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    #[serde(default = "d_probe_d")]
    pub d: usize,
    #[serde(default = "d_probe_l", rename = "L")]
    pub l: f64,
    #[serde(default = "d_sigma")]
    pub m0: f64,
    #[serde(default)]
    pub objective_seed: u64,
    #[serde(default = "d_probe_betas")]
    pub betas: Vec<f64>,
    #[serde(default)]
    pub eta: f64,
    #[serde(default = "d_probe_iterations")]
    pub iterations: usize,
    #[serde(default = "d_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub theta0: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.check(path)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|source| HarnessError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, path)
    }

    fn check(&self, path: &Path) -> Result<(), HarnessError> {
        let bad = |message: String| {
            Err(HarnessError::Config {
                path: path.to_path_buf(),
                message,
            })
        };
        if self.n_seeds == 0 {
            return bad("n_seeds must be at least 1".into());
        }
        if EnvKind::by_name(&self.env).is_none() {
            return bad(format!("unknown env '{}' (expected pmc|chain)", self.env));
        }
        if self.n_features == 0 || self.bandwidth.is_nan() || self.bandwidth <= 0.0 {
            return bad("n_features must be at least 1 and bandwidth positive".into());
        }
        if self.beta.is_some() && self.c1.is_some() {
            return bad("give either beta or c1, not both".into());
        }
        let mut labels = BTreeSet::new();
        for (i, spec) in self.algorithms.iter().enumerate() {
            if spec.beta.is_some() && spec.c1.is_some() {
                return bad(format!(
                    "algorithm {}: give either beta or c1, not both",
                    i + 1
                ));
            }
            let label = self.label_of(spec);
            if !labels.insert(label.clone()) {
                return bad(format!("duplicate algorithm label '{label}'"));
            }
        }
        for (label, cfg) in self.resolved() {
            if let Err(e) = cfg.validate() {
                return bad(format!("algorithm '{label}': {e}"));
            }
        }
        Ok(())
    }

    fn label_of(&self, spec: &AlgorithmSpec) -> String {
        spec.label.clone().unwrap_or_else(|| {
            format!(
                "{}-{}",
                spec.name.name(),
                spec.family.unwrap_or(self.family).name()
            )
        })
    }

    pub fn env(&self) -> EnvKind {
        EnvKind::by_name(&self.env).expect("checked at load")
    }

    pub fn features(&self) -> FeatureMap {
        let (lo, hi) = self.env().state_range();
        FeatureMap::evenly_spaced(lo, hi, self.n_features, self.bandwidth, 1.0)
            .expect("checked at load")
    }

    /// Algorithm label with its fully resolved configuration (seed unset).
    pub fn resolved(&self) -> Vec<(String, AlgoConfig)> {
        self.algorithms
            .iter()
            .map(|spec| {
                let family = spec.family.unwrap_or(self.family);
                let mut cfg = AlgoConfig::new(spec.name, family);
                cfg.eta = spec.eta.unwrap_or(self.eta);
                cfg.gamma = self.gamma;
                cfg.sigma = spec.sigma.unwrap_or(self.sigma);
                cfg.iterations = self.iterations;
                cfg.batch_size = self.batch_size;
                cfg.eval_every = self.eval_every;
                cfg.eval_rollouts = self.eval_rollouts;
                if let Some(g) = spec.geometry.or(self.geometry) {
                    cfg.geometry = g;
                }
                cfg.beta = match (spec.beta, spec.c1, self.beta, self.c1) {
                    (Some(b), _, _, _) => b,
                    (None, Some(c1), _, _) => (c1 * cfg.eta).min(1.0),
                    (None, None, Some(b), _) => b,
                    (None, None, None, Some(c1)) => (c1 * cfg.eta).min(1.0),
                    _ => cfg.beta,
                };
                let clip = spec.clip.unwrap_or(self.clip);
                cfg.w_max = clip.then(|| spec.w_max.unwrap_or(self.w_max));
                cfg.tracker_init = spec.tracker_init.unwrap_or(self.tracker_init);
                cfg.score_at = spec.score_at.unwrap_or(self.score_at);
                if let Some(s) = self.inner_solver {
                    let d = InnerSolver::default();
                    cfg.solver = InnerSolver {
                        steps: s.steps.unwrap_or(d.steps),
                        step_size_factor: s.step_size_factor.unwrap_or(d.step_size_factor),
                        tol: s.tol.unwrap_or(d.tol),
                        trust_radius: s.trust_radius.unwrap_or(d.trust_radius),
                    };
                }
                (self.label_of(spec), cfg)
            })
            .collect()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of one `(algorithm, seed index)` pair: FNV-1a of the label mixed
/// into the master seed with splitmix64.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(splitmix64(master ^ h) ^ splitmix64(index))
}

/// `%.9g`-style formatting with `.` as decimal separator.
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf" } else { "-inf" }.into();
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.8e}");
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mant), exp.abs())
    } else {
        let decimals = (8 - exp) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// One finished `(algorithm, seed)` run.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub label: String,
    pub seed_index: usize,
    pub run: Run,
}

/// Runs every configured `(algorithm, seed)` pair; results come back
/// sorted by algorithm (config order) and seed index.
pub fn execute(cfg: &ExperimentConfig) -> Result<Vec<SeedRun>, HarnessError> {
    let env = cfg.env();
    let features = cfg.features();
    let resolved = cfg.resolved();
    let jobs: Vec<(usize, usize)> = (0..resolved.len())
        .flat_map(|a| (0..cfg.n_seeds).map(move |s| (a, s)))
        .collect();
    let results: Result<Vec<SeedRun>, AlgoError> = jobs
        .par_iter()
        .map(|&(a, s)| {
            let (label, base) = &resolved[a];
            let mut algo = base.clone();
            algo.seed = derive_seed(cfg.master_seed, label, s as u64);
            let mut source = EnvProblem::with_features(env.clone(), features.clone(), &algo)?;
            let run = run_with_source(&algo, &mut source, DriverOptions::default())?;
            Ok(SeedRun {
                label: label.clone(),
                seed_index: s,
                run,
            })
        })
        .collect();
    Ok(results?)
}

pub const RAW_HEADER: [&str; 10] = [
    "algorithm",
    "seed",
    "k",
    "return",
    "eval_return",
    "breg_grad_norm",
    "ghat_norm",
    "theta_norm",
    "wall_ms",
    "diverged",
];

pub const AGGREGATE_HEADER: [&str; 8] = [
    "algorithm",
    "k",
    "mean_return",
    "std_return",
    "mean_breg_grad_norm",
    "std_breg_grad_norm",
    "n_seeds_ok",
    "n_seeds_diverged",
];

pub const SUMMARY_HEADER: [&str; 7] = [
    "algorithm",
    "n_seeds",
    "n_seeds_diverged",
    "mean_final_eval_return",
    "std_final_eval_return",
    "goal_seed_fraction",
    "mean_final_goal_rate",
];

fn opt_num(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

pub fn raw_rows(runs: &[SeedRun], record_wall_time: bool) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for sr in runs {
        for r in &sr.run.records {
            rows.push(vec![
                sr.label.clone(),
                sr.seed_index.to_string(),
                r.k.to_string(),
                fmt_num(r.return_estimate),
                opt_num(r.eval.map(|e| e.mean_return)),
                fmt_num(r.breg_grad_norm),
                fmt_num(r.ghat_norm),
                fmt_num(r.theta_norm),
                if record_wall_time {
                    fmt_num(r.wall_ms)
                } else {
                    String::new()
                },
                u8::from(r.diverged).to_string(),
            ]);
        }
    }
    rows
}

/// Mean and sample standard deviation; `None` where undefined.
pub fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = xs.len();
    if n == 0 {
        return (None, None);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (Some(mean), None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (Some(mean), Some(var.sqrt()))
}

fn labels_in_order(runs: &[SeedRun]) -> Vec<&str> {
    let mut out: Vec<&str> = Vec::new();
    for sr in runs {
        if out.last() != Some(&sr.label.as_str()) && !out.contains(&sr.label.as_str()) {
            out.push(&sr.label);
        }
    }
    out
}

/// Per-iteration statistics over the seeds that never diverged.
pub fn aggregate_rows(runs: &[SeedRun]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for label in labels_in_order(runs) {
        let group: Vec<&SeedRun> = runs.iter().filter(|r| r.label == label).collect();
        let ok: Vec<&SeedRun> = group
            .iter()
            .copied()
            .filter(|r| !r.run.diverged())
            .collect();
        let n_div = group.len() - ok.len();
        let k_max = group.iter().map(|r| r.run.records.len()).max().unwrap_or(0);
        for k in 0..k_max {
            let rets: Vec<f64> = ok
                .iter()
                .filter_map(|r| r.run.records.get(k))
                .map(|r| r.return_estimate)
                .collect();
            let grads: Vec<f64> = ok
                .iter()
                .filter_map(|r| r.run.records.get(k))
                .map(|r| r.breg_grad_norm)
                .collect();
            let (mr, sr) = mean_std(&rets);
            let (mg, sg) = mean_std(&grads);
            rows.push(vec![
                label.to_string(),
                (k + 1).to_string(),
                opt_num(mr),
                opt_num(sr),
                opt_num(mg),
                opt_num(sg),
                rets.len().to_string(),
                n_div.to_string(),
            ]);
        }
    }
    rows
}

/// Final-evaluation statistics per algorithm over non-divergent seeds.
pub fn summary_rows(runs: &[SeedRun]) -> Vec<Vec<String>> {
    labels_in_order(runs)
        .into_iter()
        .map(|label| {
            let group: Vec<&SeedRun> = runs.iter().filter(|r| r.label == label).collect();
            let finals: Vec<_> = group
                .iter()
                .filter(|r| !r.run.diverged())
                .filter_map(|r| r.run.final_eval())
                .collect();
            let rets: Vec<f64> = finals.iter().map(|e| e.mean_return).collect();
            let rates: Vec<f64> = finals.iter().map(|e| e.goal_rate).collect();
            let reached = group.iter().filter(|r| ever_reached_goal(&r.run)).count();
            let (m, s) = mean_std(&rets);
            vec![
                label.to_string(),
                group.len().to_string(),
                group
                    .iter()
                    .filter(|r| r.run.diverged())
                    .count()
                    .to_string(),
                opt_num(m),
                opt_num(s),
                fmt_num(reached as f64 / group.len() as f64),
                opt_num(mean_std(&rates).0),
            ]
        })
        .collect()
}

/// Whether any training trajectory or evaluation rollout reached the goal.
pub fn ever_reached_goal(run: &Run) -> bool {
    run.records
        .iter()
        .any(|r| r.reached_goal || r.eval.is_some_and(|e| e.goal_rate > 0.0))
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), HarnessError> {
    let err = |e: &dyn std::fmt::Display| HarnessError::Write {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| err(&e))?;
    w.write_record(header).map_err(|e| err(&e))?;
    for row in rows {
        w.write_record(row).map_err(|e| err(&e))?;
    }
    w.flush().map_err(|e| err(&e))
}

/// Paths of the files written by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub raw: PathBuf,
    pub aggregate: PathBuf,
    pub summary: PathBuf,
    pub runs: Vec<SeedRun>,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    let runs = execute(cfg)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| HarnessError::Write {
        path: cfg.output_dir.clone(),
        message: e.to_string(),
    })?;
    let raw = cfg.output_dir.join("raw.csv");
    let aggregate = cfg.output_dir.join("aggregate.csv");
    let summary = cfg.output_dir.join("summary.csv");
    write_csv(&raw, &RAW_HEADER, &raw_rows(&runs, cfg.record_wall_time))?;
    write_csv(&aggregate, &AGGREGATE_HEADER, &aggregate_rows(&runs))?;
    write_csv(&summary, &SUMMARY_HEADER, &summary_rows(&runs))?;
    Ok(ExperimentOutput {
        raw,
        aggregate,
        summary,
        runs,
    })
}
