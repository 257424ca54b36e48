//! Experiment specs, sweep expansion, and the metrics table.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::reference::{certified_optimum, ReferenceOptions};
use crate::harness::schedule::{suggest_schedule, ScheduleMode, TheoryConstants};
use crate::harness::AnalysisKind;
use crate::io::{load_env_file, LoadedEnv};
use crate::mdp::EnvGenerator;
use crate::policy::PolicyParams;
use crate::runtime::{run_training, AlgoConfig, Algorithm, FederatedProblem, GradientSource};

/// Where the environment comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvSource {
    /// An environment file, truncated to the first `N` agents per point.
    File(PathBuf),
    /// Generator parameters; `n_agents` is replaced by each point's `N`.
    Generate(EnvGenerator),
}

/// Sweep axes. An empty list means "the template's value".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    #[serde(default)]
    pub n_agents: Vec<usize>,
    #[serde(default)]
    pub local_steps: Vec<usize>,
    #[serde(default)]
    pub horizon: Vec<usize>,
    #[serde(default)]
    pub local_step: Vec<f64>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

/// Derive `η` and `K` per point from the schedule formulas. `K` always comes
/// from the schedule; `η` does too unless the sweep lists step sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub mode: ScheduleMode,
    #[serde(default)]
    pub mu: Option<f64>,
    #[serde(default)]
    pub smoothness: Option<f64>,
}

/// A full experiment description, stored as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub env: EnvSource,
    /// Template for every sweep point.
    pub config: AlgoConfig,
    #[serde(default)]
    pub sweep: SweepAxes,
    #[serde(default)]
    pub schedule: Option<ScheduleSpec>,
    #[serde(default = "default_analysis")]
    pub analysis: AnalysisKind,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Optimize regret `1 − R` (the default) rather than raw reward.
    #[serde(default = "yes")]
    pub regret: bool,
    /// θ̄⁽⁰⁾ file in checkpoint format; zeros when absent.
    #[serde(default)]
    pub init: Option<PathBuf>,
    #[serde(default)]
    pub reference: ReferenceOptions,
}

fn default_analysis() -> AnalysisKind {
    AnalysisKind::Convergence
}

fn yes() -> bool {
    true
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec = Self::from_json(&text)?;
        // relative paths inside the spec are relative to the spec file
        if let Some(dir) = path.parent() {
            if let EnvSource::File(p) = &mut spec.env {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
            if let Some(p) = &mut spec.init {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    fn seeds(&self) -> Vec<u64> {
        if self.sweep.seeds.is_empty() {
            vec![self.config.master_seed]
        } else {
            self.sweep.seeds.clone()
        }
    }
}

/// One coordinate of the sweep, seeds excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub index: usize,
    pub config: AlgoConfig,
    pub warnings: Vec<String>,
}

fn axis<T: Clone>(values: &[T], template: T) -> Vec<T> {
    if values.is_empty() {
        vec![template]
    } else {
        values.to_vec()
    }
}

fn load_source(spec: &ExperimentSpec) -> Result<Option<LoadedEnv>> {
    match &spec.env {
        EnvSource::File(path) => Ok(Some(load_env_file(path)?)),
        EnvSource::Generate(_) => Ok(None),
    }
}

fn env_for(spec: &ExperimentSpec, file: Option<&LoadedEnv>, n_agents: usize) -> Result<LoadedEnv> {
    match (&spec.env, file) {
        (EnvSource::Generate(gen), _) => Ok(LoadedEnv::Shared(
            EnvGenerator {
                n_agents,
                ..gen.clone()
            }
            .generate()?,
        )),
        (EnvSource::File(_), Some(env)) => env.truncate_agents(n_agents),
        (EnvSource::File(path), None) => Err(Error::Config(format!(
            "environment file {} was not loaded",
            path.display()
        ))),
    }
}

fn discount(env: &LoadedEnv) -> f64 {
    match env {
        LoadedEnv::Shared(e) => e.discount(),
        LoadedEnv::PerAgent(m) => m[0].discount(),
    }
}

/// Expands the axes in the order `N × H × K × η`. Every point's config is
/// validated.
pub fn expand_sweep(spec: &ExperimentSpec) -> Result<Vec<SweepPoint>> {
    let file = load_source(spec)?;
    expand_with(spec, file.as_ref())
}

fn expand_with(spec: &ExperimentSpec, file: Option<&LoadedEnv>) -> Result<Vec<SweepPoint>> {
    let t = &spec.config;
    if spec.schedule.is_some() && !spec.sweep.horizon.is_empty() {
        return Err(Error::Config(
            "a schedule fixes the horizon; remove the horizon sweep axis".into(),
        ));
    }
    let mut points = Vec::new();
    for &n in &axis(&spec.sweep.n_agents, t.n_agents) {
        let gamma = discount(&env_for(spec, file, n)?);
        for &h in &axis(&spec.sweep.local_steps, t.local_steps) {
            for &k in &axis(&spec.sweep.horizon, t.horizon) {
                for &eta in &axis(&spec.sweep.local_step, t.local_step) {
                    let mut config = AlgoConfig {
                        n_agents: n,
                        local_steps: h,
                        horizon: k,
                        local_step: eta,
                        ..t.clone()
                    };
                    let mut warnings = Vec::new();
                    if let Some(s) = &spec.schedule {
                        let constants = TheoryConstants {
                            smoothness: s.smoothness,
                            mu: s.mu,
                            ..Default::default()
                        };
                        let sched =
                            suggest_schedule(n, h, t.rounds.max(1), gamma, s.mode, &constants)?;
                        config.horizon = sched.horizon;
                        if spec.sweep.local_step.is_empty() {
                            config.local_step = sched.local_step;
                        }
                        warnings = sched.warnings;
                    }
                    config.validate()?;
                    points.push(SweepPoint {
                        index: points.len(),
                        config,
                        warnings,
                    });
                }
            }
        }
    }
    Ok(points)
}

/// One row per (sweep point, seed, round).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub point: usize,
    pub n_agents: usize,
    pub local_steps: usize,
    pub horizon: usize,
    pub local_step: f64,
    pub global_step: f64,
    pub algorithm: Algorithm,
    pub gradient_source: GradientSource,
    pub seed: u64,
    pub round: u64,
    /// `J(θ̄)` in the optimized orientation.
    pub objective: f64,
    /// The same value on the reward scale.
    pub reward_value: f64,
    pub grad_norm_sq: f64,
    pub drift_max: f64,
    pub drift_mean: f64,
    pub drift_peak: f64,
    pub trajectories: u64,
    pub cumulative_trajectories: u64,
    pub communication: u64,
    /// Reference optimum `J(θ_ref)` of this point's environment.
    pub j_ref: f64,
    /// `‖∇J(θ_ref)‖`, the reference certificate.
    pub j_ref_grad_norm: f64,
}

/// Rows sorted by `(point, seed, round)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsRecord {
    pub rows: Vec<MetricsRow>,
}

impl MetricsRecord {
    pub fn new(mut rows: Vec<MetricsRow>) -> Self {
        rows.sort_by_key(|r| (r.point, r.seed, r.round));
        Self { rows }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows of each `(point, seed)` run, in key order.
    pub fn runs(&self) -> BTreeMap<(usize, u64), Vec<&MetricsRow>> {
        let mut out: BTreeMap<(usize, u64), Vec<&MetricsRow>> = BTreeMap::new();
        for r in &self.rows {
            out.entry((r.point, r.seed)).or_default().push(r);
        }
        out
    }

    /// Runs grouped by point.
    pub fn points(&self) -> BTreeMap<usize, Vec<Vec<&MetricsRow>>> {
        let mut out: BTreeMap<usize, Vec<Vec<&MetricsRow>>> = BTreeMap::new();
        for ((point, _), rows) in self.runs() {
            out.entry(point).or_default().push(rows);
        }
        out
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(METRICS_COLUMNS)?;
        }
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.into_inner()
            .map_err(|e| Error::Parse(format!("CSV buffer: {e}")))
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
        Ok(Self::new(rows))
    }

    /// Writes the table atomically: a temporary sibling file is renamed into
    /// place, so a failed run never leaves a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&bytes)
    }
}

const METRICS_COLUMNS: [&str; 21] = [
    "point",
    "n_agents",
    "local_steps",
    "horizon",
    "local_step",
    "global_step",
    "algorithm",
    "gradient_source",
    "seed",
    "round",
    "objective",
    "reward_value",
    "grad_norm_sq",
    "drift_max",
    "drift_mean",
    "drift_peak",
    "trajectories",
    "cumulative_trajectories",
    "communication",
    "j_ref",
    "j_ref_grad_norm",
];

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Runs every sweep point for every seed and evaluates `J` and `‖∇J‖²` with
/// the exact oracle. Output depends only on the spec.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<MetricsRecord> {
    let file = load_source(spec)?;
    let points = expand_with(spec, file.as_ref())?;
    let seeds = spec.seeds();

    // one environment and reference per distinct N
    let mut problems: BTreeMap<usize, (FederatedProblem, f64, f64)> = BTreeMap::new();
    for p in &points {
        let n = p.config.n_agents;
        if problems.contains_key(&n) {
            continue;
        }
        let env = env_for(spec, file.as_ref(), n)?;
        let problem = env.to_problem(spec.regret)?;
        let init = initial_params(spec, &problem)?;
        let reference = certified_optimum(&problem, &init, &spec.reference)?;
        problems.insert(n, (problem, reference.objective, reference.grad_norm));
    }

    let jobs: Vec<(&SweepPoint, u64)> = points
        .iter()
        .flat_map(|p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    let per_job = jobs
        .par_iter()
        .map(|&(point, seed)| {
            let (problem, j_ref, j_ref_grad_norm) = &problems[&point.config.n_agents];
            let config = AlgoConfig {
                master_seed: seed,
                ..point.config.clone()
            };
            let init = initial_params(spec, problem)?;
            let history = run_training(problem, &config, init)?;
            let scale = 1.0 / (1.0 - problem.agent(0).discount());
            Ok(history
                .rows
                .iter()
                .map(|m| MetricsRow {
                    point: point.index,
                    n_agents: config.n_agents,
                    local_steps: config.local_steps,
                    horizon: config.horizon,
                    local_step: config.local_step,
                    global_step: config.global_step,
                    algorithm: config.algorithm,
                    gradient_source: config.gradient_source,
                    seed,
                    round: m.round,
                    objective: m.objective,
                    reward_value: if spec.regret {
                        scale - m.objective
                    } else {
                        m.objective
                    },
                    grad_norm_sq: m.grad_norm_sq,
                    drift_max: m.drift_max,
                    drift_mean: m.drift_mean,
                    drift_peak: m.drift_peak,
                    trajectories: m.trajectories,
                    cumulative_trajectories: m.cumulative_trajectories,
                    communication: m.communication,
                    j_ref: *j_ref,
                    j_ref_grad_norm: *j_ref_grad_norm,
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsRecord::new(per_job.into_iter().flatten().collect()))
}

fn initial_params(spec: &ExperimentSpec, problem: &FederatedProblem) -> Result<PolicyParams> {
    match &spec.init {
        None => Ok(PolicyParams::zeros(problem.n_states(), problem.n_actions())),
        Some(path) => {
            let theta = PolicyParams::load(path)?;
            if theta.n_states() != problem.n_states() || theta.n_actions() != problem.n_actions() {
                return Err(Error::Config(format!(
                    "initial parameter in {} has the wrong shape",
                    path.display()
                )));
            }
            Ok(theta)
        }
    }
}
