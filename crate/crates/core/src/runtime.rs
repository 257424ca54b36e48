//! The round-based federated optimizer.
//!
//! One round of Fast-FedPG, starting from the global parameter `θ̄`:
//!
//! 1. every agent sets `θ_{i,0} = θ̄` and takes `H` local steps
//!    `θ ← θ − η (g_i(θ) − g_i(θ̄) + g(θ̄))`, where `g_i(θ̄)` is the agent's
//!    anchor and `g(θ̄)` the global direction, both fixed for the round;
//! 2. the server applies `θ̄ ← θ̄ + (α_g / N) Σ_i Δ_{i,H}`;
//! 3. every agent submits `g_i(θ̄_new)`; the server averages them into the next
//!    global direction, and the submissions become next round's anchors.
//!
//! The runtime always minimizes. Reward-scale environments must be turned
//! into regrets first ([`crate::mdp::apply_regret_transform`]).
//!
//! Agents run in parallel under rayon. Every reduction sums in ascending agent
//! order and every random draw comes from a keyed stream, so results do not
//! depend on the thread count.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{GradVector, Provenance};
use crate::mdp::{build_average_mdp, FederatedEnv, TabularMdp};
use crate::oracle::{exact_policy_gradient, objective};
use crate::policy::PolicyParams;
use crate::rng::{Purpose, StreamKey};
use crate::sampler::sample_estimate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    FastFedpg,
    FedavgPg,
    Centralized,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::FastFedpg => "fast-fedpg",
            Algorithm::FedavgPg => "fedavg-pg",
            Algorithm::Centralized => "centralized",
        })
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast-fedpg" => Ok(Algorithm::FastFedpg),
            "fedavg-pg" => Ok(Algorithm::FedavgPg),
            "centralized" => Ok(Algorithm::Centralized),
            other => Err(Error::Config(format!("unknown algorithm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientSource {
    Exact,
    Sampled,
}

impl fmt::Display for GradientSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradientSource::Exact => "exact",
            GradientSource::Sampled => "sampled",
        })
    }
}

impl std::str::FromStr for GradientSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(GradientSource::Exact),
            "sampled" => Ok(GradientSource::Sampled),
            other => Err(Error::Config(format!("unknown gradient source `{other}`"))),
        }
    }
}

/// Step sizes, budgets and mode for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgoConfig {
    /// Local step size `η`.
    pub local_step: f64,
    /// Server step size `α_g ∈ (0, 1]`.
    #[serde(default = "one")]
    pub global_step: f64,
    /// Local steps per round `H`.
    pub local_steps: usize,
    /// Communication rounds `T`.
    pub rounds: usize,
    /// Roll-out horizon `K`; only used in sampled mode.
    #[serde(default = "one_usize")]
    pub horizon: usize,
    pub n_agents: usize,
    pub gradient_source: GradientSource,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub master_seed: u64,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

impl AlgoConfig {
    /// `α = H · η · α_g`.
    pub fn effective_step(&self) -> f64 {
        self.local_steps as f64 * self.local_step * self.global_step
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.local_step > 0.0) || !self.local_step.is_finite() {
            return Err(Error::Config(format!(
                "local step size must be positive, got {}",
                self.local_step
            )));
        }
        if !(self.global_step > 0.0 && self.global_step <= 1.0) {
            return Err(Error::Config(format!(
                "global step size must lie in (0, 1], got {}",
                self.global_step
            )));
        }
        if self.local_steps == 0 {
            return Err(Error::Config(
                "local steps per round must be at least 1".into(),
            ));
        }
        if self.horizon == 0 {
            return Err(Error::Config("roll-out horizon must be at least 1".into()));
        }
        if self.n_agents == 0 {
            return Err(Error::Config("need at least one agent".into()));
        }
        Ok(())
    }
}

/// The agents' MDPs plus, when the kernels are shared, the average MDP.
#[derive(Debug, Clone)]
pub struct FederatedProblem {
    agents: Vec<TabularMdp>,
    average: Option<TabularMdp>,
}

impl FederatedProblem {
    pub fn from_env(env: &FederatedEnv) -> Result<Self> {
        Ok(Self {
            agents: env.agent_mdps(),
            average: Some(build_average_mdp(env)?),
        })
    }

    /// Agents with possibly different kernels. No average MDP exists, so
    /// metrics are averages of per-agent oracles and the centralized baseline
    /// is unavailable.
    pub fn from_agents(agents: Vec<TabularMdp>) -> Result<Self> {
        let first = agents
            .first()
            .ok_or_else(|| Error::Config("need at least one agent".into()))?;
        let (ns, na) = (first.n_states(), first.n_actions());
        let gamma = first.discount();
        for (i, m) in agents.iter().enumerate() {
            if m.n_states() != ns || m.n_actions() != na || m.discount() != gamma {
                return Err(Error::InvalidEnv(format!(
                    "agent {i} disagrees on dimensions or discount"
                )));
            }
        }
        Ok(Self {
            agents,
            average: None,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn n_states(&self) -> usize {
        self.agents[0].n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.agents[0].n_actions()
    }

    pub fn agent(&self, i: usize) -> &TabularMdp {
        &self.agents[i]
    }

    pub fn average(&self) -> Option<&TabularMdp> {
        self.average.as_ref()
    }

    /// `J(θ)` and `∇J(θ)` of the global objective, from the average MDP when
    /// available and otherwise as the mean of per-agent oracles.
    pub fn evaluate(&self, theta: &PolicyParams) -> Result<(f64, GradVector)> {
        match &self.average {
            Some(avg) => Ok((objective(theta, avg)?, exact_policy_gradient(theta, avg)?)),
            None => {
                let mut j = 0.0;
                let mut grads = Vec::with_capacity(self.agents.len());
                for m in &self.agents {
                    j += objective(theta, m)?;
                    grads.push(exact_policy_gradient(theta, m)?);
                }
                Ok((j / self.agents.len() as f64, GradVector::mean(&grads)?))
            }
        }
    }
}

/// Agent `i`'s gradient at `theta`: the exact oracle, or one fresh truncated
/// rollout drawn from the stream at `key`.
fn agent_gradient(
    mdp: &TabularMdp,
    theta: &PolicyParams,
    config: &AlgoConfig,
    key: StreamKey,
) -> Result<GradVector> {
    match config.gradient_source {
        GradientSource::Exact => exact_policy_gradient(theta, mdp),
        GradientSource::Sampled => sample_estimate(theta, mdp, config.horizon, key),
    }
}

fn trajectories_per_call(config: &AlgoConfig) -> u64 {
    match config.gradient_source {
        GradientSource::Exact => 0,
        GradientSource::Sampled => 1,
    }
}

/// Drift-corrected local step:
/// `θ − η (grad_i(θ) − anchor_i + g_global)`.
pub fn local_update_fastfedpg(
    theta: &PolicyParams,
    anchor: &GradVector,
    global_direction: &GradVector,
    grad: &GradVector,
    step: f64,
) -> Result<PolicyParams> {
    let d = theta.len();
    anchor.check_len(d)?;
    global_direction.check_len(d)?;
    grad.check_len(d)?;
    let direction: Vec<f64> = grad
        .entries()
        .iter()
        .zip(anchor.entries())
        .zip(global_direction.entries())
        .map(|((g, a), c)| (g - a) + c)
        .collect();
    theta.descend(step, &direction)
}

/// Plain local step `θ − η grad_i(θ)`.
pub fn local_update_fedavg(
    theta: &PolicyParams,
    grad: &GradVector,
    step: f64,
) -> Result<PolicyParams> {
    grad.check_len(theta.len())?;
    theta.descend(step, grad.entries())
}

/// `θ̄ + (α_g / N) Σ_i Δ_i`, summing in slice order.
pub fn server_aggregate(
    global: &PolicyParams,
    deltas: &[Vec<f64>],
    global_step: f64,
) -> Result<PolicyParams> {
    if deltas.is_empty() {
        return Err(Error::InsufficientData("server received no deltas".into()));
    }
    let d = global.len();
    let mut sum = vec![0.0; d];
    for delta in deltas {
        if delta.len() != d {
            return Err(Error::ShapeMismatch {
                expected: d,
                actual: delta.len(),
            });
        }
        for (s, x) in sum.iter_mut().zip(delta) {
            *s += x;
        }
    }
    let n = deltas.len() as f64;
    let mut next = global.clone();
    for (t, s) in next.as_mut_slice().iter_mut().zip(&sum) {
        *t += global_step * (s / n);
    }
    Ok(next)
}

/// An agent's gradient at the round's global parameter, stamped with that
/// parameter's fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub at: u64,
    pub grad: GradVector,
}

/// What the server learns from the global PG exchange.
#[derive(Debug, Clone)]
pub struct Exchange {
    pub global_direction: GradVector,
    pub anchors: Vec<Anchor>,
    pub trajectories: u64,
}

/// Every agent submits its gradient at `theta`; the server averages.
/// `round` is the index of the round that starts at `theta`; sampled
/// submissions use the `Exchange` stream at that round.
pub fn global_pg_exchange(
    problem: &FederatedProblem,
    theta: &PolicyParams,
    config: &AlgoConfig,
    round: u64,
) -> Result<Exchange> {
    let fingerprint = theta.fingerprint();
    let anchors = (0..problem.n_agents())
        .into_par_iter()
        .map(|i| {
            let key = StreamKey::new(config.master_seed, i as u64, round, 0, Purpose::Exchange);
            let grad = agent_gradient(problem.agent(i), theta, config, key)?;
            Ok(Anchor {
                at: fingerprint,
                grad,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let grads: Vec<GradVector> = anchors.iter().map(|a| a.grad.clone()).collect();
    Ok(Exchange {
        global_direction: GradVector::mean(&grads)?,
        anchors,
        trajectories: trajectories_per_call(config) * problem.n_agents() as u64,
    })
}

/// What an agent hands back after its local steps. Only the parameter change
/// crosses to the server; the drift trace and raw gradient sum are
/// diagnostics for the experiment harness.
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub delta: Vec<f64>,
    /// `‖Δ_{i,ℓ}‖²` for `ℓ = 0..=H`.
    pub drift_trace: Vec<f64>,
    /// `Σ_ℓ g_i(θ_{i,ℓ})`, the raw gradients the agent evaluated.
    pub gradient_sum: Vec<f64>,
    pub trajectories: u64,
}

fn run_local(
    agent: usize,
    mdp: &TabularMdp,
    global: &PolicyParams,
    correction: Option<(&Anchor, &GradVector)>,
    config: &AlgoConfig,
    round: u64,
) -> Result<LocalOutcome> {
    let h = config.local_steps;
    let mut theta = global.clone();
    let mut drift_trace = Vec::with_capacity(h + 1);
    drift_trace.push(0.0);
    let mut gradient_sum = vec![0.0; global.len()];
    for step in 0..h {
        let key = StreamKey::new(
            config.master_seed,
            agent as u64,
            round,
            step as u64,
            Purpose::LocalRollout,
        );
        let grad = agent_gradient(mdp, &theta, config, key)?;
        for (s, g) in gradient_sum.iter_mut().zip(grad.entries()) {
            *s += g;
        }
        theta = match correction {
            Some((anchor, global_direction)) => local_update_fastfedpg(
                &theta,
                &anchor.grad,
                global_direction,
                &grad,
                config.local_step,
            )?,
            None => local_update_fedavg(&theta, &grad, config.local_step)?,
        };
        let delta = theta.delta_from(global);
        drift_trace.push(delta.iter().map(|x| x * x).sum());
    }
    Ok(LocalOutcome {
        delta: theta.delta_from(global),
        drift_trace,
        gradient_sum,
        trajectories: trajectories_per_call(config) * h as u64,
    })
}

/// State carried between rounds.
#[derive(Debug, Clone)]
pub struct RoundState {
    /// Index of the round that starts at `global`.
    pub round: u64,
    pub global: PolicyParams,
    /// `g(θ̄)`, the averaged exchange; absent for the baselines.
    pub global_direction: Option<GradVector>,
    pub anchors: Vec<Anchor>,
    /// `θ_{i,H}` of the round that produced `global`.
    pub local_params: Vec<PolicyParams>,
    pub cumulative_trajectories: u64,
}

/// One history row, describing the global parameter `θ̄^{(round)}` and the
/// work spent producing it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub objective: f64,
    pub grad_norm_sq: f64,
    /// Largest per-agent drift sum `Σ_{ℓ<H} ‖Δ_{i,ℓ}‖²`.
    pub drift_max: f64,
    /// Mean over agents of the same drift sum.
    pub drift_mean: f64,
    /// `max_{i, ℓ<H} ‖Δ_{i,ℓ}‖²`.
    pub drift_peak: f64,
    pub trajectories: u64,
    pub cumulative_trajectories: u64,
    pub communication: u64,
}

/// Full detail of one executed round.
#[derive(Debug, Clone)]
pub struct RoundReport {
    pub metrics: RoundMetrics,
    pub previous_global: PolicyParams,
    pub previous_grad_norm_sq: f64,
    pub outcomes: Vec<LocalOutcome>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundHistory {
    pub rows: Vec<RoundMetrics>,
}

impl RoundHistory {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&RoundMetrics> {
        self.rows.last()
    }
}

/// Resume point: the round index, the global parameter and the trajectory
/// count so far.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub round: u64,
    pub global: PolicyParams,
    pub cumulative_trajectories: u64,
}

impl Checkpoint {
    /// Header line `fedpg-checkpoint <round> <trajectories>`, then the θ
    /// format of [`PolicyParams::write_text`].
    pub fn write_text(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "fedpg-checkpoint {} {}",
            self.round, self.cumulative_trajectories
        )?;
        self.global.write_text(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_text(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_text<I>(lines: &mut I) -> Result<Self>
    where
        I: Iterator<Item = std::io::Result<String>>,
    {
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty checkpoint".into()))?
            .map_err(|e| Error::Parse(e.to_string()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 || fields[0] != "fedpg-checkpoint" {
            return Err(Error::Parse(format!("bad checkpoint header `{header}`")));
        }
        let round = fields[1]
            .parse()
            .map_err(|_| Error::Parse(format!("bad round `{}`", fields[1])))?;
        let cumulative_trajectories = fields[2]
            .parse()
            .map_err(|_| Error::Parse(format!("bad trajectory count `{}`", fields[2])))?;
        let global = PolicyParams::read_text(lines)?;
        Ok(Self {
            round,
            global,
            cumulative_trajectories,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_text(&mut std::io::BufReader::new(file).lines())
    }
}

/// Drives rounds for one configuration.
#[derive(Debug)]
pub struct Trainer<'a> {
    problem: &'a FederatedProblem,
    config: AlgoConfig,
    state: RoundState,
    history: RoundHistory,
}

impl<'a> Trainer<'a> {
    /// Evaluates the initial point and, for Fast-FedPG, runs the bootstrap
    /// exchange that supplies the first global direction.
    pub fn new(
        problem: &'a FederatedProblem,
        config: AlgoConfig,
        init: PolicyParams,
    ) -> Result<Self> {
        Self::start(problem, config, init, 0, 0, true)
    }

    /// Continues a run from a checkpoint. Anchors are regenerated from the
    /// same keyed streams as in the original run, and their trajectories are
    /// not counted again.
    pub fn resume(
        problem: &'a FederatedProblem,
        config: AlgoConfig,
        checkpoint: Checkpoint,
    ) -> Result<Self> {
        Self::start(
            problem,
            config,
            checkpoint.global,
            checkpoint.round,
            checkpoint.cumulative_trajectories,
            false,
        )
    }

    fn start(
        problem: &'a FederatedProblem,
        config: AlgoConfig,
        init: PolicyParams,
        round: u64,
        cumulative: u64,
        fresh: bool,
    ) -> Result<Self> {
        config.validate()?;
        if config.n_agents != problem.n_agents() {
            return Err(Error::Config(format!(
                "config expects {} agents but the environment has {}",
                config.n_agents,
                problem.n_agents()
            )));
        }
        if init.n_states() != problem.n_states() || init.n_actions() != problem.n_actions() {
            return Err(Error::Config(
                "initial parameter has the wrong shape".into(),
            ));
        }
        if config.algorithm == Algorithm::Centralized && problem.average().is_none() {
            return Err(Error::Config(
                "the centralized baseline needs a shared kernel (average MDP)".into(),
            ));
        }
        let mut state = RoundState {
            round,
            global: init,
            global_direction: None,
            anchors: Vec::new(),
            local_params: Vec::new(),
            cumulative_trajectories: cumulative,
        };
        let mut trajectories = 0;
        let mut communication = 0;
        if config.algorithm == Algorithm::FastFedpg {
            let ex = global_pg_exchange(problem, &state.global, &config, round)?;
            state.global_direction = Some(ex.global_direction);
            state.anchors = ex.anchors;
            if fresh {
                trajectories = ex.trajectories;
                communication = problem.n_agents() as u64 + 1;
            }
        }
        state.cumulative_trajectories += trajectories;
        let mut history = RoundHistory::default();
        if fresh {
            let (objective, grad) = problem.evaluate(&state.global)?;
            history.rows.push(RoundMetrics {
                round,
                objective,
                grad_norm_sq: grad.norm_sq(),
                drift_max: 0.0,
                drift_mean: 0.0,
                drift_peak: 0.0,
                trajectories,
                cumulative_trajectories: state.cumulative_trajectories,
                communication,
            });
        }
        Ok(Self {
            problem,
            config,
            state,
            history,
        })
    }

    pub fn state(&self) -> &RoundState {
        &self.state
    }

    pub fn history(&self) -> &RoundHistory {
        &self.history
    }

    pub fn into_history(self) -> RoundHistory {
        self.history
    }

    pub fn config(&self) -> &AlgoConfig {
        &self.config
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            round: self.state.round,
            global: self.state.global.clone(),
            cumulative_trajectories: self.state.cumulative_trajectories,
        }
    }

    /// Executes one round and appends its metrics to the history.
    pub fn step(&mut self) -> Result<RoundReport> {
        let report = run_round(&mut self.state, self.problem, &self.config)?;
        self.history.rows.push(report.metrics.clone());
        Ok(report)
    }

    pub fn run(mut self, rounds: usize) -> Result<RoundHistory> {
        for _ in 0..rounds {
            self.step()?;
        }
        Ok(self.history)
    }
}

/// Advances `state` by one round of the configured algorithm.
pub fn run_round(
    state: &mut RoundState,
    problem: &FederatedProblem,
    config: &AlgoConfig,
) -> Result<RoundReport> {
    let n = problem.n_agents();
    let round = state.round;
    let previous_global = state.global.clone();
    let (_, previous_grad) = problem.evaluate(&previous_global)?;

    let mut trajectories = 0;
    let mut communication = 0;
    let mut outcomes = Vec::new();

    match config.algorithm {
        Algorithm::FastFedpg | Algorithm::FedavgPg => {
            let corrected = config.algorithm == Algorithm::FastFedpg;
            if corrected {
                let fingerprint = previous_global.fingerprint();
                if state.anchors.len() != n {
                    return Err(Error::Config(format!(
                        "expected {n} anchors, found {}",
                        state.anchors.len()
                    )));
                }
                if let Some(i) = state.anchors.iter().position(|a| a.at != fingerprint) {
                    return Err(Error::StaleAnchor { agent: i });
                }
            }
            let global_direction = state.global_direction.as_ref();
            if corrected && global_direction.is_none() {
                return Err(Error::Config("missing global direction".into()));
            }
            outcomes = (0..n)
                .into_par_iter()
                .map(|i| {
                    let correction = if corrected {
                        Some((&state.anchors[i], global_direction.expect("checked above")))
                    } else {
                        None
                    };
                    run_local(
                        i,
                        problem.agent(i),
                        &previous_global,
                        correction,
                        config,
                        round,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let deltas: Vec<Vec<f64>> = outcomes.iter().map(|o| o.delta.clone()).collect();
            state.global = server_aggregate(&previous_global, &deltas, config.global_step)?;
            state.local_params = outcomes
                .iter()
                .map(|o| {
                    let mut p = previous_global.clone();
                    for (t, d) in p.as_mut_slice().iter_mut().zip(&o.delta) {
                        *t += d;
                    }
                    p
                })
                .collect();
            trajectories += outcomes.iter().map(|o| o.trajectories).sum::<u64>();
            communication += n as u64 + 1;

            if corrected {
                let ex = global_pg_exchange(problem, &state.global, config, round + 1)?;
                trajectories += ex.trajectories;
                communication += n as u64 + 1;
                state.global_direction = Some(ex.global_direction);
                state.anchors = ex.anchors;
            }
        }
        Algorithm::Centralized => {
            let avg = problem.average().ok_or_else(|| {
                Error::Config("centralized baseline needs the average MDP".into())
            })?;
            let key = StreamKey::new(config.master_seed, 0, round, 0, Purpose::Centralized);
            let grad = agent_gradient(avg, &previous_global, config, key)?;
            state.global = previous_global.descend(config.effective_step(), grad.entries())?;
            trajectories += trajectories_per_call(config);
        }
    }

    state.round += 1;
    state.cumulative_trajectories += trajectories;

    let (objective, grad) = problem.evaluate(&state.global)?;
    let h = config.local_steps;
    let drift_sums: Vec<f64> = outcomes
        .iter()
        .map(|o| o.drift_trace[..h].iter().sum())
        .collect();
    let drift_peak = outcomes
        .iter()
        .flat_map(|o| o.drift_trace[..h].iter().copied())
        .fold(0.0, f64::max);
    let metrics = RoundMetrics {
        round: state.round,
        objective,
        grad_norm_sq: grad.norm_sq(),
        drift_max: drift_sums.iter().copied().fold(0.0, f64::max),
        drift_mean: if drift_sums.is_empty() {
            0.0
        } else {
            drift_sums.iter().sum::<f64>() / drift_sums.len() as f64
        },
        drift_peak,
        trajectories,
        cumulative_trajectories: state.cumulative_trajectories,
        communication,
    };
    Ok(RoundReport {
        metrics,
        previous_global,
        previous_grad_norm_sq: previous_grad.norm_sq(),
        outcomes,
    })
}

/// Runs `config.rounds` rounds from `init`; the history has `T + 1` rows.
pub fn run_training(
    problem: &FederatedProblem,
    config: &AlgoConfig,
    init: PolicyParams,
) -> Result<RoundHistory> {
    Trainer::new(problem, config.clone(), init)?.run(config.rounds)
}

/// Gradient descent on the average MDP with the effective step `H·η·α_g`,
/// one step per round.
pub fn run_centralized(
    problem: &FederatedProblem,
    config: &AlgoConfig,
    init: PolicyParams,
) -> Result<RoundHistory> {
    let config = AlgoConfig {
        algorithm: Algorithm::Centralized,
        ..config.clone()
    };
    run_training(problem, &config, init)
}

/// Provenance the runtime attaches to gradients in a given mode.
pub fn provenance_for(source: GradientSource) -> Provenance {
    match source {
        GradientSource::Exact => Provenance::Exact,
        GradientSource::Sampled => Provenance::Sampled,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{apply_regret_transform, EnvGenerator};

    fn config(algorithm: Algorithm, source: GradientSource, n: usize, h: usize) -> AlgoConfig {
        AlgoConfig {
            local_step: 0.1,
            global_step: 1.0,
            local_steps: h,
            rounds: 3,
            horizon: 4,
            n_agents: n,
            gradient_source: source,
            algorithm,
            master_seed: 17,
        }
    }

    fn problem(n: usize) -> FederatedProblem {
        let env = EnvGenerator::new(5, 3, 2, n, 0.6).generate().unwrap();
        FederatedProblem::from_env(&apply_regret_transform(&env)).unwrap()
    }

    fn theta(seed: u64) -> PolicyParams {
        PolicyParams::from_logits(
            3,
            2,
            (0..6)
                .map(|k| ((k as u64 + seed) as f64 * 0.9).sin())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn first_local_step_follows_the_global_direction() {
        let t = theta(1);
        let anchor = GradVector::new(vec![0.3, -0.2, 0.1, 0.0, 0.5, -0.5], Provenance::Exact);
        let global = GradVector::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], Provenance::Exact);
        let next = local_update_fastfedpg(&t, &anchor, &global, &anchor, 0.1).unwrap();
        let expect = t.descend(0.1, global.entries()).unwrap();
        assert_eq!(next, expect);
    }

    #[test]
    fn zero_step_leaves_parameters() {
        let t = theta(2);
        let g = GradVector::new(vec![1.0; 6], Provenance::Exact);
        assert_eq!(local_update_fastfedpg(&t, &g, &g, &g, 0.0).unwrap(), t);
        assert_eq!(local_update_fedavg(&t, &g, 0.0).unwrap(), t);
    }

    #[test]
    fn corrected_step_reduces_to_plain_step_when_anchor_is_global() {
        let t = theta(3);
        let anchor = GradVector::new(vec![0.25, -0.5, 0.125, 1.0, 0.0, 2.0], Provenance::Exact);
        let g = GradVector::new(vec![0.5, 0.25, -1.0, 0.75, 0.5, 0.0], Provenance::Exact);
        assert_eq!(
            local_update_fastfedpg(&t, &anchor, &anchor, &g, 0.1).unwrap(),
            local_update_fedavg(&t, &g, 0.1).unwrap()
        );
    }

    #[test]
    fn local_update_rejects_shape_mismatch() {
        let t = theta(3);
        let short = GradVector::zeros(5, Provenance::Exact);
        let ok = GradVector::zeros(6, Provenance::Exact);
        assert!(local_update_fastfedpg(&t, &short, &ok, &ok, 0.1).is_err());
        assert!(local_update_fedavg(&t, &short, 0.1).is_err());
    }

    #[test]
    fn aggregation_cases() {
        let g = PolicyParams::from_logits(1, 2, vec![1.0, -1.0]).unwrap();
        let deltas = vec![vec![0.5, 0.25], vec![-0.25, 0.75]];
        let mean = server_aggregate(&g, &deltas, 1.0).unwrap();
        assert_eq!(mean.as_slice(), &[1.125, -0.5]);
        let locals = [[1.5, -0.75], [0.75, -0.25]];
        assert_eq!(
            mean.as_slice(),
            &[
                (locals[0][0] + locals[1][0]) / 2.0,
                (locals[0][1] + locals[1][1]) / 2.0
            ]
        );
        assert_eq!(server_aggregate(&g, &deltas, 0.0).unwrap(), g);
        let one = server_aggregate(&g, &deltas[..1], 0.5).unwrap();
        assert_eq!(one.as_slice(), &[1.25, -0.875]);
        assert!(server_aggregate(&g, &[], 1.0).is_err());
    }

    #[test]
    fn exact_exchange_matches_average_mdp_gradient() {
        let p = problem(4);
        let t = theta(4);
        let cfg = config(Algorithm::FastFedpg, GradientSource::Exact, 4, 2);
        let ex = global_pg_exchange(&p, &t, &cfg, 0).unwrap();
        let direct = exact_policy_gradient(&t, p.average().unwrap()).unwrap();
        assert!(ex.global_direction.max_abs_diff(&direct) <= 1e-10);
        assert_eq!(ex.trajectories, 0);
    }

    #[test]
    fn single_agent_exchange_is_that_agents_estimate() {
        let p = problem(1);
        let t = theta(5);
        let cfg = config(Algorithm::FastFedpg, GradientSource::Sampled, 1, 2);
        let ex = global_pg_exchange(&p, &t, &cfg, 3).unwrap();
        let key = StreamKey::new(cfg.master_seed, 0, 3, 0, Purpose::Exchange);
        let own = sample_estimate(&t, p.agent(0), cfg.horizon, key).unwrap();
        assert_eq!(ex.global_direction.entries(), own.entries());
        assert_eq!(ex.trajectories, 1);
        let again = global_pg_exchange(&p, &t, &cfg, 3).unwrap();
        assert_eq!(again.global_direction, ex.global_direction);
    }

    #[test]
    fn one_local_step_is_a_centralized_gradient_step() {
        let p = problem(3);
        let cfg = config(Algorithm::FastFedpg, GradientSource::Exact, 3, 1);
        let mut trainer = Trainer::new(&p, cfg.clone(), theta(6)).unwrap();
        for _ in 0..5 {
            let before = trainer.state().global.clone();
            let g = trainer.state().global_direction.clone().unwrap();
            trainer.step().unwrap();
            let expect = before.descend(cfg.local_step, g.entries()).unwrap();
            assert_eq!(trainer.state().global, expect);
            // and g is ∇J of the average MDP up to the oracle identity
            let direct = exact_policy_gradient(&before, p.average().unwrap()).unwrap();
            assert!(g.max_abs_diff(&direct) < 1e-12);
        }
    }

    #[test]
    fn sampled_rounds_consume_nh_plus_n_trajectories() {
        let p = problem(3);
        let cfg = config(Algorithm::FastFedpg, GradientSource::Sampled, 3, 4);
        let hist = run_training(&p, &cfg, theta(7)).unwrap();
        assert_eq!(hist.len(), 4);
        assert_eq!(hist.rows[0].trajectories, 3);
        for row in &hist.rows[1..] {
            assert_eq!(row.trajectories, 3 * 4 + 3);
            assert_eq!(row.communication, 2 * 3 + 2);
        }
        assert_eq!(hist.last().unwrap().cumulative_trajectories, 3 + 3 * 15);
        let exact = run_training(
            &p,
            &AlgoConfig {
                gradient_source: GradientSource::Exact,
                ..cfg
            },
            theta(7),
        )
        .unwrap();
        assert!(exact.rows.iter().all(|r| r.trajectories == 0));
    }

    #[test]
    fn first_step_drift_is_eta_times_global_gradient_norm() {
        let p = problem(4);
        let cfg = config(Algorithm::FastFedpg, GradientSource::Exact, 4, 3);
        let mut trainer = Trainer::new(&p, cfg.clone(), theta(8)).unwrap();
        for _ in 0..3 {
            let report = trainer.step().unwrap();
            let expect = cfg.local_step * report.previous_grad_norm_sq.sqrt();
            for o in &report.outcomes {
                assert!((o.drift_trace[1].sqrt() - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_rounds_keeps_only_the_initial_point() {
        let p = problem(2);
        let cfg = AlgoConfig {
            rounds: 0,
            ..config(Algorithm::FastFedpg, GradientSource::Sampled, 2, 2)
        };
        let hist = run_training(&p, &cfg, theta(9)).unwrap();
        assert_eq!(hist.len(), 1);
        assert_eq!(hist.rows[0].round, 0);
        let c = run_centralized(&p, &cfg, theta(9)).unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn centralized_uses_one_trajectory_per_step() {
        let p = problem(2);
        let cfg = config(Algorithm::Centralized, GradientSource::Sampled, 2, 5);
        let hist = run_centralized(&p, &cfg, theta(9)).unwrap();
        assert!(hist.rows[1..].iter().all(|r| r.trajectories == 1));
    }

    #[test]
    fn centralized_matches_single_agent_fast_fedpg() {
        let env = apply_regret_transform(&EnvGenerator::new(5, 3, 2, 1, 0.0).generate().unwrap());
        let p = FederatedProblem::from_env(&env).unwrap();
        let cfg = config(Algorithm::FastFedpg, GradientSource::Exact, 1, 1);
        let fed = run_training(&p, &cfg, theta(10)).unwrap();
        let cen = run_centralized(&p, &cfg, theta(10)).unwrap();
        for (a, b) in fed.rows.iter().zip(&cen.rows) {
            assert!((a.objective - b.objective).abs() <= 1e-14);
        }
    }

    #[test]
    fn stale_anchor_is_rejected() {
        let p = problem(2);
        let cfg = config(Algorithm::FastFedpg, GradientSource::Exact, 2, 2);
        let mut trainer = Trainer::new(&p, cfg.clone(), theta(11)).unwrap();
        trainer.state.anchors[1].at ^= 1;
        assert!(matches!(
            trainer.step(),
            Err(Error::StaleAnchor { agent: 1 })
        ));
    }

    #[test]
    fn agent_count_must_match() {
        let p = problem(2);
        let cfg = config(Algorithm::FastFedpg, GradientSource::Exact, 3, 2);
        assert!(Trainer::new(&p, cfg, theta(1)).is_err());
    }

    #[test]
    fn checkpoint_text_round_trip() {
        let c = Checkpoint {
            round: 12,
            global: theta(12),
            cumulative_trajectories: 345,
        };
        let mut buf = Vec::new();
        c.write_text(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("fedpg-checkpoint 12 345\nfedpg-theta 3 2\n"));
        let mut lines = text.lines().map(|l| Ok(l.to_string()));
        assert_eq!(Checkpoint::read_text(&mut lines).unwrap(), c);
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let p = problem(3);
        for algorithm in [
            Algorithm::FastFedpg,
            Algorithm::FedavgPg,
            Algorithm::Centralized,
        ] {
            let cfg = AlgoConfig {
                rounds: 6,
                ..config(algorithm, GradientSource::Sampled, 3, 2)
            };
            let full = run_training(&p, &cfg, theta(13)).unwrap();

            let mut first = Trainer::new(&p, cfg.clone(), theta(13)).unwrap();
            for _ in 0..2 {
                first.step().unwrap();
            }
            let mut text = Vec::new();
            first.checkpoint().write_text(&mut text).unwrap();
            let text = String::from_utf8(text).unwrap();
            let cp = Checkpoint::read_text(&mut text.lines().map(|l| Ok(l.to_string()))).unwrap();
            let rest = Trainer::resume(&p, cfg.clone(), cp)
                .unwrap()
                .run(4)
                .unwrap();
            assert_eq!(&full.rows[3..], &rest.rows[..], "{algorithm}");
        }
    }
}
