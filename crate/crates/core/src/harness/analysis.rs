//! Summaries computed from runs and metrics: de-biasing, speedup,
//! truncation decay, stationarity, and empirical problem constants.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::experiment::{MetricsRecord, MetricsRow};
use crate::mdp::TabularMdp;
use crate::oracle::{estimate_smoothness, exact_policy_gradient};
use crate::policy::PolicyParams;
use crate::rng::{derive_stream, Purpose, StreamKey};
use crate::runtime::{AlgoConfig, Algorithm, FederatedProblem, Trainer};
use crate::sampler::{estimate_statistics, expected_truncated_gradient};

/// Terminal gradient norms of Fast-FedPG and FedAvg-PG under one budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasSummary {
    pub grad_norm_fast: f64,
    pub grad_norm_fedavg: f64,
    /// `grad_norm_fedavg / grad_norm_fast`.
    pub ratio: f64,
    /// Largest `|θ̄_fast − θ̄_fedavg|` entry over all rounds.
    pub max_param_gap: f64,
}

/// Runs both algorithms for `config.rounds` rounds from `init` with the same
/// `η`, `H`, `α_g` and mode.
pub fn debias_comparison(
    problem: &FederatedProblem,
    config: &AlgoConfig,
    init: &PolicyParams,
) -> Result<DebiasSummary> {
    let fast_cfg = AlgoConfig {
        algorithm: Algorithm::FastFedpg,
        ..config.clone()
    };
    let avg_cfg = AlgoConfig {
        algorithm: Algorithm::FedavgPg,
        ..config.clone()
    };
    let mut fast = Trainer::new(problem, fast_cfg, init.clone())?;
    let mut avg = Trainer::new(problem, avg_cfg, init.clone())?;
    let gap = |a: &Trainer, b: &Trainer| -> f64 {
        a.state()
            .global
            .as_slice()
            .iter()
            .zip(b.state().global.as_slice())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    let mut max_param_gap = gap(&fast, &avg);
    for _ in 0..config.rounds {
        fast.step()?;
        avg.step()?;
        max_param_gap = max_param_gap.max(gap(&fast, &avg));
    }
    let norm = |t: &Trainer| t.history().last().map_or(0.0, |m| m.grad_norm_sq.sqrt());
    let grad_norm_fast = norm(&fast);
    let grad_norm_fedavg = norm(&avg);
    Ok(DebiasSummary {
        grad_norm_fast,
        grad_norm_fedavg,
        ratio: grad_norm_fedavg / grad_norm_fast,
        max_param_gap,
    })
}

/// Terminal optimality gap statistics at one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub point: usize,
    pub n_agents: usize,
    pub mean_gap: f64,
    /// Sample standard deviation across seeds.
    pub std_gap: f64,
    pub seeds: usize,
}

impl SpeedupRow {
    pub fn standard_error(&self) -> f64 {
        self.std_gap / (self.seeds as f64).sqrt()
    }
}

/// Mean and spread of `J(θ̄⁽ᵀ⁾) − J_ref` per sweep point.
pub fn speedup_analysis(record: &MetricsRecord) -> Result<Vec<SpeedupRow>> {
    let mut out = Vec::new();
    for (point, runs) in record.points() {
        if runs.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "point {point} has {} seed(s); speedup statistics need at least 2",
                runs.len()
            )));
        }
        let gaps: Vec<f64> = runs
            .iter()
            .map(|rows| {
                let last = rows.last().expect("runs are nonempty");
                last.objective - last.j_ref
            })
            .collect();
        let (mean, std) = mean_std(&gaps);
        out.push(SpeedupRow {
            point,
            n_agents: runs[0][0].n_agents,
            mean_gap: mean,
            std_gap: std,
            seeds: gaps.len(),
        });
    }
    Ok(out)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Truncation errors `e_K = ‖∇_K J − ∇J‖` and a log-linear fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationFit {
    pub horizons: Vec<usize>,
    pub errors: Vec<f64>,
    /// Slope of `ln e_K` against `K`; absent when fewer than two errors
    /// exceed [`FIT_FLOOR`].
    pub slope: Option<f64>,
    /// Intercept, an estimate of `ln D`.
    pub intercept: Option<f64>,
    /// Root-mean-square residual of the fit in log space.
    pub residual: Option<f64>,
}

/// Errors at or below this level are treated as exact and left out of the fit.
pub const FIT_FLOOR: f64 = 1e-12;

pub fn truncation_decay_analysis(
    mdp: &TabularMdp,
    theta: &PolicyParams,
    horizons: &[usize],
) -> Result<TruncationFit> {
    let exact = exact_policy_gradient(theta, mdp)?;
    let errors = horizons
        .iter()
        .map(|&k| {
            let g = expected_truncated_gradient(theta, mdp, k)?;
            Ok(g.entries()
                .iter()
                .zip(exact.entries())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt())
        })
        .collect::<Result<Vec<f64>>>()?;
    let pts: Vec<(f64, f64)> = horizons
        .iter()
        .zip(&errors)
        .filter(|(_, &e)| e > FIT_FLOOR)
        .map(|(&k, &e)| (k as f64, e.ln()))
        .collect();
    let (slope, intercept, residual) = match least_squares(&pts) {
        Some((m, b, r)) => (Some(m), Some(b), Some(r)),
        None => (None, None, None),
    };
    Ok(TruncationFit {
        horizons: horizons.to_vec(),
        errors,
        slope,
        intercept,
        residual,
    })
}

/// Ordinary least squares `y = m x + b`; returns `(m, b, rms residual)`.
fn least_squares(pts: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let m = sxy / sxx;
    let b = my - m * mx;
    let rss: f64 = pts.iter().map(|p| (p.1 - (m * p.0 + b)).powi(2)).sum();
    Some((m, b, (rss / n).sqrt()))
}

/// Running statistics of `‖∇J(θ̄⁽ᵗ⁾)‖²`. Entry `t` covers the first `t + 1`
/// recorded rounds, so `cumulative_mean[T − 1] = (1/T) Σ_{t<T} ‖∇J(θ̄⁽ᵗ⁾)‖²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityCurve {
    pub grad_norm_sq: Vec<f64>,
    pub cumulative_mean: Vec<f64>,
    pub running_min: Vec<f64>,
}

impl StationarityCurve {
    /// Cumulative mean over the first `t` rounds.
    pub fn mean_at(&self, t: usize) -> Option<f64> {
        t.checked_sub(1)
            .and_then(|i| self.cumulative_mean.get(i).copied())
    }

    pub fn min_grad_norm_sq(&self) -> Option<f64> {
        self.running_min.last().copied()
    }
}

pub fn stationarity_analysis(grad_norm_sq: &[f64]) -> StationarityCurve {
    let mut cumulative_mean = Vec::with_capacity(grad_norm_sq.len());
    let mut running_min = Vec::with_capacity(grad_norm_sq.len());
    let mut sum = 0.0;
    let mut min = f64::INFINITY;
    for (i, &g) in grad_norm_sq.iter().enumerate() {
        sum += g;
        min = min.min(g);
        cumulative_mean.push(sum / (i + 1) as f64);
        running_min.push(min);
    }
    StationarityCurve {
        grad_norm_sq: grad_norm_sq.to_vec(),
        cumulative_mean,
        running_min,
    }
}

/// Per-round means over the seeds of one point, for the columns plotted.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedAverage {
    pub round: u64,
    pub objective: f64,
    pub grad_norm_sq: f64,
    pub drift: f64,
    pub trajectories: f64,
}

/// Averages runs of equal length round by round. Runs of unequal length are
/// averaged over the common prefix.
pub fn seed_average(runs: &[Vec<&MetricsRow>]) -> Vec<SeedAverage> {
    let len = runs.iter().map(|r| r.len()).min().unwrap_or(0);
    let n = runs.len() as f64;
    (0..len)
        .map(|t| {
            let mean =
                |f: &dyn Fn(&MetricsRow) -> f64| runs.iter().map(|r| f(r[t])).sum::<f64>() / n;
            SeedAverage {
                round: runs[0][t].round,
                objective: mean(&|r| r.objective),
                grad_norm_sq: mean(&|r| r.grad_norm_sq),
                drift: mean(&|r| r.drift_max),
                trajectories: mean(&|r| r.cumulative_trajectories as f64),
            }
        })
        .collect()
}

/// Random logits, uniform in `[−scale, scale]`, from the diagnostic stream.
pub fn random_params(
    n_states: usize,
    n_actions: usize,
    scale: f64,
    seed: u64,
    index: u64,
) -> PolicyParams {
    let mut rng = derive_stream(StreamKey::new(seed, index, 0, 0, Purpose::Diagnostic));
    let logits = (0..n_states * n_actions)
        .map(|_| rng.gen_range(-scale..=scale))
        .collect();
    PolicyParams::from_logits(n_states, n_actions, logits).expect("finite logits")
}

/// `L̂`: largest gradient secant ratio over `centers` random points, each
/// probed along `directions` random unit directions at distance `radius`.
pub fn sample_smoothness(
    mdp: &TabularMdp,
    seed: u64,
    centers: usize,
    directions: usize,
    scale: f64,
    radius: f64,
) -> Result<f64> {
    if centers == 0 || directions == 0 || !(radius > 0.0) {
        return Err(Error::InsufficientData(
            "smoothness sampling needs centers, directions and a positive radius".into(),
        ));
    }
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut best: f64 = 0.0;
    for c in 0..centers {
        let center = random_params(ns, na, scale, seed, c as u64);
        for d in 0..directions {
            let mut u = random_params(ns, na, 1.0, seed, (1 << 32) | ((c as u64) << 16) | d as u64);
            let norm: f64 = u.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
            let probe = center
                .as_slice()
                .iter()
                .zip(u.as_mut_slice())
                .map(|(x, v)| x + radius * *v / norm);
            let probe = PolicyParams::from_logits(ns, na, probe.collect())?;
            best = best.max(estimate_smoothness(mdp, &[center.clone(), probe])?);
        }
    }
    Ok(best)
}

/// Sampled-gradient variance at a set of parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    /// `E‖ĝ − E ĝ‖²` at each parameter.
    pub total_variance: Vec<f64>,
    /// `σ̂ = √(max total variance)`.
    pub noise_std: f64,
}

pub fn estimate_gradient_noise(
    mdp: &TabularMdp,
    thetas: &[PolicyParams],
    horizon: usize,
    samples: usize,
    seed: u64,
) -> Result<NoiseReport> {
    let total_variance = thetas
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let key = StreamKey::new(seed, i as u64, 0, 0, Purpose::Diagnostic);
            Ok(estimate_statistics(t, mdp, horizon, samples, key)?.total_variance)
        })
        .collect::<Result<Vec<f64>>>()?;
    let max = total_variance.iter().copied().fold(0.0, f64::max);
    Ok(NoiseReport {
        total_variance,
        noise_std: max.sqrt(),
    })
}
