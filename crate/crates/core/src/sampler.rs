//! Truncated rollouts and the truncated policy-gradient estimator
//!
//! ```text
//! ĝ_K(θ) = (Σ_{t<K} γ^t r_t) · (Σ_{k<K} ∇log π_θ(a_k|s_k))
//! ```
//!
//! The score sum runs over the whole trajectory for the single return factor;
//! no causality correction is applied.

use std::io::Write;

use crate::error::{Error, Result};
use crate::grad::{GradVector, Provenance};
use crate::mdp::TabularMdp;
use crate::policy::{sample_index, PolicyClass, PolicyParams, Softmax};
use crate::rng::{derive_stream, RngStream, StreamKey};

/// Upper bound on the weighted paths [`expected_truncated_gradient`] will
/// enumerate.
pub const ENUMERATION_CAP: u128 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
}

/// A length-`K` rollout. Trajectories never leave the agent that produced
/// them; only the gradient estimates computed from them do.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    steps: Vec<Step>,
    agent: u64,
    origin: u64,
}

impl Trajectory {
    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn agent(&self) -> u64 {
        self.agent
    }

    /// Fingerprint of the parameters the policy was played with.
    pub fn origin(&self) -> u64 {
        self.origin
    }

    /// Debug dump, one `t s a r` line per step.
    pub fn write_dump(&self, out: &mut impl Write) -> std::io::Result<()> {
        for (t, step) in self.steps.iter().enumerate() {
            writeln!(out, "{t} {} {} {:e}", step.state, step.action, step.reward)?;
        }
        Ok(())
    }
}

/// Plays `π_θ` on `mdp` for `horizon` steps starting from `s₀ ~ ρ`.
pub fn rollout(
    theta: &PolicyParams,
    mdp: &TabularMdp,
    horizon: usize,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(Error::Config("rollout horizon must be at least 1".into()));
    }
    let mut probs = vec![0.0; mdp.n_actions()];
    let mut state = sample_index(mdp.initial_dist(), rng);
    let mut steps = Vec::with_capacity(horizon);
    for t in 0..horizon {
        Softmax::distribution_into(theta, state, &mut probs);
        let action = sample_index(&probs, rng);
        steps.push(Step {
            state,
            action,
            reward: mdp.reward(state, action),
        });
        if t + 1 < horizon {
            state = sample_index(mdp.next_state_dist(state, action), rng);
        }
    }
    Ok(Trajectory {
        steps,
        agent: rng.key().agent,
        origin: theta.fingerprint(),
    })
}

/// The truncated estimator on one trajectory, double sum as written.
pub fn truncated_pg_estimate(
    theta: &PolicyParams,
    trajectory: &Trajectory,
    discount: f64,
) -> GradVector {
    let mut ret = 0.0;
    let mut weight = 1.0;
    for step in trajectory.steps() {
        ret += weight * step.reward;
        weight *= discount;
    }
    let mut grad = vec![0.0; theta.len()];
    if ret != 0.0 {
        for step in trajectory.steps() {
            Softmax.accumulate_score(theta, step.state, step.action, ret, &mut grad);
        }
    }
    GradVector::new(grad, Provenance::Sampled)
}

/// One rollout plus one estimate, from the stream at `key`.
pub fn sample_estimate(
    theta: &PolicyParams,
    mdp: &TabularMdp,
    horizon: usize,
    key: StreamKey,
) -> Result<GradVector> {
    let mut rng = derive_stream(key);
    let traj = rollout(theta, mdp, horizon, &mut rng)?;
    Ok(truncated_pg_estimate(theta, &traj, mdp.discount()))
}

/// Number of weighted paths the enumeration would visit, `(|S||A|)^K |S|`.
pub fn enumeration_size(mdp: &TabularMdp, horizon: usize) -> u128 {
    let sa = (mdp.n_states() * mdp.n_actions()) as u128;
    let mut count = mdp.n_states() as u128;
    for _ in 0..horizon {
        count = count.saturating_mul(sa);
    }
    count
}

struct Enumerator<'a> {
    theta: &'a PolicyParams,
    mdp: &'a TabularMdp,
    horizon: usize,
    pi: Vec<f64>,
    /// `score_stack[t]` is the score sum over steps `< t`.
    score_stack: Vec<Vec<f64>>,
    out: Vec<f64>,
}

impl Enumerator<'_> {
    fn visit(&mut self, t: usize, state: usize, prob: f64, ret: f64, discount_t: f64) {
        let na = self.mdp.n_actions();
        for action in 0..na {
            let p_a = self.pi[state * na + action];
            if p_a == 0.0 {
                continue;
            }
            let prob_a = prob * p_a;
            let ret_a = ret + discount_t * self.mdp.reward(state, action);

            let (head, tail) = self.score_stack.split_at_mut(t + 1);
            let next = &mut tail[0];
            next.copy_from_slice(&head[t]);
            Softmax.accumulate_score(self.theta, state, action, 1.0, next);

            if t + 1 == self.horizon {
                let w = prob_a * ret_a;
                for (o, s) in self.out.iter_mut().zip(&self.score_stack[t + 1]) {
                    *o += w * s;
                }
            } else {
                let gamma = self.mdp.discount();
                let dist = self.mdp.next_state_dist(state, action).to_vec();
                for (next_state, &p) in dist.iter().enumerate() {
                    if p > 0.0 {
                        self.visit(t + 1, next_state, prob_a * p, ret_a, discount_t * gamma);
                    }
                }
            }
        }
    }
}

/// `E[ĝ_K(θ)]` by enumerating every length-`K` trajectory.
pub fn expected_truncated_gradient(
    theta: &PolicyParams,
    mdp: &TabularMdp,
    horizon: usize,
) -> Result<GradVector> {
    if horizon == 0 {
        return Err(Error::Config("rollout horizon must be at least 1".into()));
    }
    let count = enumeration_size(mdp, horizon);
    if count > ENUMERATION_CAP {
        return Err(Error::EnumerationInfeasible {
            count,
            cap: ENUMERATION_CAP,
        });
    }
    let na = mdp.n_actions();
    let mut pi = vec![0.0; theta.len()];
    for s in 0..mdp.n_states() {
        Softmax::distribution_into(theta, s, &mut pi[s * na..(s + 1) * na]);
    }
    let mut e = Enumerator {
        theta,
        mdp,
        horizon,
        pi,
        score_stack: vec![vec![0.0; theta.len()]; horizon + 1],
        out: vec![0.0; theta.len()],
    };
    for (s0, &p) in mdp.initial_dist().iter().enumerate() {
        if p > 0.0 {
            e.visit(0, s0, p, 0.0, 1.0);
        }
    }
    Ok(GradVector::new(e.out, Provenance::ExpectedTruncated))
}

/// Coordinatewise sample statistics of repeated estimates at a fixed θ.
#[derive(Debug, Clone)]
pub struct EstimateStats {
    pub samples: usize,
    pub mean: Vec<f64>,
    /// Unbiased per-coordinate variance.
    pub variance: Vec<f64>,
    /// `E‖ĝ − ḡ‖²`, the total variance.
    pub total_variance: f64,
}

impl EstimateStats {
    pub fn standard_error(&self) -> Vec<f64> {
        let m = self.samples as f64;
        self.variance.iter().map(|v| (v / m).sqrt()).collect()
    }
}

/// Draws `samples` independent estimates (stream `local_step` = sample
/// index under `key`) and summarizes them with Welford updates.
pub fn estimate_statistics(
    theta: &PolicyParams,
    mdp: &TabularMdp,
    horizon: usize,
    samples: usize,
    key: StreamKey,
) -> Result<EstimateStats> {
    if samples < 2 {
        return Err(Error::InsufficientData("need at least two samples".into()));
    }
    let d = theta.len();
    let mut mean = vec![0.0; d];
    let mut m2 = vec![0.0; d];
    for i in 0..samples {
        let g = sample_estimate(
            theta,
            mdp,
            horizon,
            StreamKey {
                local_step: i as u64,
                ..key
            },
        )?;
        let n = (i + 1) as f64;
        for k in 0..d {
            let x = g.entries()[k];
            let delta = x - mean[k];
            mean[k] += delta / n;
            m2[k] += delta * (x - mean[k]);
        }
    }
    let variance: Vec<f64> = m2.iter().map(|v| v / (samples - 1) as f64).collect();
    let total_variance = variance.iter().sum();
    Ok(EstimateStats {
        samples,
        mean,
        variance,
        total_variance,
    })
}
