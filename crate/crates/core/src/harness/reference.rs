//! Reference optimum for gap measurements.
//!
//! The softmax optimum sits at infinity whenever the optimal policy is
//! deterministic, so `J(θ*)` is approximated by a long exact-gradient descent
//! run that stops once `‖∇J‖` falls below a certificate threshold. A growing
//! step with Armijo backtracking keeps the run short once the policy
//! saturates. [`optimal_objective`] solves the same problem by policy
//! iteration for cross-checking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Lu;
use crate::mdp::TabularMdp;
use crate::policy::PolicyParams;
use crate::runtime::FederatedProblem;

/// Default certificate on `‖∇J(θ_ref)‖`.
pub const CERTIFICATE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceOptions {
    pub certificate: f64,
    pub max_iterations: usize,
    pub initial_step: f64,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        Self {
            certificate: CERTIFICATE,
            max_iterations: 200_000,
            initial_step: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub objective: f64,
    /// `‖∇J‖` at the returned parameter.
    pub grad_norm: f64,
    pub iterations: usize,
    pub certified: bool,
    pub params: PolicyParams,
}

/// Minimizes the global objective by exact gradient descent from `init`.
pub fn certified_optimum(
    problem: &FederatedProblem,
    init: &PolicyParams,
    options: &ReferenceOptions,
) -> Result<Reference> {
    if !(options.certificate > 0.0) || !(options.initial_step > 0.0) {
        return Err(Error::Config(
            "certificate and initial step must be positive".into(),
        ));
    }
    let mut theta = init.clone();
    let (mut j, mut g) = problem.evaluate(&theta)?;
    let mut step = options.initial_step;
    let mut iterations = 0;
    while g.norm() > options.certificate && iterations < options.max_iterations {
        iterations += 1;
        let g_sq = g.norm_sq();
        step *= 2.0;
        loop {
            let candidate = theta.descend(step, g.entries())?;
            let (j_new, g_new) = problem.evaluate(&candidate)?;
            if j_new <= j - 0.5 * step * g_sq {
                theta = candidate;
                j = j_new;
                g = g_new;
                break;
            }
            step *= 0.5;
            if step * g_sq.sqrt() < 1e-300 {
                // no representable decrease left
                return Ok(Reference {
                    objective: j,
                    grad_norm: g.norm(),
                    iterations,
                    certified: false,
                    params: theta,
                });
            }
        }
    }
    let grad_norm = g.norm();
    Ok(Reference {
        objective: j,
        grad_norm,
        iterations,
        certified: grad_norm <= options.certificate,
        params: theta,
    })
}

/// Value of a deterministic policy, one action per state.
fn deterministic_values(mdp: &TabularMdp, policy: &[usize]) -> Result<Vec<f64>> {
    let ns = mdp.n_states();
    let gamma = mdp.discount();
    let mut a = vec![0.0; ns * ns];
    let mut r = vec![0.0; ns];
    for s in 0..ns {
        let act = policy[s];
        r[s] = mdp.reward(s, act);
        for (next, p) in mdp.next_state_dist(s, act).iter().enumerate() {
            a[s * ns + next] -= gamma * p;
        }
        a[s * ns + s] += 1.0;
    }
    Ok(Lu::factor(ns, a)?.solve(&r))
}

/// `min_π ρᵀ J^π` over all policies by policy iteration (minimization).
pub fn optimal_objective(mdp: &TabularMdp) -> Result<f64> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let gamma = mdp.discount();
    let mut policy = vec![0usize; ns];
    for _ in 0..10_000 {
        let v = deterministic_values(mdp, &policy)?;
        let mut changed = false;
        for s in 0..ns {
            let q = |a: usize| -> f64 {
                mdp.reward(s, a)
                    + gamma
                        * mdp
                            .next_state_dist(s, a)
                            .iter()
                            .zip(&v)
                            .map(|(p, x)| p * x)
                            .sum::<f64>()
            };
            let current = q(policy[s]);
            let (best, best_q) = (0..na)
                .map(|a| (a, q(a)))
                .fold(
                    (policy[s], current),
                    |acc, c| if c.1 < acc.1 { c } else { acc },
                );
            // strict improvement beyond roundoff to avoid cycling on ties
            if best_q < current - 1e-13 * (1.0 + current.abs()) {
                policy[s] = best;
                changed = true;
            }
        }
        if !changed {
            return Ok(mdp.initial_dist().iter().zip(&v).map(|(p, x)| p * x).sum());
        }
    }
    Err(Error::Config("policy iteration did not terminate".into()))
}
