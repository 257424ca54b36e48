//! Exact evaluation of softmax policies on tabular MDPs.
//!
//! Everything here is closed form: the value function solves
//! `(I − γ P^θ) J = R^θ` by LU factorization, the occupancy measure solves the
//! transposed system, and the gradient is assembled from occupancy, Q-values
//! and scores as
//!
//! ```text
//! ∇J(θ) = 1/(1−γ) · Σ_s d_ρ(s) Σ_a π_θ(a|s) ∇log π_θ(a|s) Q(s,a)
//! ```

use std::fmt;

use crate::error::{Error, Result};
use crate::grad::{GradVector, Provenance};
use crate::linalg::{residual_inf, transpose, Lu};
use crate::mdp::{build_average_mdp, FederatedEnv, TabularMdp};
use crate::policy::{PolicyClass, PolicyParams, Softmax};

/// Residual bound for the Bellman and occupancy solves.
pub const SOLVE_TOLERANCE: f64 = 1e-10;

fn policy_table(theta: &PolicyParams) -> Vec<f64> {
    let na = theta.n_actions();
    let mut table = vec![0.0; theta.len()];
    for s in 0..theta.n_states() {
        Softmax::distribution_into(theta, s, &mut table[s * na..(s + 1) * na]);
    }
    table
}

fn check_dims(theta: &PolicyParams, mdp: &TabularMdp) -> Result<()> {
    if theta.n_states() != mdp.n_states() || theta.n_actions() != mdp.n_actions() {
        return Err(Error::Config(format!(
            "policy is {}x{} but the MDP is {}x{}",
            theta.n_states(),
            theta.n_actions(),
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    Ok(())
}

/// `R^θ(s) = Σ_a π_θ(a|s) R(s,a)`.
pub fn induced_reward(theta: &PolicyParams, mdp: &TabularMdp) -> Vec<f64> {
    let pi = policy_table(theta);
    let na = mdp.n_actions();
    (0..mdp.n_states())
        .map(|s| (0..na).map(|a| pi[s * na + a] * mdp.reward(s, a)).sum())
        .collect()
}

/// `P^θ(s, s') = Σ_a π_θ(a|s) P(s'|s,a)`, row-major `|S|×|S|`.
pub fn induced_transition(theta: &PolicyParams, mdp: &TabularMdp) -> Vec<f64> {
    let pi = policy_table(theta);
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut out = vec![0.0; ns * ns];
    for s in 0..ns {
        for a in 0..na {
            let w = pi[s * na + a];
            for (o, p) in out[s * ns..(s + 1) * ns]
                .iter_mut()
                .zip(mdp.next_state_dist(s, a))
            {
                *o += w * p;
            }
        }
    }
    out
}

/// `I − γ P^θ`.
fn bellman_matrix(theta: &PolicyParams, mdp: &TabularMdp) -> Vec<f64> {
    let ns = mdp.n_states();
    let gamma = mdp.discount();
    let mut m = induced_transition(theta, mdp);
    for (k, x) in m.iter_mut().enumerate() {
        *x = if k / ns == k % ns { 1.0 } else { 0.0 } - gamma * *x;
    }
    m
}

/// Per-state values `J(θ, s)` and the scalar objective `Σ_s ρ(s) J(θ, s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueVector {
    pub values: Vec<f64>,
    pub objective: f64,
}

pub fn solve_value(theta: &PolicyParams, mdp: &TabularMdp) -> Result<ValueVector> {
    check_dims(theta, mdp)?;
    let ns = mdp.n_states();
    let a = bellman_matrix(theta, mdp);
    let r = induced_reward(theta, mdp);
    let values = Lu::factor(ns, a.clone())?.solve(&r);
    let residual = residual_inf(ns, &a, &values, &r);
    if !(residual <= SOLVE_TOLERANCE) {
        return Err(Error::IllConditioned { residual });
    }
    let objective = mdp
        .initial_dist()
        .iter()
        .zip(&values)
        .map(|(p, v)| p * v)
        .sum();
    Ok(ValueVector { values, objective })
}

/// `J(θ) = ρᵀ J(θ, ·)`.
pub fn objective(theta: &PolicyParams, mdp: &TabularMdp) -> Result<f64> {
    Ok(solve_value(theta, mdp)?.objective)
}

/// `Q[s][a]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub n_actions: usize,
    pub values: Vec<f64>,
}

impl QTable {
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    /// Largest violation of `Q(s,a) = R(s,a) + γ Σ_{s'} P(s'|s,a) J(s')`.
    pub fn consistency_gap(&self, mdp: &TabularMdp, value: &ValueVector) -> f64 {
        let mut gap: f64 = 0.0;
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                let cont: f64 = mdp
                    .next_state_dist(s, a)
                    .iter()
                    .zip(&value.values)
                    .map(|(p, v)| p * v)
                    .sum();
                let expect = mdp.reward(s, a) + mdp.discount() * cont;
                gap = gap.max((self.get(s, a) - expect).abs());
            }
        }
        gap
    }
}

fn q_from_values(mdp: &TabularMdp, values: &[f64]) -> QTable {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let gamma = mdp.discount();
    let mut q = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            let cont: f64 = mdp
                .next_state_dist(s, a)
                .iter()
                .zip(values)
                .map(|(p, v)| p * v)
                .sum();
            q.push(mdp.reward(s, a) + gamma * cont);
        }
    }
    QTable {
        n_actions: na,
        values: q,
    }
}

pub fn q_function(theta: &PolicyParams, mdp: &TabularMdp) -> Result<QTable> {
    let value = solve_value(theta, mdp)?;
    Ok(q_from_values(mdp, &value.values))
}

/// Normalized discounted state occupancy `d_ρ = (1−γ) ρᵀ (I − γP^θ)⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMeasure {
    pub weights: Vec<f64>,
}

pub fn occupancy(theta: &PolicyParams, mdp: &TabularMdp) -> Result<OccupancyMeasure> {
    check_dims(theta, mdp)?;
    let ns = mdp.n_states();
    let at = transpose(ns, &bellman_matrix(theta, mdp));
    let rho = mdp.initial_dist();
    let x = Lu::factor(ns, at.clone())?.solve(rho);
    let residual = residual_inf(ns, &at, &x, rho);
    if !(residual <= SOLVE_TOLERANCE) {
        return Err(Error::IllConditioned { residual });
    }
    let scale = 1.0 - mdp.discount();
    Ok(OccupancyMeasure {
        weights: x.into_iter().map(|w| scale * w).collect(),
    })
}

/// The exact policy gradient, assembled from the occupancy measure, the
/// Q-table and the softmax score.
pub fn exact_policy_gradient(theta: &PolicyParams, mdp: &TabularMdp) -> Result<GradVector> {
    let d = occupancy(theta, mdp)?;
    let q = q_function(theta, mdp)?;
    let pi = policy_table(theta);
    let na = mdp.n_actions();
    let prefactor = 1.0 / (1.0 - mdp.discount());
    let mut grad = vec![0.0; theta.len()];
    for s in 0..mdp.n_states() {
        for a in 0..na {
            let weight = prefactor * d.weights[s] * pi[s * na + a] * q.get(s, a);
            Softmax.accumulate_score(theta, s, a, weight, &mut grad);
        }
    }
    Ok(GradVector::new(grad, Provenance::Exact))
}

/// Objective and gradient together, sharing one value solve.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub objective: f64,
    pub gradient: GradVector,
}

pub fn evaluate(theta: &PolicyParams, mdp: &TabularMdp) -> Result<Evaluation> {
    Ok(Evaluation {
        objective: objective(theta, mdp)?,
        gradient: exact_policy_gradient(theta, mdp)?,
    })
}

/// Central differences of [`objective`], one coordinate at a time.
pub fn finite_difference_gradient(
    theta: &PolicyParams,
    mdp: &TabularMdp,
    h: f64,
) -> Result<GradVector> {
    if !(h > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut grad = Vec::with_capacity(theta.len());
    let mut probe = theta.clone();
    for k in 0..theta.len() {
        let orig = theta.as_slice()[k];
        probe.as_mut_slice()[k] = orig + h;
        let plus = objective(&probe, mdp)?;
        probe.as_mut_slice()[k] = orig - h;
        let minus = objective(&probe, mdp)?;
        probe.as_mut_slice()[k] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(GradVector::new(grad, Provenance::Exact))
}

/// Gaps between the average MDP and the agent average, all in ∞-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct AverageIdentityReport {
    pub value_gap: f64,
    pub q_gap: f64,
    pub grad_gap: f64,
    pub tolerance: f64,
}

impl AverageIdentityReport {
    pub fn passed(&self) -> bool {
        self.value_gap <= self.tolerance
            && self.q_gap <= self.tolerance
            && self.grad_gap <= self.tolerance
    }

    pub fn max_gap(&self) -> f64 {
        self.value_gap.max(self.q_gap).max(self.grad_gap)
    }

    pub fn to_record(&self) -> DiagnosticRecord {
        let mut rec = DiagnosticRecord::default();
        rec.push("value_gap", self.value_gap);
        rec.push("q_gap", self.q_gap);
        rec.push("grad_gap", self.grad_gap);
        rec.push("tolerance", self.tolerance);
        rec.push("passed", if self.passed() { 1.0 } else { 0.0 });
        rec
    }
}

fn mean_columns(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, x) in acc.iter_mut().zip(r) {
            *a += x;
        }
    }
    let n = rows.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Compares the average MDP's value, Q-table and gradient against the mean
/// of the per-agent quantities, each side from its own solves.
pub fn verify_average_mdp_identity(
    env: &FederatedEnv,
    theta: &PolicyParams,
    tolerance: f64,
) -> Result<AverageIdentityReport> {
    let avg = build_average_mdp(env)?;
    let avg_value = solve_value(theta, &avg)?;
    let avg_q = q_function(theta, &avg)?;
    let avg_grad = exact_policy_gradient(theta, &avg)?;

    let agents = env.agent_mdps();
    let mut values = Vec::with_capacity(agents.len());
    let mut qs = Vec::with_capacity(agents.len());
    let mut grads = Vec::with_capacity(agents.len());
    for mdp in &agents {
        values.push(solve_value(theta, mdp)?.values);
        qs.push(q_function(theta, mdp)?.values);
        grads.push(exact_policy_gradient(theta, mdp)?.into_entries());
    }
    Ok(AverageIdentityReport {
        value_gap: max_abs_diff(&avg_value.values, &mean_columns(&values)),
        q_gap: max_abs_diff(&avg_q.values, &mean_columns(&qs)),
        grad_gap: max_abs_diff(avg_grad.entries(), &mean_columns(&grads)),
        tolerance,
    })
}

/// Largest observed gradient Lipschitz ratio over all sample pairs,
/// `max ‖∇J(θ₁) − ∇J(θ₂)‖ / ‖θ₁ − θ₂‖`. Coincident pairs are skipped.
pub fn estimate_smoothness(mdp: &TabularMdp, samples: &[PolicyParams]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData(
            "smoothness estimate needs at least two parameter samples".into(),
        ));
    }
    let grads = samples
        .iter()
        .map(|t| exact_policy_gradient(t, mdp))
        .collect::<Result<Vec<_>>>()?;
    let mut best: f64 = 0.0;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let dist_sq: f64 = samples[i]
                .as_slice()
                .iter()
                .zip(samples[j].as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if dist_sq == 0.0 {
                continue;
            }
            let diff_sq: f64 = grads[i]
                .entries()
                .iter()
                .zip(grads[j].entries())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            best = best.max((diff_sq / dist_sq).sqrt());
        }
    }
    Ok(best)
}

/// Flat `name value` text record, one metric per line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiagnosticRecord {
    pub entries: Vec<(String, f64)>,
}

impl DiagnosticRecord {
    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.entries.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }
}

impl fmt::Display for DiagnosticRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, value) in &self.entries {
            writeln!(f, "{name} {value:e}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{Dynamics, EnvGenerator};
    use std::sync::Arc;

    fn single_state(r: f64, gamma: f64) -> TabularMdp {
        let d = Dynamics::new(1, 1, vec![1.0], gamma, vec![1.0]).unwrap();
        TabularMdp::new(Arc::new(d), vec![r]).unwrap()
    }

    fn bandit(rewards: &[f64], gamma: f64) -> TabularMdp {
        let na = rewards.len();
        let d = Dynamics::new(1, na, vec![1.0; na], gamma, vec![1.0]).unwrap();
        TabularMdp::new(Arc::new(d), rewards.to_vec()).unwrap()
    }

    /// 0 → 1 → 0 deterministic cycle with one action.
    fn cycle(gamma: f64) -> TabularMdp {
        let d = Dynamics::new(2, 1, vec![0.0, 1.0, 1.0, 0.0], gamma, vec![1.0, 0.0]).unwrap();
        TabularMdp::new(Arc::new(d), vec![1.0, 0.0]).unwrap()
    }

    #[test]
    fn geometric_series_value() {
        let v = solve_value(&PolicyParams::zeros(1, 1), &single_state(0.5, 0.9)).unwrap();
        assert!((v.values[0] - 5.0).abs() < 1e-12);
        let q = q_function(&PolicyParams::zeros(1, 1), &single_state(0.5, 0.9)).unwrap();
        assert!((q.values[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn two_state_cycle_value_and_occupancy() {
        let theta = PolicyParams::zeros(2, 1);
        let v = solve_value(&theta, &cycle(0.5)).unwrap();
        assert!((v.values[0] - 4.0 / 3.0).abs() < 1e-14);
        assert!((v.values[1] - 2.0 / 3.0).abs() < 1e-14);
        let d = occupancy(&theta, &cycle(0.5)).unwrap();
        assert!((d.weights[0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((d.weights[1] - 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn zero_discount_q_is_reward_and_occupancy_is_rho() {
        let env = EnvGenerator::new(1, 3, 2, 1, 0.0)
            .with_gamma(0.0)
            .generate()
            .unwrap();
        let mdp = env.agent_mdp(0);
        let theta = PolicyParams::from_logits(3, 2, vec![0.3, -0.2, 1.0, 0.0, -1.0, 2.0]).unwrap();
        assert_eq!(q_function(&theta, &mdp).unwrap().values, mdp.rewards());
        assert_eq!(occupancy(&theta, &mdp).unwrap().weights, mdp.initial_dist());
    }

    #[test]
    fn single_state_occupancy_is_one() {
        let d = occupancy(&PolicyParams::zeros(1, 1), &single_state(0.2, 0.7)).unwrap();
        assert!((d.weights[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn induced_reward_cases() {
        let m = bandit(&[0.4, 0.4, 0.4], 0.5);
        let theta = PolicyParams::from_logits(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        assert!((induced_reward(&theta, &m)[0] - 0.4).abs() < 1e-15);
        let m = bandit(&[1.0, 0.0], 0.5);
        assert_eq!(induced_reward(&PolicyParams::zeros(1, 2), &m), vec![0.5]);
    }

    #[test]
    fn induced_transition_cases() {
        let env = EnvGenerator::new(4, 3, 1, 1, 0.0).generate().unwrap();
        let mdp = env.agent_mdp(0);
        let pt = induced_transition(&PolicyParams::zeros(3, 1), &mdp);
        for s in 0..3 {
            assert_eq!(&pt[s * 3..s * 3 + 3], mdp.next_state_dist(s, 0));
        }
        let env = EnvGenerator::new(4, 3, 2, 1, 0.0).generate().unwrap();
        let mdp = env.agent_mdp(0);
        let pt = induced_transition(&PolicyParams::zeros(3, 2), &mdp);
        for s in 0..3 {
            for n in 0..3 {
                let mix = 0.5 * mdp.next_state_dist(s, 0)[n] + 0.5 * mdp.next_state_dist(s, 1)[n];
                assert!((pt[s * 3 + n] - mix).abs() < 1e-16);
            }
            assert!((pt[s * 3..s * 3 + 3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bandit_gradient_closed_form() {
        // π_a (R_a − J) with π = (½, ½), J = ½
        let g =
            exact_policy_gradient(&PolicyParams::zeros(1, 2), &bandit(&[1.0, 0.0], 0.0)).unwrap();
        assert!((g.entries()[0] - 0.25).abs() < 1e-15);
        assert!((g.entries()[1] + 0.25).abs() < 1e-15);
        assert_eq!(g.provenance(), Provenance::Exact);
    }

    #[test]
    fn constant_reward_has_flat_objective() {
        let env = EnvGenerator::new(9, 4, 3, 1, 0.0)
            .with_gamma(0.5)
            .generate()
            .unwrap();
        let mdp = env.agent_mdp(0).with_rewards(vec![0.3; 12]).unwrap();
        let theta =
            PolicyParams::from_logits(4, 3, (0..12).map(|k| (k as f64 * 0.7).sin()).collect())
                .unwrap();
        assert!(exact_policy_gradient(&theta, &mdp).unwrap().max_abs() < 1e-12);
        assert!(
            finite_difference_gradient(&theta, &mdp, 1e-6)
                .unwrap()
                .max_abs()
                <= 1e-9
        );
        let samples: Vec<PolicyParams> = (0..5)
            .map(|i| {
                PolicyParams::from_logits(
                    4,
                    3,
                    (0..12).map(|k| ((i * 12 + k) as f64).cos()).collect(),
                )
                .unwrap()
            })
            .collect();
        assert!(estimate_smoothness(&mdp, &samples).unwrap() <= 1e-8);
    }

    #[test]
    fn exact_gradient_matches_finite_differences() {
        let env = EnvGenerator::new(21, 4, 3, 1, 0.0)
            .with_gamma(0.8)
            .generate()
            .unwrap();
        let mdp = env.agent_mdp(0);
        let theta =
            PolicyParams::from_logits(4, 3, (0..12).map(|k| (k as f64).sin()).collect()).unwrap();
        let exact = exact_policy_gradient(&theta, &mdp).unwrap();
        let fd = finite_difference_gradient(&theta, &mdp, 1e-6).unwrap();
        let rel = exact.max_abs_diff(&fd) / exact.max_abs();
        assert!(rel <= 1e-5, "relative error {rel}");
    }

    #[test]
    fn finite_differences_are_second_order() {
        let env = EnvGenerator::new(5, 3, 2, 1, 0.0)
            .with_gamma(0.7)
            .generate()
            .unwrap();
        let mdp = env.agent_mdp(0);
        let theta = PolicyParams::from_logits(3, 2, vec![0.5, -0.4, 1.3, 0.2, -0.9, 0.1]).unwrap();
        let exact = exact_policy_gradient(&theta, &mdp).unwrap();
        let e1 = finite_difference_gradient(&theta, &mdp, 1e-4)
            .unwrap()
            .max_abs_diff(&exact);
        let e2 = finite_difference_gradient(&theta, &mdp, 5e-5)
            .unwrap()
            .max_abs_diff(&exact);
        let ratio = e1 / e2;
        assert!((3.0..=5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn finite_difference_rejects_nonpositive_step() {
        let m = bandit(&[1.0, 0.0], 0.0);
        assert!(finite_difference_gradient(&PolicyParams::zeros(1, 2), &m, 0.0).is_err());
    }

    #[test]
    fn identity_holds_exactly_for_one_agent() {
        let env = EnvGenerator::new(8, 3, 2, 1, 0.0).generate().unwrap();
        let theta = PolicyParams::from_logits(3, 2, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap();
        let rep = verify_average_mdp_identity(&env, &theta, 1e-10).unwrap();
        assert_eq!(rep.max_gap(), 0.0);
    }

    #[test]
    fn identity_holds_for_identical_agents() {
        let env = EnvGenerator::new(8, 3, 2, 4, 0.0).generate().unwrap();
        let theta = PolicyParams::from_logits(3, 2, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap();
        let rep = verify_average_mdp_identity(&env, &theta, 1e-12).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn identity_report_record_has_one_line_per_metric() {
        let env = EnvGenerator::new(8, 3, 2, 3, 0.6).generate().unwrap();
        let rep = verify_average_mdp_identity(&env, &PolicyParams::zeros(3, 2), 1e-10).unwrap();
        let text = rep.to_record().to_string();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("value_gap "));
    }

    #[test]
    fn smoothness_needs_two_samples_and_is_monotone() {
        let m = bandit(&[1.0, 0.0], 0.0);
        assert!(estimate_smoothness(&m, &[PolicyParams::zeros(1, 2)]).is_err());
        let pts: Vec<PolicyParams> = (0..6)
            .map(|i| PolicyParams::from_logits(1, 2, vec![i as f64 * 0.4 - 1.0, 0.0]).unwrap())
            .collect();
        let a = estimate_smoothness(&m, &pts[..3]).unwrap();
        let b = estimate_smoothness(&m, &pts).unwrap();
        assert!(b >= a);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = bandit(&[1.0, 0.0], 0.0);
        assert!(solve_value(&PolicyParams::zeros(1, 3), &m).is_err());
    }
}
