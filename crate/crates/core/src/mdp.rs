//! Tabular MDPs and federated environments.
//!
//! A [`FederatedEnv`] is a set of agents that share states, actions, the
//! transition kernel, the discount and the initial distribution, but each
//! carry their own reward table. The kernel lives behind an [`Arc`] so every
//! per-agent [`TabularMdp`] (and the average MDP) points at the same
//! [`Dynamics`] value.

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_stream, Purpose, StreamKey};

/// Row sums of `P` and `ρ` must be within this distance of one.
pub const PROBABILITY_TOLERANCE: f64 = 1e-12;

/// The reward-independent part of an MDP: `(S, A, P, γ, ρ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dynamics {
    n_states: usize,
    n_actions: usize,
    /// Flat `P[s][a][s']`, index `(s * |A| + a) * |S| + s'`.
    transition: Vec<f64>,
    discount: f64,
    initial_dist: Vec<f64>,
}

impl Dynamics {
    /// Builds the dynamics without checking any invariant beyond the buffer
    /// lengths. Use [`TabularMdp::validate`] or [`FederatedEnv::validate`] to
    /// audit the values.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        discount: f64,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidEnv(format!(
                "dimensions must be positive, got |S|={n_states} |A|={n_actions}"
            )));
        }
        let expected = n_states * n_actions * n_states;
        if transition.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: transition.len(),
            });
        }
        if initial_dist.len() != n_states {
            return Err(Error::ShapeMismatch {
                expected: n_states,
                actual: initial_dist.len(),
            });
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            discount,
            initial_dist,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    /// `P[s][a][·]` as a slice over next states.
    #[inline]
    pub fn next_state_dist(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + next]
    }

    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    fn check(&self, violations: &mut Vec<Violation>) {
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.next_state_dist(s, a);
                for (next, &p) in row.iter().enumerate() {
                    if !p.is_finite() || p < 0.0 {
                        violations.push(Violation {
                            field: "transition",
                            indices: vec![s, a, next],
                            kind: ViolationKind::NegativeProbability,
                            magnitude: if p.is_finite() { -p } else { f64::INFINITY },
                        });
                    }
                }
                let sum: f64 = row.iter().sum();
                let defect = (1.0 - sum).abs();
                if !(defect <= PROBABILITY_TOLERANCE) {
                    violations.push(Violation {
                        field: "transition",
                        indices: vec![s, a],
                        kind: ViolationKind::RowSum,
                        magnitude: defect,
                    });
                }
            }
        }
        if !(0.0..1.0).contains(&self.discount) {
            violations.push(Violation {
                field: "gamma",
                indices: vec![],
                kind: ViolationKind::DiscountRange,
                magnitude: self.discount,
            });
        }
        for (s, &p) in self.initial_dist.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                violations.push(Violation {
                    field: "rho",
                    indices: vec![s],
                    kind: ViolationKind::NegativeProbability,
                    magnitude: if p.is_finite() { -p } else { f64::INFINITY },
                });
            }
        }
        let defect = (1.0 - self.initial_dist.iter().sum::<f64>()).abs();
        if !(defect <= PROBABILITY_TOLERANCE) {
            violations.push(Violation {
                field: "rho",
                indices: vec![],
                kind: ViolationKind::RowSum,
                magnitude: defect,
            });
        }
    }
}

/// A single finite MDP `(S, A, R, P, γ, ρ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    dynamics: Arc<Dynamics>,
    /// Flat `R[s][a]`, index `s * |A| + a`.
    reward: Vec<f64>,
}

impl TabularMdp {
    /// Builds an MDP and rejects it if any invariant fails.
    pub fn new(dynamics: Arc<Dynamics>, reward: Vec<f64>) -> Result<Self> {
        let mdp = Self::new_unchecked(dynamics, reward)?;
        let report = mdp.validate();
        if report.is_valid() {
            Ok(mdp)
        } else {
            Err(Error::InvalidEnv(report.to_string()))
        }
    }

    /// Builds an MDP checking only the reward table length.
    pub fn new_unchecked(dynamics: Arc<Dynamics>, reward: Vec<f64>) -> Result<Self> {
        let expected = dynamics.n_states * dynamics.n_actions;
        if reward.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: reward.len(),
            });
        }
        Ok(Self { dynamics, reward })
    }

    pub fn dynamics(&self) -> &Arc<Dynamics> {
        &self.dynamics
    }

    pub fn n_states(&self) -> usize {
        self.dynamics.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.dynamics.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.dynamics.discount
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.dynamics.initial_dist
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.dynamics.n_actions + a]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    pub fn max_reward(&self) -> f64 {
        self.reward.iter().copied().fold(0.0, f64::max)
    }

    #[inline]
    pub fn next_state_dist(&self, s: usize, a: usize) -> &[f64] {
        self.dynamics.next_state_dist(s, a)
    }

    /// Lists every invariant violation; an empty report means the MDP is
    /// well formed.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        self.dynamics.check(&mut violations);
        check_rewards(&self.reward, self.n_actions(), None, &mut violations);
        ValidationReport { violations }
    }

    /// Replaces the reward table, keeping the dynamics.
    pub fn with_rewards(&self, reward: Vec<f64>) -> Result<Self> {
        Self::new_unchecked(Arc::clone(&self.dynamics), reward)
    }
}

fn check_rewards(
    reward: &[f64],
    n_actions: usize,
    agent: Option<usize>,
    violations: &mut Vec<Violation>,
) {
    for (idx, &r) in reward.iter().enumerate() {
        if !(0.0..=1.0).contains(&r) {
            let mut indices = Vec::with_capacity(3);
            indices.extend(agent);
            indices.push(idx / n_actions);
            indices.push(idx % n_actions);
            violations.push(Violation {
                field: if agent.is_some() {
                    "agent_rewards"
                } else {
                    "reward"
                },
                indices,
                kind: ViolationKind::RewardRange,
                magnitude: if r.is_finite() {
                    if r < 0.0 {
                        -r
                    } else {
                        r - 1.0
                    }
                } else {
                    f64::INFINITY
                },
            });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    NegativeProbability,
    RowSum,
    RewardRange,
    DiscountRange,
    SharedDynamics,
}

/// One failed invariant: which field, at which indices, and by how much.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: &'static str,
    pub indices: Vec<usize>,
    pub kind: ViolationKind,
    pub magnitude: f64,
}

impl Violation {
    /// Field path such as `transition[0][1]`.
    pub fn path(&self) -> String {
        let mut path = self.field.to_string();
        for i in &self.indices {
            path.push_str(&format!("[{i}]"));
        }
        path
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.kind {
            ViolationKind::NegativeProbability => "negative or non-finite probability",
            ViolationKind::RowSum => "probabilities do not sum to one, defect",
            ViolationKind::RewardRange => "reward outside [0, 1] by",
            ViolationKind::DiscountRange => "discount outside [0, 1):",
            ViolationKind::SharedDynamics => "agent dynamics differ from the shared kernel",
        };
        write!(f, "{}: {} {:e}", self.path(), what, self.magnitude)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks every [`TabularMdp`] invariant.
pub fn validate_mdp(mdp: &TabularMdp) -> ValidationReport {
    mdp.validate()
}

/// `N` agents with a shared kernel and per-agent reward tables.
///
/// Tables are stored as given; [`apply_regret_transform`] flips an
/// orientation flag and the `1 − R` view is produced on read. Applying the
/// transform twice therefore restores the original bit for bit, and averaging
/// commutes exactly with the transform.
#[derive(Debug, Clone)]
pub struct FederatedEnv {
    shared: Arc<Dynamics>,
    agent_rewards: Vec<Vec<f64>>,
    regret: bool,
}

impl PartialEq for FederatedEnv {
    fn eq(&self, other: &Self) -> bool {
        self.shared == other.shared
            && self.n_agents() == other.n_agents()
            && (0..self.n_agents()).all(|i| self.agent_reward(i) == other.agent_reward(i))
    }
}

fn orient(table: &[f64], regret: bool) -> Vec<f64> {
    if regret {
        table.iter().map(|&x| 1.0 - x).collect()
    } else {
        table.to_vec()
    }
}

impl FederatedEnv {
    /// Builds and validates the environment.
    pub fn new(shared: Arc<Dynamics>, agent_rewards: Vec<Vec<f64>>) -> Result<Self> {
        let env = Self::new_unchecked(shared, agent_rewards)?;
        let report = env.validate();
        if report.is_valid() {
            Ok(env)
        } else {
            Err(Error::InvalidEnv(report.to_string()))
        }
    }

    pub fn new_unchecked(shared: Arc<Dynamics>, agent_rewards: Vec<Vec<f64>>) -> Result<Self> {
        let expected = shared.n_states * shared.n_actions;
        for r in &agent_rewards {
            if r.len() != expected {
                return Err(Error::ShapeMismatch {
                    expected,
                    actual: r.len(),
                });
            }
        }
        Ok(Self {
            shared,
            agent_rewards,
            regret: false,
        })
    }

    pub fn shared(&self) -> &Arc<Dynamics> {
        &self.shared
    }

    pub fn n_agents(&self) -> usize {
        self.agent_rewards.len()
    }

    pub fn n_states(&self) -> usize {
        self.shared.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.shared.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.shared.discount
    }

    /// Whether the tables are read through the regret transform.
    pub fn is_regret(&self) -> bool {
        self.regret
    }

    /// Agent `i`'s reward table in the current orientation.
    pub fn agent_reward(&self, agent: usize) -> Vec<f64> {
        orient(&self.agent_rewards[agent], self.regret)
    }

    pub fn agent_rewards(&self) -> Vec<Vec<f64>> {
        (0..self.n_agents()).map(|i| self.agent_reward(i)).collect()
    }

    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        self.shared.check(&mut violations);
        for i in 0..self.n_agents() {
            check_rewards(
                &self.agent_reward(i),
                self.shared.n_actions,
                Some(i),
                &mut violations,
            );
        }
        ValidationReport { violations }
    }

    /// Agent `i`'s MDP, sharing the kernel allocation.
    pub fn agent_mdp(&self, agent: usize) -> TabularMdp {
        TabularMdp {
            dynamics: Arc::clone(&self.shared),
            reward: self.agent_reward(agent),
        }
    }

    pub fn agent_mdps(&self) -> Vec<TabularMdp> {
        (0..self.n_agents()).map(|i| self.agent_mdp(i)).collect()
    }

    /// Keeps only the first `n` agents.
    pub fn truncate_agents(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.n_agents() {
            return Err(Error::Config(format!(
                "cannot select {n} agents from an environment with {}",
                self.n_agents()
            )));
        }
        Ok(Self {
            shared: Arc::clone(&self.shared),
            agent_rewards: self.agent_rewards[..n].to_vec(),
            regret: self.regret,
        })
    }
}

/// The MDP with the shared kernel and the entrywise mean reward
/// `R̄(s,a) = (1/N) Σ_i R_i(s,a)`. Summation runs in ascending agent order.
pub fn build_average_mdp(env: &FederatedEnv) -> Result<TabularMdp> {
    let n = env.n_agents();
    if n == 0 {
        return Err(Error::InvalidEnv(
            "cannot average an environment with zero agents".into(),
        ));
    }
    let width = env.n_states() * env.n_actions();
    let mut mean = vec![0.0; width];
    for r in &env.agent_rewards {
        for (m, &x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    let inv = n as f64;
    for m in &mut mean {
        *m /= inv;
    }
    TabularMdp::new_unchecked(Arc::clone(&env.shared), orient(&mean, env.regret))
}

/// Rewards become regrets: `R_i ← 1 − R_i`.
pub fn apply_regret_transform(env: &FederatedEnv) -> FederatedEnv {
    FederatedEnv {
        regret: !env.regret,
        ..env.clone()
    }
}

/// Parameters for [`generate_random_env`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EnvGenerator {
    pub seed: u64,
    pub n_states: usize,
    pub n_actions: usize,
    pub n_agents: usize,
    /// Spread of the per-agent reward perturbation, in `[0, 1]`.
    pub heterogeneity: f64,
    #[serde(default = "default_discount")]
    pub gamma: f64,
}

fn default_discount() -> f64 {
    0.9
}

impl EnvGenerator {
    pub fn new(
        seed: u64,
        n_states: usize,
        n_actions: usize,
        n_agents: usize,
        heterogeneity: f64,
    ) -> Self {
        Self {
            seed,
            n_states,
            n_actions,
            n_agents,
            heterogeneity,
            gamma: default_discount(),
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn generate(&self) -> Result<FederatedEnv> {
        generate_random_env(self)
    }
}

/// Uniform draw on the open interval `(0, 1)`.
fn open_unit<R: Rng>(rng: &mut R) -> f64 {
    ((rng.gen::<u64>() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Random environment with strictly positive transitions.
///
/// Each `P[s][a][·]` is a normalized vector of exponential draws (a flat
/// Dirichlet sample). `ρ` is uniform. Rewards are
/// `clip(base + heterogeneity · perturbation_i, 0, 1)` where `base` is a shared
/// uniform table and the perturbations are uniform on `[-1, 1]` and then
/// centered across agents, so that without clipping the average reward equals
/// `base` for every `N`.
pub fn generate_random_env(gen: &EnvGenerator) -> Result<FederatedEnv> {
    if gen.n_states == 0 || gen.n_actions == 0 || gen.n_agents == 0 {
        return Err(Error::Config(
            "generator dimensions must all be at least 1".into(),
        ));
    }
    if !(0.0..=1.0).contains(&gen.heterogeneity) {
        return Err(Error::Config(format!(
            "heterogeneity must lie in [0, 1], got {}",
            gen.heterogeneity
        )));
    }
    if !(0.0..1.0).contains(&gen.gamma) {
        return Err(Error::Config(format!(
            "discount must lie in [0, 1), got {}",
            gen.gamma
        )));
    }
    let (ns, na, n) = (gen.n_states, gen.n_actions, gen.n_agents);

    let mut rng = derive_stream(StreamKey::new(gen.seed, 0, 0, 0, Purpose::EnvTransitions));
    let mut transition = Vec::with_capacity(ns * na * ns);
    for _ in 0..ns * na {
        let row: Vec<f64> = (0..ns).map(|_| -open_unit(&mut rng).ln()).collect();
        let total: f64 = row.iter().sum();
        transition.extend(row.iter().map(|x| x / total));
    }
    let rho = vec![1.0 / ns as f64; ns];
    let dynamics = Arc::new(Dynamics::new(ns, na, transition, gen.gamma, rho)?);

    let mut base_rng = derive_stream(StreamKey::new(gen.seed, 0, 0, 0, Purpose::EnvBaseReward));
    let base: Vec<f64> = (0..ns * na).map(|_| base_rng.gen::<f64>()).collect();

    let mut perturbations: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut r = derive_stream(StreamKey::new(
                gen.seed,
                i as u64,
                0,
                0,
                Purpose::EnvPerturbation,
            ));
            (0..ns * na).map(|_| 2.0 * r.gen::<f64>() - 1.0).collect()
        })
        .collect();
    for k in 0..ns * na {
        let mean = perturbations.iter().map(|p| p[k]).sum::<f64>() / n as f64;
        for p in &mut perturbations {
            p[k] -= mean;
        }
    }

    let agent_rewards = perturbations
        .iter()
        .map(|p| {
            base.iter()
                .zip(p)
                .map(|(&b, &d)| {
                    if gen.heterogeneity == 0.0 {
                        b
                    } else {
                        (b + gen.heterogeneity * d).clamp(0.0, 1.0)
                    }
                })
                .collect()
        })
        .collect();
    FederatedEnv::new(dynamics, agent_rewards)
}
