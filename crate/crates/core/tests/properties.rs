use std::sync::Arc;

use fedpg::io::{env_to_json, parse_env, LoadedEnv};
use fedpg::oracle::{exact_policy_gradient, objective, verify_average_mdp_identity};
use fedpg::{
    apply_regret_transform, build_average_mdp, run_centralized, run_training, AlgoConfig,
    Algorithm, Dynamics, FederatedEnv, FederatedProblem, GradientSource, PolicyParams,
};
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Case {
    env: FederatedEnv,
    theta: PolicyParams,
}

fn normalized(weights: Vec<f64>, width: usize) -> Vec<f64> {
    let mut out = weights;
    for row in out.chunks_mut(width) {
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= total);
    }
    out
}

fn case() -> impl Strategy<Value = Case> {
    (1usize..5, 1usize..4, 1usize..5, 0.0f64..0.95).prop_flat_map(|(ns, na, n, gamma)| {
        (
            proptest::collection::vec(0.01f64..1.0, ns * na * ns),
            proptest::collection::vec(0.01f64..1.0, ns),
            proptest::collection::vec(proptest::collection::vec(0.0f64..=1.0, ns * na), n),
            proptest::collection::vec(-3.0f64..3.0, ns * na),
        )
            .prop_map(move |(p, rho, rewards, logits)| {
                let rho = normalized(rho, ns);
                let d = Dynamics::new(ns, na, normalized(p, ns), gamma, rho).unwrap();
                Case {
                    env: FederatedEnv::new(Arc::new(d), rewards).unwrap(),
                    theta: PolicyParams::from_logits(ns, na, logits).unwrap(),
                }
            })
    })
}

fn scale(env: &FederatedEnv) -> f64 {
    1.0 / (1.0 - env.discount())
}

fn exact_config(n: usize, h: usize, rounds: usize, eta: f64) -> AlgoConfig {
    AlgoConfig {
        local_step: eta,
        global_step: 1.0,
        local_steps: h,
        rounds,
        horizon: 4,
        n_agents: n,
        gradient_source: GradientSource::Exact,
        algorithm: Algorithm::FastFedpg,
        master_seed: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn average_mdp_quantities_are_agent_averages(c in case()) {
        let report = verify_average_mdp_identity(&c.env, &c.theta, 1e-9).unwrap();
        prop_assert!(report.max_gap() <= 1e-10 * scale(&c.env).powi(2), "{report:?}");
    }

    #[test]
    fn regret_transform_is_an_involution(c in case()) {
        let twice = apply_regret_transform(&apply_regret_transform(&c.env));
        prop_assert_eq!(&twice, &c.env);
        prop_assert_eq!(twice.is_regret(), c.env.is_regret());
    }

    #[test]
    fn regret_transform_commutes_with_averaging(c in case()) {
        let a = build_average_mdp(&apply_regret_transform(&c.env)).unwrap();
        let b = build_average_mdp(&c.env).unwrap();
        for (x, y) in a.rewards().iter().zip(b.rewards()) {
            prop_assert_eq!(*x, 1.0 - y);
        }
    }

    #[test]
    fn regret_objective_is_the_reflected_value(c in case()) {
        let reward = objective(&c.theta, &build_average_mdp(&c.env).unwrap()).unwrap();
        let regret = objective(
            &c.theta,
            &build_average_mdp(&apply_regret_transform(&c.env)).unwrap(),
        )
        .unwrap();
        prop_assert!((reward + regret - scale(&c.env)).abs() <= 1e-10 * scale(&c.env));
    }

    #[test]
    fn average_is_valid_and_order_independent(c in case(), rot in 0usize..8) {
        let avg = build_average_mdp(&c.env).unwrap();
        prop_assert!(avg.validate().is_valid());
        let mut rewards = c.env.agent_rewards();
        let k = rot % rewards.len();
        rewards.rotate_left(k);
        rewards.reverse();
        let permuted = FederatedEnv::new(Arc::clone(c.env.shared()), rewards).unwrap();
        let other = build_average_mdp(&permuted).unwrap();
        for (x, y) in avg.rewards().iter().zip(other.rewards()) {
            prop_assert!((x - y).abs() <= 4.0 * f64::EPSILON);
        }
        let g1 = exact_policy_gradient(&c.theta, &avg).unwrap();
        let g2 = exact_policy_gradient(&c.theta, &other).unwrap();
        prop_assert!(g1.max_abs_diff(&g2) <= 1e-12 * scale(&c.env).powi(2));
    }

    #[test]
    fn env_json_round_trips_bit_exactly(c in case(), regret in any::<bool>()) {
        let env = if regret { apply_regret_transform(&c.env) } else { c.env.clone() };
        let text = env_to_json(&env);
        match parse_env(&text).unwrap() {
            LoadedEnv::Shared(back) => {
                prop_assert_eq!(&back, &env);
                prop_assert_eq!(env_to_json(&back), text);
            }
            other => prop_assert!(false, "unexpected {other:?}"),
        }
    }

    #[test]
    fn one_local_step_rounds_are_centralized_descent(c in case(), eta in 0.01f64..0.5) {
        let p = FederatedProblem::from_env(&c.env).unwrap();
        let cfg = exact_config(c.env.n_agents(), 1, 4, eta);
        let fed = run_training(&p, &cfg, c.theta.clone()).unwrap();
        let central = run_centralized(&p, &cfg, c.theta.clone()).unwrap();
        for (a, b) in fed.rows.iter().zip(&central.rows) {
            prop_assert!((a.objective - b.objective).abs() <= 1e-10 * scale(&c.env));
        }
    }

    #[test]
    fn homogeneous_agents_make_fast_fedpg_equal_fedavg(c in case(), h in 1usize..4) {
        let first = c.env.agent_reward(0);
        let env = FederatedEnv::new(
            Arc::clone(c.env.shared()),
            vec![first; c.env.n_agents()],
        )
        .unwrap();
        let p = FederatedProblem::from_env(&env).unwrap();
        let cfg = exact_config(env.n_agents(), h, 3, 0.1);
        let fast = run_training(&p, &cfg, c.theta.clone()).unwrap();
        let avg_cfg = AlgoConfig { algorithm: Algorithm::FedavgPg, ..cfg };
        let fedavg = run_training(&p, &avg_cfg, c.theta.clone()).unwrap();
        for (a, b) in fast.rows.iter().zip(&fedavg.rows) {
            prop_assert!((a.objective - b.objective).abs() <= 1e-10 * scale(&env));
        }
    }
}
