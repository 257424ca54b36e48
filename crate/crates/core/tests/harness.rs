use std::fs;

use fedpg::harness::plot::columns;
use fedpg::harness::{
    emit_plot_data, estimate_gradient_noise, random_params, run_experiment, speedup_analysis,
    stationarity_analysis, truncation_decay_analysis, AnalysisKind, EnvSource, ExperimentSpec,
    MetricsRecord, ReferenceOptions, ScheduleMode, ScheduleSpec, SweepAxes,
};
use fedpg::io::save_env;
use fedpg::{
    apply_regret_transform, build_average_mdp, AlgoConfig, Algorithm, EnvGenerator, Error,
    GradientSource,
};

fn spec(env: EnvSource, source: GradientSource, rounds: usize) -> ExperimentSpec {
    ExperimentSpec {
        env,
        config: AlgoConfig {
            local_step: 0.2,
            global_step: 1.0,
            local_steps: 3,
            rounds,
            horizon: 5,
            n_agents: 2,
            gradient_source: source,
            algorithm: Algorithm::FastFedpg,
            master_seed: 9,
        },
        sweep: SweepAxes::default(),
        schedule: None,
        analysis: AnalysisKind::Convergence,
        output: None,
        regret: true,
        init: None,
        reference: ReferenceOptions::default(),
    }
}

fn generated(het: f64) -> EnvSource {
    EnvSource::Generate(EnvGenerator::new(2, 4, 3, 4, het).with_gamma(0.8))
}

#[test]
fn rerunning_a_spec_file_writes_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let env = EnvGenerator::new(5, 3, 3, 4, 0.5).generate().unwrap();
    save_env(&env, &dir.path().join("env.json")).unwrap();
    let mut s = spec(
        EnvSource::File("env.json".into()),
        GradientSource::Sampled,
        20,
    );
    s.sweep = SweepAxes {
        n_agents: vec![2, 4],
        local_steps: vec![1, 3],
        seeds: vec![1, 2],
        ..Default::default()
    };
    let spec_path = dir.path().join("spec.json");
    fs::write(&spec_path, s.to_json()).unwrap();

    let mut files = Vec::new();
    for name in ["a.csv", "b.csv"] {
        let loaded = ExperimentSpec::load(&spec_path).unwrap();
        let path = dir.path().join(name);
        run_experiment(&loaded).unwrap().save(&path).unwrap();
        files.push(fs::read(&path).unwrap());
    }
    assert_eq!(files[0], files[1]);
    let record = MetricsRecord::load(&dir.path().join("a.csv")).unwrap();
    assert_eq!(record.runs().len(), 4 * 2);
    assert_eq!(record.rows.len(), 4 * 2 * 21);
}

#[test]
fn plot_data_from_a_real_record() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = spec(generated(0.5), GradientSource::Sampled, 15);
    s.sweep = SweepAxes {
        n_agents: vec![1, 2],
        seeds: vec![0, 1, 2],
        ..Default::default()
    };
    let record = run_experiment(&s).unwrap();

    let conv = emit_plot_data(&record, "convergence", &dir.path().join("conv.csv")).unwrap();
    assert_eq!(conv.len(), 2);
    for path in &conv {
        let text = fs::read_to_string(path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            columns(AnalysisKind::Convergence).join(",")
        );
        assert_eq!(lines.count(), 16);
    }

    let speed = emit_plot_data(&record, "speedup", &dir.path().join("speed.csv")).unwrap();
    assert_eq!(speed.len(), 1);
    assert_eq!(fs::read_to_string(&speed[0]).unwrap().lines().count(), 3);

    let stat = emit_plot_data(&record, "stationarity", &dir.path().join("stat.csv")).unwrap();
    for path in &stat {
        let text = fs::read_to_string(path).unwrap();
        let rows: Vec<Vec<f64>> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
            .collect();
        assert!(rows.windows(2).all(|w| w[1][3] <= w[0][3]));
    }

    assert!(matches!(
        emit_plot_data(&record, "histogram", &dir.path().join("x.csv")),
        Err(Error::Config(_))
    ));
}

#[test]
fn exact_mode_gap_does_not_depend_on_n_without_heterogeneity() {
    let mut s = spec(generated(0.0), GradientSource::Exact, 30);
    s.sweep.n_agents = vec![1, 2, 4, 8];
    let record = run_experiment(&s).unwrap();
    let rows = speedup_analysis(&MetricsRecord::new(
        record
            .rows
            .iter()
            .flat_map(|r| {
                // two identical copies stand in for seeds
                let mut copy = r.clone();
                copy.seed += 1;
                [r.clone(), copy]
            })
            .collect(),
    ))
    .unwrap();
    assert_eq!(rows.len(), 4);
    for r in &rows[1..] {
        assert!(
            (r.mean_gap - rows[0].mean_gap).abs() <= 1e-10,
            "N={}: {} vs {}",
            r.n_agents,
            r.mean_gap,
            rows[0].mean_gap
        );
    }
}

#[test]
fn speedup_needs_two_seeds() {
    let record = run_experiment(&spec(generated(0.5), GradientSource::Exact, 3)).unwrap();
    assert!(matches!(
        speedup_analysis(&record),
        Err(Error::InsufficientData(_))
    ));
}

#[test]
fn doubling_the_seed_count_shrinks_the_standard_error() {
    let mut s = spec(generated(0.5), GradientSource::Sampled, 40);
    s.sweep.seeds = (0..64).collect();
    let record = run_experiment(&s).unwrap();
    let subset = |k: u64| {
        let rows = record.rows.iter().filter(|r| r.seed < k).cloned().collect();
        speedup_analysis(&MetricsRecord::new(rows)).unwrap()[0].standard_error()
    };
    let ratio = subset(32) / subset(64);
    assert!((1.2..=1.7).contains(&ratio), "ratio {ratio}");
}

#[test]
fn a_longer_stationary_run_ends_closer_to_stationarity() {
    let final_mean = |rounds: usize| {
        let mut s = spec(generated(0.5), GradientSource::Sampled, rounds);
        s.config.n_agents = 4;
        s.schedule = Some(ScheduleSpec {
            mode: ScheduleMode::Stationary,
            mu: None,
            smoothness: None,
        });
        s.sweep.seeds = (0..4).collect();
        let record = run_experiment(&s).unwrap();
        let runs = record.runs();
        let means: Vec<f64> = runs
            .values()
            .map(|rows| {
                let g: Vec<f64> = rows.iter().map(|r| r.grad_norm_sq).collect();
                stationarity_analysis(&g).mean_at(rounds).unwrap()
            })
            .collect();
        means.iter().sum::<f64>() / means.len() as f64
    };
    let short = final_mean(200);
    let long = final_mean(400);
    assert!(long < short, "{long} vs {short}");
}

#[test]
fn truncation_error_decreases_once_below_a_tenth_of_its_start() {
    for seed in 0..3 {
        let env = apply_regret_transform(
            &EnvGenerator::new(seed, 2, 2, 2, 0.5)
                .with_gamma(0.7)
                .generate()
                .unwrap(),
        );
        let avg = build_average_mdp(&env).unwrap();
        let theta = random_params(2, 2, 1.0, seed, 0);
        let ks: Vec<usize> = (1..=10).collect();
        let fit = truncation_decay_analysis(&avg, &theta, &ks).unwrap();
        let start = fit
            .errors
            .iter()
            .position(|&e| e <= 0.1 * fit.errors[0])
            .expect("error falls below a tenth");
        assert!(
            fit.errors[start..].windows(2).all(|w| w[1] <= w[0]),
            "seed {seed}: {:?}",
            fit.errors
        );
        assert!(fit.slope.unwrap() < 0.0);
    }
}

#[test]
fn gradient_variance_is_finite_across_parameters() {
    let env = apply_regret_transform(&EnvGenerator::new(4, 4, 3, 3, 0.5).generate().unwrap());
    let avg = build_average_mdp(&env).unwrap();
    let thetas: Vec<_> = (0..20).map(|i| random_params(4, 3, 3.0, 8, i)).collect();
    let report = estimate_gradient_noise(&avg, &thetas, 10, 200, 1).unwrap();
    assert_eq!(report.total_variance.len(), 20);
    assert!(report
        .total_variance
        .iter()
        .all(|v| v.is_finite() && *v > 0.0));
    assert!(report.noise_std.is_finite());
}
