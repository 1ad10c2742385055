use fedsim_core::snapshot::Checkpoint;
use fedsim_harness::sweep::{run_sweep, Axis};
use fedsim_harness::{run_experiment, ExperimentConfig};

fn config(sets: &[&str]) -> ExperimentConfig {
    let mut all: Vec<String> = [
        "n_examples=60",
        "n_test=40",
        "clients=4",
        "partition=balanced",
        "rounds=4",
    ]
    .map(String::from)
    .to_vec();
    all.extend(sets.iter().map(|s| s.to_string()));
    ExperimentConfig::default().with_overrides(&all).unwrap()
}

const SVT: [&str; 5] = [
    "privacy=svt",
    "fraction=0.4",
    "clip=0.01",
    "epsilon_query=5",
    "epsilon_answer=5",
];

#[test]
fn same_config_gives_identical_outputs() {
    for sets in [
        &["partition=powerlaw", "max_share=0.5"][..],
        &SVT[..],
        &["momentum=m_aggregation", "heterogeneity=0.5"][..],
    ] {
        let cfg = config(sets);
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.metrics_csv(), b.metrics_csv(), "{sets:?}");
        assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes(), "{sets:?}");
    }
}

#[test]
fn noise_seed_only_moves_the_privacy_noise() {
    let a = run_experiment(&config(&SVT)).unwrap();
    let mut sets = SVT.to_vec();
    sets.push("noise_seed=77");
    let b = run_experiment(&config(&sets)).unwrap();
    assert_eq!(a.partition, b.partition);
    assert_eq!(a.summary.initial, b.summary.initial);
    assert_ne!(a.checkpoint().w.as_slice(), b.checkpoint().w.as_slice());

    let off = run_experiment(&config(&[])).unwrap();
    let off_other = run_experiment(&config(&["noise_seed=77"])).unwrap();
    assert_eq!(off.metrics_csv(), off_other.metrics_csv());
}

#[test]
fn data_seed_moves_data_and_partition() {
    let a = run_experiment(&config(&[])).unwrap();
    let b = run_experiment(&config(&["seed=9"])).unwrap();
    assert_ne!(a.partition.assignments, b.partition.assignments);
    assert_ne!(a.summary.initial, b.summary.initial);
}

#[test]
fn released_counts_follow_the_fraction() {
    let base = config(&["privacy=selective"]);
    let axes: Vec<Axis> = vec!["fraction=0.1,0.4,1.0".parse().unwrap()];
    let runs = run_sweep(&base, "q", &axes, None).unwrap();
    let p = runs[0].outcome.summary.param_count;
    let mut totals = Vec::new();
    for (run, q) in runs.iter().zip([0.1, 0.4, 1.0]) {
        let per_client = (q * p as f64).floor() as usize;
        for r in &run.outcome.records {
            assert!(r.released_params <= 4 * per_client, "{}", run.point.run_id);
        }
        totals.push(run.outcome.summary.released_params_total);
    }
    assert!(totals[0] < totals[1] && totals[1] < totals[2], "{totals:?}");
}

#[test]
fn privacy_budget_accumulates_per_round() {
    let svt = run_experiment(&config(&SVT)).unwrap();
    let per_round = svt.summary.epsilon_per_round;
    // ε₂ is derived from the clip bound: (2·q·2γ)^(2/3)·ε₁.
    let eps2 = (2.0f64 * 0.4 * 0.02).powf(2.0 / 3.0) * 5.0;
    assert!((per_round - (10.0 + eps2)).abs() < 1e-12);
    for r in &svt.records {
        assert_eq!(r.epsilon_total, per_round * f64::from(r.round));
    }
    let off = run_experiment(&config(&[])).unwrap();
    assert!(off.records.iter().all(|r| r.epsilon_round == f64::INFINITY));
}

#[test]
fn centralized_mode_trains_one_client_on_everything() {
    let out = run_experiment(&config(&["centralized=true", "privacy=selective", "fraction=0.1"])).unwrap();
    assert_eq!(out.summary.client_shares, vec![60]);
    assert!(out.records.iter().all(|r| r.client_losses.len() == 1));
    assert_eq!(out.summary.released_params_total, 4 * out.summary.param_count);
}

#[test]
fn zero_rounds_leave_the_initial_model() {
    let out = run_experiment(&config(&["rounds=0"])).unwrap();
    assert!(out.records.is_empty());
    assert_eq!(out.summary.last, out.summary.initial);
    assert_eq!(out.metrics_csv().iter().filter(|&&b| b == b'\n').count(), 1);
}

#[test]
fn run_directory_round_trips() {
    let out = run_experiment(&config(&["momentum=m_aggregation"])).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.write_to(dir.path()).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("metrics.csv")).unwrap(),
        out.metrics_csv()
    );
    let ck = Checkpoint::load(dir.path().join("checkpoint.bin")).unwrap();
    assert_eq!(ck.to_bytes(), out.checkpoint().to_bytes());
    assert_eq!(ck.config_hash, out.summary.config.hash());
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["rounds_completed"], 4);
    assert_eq!(summary["config"]["momentum"], "m_aggregation");
}
