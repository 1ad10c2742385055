use fedsim_core::client::{Client, ClientSeeds};
use fedsim_core::data::{Dataset, SynthTask};
use fedsim_core::model::{ModelKind, ToyModel};
use fedsim_core::privacy::PrivacyPolicy;
use fedsim_core::server::{aggregate, init_params, run_rounds, AggregationMode, GlobalState, RoundContribution};
use fedsim_core::trainer::{centralized_training, ModelUpdate, MomentumMode, TrainerConfig};
use fedsim_core::{ParamVector, SparseDelta};
use proptest::prelude::*;

fn contribution(id: u32, delta: SparseDelta, n: u64) -> RoundContribution {
    RoundContribution {
        client_id: id,
        update: ModelUpdate {
            delta,
            n_local: n,
            momentum_delta: None,
            train_loss: 0.0,
            exhausted: false,
        },
    }
}

fn arb_round(dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<(Vec<Option<f64>>, u64)>)> {
    (
        prop::collection::vec(-10.0f64..10.0, dim),
        prop::collection::vec(
            (prop::collection::vec(prop::option::of(-1.0f64..1.0), dim), 1u64..50),
            1..6,
        ),
    )
}

fn build(dim: usize, w: &[f64], clients: &[(Vec<Option<f64>>, u64)]) -> (GlobalState, Vec<RoundContribution>) {
    let state = GlobalState::new(ParamVector::from_vec(w.to_vec()).unwrap(), AggregationMode::Weighted);
    let contributions = clients
        .iter()
        .enumerate()
        .map(|(k, (entries, n))| {
            let pairs = entries
                .iter()
                .enumerate()
                .filter_map(|(i, v)| v.map(|v| (i as u32, v)))
                .collect();
            contribution(k as u32 * 3 + 1, SparseDelta::from_entries(dim, pairs).unwrap(), *n)
        })
        .collect();
    (state, contributions)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn order_of_contributions_is_irrelevant((w, clients) in arb_round(6), rot in 0usize..6) {
        let (state, mut cs) = build(6, &w, &clients);
        let a = aggregate(&state, &cs).unwrap();
        let len = cs.len();
        cs.rotate_left(rot % len);
        cs.reverse();
        let b = aggregate(&state, &cs).unwrap();
        prop_assert!(a.w.bit_eq(&b.w));
    }

    #[test]
    fn unreleased_indices_are_untouched((w, clients) in arb_round(6)) {
        let (state, cs) = build(6, &w, &clients);
        let out = aggregate(&state, &cs).unwrap();
        for i in 0..6 {
            if clients.iter().all(|(e, _)| e[i].is_none()) {
                prop_assert_eq!(out.w[i].to_bits(), state.w[i].to_bits());
            }
        }
    }

    #[test]
    fn single_client_adds_its_delta(w in prop::collection::vec(-10.0f64..10.0, 5), d in prop::collection::vec(-1.0f64..1.0, 5), n in 1u64..100) {
        let dense = ParamVector::from_vec(d.clone()).unwrap();
        for mode in [AggregationMode::Weighted, AggregationMode::Simple] {
            let state = GlobalState::new(ParamVector::from_vec(w.clone()).unwrap(), mode);
            let out = aggregate(&state, &[contribution(9, SparseDelta::from_dense(&dense), n)]).unwrap();
            for i in 0..5 {
                prop_assert_eq!(out.w[i].to_bits(), (w[i] + d[i]).to_bits());
            }
        }
    }

    #[test]
    fn identical_deltas_are_conserved(w in prop::collection::vec(-10.0f64..10.0, 4), d in prop::collection::vec(-1.0f64..1.0, 4), ns in prop::collection::vec(1u64..1000, 1..8)) {
        let state = GlobalState::new(ParamVector::from_vec(w.clone()).unwrap(), AggregationMode::Weighted);
        let dense = ParamVector::from_vec(d.clone()).unwrap();
        let cs: Vec<_> = ns.iter().enumerate().map(|(k, &n)| contribution(k as u32, SparseDelta::from_dense(&dense), n)).collect();
        let out = aggregate(&state, &cs).unwrap();
        for i in 0..4 {
            prop_assert!((out.w[i] - (w[i] + d[i])).abs() <= 1e-14 * (1.0 + w[i].abs()));
        }
    }

    #[test]
    fn equal_iteration_counts_make_modes_agree((w, clients) in arb_round(5), n in 1u64..500) {
        let equal: Vec<_> = clients.iter().map(|(e, _)| (e.clone(), n)).collect();
        let (weighted, cs) = build(5, &w, &equal);
        let mut simple = weighted.clone();
        simple.mode = AggregationMode::Simple;
        let a = aggregate(&weighted, &cs).unwrap();
        let b = aggregate(&simple, &cs).unwrap();
        prop_assert!(a.w.bit_eq(&b.w));
    }
}

fn clients_for(
    task: &SynthTask,
    model: &ToyModel,
    shares: &[usize],
    trainer: &TrainerConfig,
    policy: &PrivacyPolicy,
) -> Vec<Client> {
    let mut offset = 0;
    shares
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let data = task.sample(n, 100 + offset as u64).unwrap();
            offset += n;
            Client::new(
                k as u32,
                model.clone(),
                data,
                trainer.clone(),
                policy.clone(),
                ClientSeeds { shuffle: 42, noise: 43 },
            )
            .unwrap()
        })
        .collect()
}

#[test]
fn full_release_selective_matches_ungated_fedavg() {
    let task = SynthTask::new(ModelKind::LogisticClassifier, 1);
    let model = task.model(0);
    let trainer = TrainerConfig {
        learning_rate: 0.02,
        ..TrainerConfig::default()
    };
    let w0 = init_params(&model, 3);
    let mut results = Vec::new();
    for policy in [PrivacyPolicy::off(), PrivacyPolicy::selective(1.0, f64::INFINITY)] {
        let mut clients = clients_for(&task, &model, &[5, 9, 3], &trainer, &policy);
        let state = GlobalState::new(w0.clone(), AggregationMode::Weighted);
        results.push(run_rounds(state, &mut clients, 4, |_| Ok(())).unwrap());
    }
    assert!(results[0].w.bit_eq(&results[1].w));
}

#[test]
fn zero_rounds_leave_the_model_alone() {
    let task = SynthTask::new(ModelKind::LinearRegression, 1);
    let model = task.model(0);
    let w0 = init_params(&model, 3);
    let mut clients = clients_for(&task, &model, &[4, 4], &TrainerConfig::default(), &PrivacyPolicy::off());
    let out = run_rounds(
        GlobalState::new(w0.clone(), AggregationMode::Weighted),
        &mut clients,
        0,
        |_| Ok(()),
    )
    .unwrap();
    assert!(out.w.bit_eq(&w0));
    assert_eq!(out.round, 0);
}

#[test]
fn two_rounds_equal_manual_chaining() {
    let task = SynthTask::new(ModelKind::MlpSoftdiceSegmenter, 1);
    let model = task.model(6);
    let trainer = TrainerConfig {
        learning_rate: 0.01,
        ..TrainerConfig::default()
    };
    let policy = PrivacyPolicy::selective(0.5, 0.05);
    let w0 = init_params(&model, 3);
    let mut a = clients_for(&task, &model, &[3, 6], &trainer, &policy);
    let mut rounds_seen = Vec::new();
    let auto = run_rounds(
        GlobalState::new(w0.clone(), AggregationMode::Weighted),
        &mut a,
        2,
        |r| {
            rounds_seen.push(r.state.round);
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(rounds_seen, vec![1, 2]);

    let mut b = clients_for(&task, &model, &[3, 6], &trainer, &policy);
    let mut state = GlobalState::new(w0, AggregationMode::Weighted);
    for round in 1..=2 {
        let bc = state.broadcast();
        let cs: Vec<_> = b
            .iter_mut()
            .map(|c| RoundContribution {
                client_id: c.id(),
                update: c.train_round(round, &bc).unwrap(),
            })
            .collect();
        state = aggregate(&state, &cs).unwrap();
    }
    assert!(auto.w.bit_eq(&state.w));
}

#[test]
fn single_client_federation_is_centralized_training() {
    for kind in ModelKind::ALL {
        let task = SynthTask::new(kind, 8);
        let model = task.model(8).with_weight_decay(1e-5);
        let data: Dataset = task.sample(10, 2).unwrap();
        let trainer = TrainerConfig {
            learning_rate: 0.01,
            momentum: MomentumMode::Restart,
            ..TrainerConfig::default()
        };
        let w0 = init_params(&model, 5);
        let mut clients = vec![Client::new(
            0,
            model.clone(),
            data.clone(),
            trainer.clone(),
            PrivacyPolicy::off(),
            ClientSeeds { shuffle: 77, noise: 1 },
        )
        .unwrap()];
        let fl = run_rounds(
            GlobalState::new(w0.clone(), AggregationMode::Weighted),
            &mut clients,
            3,
            |_| Ok(()),
        )
        .unwrap();
        let central = centralized_training(&model, &w0, &data, &trainer, 3, 77).unwrap();
        assert!(fl.w.bit_eq(&central), "{kind}");
    }
}
