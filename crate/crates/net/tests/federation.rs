use fedsim_core::client::{Client, ClientSeeds};
use fedsim_core::data::SynthTask;
use fedsim_core::model::ModelKind;
use fedsim_core::privacy::PrivacyPolicy;
use fedsim_core::server::{aggregate, init_params, AggregationMode, GlobalState, RoundContribution};
use fedsim_core::trainer::{MomentumMode, TrainerConfig};
use fedsim_net::federation::accept_clients;
use fedsim_net::{channel_pair, run_client, run_federation, serve, Connection, Message, RoundEnvelope, Transport};
use std::net::TcpListener;
use std::time::Duration;

fn clients(k: usize, momentum: MomentumMode, policy: PrivacyPolicy) -> (Vec<Client>, GlobalState) {
    let task = SynthTask::new(ModelKind::MlpSoftdiceSegmenter, 3);
    let model = task.model(8);
    let trainer = TrainerConfig {
        learning_rate: 0.01,
        momentum,
        ..TrainerConfig::default()
    };
    let cs = (0..k)
        .map(|i| {
            let data = task.sample(2 + i, 50 + i as u64).unwrap();
            let seeds = ClientSeeds { shuffle: 11, noise: 12 };
            Client::new(i as u32, model.clone(), data, trainer.clone(), policy.clone(), seeds).unwrap()
        })
        .collect();
    let mut state = GlobalState::new(init_params(&model, 4), AggregationMode::Weighted);
    if momentum == MomentumMode::MAggregation {
        state = state.with_moments();
    }
    (cs, state)
}

type Trace = Vec<(u32, Vec<u64>, Vec<u64>)>;

fn run(transport: &Transport, momentum: MomentumMode, policy: PrivacyPolicy) -> (GlobalState, Trace) {
    let (mut cs, state) = clients(4, momentum, policy);
    let mut trace = Vec::new();
    let out = run_federation(transport, state, &mut cs, 5, |r| {
        trace.push((
            r.state.round,
            r.state.w.iter().map(|x| x.to_bits()).collect(),
            r.contributions.iter().map(|c| c.update.train_loss.to_bits()).collect(),
        ));
        Ok(())
    })
    .unwrap();
    (out, trace)
}

#[test]
fn in_process_matches_manual_orchestration() {
    let (mut manual_clients, mut state) = clients(2, MomentumMode::Restart, PrivacyPolicy::selective(0.4, 0.1));
    let start = state.clone();
    for round in 1..=3 {
        let bc = state.broadcast();
        let cs: Vec<_> = manual_clients
            .iter_mut()
            .map(|c| RoundContribution {
                client_id: c.id(),
                update: c.train_round(round, &bc).unwrap(),
            })
            .collect();
        state = aggregate(&state, &cs).unwrap();
    }
    let (mut cs, _) = clients(2, MomentumMode::Restart, PrivacyPolicy::selective(0.4, 0.1));
    let out = run_federation(&Transport::InProcess, start, &mut cs, 3, |_| Ok(())).unwrap();
    assert_eq!(out.round, 3);
    assert!(out.w.bit_eq(&state.w));
}

#[test]
fn tcp_and_in_process_agree_bit_for_bit() {
    for (momentum, policy) in [
        (MomentumMode::Restart, PrivacyPolicy::svt(0.3, 0.05, 50.0, 50.0)),
        (MomentumMode::MAggregation, PrivacyPolicy::off()),
    ] {
        let (a, ta) = run(&Transport::InProcess, momentum, policy.clone());
        let (b, tb) = run(&Transport::tcp_loopback(), momentum, policy);
        assert!(a.w.bit_eq(&b.w));
        let (ma, mb) = (a.moments.as_ref(), b.moments.as_ref());
        assert_eq!(
            ma.map(|m| m.m.iter().map(|x| x.to_bits()).collect::<Vec<_>>()),
            mb.map(|m| m.m.iter().map(|x| x.to_bits()).collect())
        );
        assert_eq!(ta, tb);
    }
}

#[test]
fn mismatched_version_is_rejected_with_error_envelope() {
    let (server_end, mut client_end) = channel_pair();
    let (_, state) = clients(1, MomentumMode::Restart, PrivacyPolicy::off());
    let mut hello = RoundEnvelope::new(0, Message::Hello { client_id: 0 });
    hello.version += 1;
    client_end.send(&hello).unwrap();
    let err = serve(vec![server_end], state, 2, |_| Ok(())).unwrap_err();
    assert_eq!(err.code(), "version_mismatch");
    let reply = client_end.recv().unwrap();
    match reply.message {
        Message::Error(text) => assert!(text.contains("version"), "{text}"),
        other => panic!("expected error envelope, got {other:?}"),
    }
}

#[test]
fn lost_connection_aborts_with_diagnostic() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (mut cs, state) = clients(2, MomentumMode::Restart, PrivacyPolicy::off());
    let mut good = cs.remove(0);
    let worker = std::thread::spawn(move || {
        let mut conn = fedsim_net::federation::connect(addr).unwrap();
        run_client(&mut conn, &mut good)
    });
    let quitter = std::thread::spawn(move || {
        let mut conn = fedsim_net::federation::connect(addr).unwrap();
        conn.send(&RoundEnvelope::new(0, Message::Hello { client_id: 1 }))
            .unwrap();
        // Hang up as soon as the first broadcast arrives.
        let first = conn.recv().unwrap();
        assert!(matches!(first.message, Message::Broadcast(_)));
    });
    let conns = accept_clients(&listener, 2, Duration::from_secs(10)).unwrap();
    let err = serve(conns, state, 3, |_| Ok(())).unwrap_err();
    assert_eq!(err.code(), "disconnected");
    assert!(err.to_string().contains("client 1"), "{err}");
    quitter.join().unwrap();
    let worker_result = worker.join().unwrap();
    assert_eq!(worker_result.unwrap_err().code(), "rejected");
}

#[test]
fn transport_names_parse() {
    assert_eq!("in-process".parse::<Transport>().unwrap(), Transport::InProcess);
    assert_eq!("tcp".parse::<Transport>().unwrap(), Transport::tcp_loopback());
    assert_eq!(
        "tcp://0.0.0.0:7000".parse::<Transport>().unwrap(),
        Transport::Tcp {
            bind: "0.0.0.0:7000".into()
        }
    );
    assert!("udp".parse::<Transport>().is_err());
}
