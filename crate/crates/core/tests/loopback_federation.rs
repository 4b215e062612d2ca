mod common;

use std::sync::Arc;
use std::time::Duration;

use fedgnn::federation::protocol::{run_federation, Client, ClientSummary, Server, WireOptions};
use fedgnn::federation::{Algorithm, ClientCore, FederationConfig, FederationError, FederationOutcome, ServerCore};
use fedgnn::model::{GraphInput, ModelConfig};
use fedgnn::training::TrainConfig;
use fedgnn::transport::loopback::LoopbackBroker;
use fedgnn::transport::{Transport, TransportError};

const N: usize = 6;
const L: usize = 2;

fn model() -> ModelConfig {
    common::toy_config(N, L)
}

fn inputs(seed: u64, count: usize) -> Arc<Vec<GraphInput>> {
    Arc::new(
        (0..count)
            .map(|i| GraphInput::from_sample(&common::toy_sample(seed * 100 + i as u64, N, L, 2, 80.0), model().feature_scheme))
            .collect(),
    )
}

fn config(algorithm: Algorithm, rounds: u32, participation: f64) -> FederationConfig {
    FederationConfig {
        algorithm,
        rounds,
        participation,
        patience: None,
        join_timeout_ms: 20_000,
        round_timeout_ms: 20_000,
        ..FederationConfig::default()
    }
}

fn ids(k: usize) -> Vec<String> {
    (0..k).map(|j| format!("site-{j}")).collect()
}

fn cores(cfg: &FederationConfig, k: usize) -> (ServerCore, Vec<ClientCore>) {
    let server = ServerCore::new(cfg.clone(), model(), 3, ids(k), inputs(999, 3)).unwrap();
    let clients = ids(k)
        .into_iter()
        .enumerate()
        .map(|(j, id)| ClientCore::new(id, inputs(j as u64, 2 + j), model(), TrainConfig::default(), cfg).unwrap())
        .collect();
    (server, clients)
}

fn run(cfg: &FederationConfig, k: usize, options: &WireOptions) -> (FederationOutcome, Vec<ClientSummary>, LoopbackBroker) {
    let broker = LoopbackBroker::new();
    let (server, clients) = cores(cfg, k);
    let b = broker.clone();
    let connect = move |_: &str| -> Result<Arc<dyn Transport>, TransportError> { Ok(Arc::new(b.clone())) };
    let (outcome, summaries) = run_federation(server, clients, "exp-1", 7, &connect, options).unwrap();
    (outcome, summaries, broker)
}

fn fingerprint(o: &FederationOutcome) -> (Vec<u64>, Vec<(u32, Vec<String>, u64)>) {
    (
        o.final_params.iter().map(|x| x.to_bits()).collect(),
        o.log.iter().map(|l| (l.round, l.participants.clone(), l.val_mae.to_bits())).collect(),
    )
}

#[test]
fn loopback_runs_are_bitwise_reproducible() {
    for algorithm in [Algorithm::FedAvg, Algorithm::Scaffold] {
        let cfg = config(algorithm, 4, 1.0);
        let (a, sa, _) = run(&cfg, 3, &WireOptions::default());
        let (b, _, _) = run(&cfg, 3, &WireOptions::default());
        assert_eq!(a.log.len(), 4);
        assert_eq!(fingerprint(&a), fingerprint(&b));
        assert!(sa.iter().all(|s| s.rounds_trained == 4 && s.end_reason.is_some()));
    }
}

#[test]
fn chunking_and_compression_do_not_change_the_result() {
    let cfg = config(Algorithm::FedAvg, 3, 1.0);
    let (plain, _, _) = run(&cfg, 2, &WireOptions::default());
    let small = WireOptions {
        max_chunk: 1024,
        compress: true,
        ..WireOptions::default()
    };
    let (chunked, _, broker) = run(&cfg, 2, &small);
    assert_eq!(fingerprint(&plain), fingerprint(&chunked));
    let audit = broker.audit_log();
    assert!(audit.iter().any(|(t, _)| t.contains("/chunk/")), "expected chunked topics");
    assert!(broker.retained_topics().iter().all(|t| !t.contains("/global")), "{:?}", broker.retained_topics());
}

#[test]
fn partial_participation_trains_only_selected_clients() {
    let cfg = config(Algorithm::FedAvg, 5, 0.5);
    let (outcome, summaries, _) = run(&cfg, 4, &WireOptions::default());
    for l in &outcome.log {
        assert_eq!(l.participants.len(), 2);
    }
    for s in &summaries {
        let selected = outcome.log.iter().filter(|l| l.participants.contains(&s.client)).count() as u32;
        assert_eq!(s.rounds_trained, selected, "{}", s.client);
    }
}

#[test]
fn unknown_and_mismatched_clients_are_rejected() {
    let broker = LoopbackBroker::new();
    let cfg = FederationConfig {
        join_timeout_ms: 3_000,
        ..config(Algorithm::FedAvg, 1, 1.0)
    };
    let (server, _) = cores(&cfg, 1);
    let options = WireOptions {
        rejoin_interval: Duration::from_millis(200),
        ..WireOptions::default()
    };
    let server = Server::new(server, "exp-1", 1, Arc::new(broker.clone()), &options).unwrap();

    let stranger = ClientCore::new("intruder", inputs(1, 2), model(), TrainConfig::default(), &cfg).unwrap();
    let other_model = ModelConfig {
        hidden: 4,
        ..model()
    };
    let mismatched = ClientCore::new("site-0", inputs(2, 2), other_model, TrainConfig::default(), &cfg).unwrap();

    std::thread::scope(|s| {
        let server = s.spawn(move || server.run());
        for (core, why) in [(stranger, "not registered"), (mismatched, "mismatch")] {
            let client = Client::new(core, "exp-1", Arc::new(broker.clone()), &options).unwrap();
            match client.run() {
                Err(FederationError::JoinRejected(reason)) => assert!(reason.contains(why), "{reason}"),
                other => panic!("expected a rejection, got {other:?}"),
            }
        }
        match server.join().unwrap() {
            Err(FederationError::Timeout(msg)) => assert!(msg.contains("site-0"), "{msg}"),
            other => panic!("expected a join timeout, got {other:?}"),
        }
    });
}

#[test]
fn invalid_identifiers_are_refused_before_connecting() {
    let cfg = config(Algorithm::FedAvg, 1, 1.0);
    let (server, _) = cores(&cfg, 1);
    let broker = LoopbackBroker::new();
    assert!(Server::new(server, "Bad/Exp", 1, Arc::new(broker.clone()), &WireOptions::default()).is_err());
    let tiny = WireOptions {
        max_chunk: 100,
        ..WireOptions::default()
    };
    let (server, _) = cores(&cfg, 1);
    assert!(matches!(
        Server::new(server, "exp-1", 1, Arc::new(broker.clone()), &tiny),
        Err(FederationError::Config(_))
    ));
    let client = ClientCore::new("UPPER", inputs(0, 2), model(), TrainConfig::default(), &cfg).unwrap();
    assert!(Client::new(client, "exp-1", Arc::new(broker), &WireOptions::default()).is_err());
}

#[test]
fn clients_of_another_experiment_are_turned_away() {
    let broker = LoopbackBroker::new();
    let cfg = FederationConfig {
        join_timeout_ms: 2_000,
        ..config(Algorithm::FedAvg, 1, 1.0)
    };
    let options = WireOptions {
        rejoin_interval: Duration::from_millis(100),
        ..WireOptions::default()
    };
    let (server, mut clients) = cores(&cfg, 1);
    let server = Server::new(server, "exp-1", 1, Arc::new(broker.clone()), &options).unwrap();
    let lost = Client::new(clients.remove(0), "exp-2", Arc::new(broker.clone()), &options).unwrap();
    std::thread::scope(|s| {
        let server = s.spawn(move || server.run());
        match lost.run() {
            Err(FederationError::JoinRejected(reason)) => assert!(reason.contains("exp-2"), "{reason}"),
            other => panic!("expected a rejection, got {other:?}"),
        }
        assert!(server.join().unwrap().is_err());
    });
}
