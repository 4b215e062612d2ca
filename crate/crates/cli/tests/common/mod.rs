#![allow(dead_code)]

use std::collections::HashMap;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::time::{Duration, Instant};

use rumqttd::{Broker, Config, ConnectionSettings, RouterConfig, ServerSettings};

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

/// Start an in-process broker on a free local port and wait until it accepts connections.
pub fn start_broker() -> u16 {
    let port = free_port();
    let listen: SocketAddr = format!("127.0.0.1:{port}").parse().unwrap();
    let server = ServerSettings {
        name: "v4".into(),
        listen,
        tls: None,
        next_connection_delay_ms: 1,
        connections: ConnectionSettings {
            connection_timeout_ms: 60_000,
            max_payload_size: 10 << 20,
            max_inflight_count: 500,
            auth: None,
            external_auth: None,
            dynamic_filters: true,
        },
    };
    let config = Config {
        id: 0,
        router: RouterConfig {
            max_connections: 100,
            max_outgoing_packet_count: 500,
            max_segment_size: 64 << 20,
            max_segment_count: 10,
            ..RouterConfig::default()
        },
        v4: Some(HashMap::from([("1".to_string(), server)])),
        ..Config::default()
    };
    std::thread::spawn(move || {
        let mut broker = Broker::new(config);
        broker.start().expect("broker stopped");
    });
    let deadline = Instant::now() + Duration::from_secs(10);
    while TcpStream::connect(listen).is_err() {
        assert!(Instant::now() < deadline, "broker did not start");
        std::thread::sleep(Duration::from_millis(20));
    }
    port
}

pub mod toy {
    use fedgnn::graph::{
        assemble_multilayer, rewire_layer, Band, ConnectivityMatrix, Coupling, PatientSample, Region, RegionAtlas,
    };
    use fedgnn::model::{FeatureScheme, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub fn atlas(rng: &mut ChaCha8Rng, n: usize) -> RegionAtlas {
        RegionAtlas::new(
            (0..n)
                .map(|i| Region {
                    id: format!("r{i:02}"),
                    position: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                })
                .collect(),
        )
        .unwrap()
    }

    pub fn matrix(rng: &mut ChaCha8Rng, band: Band, n: usize) -> ConnectivityMatrix {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let x = rng.gen_range(0.0..1.0);
                values[i * n + j] = x;
                values[j * n + i] = x;
            }
        }
        ConnectivityMatrix::new(band, n, values).unwrap()
    }

    pub fn sample(seed: u64, n: usize, layers: usize, k: usize, percentile: f64) -> PatientSample {
        let mut rng = rng(seed);
        let atlas = atlas(&mut rng, n);
        let graphs = Band::ALL[..layers]
            .iter()
            .map(|&b| rewire_layer(&matrix(&mut rng, b, n), &atlas, k, percentile).unwrap())
            .collect();
        let graph = assemble_multilayer(graphs, Coupling::AdjacentReplica).unwrap();
        PatientSample::new(format!("toy{seed}"), "hosp-0", rng.gen_range(1..=42), graph).unwrap()
    }

    pub fn config(n: usize, layers: usize) -> ModelConfig {
        ModelConfig {
            regions: n,
            bands: layers,
            feature_scheme: FeatureScheme::OneHotPlusStrength,
            ..ModelConfig::default()
        }
    }
}
