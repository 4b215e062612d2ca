mod common;

use std::fs;
use std::path::Path;
use std::sync::mpsc;
use std::time::Duration;

use fedgnn::transport::{Transport, TransportError};
use fedgnn_mqtt::{MqttConfig, MqttTransport, TlsFiles};
use rcgen::{BasicConstraints, CertificateParams, IsCa, Issuer, KeyPair};

struct Pki {
    _dir: tempfile::TempDir,
    ca: String,
    server: (String, String),
    client: (String, String),
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

/// A throwaway CA with one server and one client certificate.
fn pki() -> Pki {
    let dir = tempfile::tempdir().unwrap();
    let ca_key = KeyPair::generate().unwrap();
    let mut ca_params = CertificateParams::new(Vec::<String>::new()).unwrap();
    ca_params.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
    let ca_cert = ca_params.self_signed(&ca_key).unwrap();
    let issuer = Issuer::new(ca_params, ca_key);
    let leaf = |names: Vec<String>, stem: &str| {
        let key = KeyPair::generate().unwrap();
        let cert = CertificateParams::new(names).unwrap().signed_by(&key, &issuer).unwrap();
        (
            write(dir.path(), &format!("{stem}.pem"), &cert.pem()),
            write(dir.path(), &format!("{stem}.key"), &key.serialize_pem()),
        )
    };
    let server = leaf(vec!["localhost".into(), "127.0.0.1".into()], "server");
    let client = leaf(vec!["site-0".into()], "client");
    let ca = write(dir.path(), "ca.pem", &ca_cert.pem());
    Pki { _dir: dir, ca, server, client }
}

fn tls_config(port: u16, pki: &Pki) -> MqttConfig {
    MqttConfig {
        host: "localhost".into(),
        port,
        tls: Some(TlsFiles {
            ca: pki.ca.clone().into(),
            client: Some((pki.client.0.clone().into(), pki.client.1.clone().into())),
        }),
        connect_attempts: 2,
        backoff: Duration::from_millis(50),
        ..MqttConfig::default()
    }
}

#[test]
fn mutual_tls_round_trip() {
    let pki = pki();
    let port = common::start_broker(Some(common::ServerTls {
        ca: pki.ca.clone(),
        cert: pki.server.0.clone(),
        key: pki.server.1.clone(),
    }));
    let a = MqttTransport::connect(&tls_config(port, &pki), "a").unwrap();
    let b = MqttTransport::connect(&tls_config(port, &pki), "b").unwrap();
    let (tx, rx) = mpsc::channel();
    b.subscribe("fl/exp/join/#", tx).unwrap();
    a.publish("fl/exp/join", b"hello", false).unwrap();
    let d = rx.recv_timeout(Duration::from_secs(10)).unwrap();
    assert_eq!(d.payload, b"hello");
}

#[test]
fn untrusted_server_certificate_is_a_tls_error() {
    let pki = pki();
    let other = unrelated_ca(pki._dir.path());
    let port = common::start_broker(Some(common::ServerTls {
        ca: pki.ca.clone(),
        cert: pki.server.0.clone(),
        key: pki.server.1.clone(),
    }));
    let cfg = MqttConfig {
        tls: Some(TlsFiles {
            ca: other.into(),
            client: Some((pki.client.0.clone().into(), pki.client.1.clone().into())),
        }),
        ..tls_config(port, &pki)
    };
    match MqttTransport::connect(&cfg, "a") {
        Err(TransportError::Tls(_)) => {}
        Err(e) => panic!("expected a TLS error, got {e}"),
        Ok(_) => panic!("connected with an untrusted CA"),
    }
}

/// A CA certificate unrelated to the broker's.
fn unrelated_ca(dir: &Path) -> String {
    let key = KeyPair::generate().unwrap();
    let mut params = CertificateParams::new(Vec::<String>::new()).unwrap();
    params.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
    let cert = params.self_signed(&key).unwrap();
    write(dir, "other-ca.pem", &cert.pem())
}
