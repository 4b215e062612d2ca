mod common;

use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use fedgnn_cli::commands;
use fedgnn_cli::config::ExperimentConfig;
use fedgnn_cli::experiment::RunReport;
use fedgnn_cli::modelfile::params_hash;
use serde_json::json;
use tempfile::TempDir;

fn fedgnn() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fedgnn"));
    c.env("FGFL_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    fedgnn().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small cohort shared by the tests in this file.
fn cohort() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-cohort");
        let _ = fs::remove_dir_all(&dir);
        let out = run(&["generate", "--out", p(&dir), "--patients", "40", "--seed", "4"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        dir
    })
}

fn write_config(dir: &Path, name: &str, value: serde_json::Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_vec_pretty(&value).unwrap()).unwrap();
    path
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn wait(child: &mut Child, limit: Duration) -> Option<i32> {
    let deadline = Instant::now() + limit;
    while Instant::now() < deadline {
        if let Some(status) = child.try_wait().unwrap() {
            return status.code();
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    let _ = child.kill();
    let _ = child.wait();
    None
}

#[test]
fn malformed_command_lines_exit_64() {
    assert_eq!(code(&run(&["run"])), 64);
    assert_eq!(code(&run(&["frobnicate"])), 64);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn a_missing_dataset_exits_4() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", json!({"algorithm": "centralized"}));
    let missing = tmp.path().join("nowhere");
    let out = run(&["run", "--config", p(&cfg), "--dataset", p(&missing), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn invalid_configurations_exit_3() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("o");
    for (name, value) in [
        ("unknown.json", json!({"algorithm": "fedavg", "federaton": {}})),
        ("bands.json", json!({"algorithm": "fedavg", "model": {"bands": 2}})),
        ("rounds.json", json!({"algorithm": "fedavg", "federation": {"rounds": 0}})),
    ] {
        let cfg = write_config(tmp.path(), name, value);
        let out = run(&["run", "--config", p(&cfg), "--dataset", p(cohort()), "--out", p(&out_dir)]);
        assert_eq!(code(&out), 3, "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(!out_dir.exists());
}

#[test]
fn an_unreachable_broker_exits_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        json!({"algorithm": "fedavg", "transport": {"kind": "mqtt", "connect_attempts": 2}}),
    );
    let broker = format!("127.0.0.1:{}", free_port());
    let out = run(&["client", "--config", p(&cfg), "--dataset", p(cohort()), "--id", "hosp-0", "--broker", &broker]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

fn federation(experiment: &str, rounds: u32) -> serde_json::Value {
    json!({
        "experiment": experiment,
        "algorithm": "fedavg",
        "seeds": [0],
        "federation": {"rounds": rounds, "patience": null},
        "transport": {"kind": "mqtt", "rejoin_interval_ms": 300}
    })
}

#[test]
fn a_client_of_another_experiment_exits_5() {
    let port = common::start_broker();
    let broker = format!("127.0.0.1:{port}");
    let tmp = TempDir::new().unwrap();
    let server_cfg = write_config(tmp.path(), "s.json", federation("exp-a", 2));
    let client_cfg = write_config(tmp.path(), "c.json", federation("exp-b", 2));
    let mut server = fedgnn()
        .args(["serve", "--config", p(&server_cfg), "--dataset", p(cohort()), "--broker", &broker])
        .args(["--out", p(&tmp.path().join("o"))])
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    std::thread::sleep(Duration::from_millis(500));
    let out = run(&["client", "--config", p(&client_cfg), "--dataset", p(cohort()), "--id", "hosp-0", "--broker", &broker]);
    let _ = server.kill();
    let _ = server.wait();
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("exp-b"));
}

/// One server and four client processes over a real broker arrive at the
/// same parameters as the in-process loopback federation.
#[test]
fn separate_processes_match_the_loopback_federation() {
    let port = common::start_broker();
    let broker = format!("127.0.0.1:{port}");
    let tmp = TempDir::new().unwrap();
    let cfg_path = write_config(tmp.path(), "f.json", federation("procs", 3));
    let out = tmp.path().join("server");
    let mut server = fedgnn()
        .args(["serve", "--config", p(&cfg_path), "--dataset", p(cohort()), "--broker", &broker, "--out", p(&out)])
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let clients: Vec<Child> = ["hosp-0", "hosp-1", "hosp-2", "hosp-3"]
        .iter()
        .map(|id| {
            fedgnn()
                .args(["client", "--config", p(&cfg_path), "--dataset", p(cohort()), "--id", id, "--broker", &broker])
                .stdout(Stdio::null())
                .spawn()
                .unwrap()
        })
        .collect();
    assert_eq!(wait(&mut server, Duration::from_secs(300)), Some(0), "server");
    for (i, mut c) in clients.into_iter().enumerate() {
        assert_eq!(wait(&mut c, Duration::from_secs(30)), Some(0), "client {i}");
    }

    let report: RunReport = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    let model = &report.seeds[0].models[0];
    assert_eq!(model.rounds_run, 3);
    let cfg = ExperimentConfig::load(&cfg_path).unwrap();
    let expected = commands::loopback_params(&cfg, cohort(), 0).unwrap();
    assert_eq!(model.params_sha256, params_hash(&expected));

    // the saved model feeds explain and compare
    let file = out.join("models").join("fedavg-seed-0.fgmd");
    let patient = report.test_patients[0].clone();
    let expl = tmp.path().join("explain");
    let o = run(&["explain", "--model", p(&file), "--dataset", p(cohort()), "--sample", &patient, "--samples", "3"])
        .status;
    assert!(!o.success(), "--out is required");
    let o = run(&[
        "explain", "--model", p(&file), "--dataset", p(cohort()), "--sample", &patient, "--samples", "3", "--out", p(&expl),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(expl.join("shapley.json").is_file() && expl.join("shapley.csv").is_file());
    let sim = tmp.path().join("sim");
    let o = run(&["compare", "--model", &format!("{}=a", p(&file)), &format!("{}=a", p(&file)), "--out", p(&sim)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let matrix: serde_json::Value = serde_json::from_slice(&fs::read(sim.join("similarity.json")).unwrap()).unwrap();
    assert!((matrix["mean"].as_f64().unwrap() - 1.0).abs() < 1e-12, "{matrix}");
}
