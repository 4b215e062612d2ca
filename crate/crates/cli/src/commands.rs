//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use fedgnn::datagen::{generate_cohort, CohortConfig, CohortManifest};
use fedgnn::explain::{explain_sample, similarity_matrix, ShapleyReport, SimilarityMatrix};
use fedgnn::federation::protocol::{Client, ClientSummary, Server};
use fedgnn::federation::FederationError;
use fedgnn::graph::{build_multilayer, PatientSample};
use fedgnn::transport::{LoopbackBroker, Transport, TransportError};
use fedgnn_mqtt::MqttTransport;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::config::{Arm, ExperimentConfig, TransportKind};
use crate::error::CliError;
use crate::experiment::{
    self, client_core, load_dataset, prepare, rounds_to_converge, server_core, trained, RunReport, SeedReport, Stat,
};
use crate::modelfile::ModelFile;
use crate::output::{write_json, Staged};

pub const MANIFEST: &str = "cohort.json";

/// Generate a cohort into `out`, which must not exist or be empty. The
/// dataset is built in a sibling temporary directory and renamed into place.
pub fn generate(cohort: &CohortConfig, out: &Path) -> Result<CohortManifest> {
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        bail!("{} exists and is not empty", out.display());
    }
    let (ds, manifest) = generate_cohort(cohort).map_err(|e| CliError::Schema(e.to_string()))?;
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let tmp = tempfile::Builder::new().prefix(".cohort-").tempdir_in(parent)?;
    ds.save(tmp.path())?;
    write_json(&tmp.path().join(MANIFEST), &manifest)?;
    if out.exists() {
        fs::remove_dir(out)?;
    }
    fs::rename(tmp.keep(), out).with_context(|| format!("moving dataset into {}", out.display()))?;
    Ok(manifest)
}

/// Rebuild a cohort from a manifest and check it matches.
pub fn regenerate(manifest_path: &Path, out: &Path) -> Result<CohortManifest> {
    let text = fs::read_to_string(manifest_path).with_context(|| manifest_path.display().to_string())?;
    let recorded: CohortManifest =
        serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", manifest_path.display())))?;
    let manifest = generate(&recorded.config, out)?;
    if manifest != recorded {
        bail!("regenerated cohort does not match {}", manifest_path.display());
    }
    Ok(manifest)
}

pub fn dataset_dir(cfg: &ExperimentConfig, flag: Option<&Path>) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.dataset.clone())
        .ok_or_else(|| CliError::Schema("no dataset given (use --dataset or the `dataset` key)".into()).into())
}

/// Run one arm and write its outputs under `out`.
pub fn run(cfg: &ExperimentConfig, dataset: &Path, out: &Path) -> Result<RunReport> {
    let output = experiment::run_experiment(cfg, dataset)?;
    let mut staged = Staged::default();
    output.stage(cfg, out, &mut staged)?;
    staged.commit()?;
    Ok(output.report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub mae: Stat,
    pub per_seed_mae: Vec<f64>,
    /// Mean over seeds and models of the first round within 5% of the best validation MAE.
    pub rounds_to_converge: f64,
    pub best_val_mae: Stat,
    pub improvement_over_baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline_mae: f64,
    pub arms: Vec<ArmSummary>,
}

impl Comparison {
    pub fn arm(&self, arm: Arm) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == arm)
    }
}

pub const CONVERGENCE_FRACTION: f64 = 0.05;

pub fn summarize(report: &RunReport) -> ArmSummary {
    let models: Vec<_> = report.seeds.iter().flat_map(|s| &s.models).collect();
    let rounds: Vec<f64> = models
        .iter()
        .filter_map(|m| rounds_to_converge(&m.log, CONVERGENCE_FRACTION))
        .map(f64::from)
        .collect();
    let best: Vec<f64> = models.iter().map(|m| m.best_val_mae).collect();
    ArmSummary {
        arm: report.algorithm,
        mae: report.mae,
        per_seed_mae: report.per_seed_mae(),
        rounds_to_converge: rounds.iter().sum::<f64>() / rounds.len().max(1) as f64,
        best_val_mae: Stat::of(&best),
        improvement_over_baseline: 1.0 - report.mae.mean / report.baseline_mae,
    }
}

pub fn convergence_csv(reports: &[RunReport]) -> String {
    let mut out = String::from("arm,seed,model,round,val_mae\n");
    for r in reports {
        for s in &r.seeds {
            for m in &s.models {
                for l in &m.log {
                    out.push_str(&format!("{},{},{},{},{}\n", r.algorithm.name(), s.seed, m.owner, l.round, l.val_mae));
                }
            }
        }
    }
    out
}

/// Run several arms from one configuration. Each arm goes to `out/<arm>/`;
/// `comparison.json` and `convergence.csv` summarise them.
pub fn run_arms(base: &ExperimentConfig, arms: &[Arm], dataset: &Path, out: &Path) -> Result<(Vec<RunReport>, Comparison)> {
    let mut staged = Staged::default();
    let mut reports = Vec::new();
    for &arm in arms {
        let cfg = ExperimentConfig {
            algorithm: arm,
            ..base.clone()
        };
        let output = experiment::run_experiment(&cfg, dataset)?;
        output.stage(&cfg, &out.join(arm.name()), &mut staged)?;
        reports.push(output.report);
    }
    let comparison = Comparison {
        baseline_mae: reports[0].baseline_mae,
        arms: reports.iter().map(summarize).collect(),
    };
    staged.add_json(out.join("comparison.json"), &comparison)?;
    staged.add(out.join("convergence.csv"), convergence_csv(&reports).into_bytes());
    staged.commit()?;
    Ok((reports, comparison))
}

fn connect(cfg: &ExperimentConfig, participant: &str) -> Result<Arc<dyn Transport>> {
    match cfg.transport.kind {
        TransportKind::Mqtt => {
            let mqtt = cfg.transport.mqtt()?;
            MqttTransport::connect(&mqtt, participant)
                .map(|t| Arc::new(t) as Arc<dyn Transport>)
                .map_err(|e| match e {
                    TransportError::Unreachable(m) => CliError::BrokerUnreachable(m).into(),
                    other => anyhow::Error::new(other),
                })
        }
        TransportKind::Loopback => {
            bail!(CliError::Schema("serve and client need --transport mqtt".into()))
        }
    }
}

/// Parameter server for one seed; writes a single-seed report and the model.
pub fn serve(cfg: &ExperimentConfig, dataset: &Path, seed: u64, out: &Path) -> Result<RunReport> {
    cfg.validate()?;
    if cfg.algorithm.federated().is_none() {
        bail!(CliError::Schema(format!("serve needs a federated algorithm, not {}", cfg.algorithm.name())));
    }
    let start = Instant::now();
    let ds = load_dataset(dataset)?;
    let dataset_hash = experiment::dataset_hash(dataset, &ds)?;
    let prep = prepare(cfg, &ds)?;
    let core = server_core(cfg, &prep, seed)?;
    let now = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_nanos() as u64);
    let session = fedgnn::seed::mix64(now ^ u64::from(std::process::id()));
    let server = Server::new(core, &cfg.experiment, session, connect(cfg, fedgnn::federation::protocol::SERVER_ID)?, &cfg.transport.wire_options())?;
    info!(experiment = %cfg.experiment, clients = prep.shards.len(), "waiting for clients");
    let outcome = server.run()?;
    let model = trained(cfg, &prep, "global", &outcome)?;
    let report = RunReport {
        experiment: cfg.experiment.clone(),
        algorithm: cfg.algorithm,
        setup: cfg.setup,
        transport: cfg.transport.kind,
        config_hash: cfg.hash(),
        dataset_hash,
        clients: prep.shards.iter().map(|(id, d)| (id.clone(), d.len())).collect(),
        n_train: prep.split.train.len(),
        n_validation: prep.split.validation.len(),
        n_test: prep.split.test.len(),
        test_patients: prep.split.test.iter().map(|&i| prep.patient_ids[i].clone()).collect(),
        baseline_mae: prep.baseline_mae,
        mae: Stat::of(&[model.test_mae]),
        mse: Stat::of(&[model.test_mse]),
        seeds: vec![SeedReport {
            seed,
            test_mae: model.test_mae,
            test_mse: model.test_mse,
            models: vec![model],
        }],
        per_client_mae: None,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let output = experiment::RunOutput {
        report,
        models: vec![(format!("{}-seed-{seed}", cfg.algorithm.name()), outcome.best_params)],
    };
    let mut staged = Staged::default();
    output.stage(cfg, out, &mut staged)?;
    staged.commit()?;
    Ok(output.report)
}

/// One client process: join, train when selected, return when the server ends the experiment.
pub fn client(cfg: &ExperimentConfig, dataset: &Path, id: &str) -> Result<ClientSummary> {
    cfg.validate()?;
    let ds = load_dataset(dataset)?;
    let prep = prepare(cfg, &ds)?;
    let core = client_core(cfg, &prep, id)?;
    let client = Client::new(core, &cfg.experiment, connect(cfg, id)?, &cfg.transport.wire_options())?;
    match client.run() {
        Err(FederationError::JoinRejected(why)) => Err(CliError::JoinRejected(why).into()),
        other => Ok(other?),
    }
}

/// Simulate a whole federation in-process over loopback; used to compare
/// against distributed runs.
pub fn loopback_params(cfg: &ExperimentConfig, dataset: &Path, seed: u64) -> Result<Vec<f64>> {
    let ds = load_dataset(dataset)?;
    let prep = prepare(cfg, &ds)?;
    let broker = LoopbackBroker::new();
    let connect = move |_: &str| -> Result<Arc<dyn Transport>, TransportError> { Ok(Arc::new(broker.clone())) };
    let clients = prep.shards.iter().map(|(id, _)| client_core(cfg, &prep, id)).collect::<Result<Vec<_>>>()?;
    let (o, _) = fedgnn::federation::protocol::run_federation(
        server_core(cfg, &prep, seed)?,
        clients,
        &cfg.experiment,
        experiment::session_for(&cfg.experiment, seed),
        &connect,
        &cfg.transport.wire_options(),
    )?;
    Ok(o.best_params)
}

/// Shapley attribution of one patient's prediction; writes `shapley.json` and `shapley.csv`.
pub fn explain(model: &Path, dataset: &Path, patient: &str, samples: usize, seed: u64, out: &Path) -> Result<ShapleyReport> {
    let file = ModelFile::load(model)?;
    let params = file.parameters()?;
    let ds = load_dataset(dataset)?;
    let record = ds
        .patients
        .iter()
        .find(|p| p.id == patient)
        .ok_or_else(|| anyhow::anyhow!("no patient `{patient}` in {}", dataset.display()))?;
    let graph = build_multilayer(&record.matrices, &ds.atlas, &file.header.graph)?;
    let sample = PatientSample::new(&record.id, &record.hospital, i64::from(record.label), graph)?;
    let regions: Vec<String> = ds.atlas.regions().iter().map(|r| r.id.clone()).collect();
    let report = explain_sample(&params, &sample, &regions, file.header.model.feature_scheme, samples, seed)?;
    let mut staged = Staged::default();
    staged.add_json(out.join("shapley.json"), &report)?;
    staged.add(out.join("shapley.csv"), report.to_csv().into_bytes());
    staged.commit()?;
    Ok(report)
}

/// Pairwise similarity of model files; writes `similarity.json` and `similarity.csv`.
pub fn compare(models: &[(PathBuf, String)], out: &Path) -> Result<SimilarityMatrix> {
    let mut loaded = Vec::with_capacity(models.len());
    for (path, group) in models {
        let file = ModelFile::load(path)?;
        let name = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        loaded.push((name, group.clone(), file.params));
    }
    let matrix = similarity_matrix(&loaded)?;
    let mut staged = Staged::default();
    staged.add_json(out.join("similarity.json"), &matrix)?;
    staged.add(out.join("similarity.csv"), matrix.to_csv().into_bytes());
    staged.commit()?;
    Ok(matrix)
}
