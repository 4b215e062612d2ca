//! Running one experimental arm over all configured seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{Context, Result};
use fedgnn::datagen::{partition_idealized, partition_realistic, split_cohort, Split};
use fedgnn::dataset::Dataset;
use fedgnn::federation::protocol::run_federation;
use fedgnn::federation::{run_centralized, run_isolated, ClientCore, FederationOutcome, RoundLog, ServerCore};
use fedgnn::model::{GraphInput, ModelParameters};
use fedgnn::seed::{derive_seed, hash_str};
use fedgnn::training::{evaluate, Metrics};
use fedgnn::transport::{LoopbackBroker, Transport, TransportError};
use fedgnn_mqtt::MqttTransport;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::info;

use crate::config::{Arm, ExperimentConfig, Setup, TransportKind};
use crate::error::CliError;
use crate::modelfile::{params_hash, ModelFile};
use crate::output::{mean_std, Staged};

/// Load a dataset directory, distinguishing a missing one.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.join("patients.jsonl").is_file() {
        return Err(CliError::DatasetMissing(dir.to_path_buf()).into());
    }
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

/// SHA-256 over the atlas, the patient list and every matrix file in list order.
pub fn dataset_hash(dir: &Path, ds: &Dataset) -> Result<String> {
    let mut h = Sha256::new();
    for name in ["atlas.json", "patients.jsonl"] {
        let p = dir.join(name);
        h.update(fs::read(&p).with_context(|| p.display().to_string())?);
    }
    for p in &ds.patients {
        for m in p.matrices.values() {
            h.update(fedgnn::dataset::encode_matrix(m));
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// Inputs and splits shared by every seed of a run.
pub struct Prepared {
    pub patient_ids: Vec<String>,
    pub split: Split,
    pub train: Arc<Vec<GraphInput>>,
    pub validation: Arc<Vec<GraphInput>>,
    pub test: Arc<Vec<GraphInput>>,
    /// Client shards, sorted by id.
    pub shards: Vec<(String, Arc<Vec<GraphInput>>)>,
    /// Test MAE of always predicting the median training label.
    pub baseline_mae: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn prepare(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Prepared> {
    if ds.atlas.len() != cfg.model.regions {
        return Err(CliError::Schema(format!(
            "model.regions is {} but the dataset atlas has {} regions",
            cfg.model.regions,
            ds.atlas.len()
        ))
        .into());
    }
    if let Some(p) = ds.patients.iter().find(|p| cfg.graph.bands.iter().any(|b| !p.matrices.contains_key(b))) {
        return Err(CliError::Schema(format!(
            "patient {} lacks a matrix for one of graph.bands {:?}",
            p.id, cfg.graph.bands
        ))
        .into());
    }
    let labels = ds.labels();
    if cfg.split.test_size >= labels.len() {
        return Err(CliError::Schema(format!("split.test_size must be below the cohort size {}", labels.len())).into());
    }
    let samples = ds.samples(&cfg.graph)?;
    let inputs: Vec<GraphInput> = samples.iter().map(|s| GraphInput::from_sample(s, cfg.model.feature_scheme)).collect();
    let split = split_cohort(&labels, cfg.split.test_size, cfg.split.seed)?;
    let pick = |idx: &[usize]| Arc::new(idx.iter().map(|&i| inputs[i].clone()).collect::<Vec<_>>());
    let mut shards = match cfg.setup {
        Setup::Realistic => {
            let hospitals: Vec<String> = ds.patients.iter().map(|p| p.hospital.clone()).collect();
            partition_realistic(&hospitals, &split.train)?
        }
        Setup::Idealized => partition_idealized(&labels, &split.train, cfg.split.idealized_clients)?,
    };
    shards.sort_by(|a, b| a.id.cmp(&b.id));
    for s in &shards {
        if !fedgnn::transport::valid_id(&s.id) {
            return Err(CliError::Schema(format!("client id `{}` must match [a-z0-9-]+", s.id)).into());
        }
    }
    let train = pick(&split.train);
    let test = pick(&split.test);
    let m = median(train.iter().map(|g| g.label).collect());
    let baseline_mae = test.iter().map(|g| (g.label - m).abs()).sum::<f64>() / test.len() as f64;
    Ok(Prepared {
        patient_ids: ds.patients.iter().map(|p| p.id.clone()).collect(),
        validation: pick(&split.validation),
        shards: shards.iter().map(|s| (s.id.clone(), pick(&s.members))).collect(),
        split,
        train,
        test,
        baseline_mae,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    /// `global`, `pooled`, or a client id for the isolated arm.
    pub owner: String,
    pub test_mae: f64,
    pub test_mse: f64,
    pub best_round: u32,
    pub best_val_mae: f64,
    pub rounds_run: u32,
    /// Hash of the returned (best-round) parameters.
    pub params_sha256: String,
    pub final_params_sha256: String,
    pub log: Vec<RoundLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    /// For the isolated arm, the mean over clients.
    pub test_mae: f64,
    pub test_mse: f64,
    pub models: Vec<TrainedModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub experiment: String,
    pub algorithm: Arm,
    pub setup: Setup,
    pub transport: TransportKind,
    pub config_hash: String,
    pub dataset_hash: String,
    pub clients: BTreeMap<String, usize>,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub test_patients: Vec<String>,
    pub baseline_mae: f64,
    pub seeds: Vec<SeedReport>,
    pub mae: Stat,
    pub mse: Stat,
    /// Isolated arm only: spread over every (client, seed) model.
    pub per_client_mae: Option<Stat>,
    pub wall_time_s: f64,
}

impl RunReport {
    pub fn per_seed_mae(&self) -> Vec<f64> {
        self.seeds.iter().map(|s| s.test_mae).collect()
    }

    /// Per-round validation MAE, one row per (seed, model, round).
    pub fn rounds_csv(&self) -> String {
        let mut out = String::from("seed,model,round,val_mae\n");
        for s in &self.seeds {
            for m in &s.models {
                for l in &m.log {
                    out.push_str(&format!("{},{},{},{}\n", s.seed, m.owner, l.round, l.val_mae));
                }
            }
        }
        out
    }

    pub fn round_log_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            seed: u64,
            model: &'a str,
            #[serde(flatten)]
            log: &'a RoundLog,
        }
        let mut out = String::new();
        for s in &self.seeds {
            for m in &s.models {
                for l in &m.log {
                    let line = Line {
                        seed: s.seed,
                        model: &m.owner,
                        log: l,
                    };
                    out.push_str(&serde_json::to_string(&line).expect("log line serialises"));
                    out.push('\n');
                }
            }
        }
        out
    }
}

fn connector(cfg: &ExperimentConfig) -> Result<Box<dyn Fn(&str) -> Result<Arc<dyn Transport>, TransportError> + Sync>> {
    Ok(match cfg.transport.kind {
        TransportKind::Loopback => {
            let broker = LoopbackBroker::new();
            Box::new(move |_: &str| -> Result<Arc<dyn Transport>, TransportError> { Ok(Arc::new(broker.clone())) })
        }
        TransportKind::Mqtt => {
            let mqtt = cfg.transport.mqtt()?;
            Box::new(move |id: &str| -> Result<Arc<dyn Transport>, TransportError> {
                Ok(Arc::new(MqttTransport::connect(&mqtt, id)?))
            })
        }
    })
}

/// Session id of a simulated run; fixed per (experiment, seed).
pub fn session_for(experiment: &str, seed: u64) -> u64 {
    derive_seed(hash_str(experiment), &[seed])
}

pub fn server_core(cfg: &ExperimentConfig, prep: &Prepared, seed: u64) -> Result<ServerCore> {
    let ids = prep.shards.iter().map(|s| s.0.clone()).collect();
    Ok(ServerCore::new(cfg.federation(), cfg.model.clone(), seed, ids, prep.validation.clone())?)
}

pub fn client_core(cfg: &ExperimentConfig, prep: &Prepared, id: &str) -> Result<ClientCore> {
    let (_, data) = prep
        .shards
        .iter()
        .find(|s| s.0 == id)
        .ok_or_else(|| CliError::Schema(format!("no shard `{id}` in this dataset (have {:?})", prep.shards.iter().map(|s| &s.0).collect::<Vec<_>>())))?;
    Ok(ClientCore::new(id, data.clone(), cfg.model.clone(), cfg.training.clone(), &cfg.federation())?)
}

pub fn test_metrics(cfg: &ExperimentConfig, prep: &Prepared, params: &[f64]) -> Result<Metrics> {
    Ok(evaluate(&prep.test, &ModelParameters::unflatten(&cfg.model, params)?)?)
}

pub fn trained(cfg: &ExperimentConfig, prep: &Prepared, owner: &str, o: &FederationOutcome) -> Result<TrainedModel> {
    let m = test_metrics(cfg, prep, &o.best_params)?;
    Ok(TrainedModel {
        owner: owner.to_string(),
        test_mae: m.mae,
        test_mse: m.mse,
        best_round: o.best_round,
        best_val_mae: o.best_val_mae,
        rounds_run: o.log.len() as u32,
        params_sha256: params_hash(&o.best_params),
        final_params_sha256: params_hash(&o.final_params),
        log: o.log.clone(),
    })
}

/// Train one seed. Returns the report and the best parameters per model.
pub fn run_seed(cfg: &ExperimentConfig, prep: &Prepared, seed: u64) -> Result<(SeedReport, Vec<(String, Vec<f64>)>)> {
    let fed = cfg.federation();
    let outcomes: Vec<(String, FederationOutcome)> = match cfg.algorithm {
        Arm::Centralized => vec![(
            "pooled".into(),
            run_centralized(prep.train.clone(), prep.validation.clone(), &cfg.model, &cfg.training, &fed, seed)?,
        )],
        Arm::Isolated => run_isolated(&prep.shards, prep.validation.clone(), &cfg.model, &cfg.training, &fed, seed)?,
        Arm::FedAvg | Arm::Scaffold => {
            let server = server_core(cfg, prep, seed)?;
            let clients = prep.shards.iter().map(|(id, _)| client_core(cfg, prep, id)).collect::<Result<Vec<_>>>()?;
            let connect = connector(cfg)?;
            let (outcome, _) = run_federation(
                server,
                clients,
                &cfg.experiment,
                session_for(&cfg.experiment, seed),
                &*connect,
                &cfg.transport.wire_options(),
            )?;
            vec![("global".into(), outcome)]
        }
    };
    let models = outcomes.iter().map(|(id, o)| trained(cfg, prep, id, o)).collect::<Result<Vec<_>>>()?;
    let n = models.len() as f64;
    let report = SeedReport {
        seed,
        test_mae: models.iter().map(|m| m.test_mae).sum::<f64>() / n,
        test_mse: models.iter().map(|m| m.test_mse).sum::<f64>() / n,
        models,
    };
    let params = outcomes.into_iter().map(|(id, o)| (id, o.best_params)).collect();
    Ok((report, params))
}

pub struct RunOutput {
    pub report: RunReport,
    /// (file label, best parameters) per seed and model.
    pub models: Vec<(String, Vec<f64>)>,
}

pub fn run_experiment(cfg: &ExperimentConfig, dataset_dir: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let ds = load_dataset(dataset_dir)?;
    let dataset_hash = dataset_hash(dataset_dir, &ds)?;
    let prep = prepare(cfg, &ds)?;
    let mut seeds = Vec::new();
    let mut models = Vec::new();
    for &seed in &cfg.seeds {
        let t = Instant::now();
        let (report, params) = run_seed(cfg, &prep, seed)?;
        info!(
            arm = cfg.algorithm.name(),
            seed,
            test_mae = report.test_mae,
            secs = t.elapsed().as_secs_f64(),
            "seed finished"
        );
        for (owner, p) in params {
            let label = match cfg.algorithm {
                Arm::Isolated => format!("{}-{owner}-seed-{seed}", cfg.algorithm.name()),
                _ => format!("{}-seed-{seed}", cfg.algorithm.name()),
            };
            models.push((label, p));
        }
        seeds.push(report);
    }
    let maes: Vec<f64> = seeds.iter().map(|s| s.test_mae).collect();
    let mses: Vec<f64> = seeds.iter().map(|s| s.test_mse).collect();
    let per_client_mae = (cfg.algorithm == Arm::Isolated)
        .then(|| Stat::of(&seeds.iter().flat_map(|s| s.models.iter().map(|m| m.test_mae)).collect::<Vec<_>>()));
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
        seeds,
        mae: Stat::of(&maes),
        mse: Stat::of(&mses),
        per_client_mae,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutput { report, models })
}

impl RunOutput {
    /// Stage report, per-round CSV and JSON lines, resolved config and model files under `out`.
    pub fn stage(&self, cfg: &ExperimentConfig, out: &Path, staged: &mut Staged) -> Result<()> {
        staged.add_json(out.join("report.json"), &self.report)?;
        staged.add(out.join("rounds.csv"), self.report.rounds_csv().into_bytes());
        staged.add(out.join("round_log.jsonl"), self.report.round_log_jsonl().into_bytes());
        staged.add_json(out.join("config.json"), cfg)?;
        for (label, params) in &self.models {
            let file = ModelFile::new(cfg.model.clone(), cfg.graph.clone(), label.clone(), params.clone());
            staged.add(model_path(out, label), file.encode());
        }
        Ok(())
    }
}

pub fn model_path(out: &Path, label: &str) -> PathBuf {
    out.join("models").join(format!("{label}.fgmd"))
}

/// First round whose validation MAE is within `frac` of the best one.
pub fn rounds_to_converge(log: &[RoundLog], frac: f64) -> Option<u32> {
    let best = log.iter().map(|l| l.val_mae).fold(f64::INFINITY, f64::min);
    log.iter().find(|l| l.val_mae <= best * (1.0 + frac)).map(|l| l.round)
}
