//! Experiment configuration file.
//!
//! JSON, validated before anything runs. Unknown keys are rejected at every
//! level.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use fedgnn::federation::protocol::WireOptions;
use fedgnn::federation::{Algorithm, FederationConfig};
use fedgnn::graph::RewireConfig;
use fedgnn::model::ModelConfig;
use fedgnn::training::TrainConfig;
use fedgnn::transport::{valid_id, DEFAULT_MAX_CHUNK};
use fedgnn_mqtt::{MqttConfig, TlsFiles};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    FedAvg,
    Scaffold,
    Centralized,
    Isolated,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::FedAvg, Arm::Scaffold, Arm::Centralized, Arm::Isolated];

    pub fn name(self) -> &'static str {
        match self {
            Arm::FedAvg => "fedavg",
            Arm::Scaffold => "scaffold",
            Arm::Centralized => "centralized",
            Arm::Isolated => "isolated",
        }
    }

    pub fn federated(self) -> Option<Algorithm> {
        match self {
            Arm::FedAvg => Some(Algorithm::FedAvg),
            Arm::Scaffold => Some(Algorithm::Scaffold),
            _ => None,
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown algorithm `{s}` (expected fedavg, scaffold, centralized or isolated)"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setup {
    /// One client per hospital.
    #[default]
    Realistic,
    /// Equal, label-stratified shards.
    Idealized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Held-out test patients shared by every arm.
    pub test_size: usize,
    pub seed: u64,
    /// Shards in the idealized setup.
    pub idealized_clients: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_size: 11,
            seed: 0,
            idealized_clients: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Loopback,
    Mqtt,
}

impl std::str::FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "loopback" => Ok(Self::Loopback),
            "mqtt" => Ok(Self::Mqtt),
            _ => Err(format!("unknown transport `{s}` (expected loopback or mqtt)")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TlsConfig {
    pub ca: PathBuf,
    pub cert: Option<PathBuf>,
    pub key: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportConfig {
    pub kind: TransportKind,
    /// `host:port`.
    pub broker: String,
    pub tls: Option<TlsConfig>,
    pub max_chunk: usize,
    pub compress: bool,
    pub connect_attempts: u32,
    pub rejoin_interval_ms: u64,
    pub idle_timeout_ms: u64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            kind: TransportKind::Loopback,
            broker: "127.0.0.1:1883".into(),
            tls: None,
            max_chunk: DEFAULT_MAX_CHUNK,
            compress: false,
            connect_attempts: 5,
            rejoin_interval_ms: 2_000,
            idle_timeout_ms: 1_800_000,
        }
    }
}

impl TransportConfig {
    pub fn wire_options(&self) -> WireOptions {
        WireOptions {
            max_chunk: self.max_chunk,
            compress: self.compress,
            rejoin_interval: Duration::from_millis(self.rejoin_interval_ms),
            idle_timeout: Duration::from_millis(self.idle_timeout_ms),
            ..WireOptions::default()
        }
    }

    pub fn mqtt(&self) -> Result<MqttConfig, CliError> {
        let tls = match &self.tls {
            None => None,
            Some(t) => Some(TlsFiles {
                ca: t.ca.clone(),
                client: match (&t.cert, &t.key) {
                    (Some(c), Some(k)) => Some((c.clone(), k.clone())),
                    (None, None) => None,
                    _ => return Err(CliError::Schema("tls.cert and tls.key must be given together".into())),
                },
            }),
        };
        let base = MqttConfig {
            tls,
            connect_attempts: self.connect_attempts,
            ..MqttConfig::default()
        };
        base.with_broker(&self.broker).map_err(|e| CliError::Schema(e.to_string()))
    }
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_experiment() -> String {
    "exp".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_experiment")]
    pub experiment: String,
    pub algorithm: Arm,
    #[serde(default)]
    pub setup: Setup,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Relative paths are resolved against the config file's directory.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub graph: RewireConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainConfig,
    /// `federation.algorithm` is taken from the top-level `algorithm`.
    #[serde(default)]
    pub federation: FederationConfig,
    #[serde(default)]
    pub transport: TransportConfig,
}

impl ExperimentConfig {
    pub fn new(algorithm: Arm) -> Self {
        Self {
            experiment: default_experiment(),
            algorithm,
            setup: Setup::default(),
            seeds: default_seeds(),
            dataset: None,
            split: SplitConfig::default(),
            graph: RewireConfig::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            federation: FederationConfig::default(),
            transport: TransportConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Schema(format!("cannot read {}: {e}", path.display())))?;
        let mut config: Self =
            serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
        if let Some(d) = &config.dataset {
            if d.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                config.dataset = Some(base.join(d));
            }
        }
        config.validate()?;
        Ok(config)
    }

    /// Federation settings with the arm's algorithm filled in.
    pub fn federation(&self) -> FederationConfig {
        FederationConfig {
            algorithm: self.algorithm.federated().unwrap_or(self.federation.algorithm),
            ..self.federation.clone()
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Schema(m));
        if !valid_id(&self.experiment) {
            return bad(format!("experiment id `{}` must match [a-z0-9-]+", self.experiment));
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.split.test_size == 0 {
            return bad("split.test_size must be at least 1".into());
        }
        if self.split.idealized_clients == 0 {
            return bad("split.idealized_clients must be at least 1".into());
        }
        if self.graph.bands.is_empty() {
            return bad("graph.bands must not be empty".into());
        }
        if !(0.0..=100.0).contains(&self.graph.percentile) {
            return bad("graph.percentile must lie in [0, 100]".into());
        }
        if self.model.bands != self.graph.bands.len() {
            return bad(format!(
                "model.bands is {} but graph.bands lists {} layers",
                self.model.bands,
                self.graph.bands.len()
            ));
        }
        if self.model.hidden == 0 || self.model.heads == 0 || self.model.gat_layers == 0 {
            return bad("model.hidden, model.heads and model.gat_layers must be positive".into());
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return bad("model.dropout must lie in [0, 1)".into());
        }
        if self.training.batch_size == 0 || self.training.local_epochs == 0 {
            return bad("training.batch_size and training.local_epochs must be positive".into());
        }
        if self.training.clip.is_some_and(|c| !(c > 0.0)) {
            return bad("training.clip must be positive".into());
        }
        self.federation().validate().map_err(|e| CliError::Schema(e.to_string()))?;
        self.transport.wire_options().validate().map_err(|e| CliError::Schema(e.to_string()))?;
        if self.transport.kind == TransportKind::Mqtt {
            self.transport.mqtt()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, excluding the dataset location.
    pub fn hash(&self) -> String {
        let canonical = Self {
            dataset: None,
            ..self.clone()
        };
        hex::encode(Sha256::digest(serde_json::to_vec(&canonical).expect("config serialises")))
    }
}
