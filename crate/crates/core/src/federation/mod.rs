//! Synchronous federated rounds: FedAvg and SCAFFOLD aggregation, client
//! sampling, early stopping, and the server/client cores that drive them.

mod engine;
pub mod protocol;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;
use crate::seed::derive_seed;
use crate::training::TrainError;
use crate::transport::TransportError;

pub use engine::{run_centralized, run_in_memory, run_isolated, ClientCore, ServerCore};

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("invalid federation setup: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("join rejected: {0}")]
    JoinRejected(String),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("experiment aborted in round {round}: {reason}")]
    Aborted { round: u32, reason: String, log: Vec<RoundLog> },
}

pub type Result<T> = std::result::Result<T, FederationError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    FedAvg,
    Scaffold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalOptimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub algorithm: Algorithm,
    /// Maximum number of rounds R.
    pub rounds: u32,
    /// Rounds without a strict validation improvement before stopping; `None` disables.
    pub patience: Option<u32>,
    /// Fraction of registered clients sampled per round.
    pub participation: f64,
    /// Server step size η_g (SCAFFOLD).
    pub global_lr: f64,
    /// Local SGD step size η_l.
    pub local_lr: f64,
    /// Defaults to Adam for both algorithms.
    pub local_optimizer: Option<LocalOptimizer>,
    /// Local steps K per round; 0 means one pass over the shard per local epoch.
    pub local_steps: u32,
    /// Use the whole shard as every local batch.
    pub full_batch: bool,
    pub round_timeout_ms: u64,
    pub join_timeout_ms: u64,
    /// Attempts per round before the experiment is aborted.
    pub max_attempts: u8,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::FedAvg,
            rounds: 200,
            patience: Some(10),
            participation: 1.0,
            global_lr: 1.0,
            local_lr: 0.003,
            local_optimizer: None,
            local_steps: 0,
            full_batch: false,
            round_timeout_ms: 600_000,
            join_timeout_ms: 120_000,
            max_attempts: 2,
        }
    }
}

impl FederationConfig {
    pub fn optimizer(&self) -> LocalOptimizer {
        self.local_optimizer.unwrap_or(LocalOptimizer::Adam)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FederationError::Config(m.to_string()));
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad("participation must lie in (0, 1]");
        }
        if !(self.local_lr > 0.0 && self.local_lr.is_finite()) || !(self.global_lr > 0.0 && self.global_lr.is_finite()) {
            return bad("learning rates must be positive and finite");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be at least 1");
        }
        Ok(())
    }
}

/// One line of the JSON-lines round log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: u32,
    pub algorithm: Algorithm,
    pub participants: Vec<String>,
    pub val_mae: f64,
    pub wall_ms: u64,
    pub early_stopped: bool,
}

/// What the server hands each selected client at the start of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    pub round: u32,
    pub participants: Vec<String>,
    pub algorithm: Algorithm,
    pub local_lr: f64,
    pub local_steps: u32,
    pub round_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum UpdateBody {
    /// FedAvg: the locally trained parameters.
    Model(Vec<f64>),
    /// SCAFFOLD: model delta, the new client variate, and its change this round.
    Scaffold {
        delta: Vec<f64>,
        control: Vec<f64>,
        control_delta: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub client: String,
    pub round: u32,
    pub n_samples: usize,
    pub steps: usize,
    pub body: UpdateBody,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationOutcome {
    /// Parameters of the best validation round (W*).
    pub best_params: Vec<f64>,
    pub best_round: u32,
    pub best_val_mae: f64,
    pub final_params: Vec<f64>,
    pub log: Vec<RoundLog>,
}

/// Select the round's participants. Full participation returns the whole
/// registry; otherwise a seeded uniform subset of `ceil(fraction · n)`.
pub fn sample_clients(registry: &[String], participation: f64, seed: u64, round: u32) -> Result<Vec<String>> {
    if registry.is_empty() {
        return Err(FederationError::Config("no registered clients".into()));
    }
    let mut ids = registry.to_vec();
    ids.sort();
    if participation >= 1.0 {
        return Ok(ids);
    }
    let m = ((participation * ids.len() as f64).ceil() as usize).clamp(1, ids.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5a3b, u64::from(round)]));
    ids.shuffle(&mut rng);
    let mut chosen = ids[..m].to_vec();
    chosen.sort();
    Ok(chosen)
}

fn check_updates(updates: &[LocalUpdate], len: Option<usize>) -> Result<usize> {
    let first = updates
        .first()
        .ok_or_else(|| FederationError::Protocol("no updates to aggregate".into()))?;
    let expected = len.unwrap_or(match &first.body {
        UpdateBody::Model(w) => w.len(),
        UpdateBody::Scaffold { delta, .. } => delta.len(),
    });
    for u in updates {
        if u.round != first.round {
            return Err(FederationError::Protocol(format!(
                "updates from rounds {} and {} mixed",
                first.round, u.round
            )));
        }
        if u.n_samples == 0 {
            return Err(FederationError::Protocol(format!("client {} reported no samples", u.client)));
        }
        let ok = match &u.body {
            UpdateBody::Model(w) => w.len() == expected,
            UpdateBody::Scaffold {
                delta,
                control,
                control_delta,
            } => delta.len() == expected && control.len() == expected && control_delta.len() == expected,
        };
        if !ok {
            return Err(FederationError::Protocol(format!("update from {} has the wrong length", u.client)));
        }
    }
    Ok(expected)
}

fn sorted(updates: &[LocalUpdate]) -> Vec<&LocalUpdate> {
    let mut v: Vec<&LocalUpdate> = updates.iter().collect();
    v.sort_by(|a, b| a.client.cmp(&b.client));
    v
}

/// Sample-weighted average of client models: Σ (n_i / n) W_i.
pub fn fedavg_aggregate(updates: &[LocalUpdate]) -> Result<Vec<f64>> {
    let len = check_updates(updates, None)?;
    let total: usize = updates.iter().map(|u| u.n_samples).sum();
    let mut out = vec![0.0; len];
    for u in sorted(updates) {
        let UpdateBody::Model(w) = &u.body else {
            return Err(FederationError::Protocol(format!("{} sent a SCAFFOLD update to FedAvg", u.client)));
        };
        let weight = u.n_samples as f64 / total as f64;
        for (o, x) in out.iter_mut().zip(w) {
            *o += weight * x;
        }
    }
    Ok(out)
}

/// W^r = W^{r−1} + (η_g/|S|) Σ Δ_i and c^r = c^{r−1} + (1/|S|) Σ (c_i^r − c_i^{r−1}).
pub fn scaffold_aggregate(
    updates: &[LocalUpdate],
    global: &[f64],
    control: &[f64],
    global_lr: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_updates(updates, Some(global.len()))?;
    if control.len() != global.len() {
        return Err(FederationError::Protocol("server control variate has the wrong length".into()));
    }
    let s = updates.len() as f64;
    let mut dw = vec![0.0; global.len()];
    let mut dc = vec![0.0; global.len()];
    for u in sorted(updates) {
        let UpdateBody::Scaffold { delta, control_delta, .. } = &u.body else {
            return Err(FederationError::Protocol(format!("{} sent a FedAvg update to SCAFFOLD", u.client)));
        };
        for i in 0..global.len() {
            dw[i] += delta[i];
            dc[i] += control_delta[i];
        }
    }
    let w = global.iter().zip(&dw).map(|(g, d)| g + global_lr / s * d).collect();
    let c = control.iter().zip(&dc).map(|(c, d)| c + d / s).collect();
    Ok((w, c))
}

/// Patience-based early stopping on validation MAE.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: Option<u32>,
    best: f64,
    best_round: u32,
    since_best: u32,
}

impl EarlyStopping {
    pub fn new(patience: Option<u32>) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_round: 0,
            since_best: 0,
        }
    }

    /// Record a round; true means stop now. Only strict improvements reset the count.
    pub fn observe(&mut self, round: u32, val_mae: f64) -> bool {
        if val_mae < self.best {
            self.best = val_mae;
            self.best_round = round;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.patience.is_some_and(|p| self.since_best >= p)
    }

    pub fn improved_at(&self, round: u32) -> bool {
        self.best_round == round
    }

    pub fn best(&self) -> (u32, f64) {
        (self.best_round, self.best)
    }
}
