use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use super::{
    fedavg_aggregate, sample_clients, scaffold_aggregate, Algorithm, EarlyStopping, FederationConfig, FederationError,
    FederationOutcome, LocalOptimizer, LocalUpdate, Result, RoundLog, RoundPlan, UpdateBody,
};
use crate::model::{GraphInput, ModelConfig, ModelParameters};
use crate::seed::{derive_seed, hash_str};
use crate::training::{
    adam_step, batch_gradient, clip_gradients, evaluate, sgd_step, shuffled_batches, OptimizerState, TrainConfig,
};

/// Server-side round state with no I/O: planning, aggregation, validation
/// and early stopping.
pub struct ServerCore {
    config: FederationConfig,
    model: ModelConfig,
    seed: u64,
    registry: Vec<String>,
    validation: Arc<Vec<GraphInput>>,
    global: Vec<f64>,
    control: Vec<f64>,
    client_controls: BTreeMap<String, Vec<f64>>,
    stopper: EarlyStopping,
    best_params: Vec<f64>,
    log: Vec<RoundLog>,
    completed: u32,
    stopped: bool,
}

impl ServerCore {
    /// `seed` fixes the initial weights, client sampling and every client's training stream.
    pub fn new(
        config: FederationConfig,
        model: ModelConfig,
        seed: u64,
        mut registry: Vec<String>,
        validation: Arc<Vec<GraphInput>>,
    ) -> Result<Self> {
        config.validate()?;
        if validation.is_empty() {
            return Err(FederationError::Config("validation split is empty".into()));
        }
        registry.sort();
        registry.dedup();
        if registry.is_empty() {
            return Err(FederationError::Config("no registered clients".into()));
        }
        let global = ModelParameters::init(&model, seed).flatten();
        let n = global.len();
        let stopper = EarlyStopping::new(config.patience);
        Ok(Self {
            client_controls: registry.iter().map(|c| (c.clone(), vec![0.0; n])).collect(),
            config,
            model,
            seed,
            registry,
            validation,
            best_params: global.clone(),
            control: vec![0.0; n],
            global,
            stopper,
            log: Vec::new(),
            completed: 0,
            stopped: false,
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    pub fn registry(&self) -> &[String] {
        &self.registry
    }

    pub fn global(&self) -> &[f64] {
        &self.global
    }

    pub fn control(&self) -> &[f64] {
        &self.control
    }

    /// Last control variate reported by each client (zero before its first report).
    pub fn client_controls(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.client_controls
    }

    pub fn log(&self) -> &[RoundLog] {
        &self.log
    }

    /// True once early stopping fired or R rounds completed.
    pub fn finished(&self) -> bool {
        self.stopped || self.completed >= self.config.rounds
    }

    pub fn next_plan(&self) -> Result<RoundPlan> {
        let round = self.completed + 1;
        Ok(RoundPlan {
            round,
            participants: sample_clients(&self.registry, self.config.participation, self.seed, round)?,
            algorithm: self.config.algorithm,
            local_lr: self.config.local_lr,
            local_steps: self.config.local_steps,
            round_seed: derive_seed(self.seed, &[0x70d5, u64::from(round)]),
        })
    }

    /// SCAFFOLD updates on the wire carry only the new client variate; fill
    /// in its change against the last one this server saw.
    pub fn fill_control_delta(&self, update: &mut LocalUpdate) {
        if let UpdateBody::Scaffold { control, control_delta, .. } = &mut update.body {
            let zeros = vec![0.0; control.len()];
            let prev = self.client_controls.get(&update.client).unwrap_or(&zeros);
            *control_delta = control.iter().zip(prev).map(|(c, p)| c - p).collect();
        }
    }

    /// Aggregate the round's updates, evaluate on the validation split and
    /// apply early stopping.
    pub fn complete_round(&mut self, plan: &RoundPlan, updates: Vec<LocalUpdate>, wall_ms: u64) -> Result<&RoundLog> {
        if plan.round != self.completed + 1 {
            return Err(FederationError::Protocol(format!("round {} completed out of order", plan.round)));
        }
        let mut reported: Vec<&str> = updates.iter().map(|u| u.client.as_str()).collect();
        reported.sort_unstable();
        if reported != plan.participants.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(FederationError::Protocol(format!(
                "round {} expected updates from {:?}, got {:?}",
                plan.round, plan.participants, reported
            )));
        }
        if updates.iter().any(|u| u.round != plan.round) {
            return Err(FederationError::Protocol("update for another round".into()));
        }
        match self.config.algorithm {
            Algorithm::FedAvg => self.global = fedavg_aggregate(&updates)?,
            Algorithm::Scaffold => {
                let (w, c) = scaffold_aggregate(&updates, &self.global, &self.control, self.config.global_lr)?;
                self.global = w;
                self.control = c;
                for u in &updates {
                    if let UpdateBody::Scaffold { control, .. } = &u.body {
                        self.client_controls.insert(u.client.clone(), control.clone());
                    }
                }
            }
        }
        let params = ModelParameters::unflatten(&self.model, &self.global)?;
        let val_mae = evaluate(&self.validation, &params)?.mae;
        let stop = self.stopper.observe(plan.round, val_mae);
        if self.stopper.improved_at(plan.round) {
            self.best_params = self.global.clone();
        }
        self.completed = plan.round;
        self.stopped = stop;
        self.log.push(RoundLog {
            round: plan.round,
            algorithm: self.config.algorithm,
            participants: plan.participants.clone(),
            val_mae,
            wall_ms,
            early_stopped: stop,
        });
        Ok(self.log.last().unwrap())
    }

    pub fn outcome(&self) -> FederationOutcome {
        let (best_round, best_val_mae) = self.stopper.best();
        FederationOutcome {
            best_params: self.best_params.clone(),
            best_round,
            best_val_mae,
            final_params: self.global.clone(),
            log: self.log.clone(),
        }
    }
}

/// One client's data and persistent local state.
pub struct ClientCore {
    id: String,
    data: Arc<Vec<GraphInput>>,
    model: ModelConfig,
    train: TrainConfig,
    optimizer: LocalOptimizer,
    full_batch: bool,
    control: Vec<f64>,
    adam: Option<OptimizerState>,
}

impl ClientCore {
    pub fn new(
        id: impl Into<String>,
        data: Arc<Vec<GraphInput>>,
        model: ModelConfig,
        train: TrainConfig,
        federation: &FederationConfig,
    ) -> Result<Self> {
        let id = id.into();
        if data.is_empty() {
            return Err(FederationError::Config(format!("client {id} has no samples")));
        }
        let n = model.parameter_count();
        Ok(Self {
            id,
            data,
            model,
            train,
            optimizer: federation.optimizer(),
            full_batch: federation.full_batch,
            control: vec![0.0; n],
            adam: None,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn n_samples(&self) -> usize {
        self.data.len()
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    pub fn control(&self) -> &[f64] {
        &self.control
    }

    /// Overwrite the client variate, e.g. with the value actually sent on the wire.
    pub fn set_control(&mut self, control: Vec<f64>) {
        self.control = control;
    }

    /// Number of local steps K for a plan.
    pub fn steps_for(&self, plan: &RoundPlan) -> usize {
        if plan.local_steps > 0 {
            plan.local_steps as usize
        } else if self.full_batch {
            self.train.local_epochs.max(1)
        } else {
            self.data.len().div_ceil(self.train.batch_size.max(1)) * self.train.local_epochs.max(1)
        }
    }

    /// Train from `global` for one round. SCAFFOLD needs the server variate.
    pub fn local_round(&mut self, plan: &RoundPlan, global: &[f64], server_control: Option<&[f64]>) -> Result<LocalUpdate> {
        let n = self.model.parameter_count();
        if global.len() != n {
            return Err(FederationError::Protocol(format!(
                "global model has {} values, expected {n}",
                global.len()
            )));
        }
        let correction: Option<Vec<f64>> = match plan.algorithm {
            Algorithm::FedAvg => None,
            Algorithm::Scaffold => {
                let c = server_control.ok_or_else(|| FederationError::Protocol("SCAFFOLD round without server variate".into()))?;
                if c.len() != n {
                    return Err(FederationError::Protocol("server variate has the wrong length".into()));
                }
                Some(c.iter().zip(&self.control).map(|(c, ci)| c - ci).collect())
            }
        };
        let seed = derive_seed(plan.round_seed, &[hash_str(&self.id)]);
        let steps = self.steps_for(plan);
        if self.train.reset_optimizer_each_round || self.adam.is_none() {
            self.adam = Some(OptimizerState::new(n));
        }
        let mut flat = global.to_vec();
        let mut params = ModelParameters::unflatten(&self.model, &flat)?;
        let all: Vec<&GraphInput> = self.data.iter().collect();
        let mut raw_sum = vec![0.0; n];
        let mut done = 0usize;
        let mut epoch = 0u64;
        while done < steps {
            let epoch_seed = derive_seed(seed, &[epoch]);
            let batches = if self.full_batch {
                vec![(0..self.data.len()).collect::<Vec<_>>()]
            } else {
                shuffled_batches(self.data.len(), self.train.batch_size, epoch_seed)
            };
            for (b, idx) in batches.iter().enumerate() {
                if done == steps {
                    break;
                }
                let batch: Vec<&GraphInput> = if self.full_batch { all.clone() } else { idx.iter().map(|&i| &self.data[i]).collect() };
                let (_, mut grad) = batch_gradient(&batch, &params, Some(derive_seed(epoch_seed, &[b as u64, 1])))?;
                raw_sum.iter_mut().zip(&grad).for_each(|(s, g)| *s += g);
                if let Some(corr) = &correction {
                    grad.iter_mut().zip(corr).for_each(|(g, c)| *g += c);
                }
                if let Some(t) = self.train.clip {
                    clip_gradients(&mut grad, t)?;
                }
                match self.optimizer {
                    LocalOptimizer::Sgd => sgd_step(&mut flat, &grad, plan.local_lr),
                    LocalOptimizer::Adam => adam_step(&mut flat, &grad, self.adam.as_mut().unwrap(), &self.train),
                }
                params = ModelParameters::unflatten(&self.model, &flat)?;
                done += 1;
            }
            epoch += 1;
        }
        let body = match plan.algorithm {
            Algorithm::FedAvg => UpdateBody::Model(flat),
            Algorithm::Scaffold => {
                let c = server_control.unwrap();
                let control: Vec<f64> = match self.optimizer {
                    LocalOptimizer::Sgd => {
                        let scale = 1.0 / (steps as f64 * plan.local_lr);
                        (0..n)
                            .map(|i| self.control[i] - c[i] + scale * (global[i] - flat[i]))
                            .collect()
                    }
                    // Adam steps do not scale with the gradient, so the
                    // variate is the mean raw gradient along the trajectory.
                    LocalOptimizer::Adam => raw_sum.iter().map(|s| s / steps as f64).collect(),
                };
                let control_delta = control.iter().zip(&self.control).map(|(a, b)| a - b).collect();
                let delta = flat.iter().zip(global).map(|(w, g)| w - g).collect();
                self.control = control.clone();
                UpdateBody::Scaffold {
                    delta,
                    control,
                    control_delta,
                }
            }
        };
        Ok(LocalUpdate {
            client: self.id.clone(),
            round: plan.round,
            n_samples: self.data.len(),
            steps,
            body,
        })
    }
}

/// Run rounds with clients in memory, without serialisation. Clients train
/// in parallel; results do not depend on scheduling.
pub fn run_in_memory(server: &mut ServerCore, clients: &mut [ClientCore]) -> Result<FederationOutcome> {
    let mut ids: Vec<&str> = clients.iter().map(|c| c.id()).collect();
    ids.sort_unstable();
    if ids.iter().map(|s| s.to_string()).collect::<Vec<_>>() != server.registry() {
        return Err(FederationError::Config("client set differs from the server registry".into()));
    }
    while !server.finished() {
        let start = Instant::now();
        let plan = server.next_plan()?;
        let global = server.global().to_vec();
        let control = server.control().to_vec();
        let updates = clients
            .par_iter_mut()
            .filter(|c| plan.participants.iter().any(|p| p == c.id()))
            .map(|c| c.local_round(&plan, &global, Some(&control)))
            .collect::<Result<Vec<_>>>()?;
        server.complete_round(&plan, updates, start.elapsed().as_millis() as u64)?;
    }
    Ok(server.outcome())
}

/// Pooled training: one client holding all data, Adam state kept across
/// epochs, one epoch per round, early stopping on the shared validation split.
pub fn run_centralized(
    data: Arc<Vec<GraphInput>>,
    validation: Arc<Vec<GraphInput>>,
    model: &ModelConfig,
    train: &TrainConfig,
    federation: &FederationConfig,
    seed: u64,
) -> Result<FederationOutcome> {
    let config = FederationConfig {
        algorithm: Algorithm::FedAvg,
        participation: 1.0,
        local_optimizer: Some(federation.local_optimizer.unwrap_or(LocalOptimizer::Adam)),
        ..federation.clone()
    };
    let train = TrainConfig {
        reset_optimizer_each_round: false,
        ..train.clone()
    };
    let mut server = ServerCore::new(config.clone(), model.clone(), seed, vec!["pooled".into()], validation)?;
    let mut client = [ClientCore::new("pooled", data, model.clone(), train, &config)?];
    run_in_memory(&mut server, &mut client)
}

/// Independent pooled-style training per client, all sharing `seed` for
/// initialisation and the server-held validation split.
pub fn run_isolated(
    shards: &[(String, Arc<Vec<GraphInput>>)],
    validation: Arc<Vec<GraphInput>>,
    model: &ModelConfig,
    train: &TrainConfig,
    federation: &FederationConfig,
    seed: u64,
) -> Result<Vec<(String, FederationOutcome)>> {
    shards
        .par_iter()
        .map(|(id, data)| {
            run_centralized(data.clone(), validation.clone(), model, train, federation, seed).map(|o| (id.clone(), o))
        })
        .collect()
}
