//! Server and client processes speaking the federation protocol over a
//! [`Transport`].
//!
//! Parameters travel as 32-bit floats. The server keeps its own state in
//! 64-bit and aggregates updates sorted by client id, so a run depends only
//! on seeds, data and configuration, never on delivery timing.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use tracing::{debug, info, warn};

use super::{
    Algorithm, ClientCore, FederationConfig, FederationError, FederationOutcome, LocalUpdate, Result, RoundPlan, ServerCore,
    UpdateBody,
};
use crate::transport::wire::{
    AlgorithmTag, Body, EndReason, ExperimentEnd, FederationMessage, GlobalModel, Join, JoinAck, LocalUpdateMsg,
    ModelPayload, RoundAbort,
};
use crate::transport::chunk::MIN_CHUNK;
use crate::transport::{valid_id, Inbox, Outbox, Sent, Transport, TransportError, DEFAULT_MAX_CHUNK};

pub const SERVER_ID: &str = "server";

const FOREIGN_EXPERIMENT: &str = "unknown experiment";

/// Transport-level knobs shared by servers and clients.
#[derive(Debug, Clone, PartialEq)]
pub struct WireOptions {
    pub max_chunk: usize,
    pub compress: bool,
    pub reassembly_timeout: Duration,
    /// How often an idle client re-announces itself.
    pub rejoin_interval: Duration,
    /// A client gives up after this long without hearing from the server.
    pub idle_timeout: Duration,
}

impl Default for WireOptions {
    fn default() -> Self {
        Self {
            max_chunk: DEFAULT_MAX_CHUNK,
            compress: false,
            reassembly_timeout: Duration::from_secs(30),
            rejoin_interval: Duration::from_secs(2),
            idle_timeout: Duration::from_secs(1800),
        }
    }
}

impl WireOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_chunk < MIN_CHUNK {
            return Err(FederationError::Config(format!("max_chunk {} is below {MIN_CHUNK} bytes", self.max_chunk)));
        }
        if self.rejoin_interval.is_zero() {
            return Err(FederationError::Config("rejoin_interval must be positive".into()));
        }
        Ok(())
    }
}

fn tag(a: Algorithm) -> AlgorithmTag {
    match a {
        Algorithm::FedAvg => AlgorithmTag::FedAvg,
        Algorithm::Scaffold => AlgorithmTag::Scaffold,
    }
}

fn quantize(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x as f32)).collect()
}

struct Registration {
    nonce: u64,
}

/// Parameter server over a transport.
pub struct Server {
    core: ServerCore,
    experiment: String,
    session: u64,
    feature_scheme: u8,
    outbox: Outbox,
    inbox: Inbox,
    joined: BTreeMap<String, Registration>,
}

impl Server {
    pub fn new(core: ServerCore, experiment: &str, session: u64, transport: Arc<dyn Transport>, options: &WireOptions) -> Result<Self> {
        options.validate()?;
        if !valid_id(experiment) {
            return Err(TransportError::InvalidId(experiment.to_string()).into());
        }
        let mut inbox = Inbox::new(transport.clone(), options.reassembly_timeout);
        inbox.subscribe("fl/+/join")?;
        inbox.subscribe(&format!("fl/{experiment}/round/+/update"))?;
        Ok(Self {
            feature_scheme: core.model().feature_scheme.id(),
            core,
            experiment: experiment.to_string(),
            session,
            outbox: Outbox::new(transport, options.max_chunk, options.compress),
            inbox,
            joined: BTreeMap::new(),
        })
    }

    pub fn core(&self) -> &ServerCore {
        &self.core
    }

    fn message(&self, round: u32, body: Body) -> FederationMessage {
        FederationMessage {
            experiment: self.experiment.clone(),
            round,
            sender: SERVER_ID.into(),
            body,
        }
    }

    fn ack(&self, experiment: &str, client: &str, accepted: bool, reason: &str) -> Result<()> {
        let msg = FederationMessage {
            experiment: experiment.to_string(),
            round: 0,
            sender: SERVER_ID.into(),
            body: Body::JoinAck(JoinAck {
                client: client.to_string(),
                accepted,
                session: self.session,
                reason: reason.to_string(),
            }),
        };
        self.outbox.send(&msg)?;
        Ok(())
    }

    fn handle_join(&mut self, msg: &FederationMessage, join: &Join) -> Result<()> {
        let client = msg.sender.as_str();
        let reject = |s: &Self, why: &str| {
            warn!(client, experiment = %msg.experiment, "join rejected: {why}");
            s.ack(&msg.experiment, client, false, why)
        };
        if msg.experiment != self.experiment {
            return reject(self, &format!("{FOREIGN_EXPERIMENT} `{}`", msg.experiment));
        }
        if !self.core.registry().iter().any(|c| c == client) {
            return reject(self, "client id not registered for this experiment");
        }
        if join.feature_scheme != self.feature_scheme || join.param_count as usize != self.core.model().parameter_count() {
            return reject(self, "model configuration mismatch");
        }
        if join.n_samples == 0 {
            return reject(self, "client has no samples");
        }
        match self.joined.get(client) {
            Some(r) if r.nonce != join.nonce => reject(self, "duplicate client id"),
            Some(_) => self.ack(&msg.experiment, client, true, ""),
            None => {
                info!(client, n = join.n_samples, "client joined");
                self.joined.insert(client.to_string(), Registration { nonce: join.nonce });
                self.ack(&msg.experiment, client, true, "")
            }
        }
    }

    fn wait_for_joins(&mut self, timeout: Duration) -> Result<()> {
        let deadline = Instant::now() + timeout;
        while self.joined.len() < self.core.registry().len() {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                let missing: Vec<&String> = self.core.registry().iter().filter(|c| !self.joined.contains_key(*c)).collect();
                return Err(FederationError::Timeout(format!("clients never joined: {missing:?}")));
            }
            if let Some(r) = self.inbox.recv(left.min(Duration::from_millis(500)))? {
                if let Body::Join(j) = &r.message.body {
                    self.handle_join(&r.message, j)?;
                }
            }
        }
        Ok(())
    }

    fn publish_global(&self, plan: &RoundPlan, attempt: u8) -> Result<Sent> {
        let algorithm = self.core.config().algorithm;
        let control = (algorithm == Algorithm::Scaffold).then(|| self.core.control());
        let body = Body::GlobalModel(GlobalModel {
            session: self.session,
            attempt,
            round_seed: plan.round_seed,
            local_lr: plan.local_lr,
            local_steps: plan.local_steps,
            participants: plan.participants.clone(),
            model: ModelPayload::from_f64(self.feature_scheme, tag(algorithm), self.core.global(), control),
        });
        Ok(self.outbox.send(&self.message(plan.round, body))?)
    }

    fn to_update(&self, msg: &FederationMessage, u: &LocalUpdateMsg) -> Result<LocalUpdate> {
        let n = self.core.model().parameter_count();
        if u.model.params.len() != n || u.model.algorithm != tag(self.core.config().algorithm) {
            return Err(FederationError::Protocol(format!("malformed update from {}", msg.sender)));
        }
        let body = match u.model.algorithm {
            AlgorithmTag::FedAvg => UpdateBody::Model(u.model.params_f64()),
            AlgorithmTag::Scaffold => UpdateBody::Scaffold {
                delta: u.model.params_f64(),
                control: u.model.control_f64().unwrap_or_default(),
                control_delta: Vec::new(),
            },
        };
        let mut update = LocalUpdate {
            client: msg.sender.clone(),
            round: msg.round,
            n_samples: u.n_samples as usize,
            steps: u.local_steps as usize,
            body,
        };
        self.core.fill_control_delta(&mut update);
        Ok(update)
    }

    /// Collect one update per participant; `None` on timeout.
    fn collect(&mut self, plan: &RoundPlan, deadline: Instant) -> Result<Option<Vec<LocalUpdate>>> {
        let wanted: BTreeSet<&str> = plan.participants.iter().map(String::as_str).collect();
        let mut got: BTreeMap<String, LocalUpdate> = BTreeMap::new();
        while got.len() < wanted.len() {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Ok(None);
            }
            let Some(r) = self.inbox.recv(left.min(Duration::from_millis(500)))? else { continue };
            match &r.message.body {
                Body::Join(j) => self.handle_join(&r.message, j)?,
                Body::LocalUpdate(u) => {
                    let m = &r.message;
                    if m.round != plan.round || u.session != self.session || !wanted.contains(m.sender.as_str()) {
                        debug!(sender = %m.sender, round = m.round, "ignoring stale or foreign update");
                        continue;
                    }
                    if got.contains_key(&m.sender) {
                        debug!(sender = %m.sender, round = m.round, "duplicate update dropped");
                        continue;
                    }
                    match self.to_update(m, u) {
                        Ok(update) => {
                            got.insert(m.sender.clone(), update);
                        }
                        Err(e) => warn!("{e}"),
                    }
                }
                _ => {}
            }
        }
        Ok(Some(got.into_values().collect()))
    }

    fn end(&self, round: u32, reason: EndReason, best_round: u32) -> Result<()> {
        self.outbox
            .send(&self.message(round, Body::ExperimentEnd(ExperimentEnd { reason, best_round })))?;
        Ok(())
    }

    /// Wait for every registered client, then run rounds until R or early stopping.
    pub fn run(mut self) -> Result<FederationOutcome> {
        let result = self.run_rounds();
        if let Err(e) = &result {
            if !matches!(e, FederationError::Aborted { .. }) {
                let round = self.core.log().last().map_or(0, |l| l.round);
                if let Err(end) = self.end(round, EndReason::Aborted, self.core.outcome().best_round) {
                    warn!("could not announce the abort: {end}");
                }
            }
        }
        result
    }

    fn run_rounds(&mut self) -> Result<FederationOutcome> {
        let cfg: FederationConfig = self.core.config().clone();
        self.wait_for_joins(Duration::from_millis(cfg.join_timeout_ms))?;
        info!(experiment = %self.experiment, clients = self.joined.len(), "all clients joined");
        while !self.core.finished() {
            let start = Instant::now();
            let plan = self.core.next_plan()?;
            let mut attempt = 0u8;
            let updates = loop {
                let sent = self.publish_global(&plan, attempt)?;
                let deadline = Instant::now() + Duration::from_millis(cfg.round_timeout_ms);
                let result = self.collect(&plan, deadline)?;
                self.outbox.clear_retained(&sent)?;
                if let Some(u) = result {
                    break u;
                }
                attempt += 1;
                let reason = format!("round {} timed out waiting for client updates", plan.round);
                if attempt >= cfg.max_attempts {
                    warn!("{reason}; aborting experiment");
                    self.end(plan.round, EndReason::Aborted, self.core.outcome().best_round)?;
                    return Err(FederationError::Aborted {
                        round: plan.round,
                        reason,
                        log: self.core.log().to_vec(),
                    });
                }
                warn!("{reason}; retrying");
                self.outbox.send(&self.message(
                    plan.round,
                    Body::RoundAbort(RoundAbort {
                        attempt: attempt - 1,
                        reason,
                    }),
                ))?;
            };
            let entry = self.core.complete_round(&plan, updates, start.elapsed().as_millis() as u64)?;
            info!(round = entry.round, val_mae = entry.val_mae, "round complete");
        }
        let outcome = self.core.outcome();
        let reason = if self.core.log().last().is_some_and(|l| l.early_stopped) {
            EndReason::EarlyStopped
        } else {
            EndReason::Completed
        };
        let last = self.core.log().last().map_or(0, |l| l.round);
        self.end(last, reason, outcome.best_round)?;
        Ok(outcome)
    }
}

/// What a client saw before the experiment ended.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientSummary {
    pub client: String,
    pub rounds_trained: u32,
    pub end_reason: Option<u8>,
}

/// Federated client over a transport.
pub struct Client {
    core: ClientCore,
    experiment: String,
    nonce: u64,
    outbox: Outbox,
    inbox: Inbox,
    options: WireOptions,
}

impl Client {
    pub fn new(core: ClientCore, experiment: &str, transport: Arc<dyn Transport>, options: &WireOptions) -> Result<Self> {
        options.validate()?;
        for id in [experiment, core.id()] {
            if !valid_id(id) {
                return Err(TransportError::InvalidId(id.to_string()).into());
            }
        }
        let mut inbox = Inbox::new(transport.clone(), options.reassembly_timeout);
        inbox.subscribe(&format!("fl/{experiment}/control"))?;
        inbox.subscribe(&format!("fl/{experiment}/round/+/global"))?;
        Ok(Self {
            core,
            experiment: experiment.to_string(),
            nonce: rand::random(),
            outbox: Outbox::new(transport, options.max_chunk, options.compress),
            inbox,
            options: options.clone(),
        })
    }

    fn join(&self) -> Result<()> {
        let msg = FederationMessage {
            experiment: self.experiment.clone(),
            round: 0,
            sender: self.core.id().to_string(),
            body: Body::Join(Join {
                nonce: self.nonce,
                n_samples: self.core.n_samples() as u32,
                feature_scheme: self.core.model().feature_scheme.id(),
                param_count: self.core.model().parameter_count() as u32,
            }),
        };
        self.outbox.send(&msg)?;
        Ok(())
    }

    fn train(&mut self, round: u32, g: &GlobalModel) -> Result<FederationMessage> {
        let algorithm = match g.model.algorithm {
            AlgorithmTag::FedAvg => Algorithm::FedAvg,
            AlgorithmTag::Scaffold => Algorithm::Scaffold,
        };
        let plan = RoundPlan {
            round,
            participants: g.participants.clone(),
            algorithm,
            local_lr: g.local_lr,
            local_steps: g.local_steps,
            round_seed: g.round_seed,
        };
        let control = g.model.control_f64();
        let update = self.core.local_round(&plan, &g.model.params_f64(), control.as_deref())?;
        let model = match &update.body {
            UpdateBody::Model(w) => ModelPayload::from_f64(g.model.feature_scheme, g.model.algorithm, w, None),
            UpdateBody::Scaffold { delta, control, .. } => {
                // Keep the variate the server will see.
                self.core.set_control(quantize(control));
                ModelPayload::from_f64(g.model.feature_scheme, g.model.algorithm, delta, Some(control))
            }
        };
        Ok(FederationMessage {
            experiment: self.experiment.clone(),
            round,
            sender: self.core.id().to_string(),
            body: Body::LocalUpdate(LocalUpdateMsg {
                session: g.session,
                attempt: g.attempt,
                n_samples: update.n_samples as u32,
                local_steps: update.steps as u32,
                model,
            }),
        })
    }

    /// Join, then train whenever selected, until the server ends the experiment.
    pub fn run(mut self) -> Result<ClientSummary> {
        let id = self.core.id().to_string();
        let mut session: Option<u64> = None;
        let mut last_sent: Option<(u32, FederationMessage)> = None;
        let mut answered: BTreeSet<(u64, u32, u8)> = BTreeSet::new();
        let mut rounds_trained = 0u32;
        let mut last_heard = Instant::now();
        let mut last_join = Instant::now();
        let mut foreign: Option<(String, Instant)> = None;
        self.join()?;
        loop {
            if let Some((reason, since)) = &foreign {
                if since.elapsed() >= self.options.rejoin_interval * 3 {
                    return Err(FederationError::JoinRejected(reason.clone()));
                }
            }
            if last_heard.elapsed() >= self.options.idle_timeout {
                return Err(FederationError::Timeout(format!("client {id} heard nothing from the server")));
            }
            let Some(r) = self.inbox.recv(self.options.rejoin_interval)? else {
                if last_join.elapsed() >= self.options.rejoin_interval {
                    self.join()?;
                    last_join = Instant::now();
                }
                continue;
            };
            let msg = r.message;
            match &msg.body {
                Body::JoinAck(a) if a.client == id => {
                    last_heard = Instant::now();
                    if !a.accepted {
                        // Another experiment's server may share the broker; only give up
                        // if nobody accepts within a few rejoin intervals.
                        if a.reason.starts_with(FOREIGN_EXPERIMENT) && session.is_none() {
                            foreign.get_or_insert((a.reason.clone(), Instant::now()));
                            continue;
                        }
                        return Err(FederationError::JoinRejected(a.reason.clone()));
                    }
                    foreign = None;
                    if session != Some(a.session) {
                        info!(client = %id, session = a.session, "joined");
                        session = Some(a.session);
                    }
                }
                Body::GlobalModel(g) => {
                    last_heard = Instant::now();
                    if session != Some(g.session) {
                        // A server we have not joined yet, e.g. after a restart.
                        self.join()?;
                        last_join = Instant::now();
                        continue;
                    }
                    if !g.participants.iter().any(|p| p == &id) || !answered.insert((g.session, msg.round, g.attempt)) {
                        continue;
                    }
                    let reply = match &last_sent {
                        Some((round, m)) if *round == msg.round => {
                            let mut m = m.clone();
                            if let Body::LocalUpdate(u) = &mut m.body {
                                u.attempt = g.attempt;
                            }
                            m
                        }
                        _ => {
                            let m = self.train(msg.round, g)?;
                            rounds_trained += 1;
                            m
                        }
                    };
                    self.outbox.send(&reply)?;
                    last_sent = Some((msg.round, reply));
                }
                Body::RoundAbort(a) => warn!(client = %id, round = msg.round, "round aborted: {}", a.reason),
                Body::ExperimentEnd(e) => {
                    info!(client = %id, "experiment ended");
                    return Ok(ClientSummary {
                        client: id,
                        rounds_trained,
                        end_reason: Some(e.reason as u8),
                    });
                }
                _ => {}
            }
        }
    }
}

/// Connects one participant (server or client id) to the transport.
pub type Connector<'a> = dyn Fn(&str) -> std::result::Result<Arc<dyn Transport>, TransportError> + Sync + 'a;

/// Run a server and all clients as threads of this process, each with its
/// own transport connection.
pub fn run_federation(
    core: ServerCore,
    clients: Vec<ClientCore>,
    experiment: &str,
    session: u64,
    connect: &Connector<'_>,
    options: &WireOptions,
) -> Result<(FederationOutcome, Vec<ClientSummary>)> {
    let server = Server::new(core, experiment, session, connect(SERVER_ID)?, options)?;
    let clients = clients
        .into_iter()
        .map(|c| {
            let t = connect(c.id())?;
            Client::new(c, experiment, t, options)
        })
        .collect::<Result<Vec<_>>>()?;
    std::thread::scope(|s| {
        let handles: Vec<_> = clients.into_iter().map(|c| s.spawn(move || c.run())).collect();
        let outcome = server.run();
        let summaries: Vec<Result<ClientSummary>> = handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(FederationError::Protocol("client thread panicked".into()))))
            .collect();
        let outcome = outcome?;
        let summaries = summaries.into_iter().collect::<Result<Vec<_>>>()?;
        Ok((outcome, summaries))
    })
}
