//! Publish/subscribe transport for federation messages.
//!
//! A [`Transport`] moves opaque byte payloads between topics. [`Outbox`] and
//! [`Inbox`] layer the binary envelope and chunking on top, so the federation
//! protocol never touches raw bytes.

pub mod chunk;
pub mod loopback;
pub mod wire;

use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;
use tracing::warn;

pub use chunk::{chunk_join, chunk_split, Chunk, Reassembler, DEFAULT_MAX_CHUNK};
pub use loopback::LoopbackBroker;
pub use wire::{decode, encode, Body, FederationMessage, MessageKind, WireError};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("broker unreachable: {0}")]
    Unreachable(String),
    #[error("TLS configuration: {0}")]
    Tls(String),
    #[error("invalid identifier `{0}`: must match [a-z0-9-]+")]
    InvalidId(String),
    #[error("invalid topic filter `{0}`")]
    InvalidFilter(String),
    #[error("transport closed")]
    Closed,
    #[error("transport I/O: {0}")]
    Io(String),
    #[error(transparent)]
    Wire(#[from] WireError),
}

pub type Result<T> = std::result::Result<T, TransportError>;

/// One payload as delivered to a subscriber.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub topic: String,
    pub payload: Vec<u8>,
}

/// Byte-level publish/subscribe.
///
/// Deliveries for every filter subscribed with the same `sink` land on one
/// queue. Implementations must deliver complete payloads at least once, keep
/// per-topic order from a single publisher, and replay the retained payload
/// of matching topics on subscribe. An empty retained payload clears the
/// topic.
pub trait Transport: Send + Sync {
    fn publish(&self, topic: &str, payload: &[u8], retain: bool) -> Result<()>;
    fn subscribe(&self, filter: &str, sink: Sender<Delivery>) -> Result<()>;
}

pub fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

fn check_id(id: &str) -> Result<&str> {
    if valid_id(id) {
        Ok(id)
    } else {
        Err(TransportError::InvalidId(id.to_string()))
    }
}

/// Logical topic for a message of `kind`. `client` is required for local updates.
pub fn topic_for(kind: MessageKind, experiment: &str, round: u32, client: Option<&str>) -> Result<String> {
    let exp = check_id(experiment)?;
    Ok(match kind {
        MessageKind::Join => format!("fl/{exp}/join"),
        MessageKind::GlobalModel => format!("fl/{exp}/round/{round}/global"),
        MessageKind::LocalUpdate => {
            let c = check_id(client.ok_or_else(|| TransportError::InvalidId(String::new()))?)?;
            format!("fl/{exp}/round/{round}/update/{c}")
        }
        MessageKind::JoinAck | MessageKind::RoundAbort | MessageKind::ExperimentEnd => format!("fl/{exp}/control"),
    })
}

/// Topic class of a logical topic, used to audit kind/topic consistency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TopicClass {
    Join { experiment: String },
    Global { experiment: String, round: u32 },
    Update { experiment: String, round: u32, client: String },
    Control { experiment: String },
}

impl TopicClass {
    pub fn experiment(&self) -> &str {
        match self {
            TopicClass::Join { experiment }
            | TopicClass::Global { experiment, .. }
            | TopicClass::Update { experiment, .. }
            | TopicClass::Control { experiment } => experiment,
        }
    }

    pub fn admits(&self, kind: MessageKind) -> bool {
        matches!(
            (self, kind),
            (TopicClass::Join { .. }, MessageKind::Join)
                | (TopicClass::Global { .. }, MessageKind::GlobalModel)
                | (TopicClass::Update { .. }, MessageKind::LocalUpdate)
                | (
                    TopicClass::Control { .. },
                    MessageKind::JoinAck | MessageKind::RoundAbort | MessageKind::ExperimentEnd
                )
        )
    }
}

pub fn parse_topic(topic: &str) -> Option<TopicClass> {
    let parts: Vec<&str> = topic.split('/').collect();
    let ok = |s: &str| valid_id(s).then(|| s.to_string());
    match parts.as_slice() {
        ["fl", exp, "join"] => Some(TopicClass::Join { experiment: ok(exp)? }),
        ["fl", exp, "control"] => Some(TopicClass::Control { experiment: ok(exp)? }),
        ["fl", exp, "round", r, "global"] => Some(TopicClass::Global {
            experiment: ok(exp)?,
            round: r.parse().ok()?,
        }),
        ["fl", exp, "round", r, "update", c] => Some(TopicClass::Update {
            experiment: ok(exp)?,
            round: r.parse().ok()?,
            client: ok(c)?,
        }),
        _ => None,
    }
}

/// MQTT topic filter matching (`+` one level, trailing `#` any number of levels, including none).
pub fn topic_matches(filter: &str, topic: &str) -> bool {
    let mut f = filter.split('/');
    let mut t = topic.split('/');
    loop {
        match (f.next(), t.next()) {
            (Some("#"), _) => return true,
            (Some("+"), Some(_)) => {}
            (Some(a), Some(b)) if a == b => {}
            (None, None) => return true,
            _ => return false,
        }
    }
}

pub fn valid_filter(filter: &str) -> bool {
    let levels: Vec<&str> = filter.split('/').collect();
    !filter.is_empty()
        && levels.iter().enumerate().all(|(i, l)| {
            (*l == "#" && i == levels.len() - 1) || *l == "+" || (!l.contains('#') && !l.contains('+'))
        })
}

/// Physical topic of chunk `index` of a message split into `total` chunks.
pub fn chunk_topic(logical: &str, index: u32, total: u32) -> String {
    if total == 1 {
        logical.to_string()
    } else {
        format!("{logical}/chunk/{index}")
    }
}

/// Inverse of [`chunk_topic`].
pub fn logical_topic(physical: &str) -> &str {
    if let Some(pos) = physical.rfind("/chunk/") {
        let tail = &physical[pos + 7..];
        if !tail.is_empty() && tail.bytes().all(|b| b.is_ascii_digit()) {
            return &physical[..pos];
        }
    }
    physical
}

/// Where a sent message ended up.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sent {
    pub topic: String,
    pub chunks: u32,
}

/// Encodes, chunks and publishes federation messages.
#[derive(Clone)]
pub struct Outbox {
    transport: Arc<dyn Transport>,
    max_chunk: usize,
    compress: bool,
}

impl Outbox {
    pub fn new(transport: Arc<dyn Transport>, max_chunk: usize, compress: bool) -> Self {
        Self {
            transport,
            max_chunk,
            compress,
        }
    }

    /// Publish on the topic implied by the message kind. Global models are retained.
    pub fn send(&self, msg: &FederationMessage) -> Result<Sent> {
        let client = (msg.kind() == MessageKind::LocalUpdate).then_some(msg.sender.as_str());
        let topic = topic_for(msg.kind(), &msg.experiment, msg.round, client)?;
        let retain = msg.kind() == MessageKind::GlobalModel;
        let bytes = wire::encode_with(msg, self.compress);
        let chunks = chunk_split(&bytes, self.max_chunk)?;
        let total = chunks.len() as u32;
        for c in &chunks {
            self.transport.publish(&chunk_topic(&topic, c.index, total), &c.encode(), retain)?;
        }
        Ok(Sent { topic, chunks: total })
    }

    pub fn clear_retained(&self, sent: &Sent) -> Result<()> {
        for i in 0..sent.chunks {
            self.transport.publish(&chunk_topic(&sent.topic, i, sent.chunks), &[], true)?;
        }
        Ok(())
    }
}

/// A decoded message and the logical topic it arrived on.
#[derive(Debug, Clone, PartialEq)]
pub struct Received {
    pub topic: String,
    pub message: FederationMessage,
}

/// Single-consumer receive side: reassembles chunks, decodes envelopes and
/// drops (with a warning) anything corrupt or on the wrong topic.
pub struct Inbox {
    transport: Arc<dyn Transport>,
    tx: Sender<Delivery>,
    rx: Receiver<Delivery>,
    reassembler: Reassembler,
    reassembly_timeout: Duration,
    dropped: u64,
}

impl Inbox {
    pub fn new(transport: Arc<dyn Transport>, reassembly_timeout: Duration) -> Self {
        let (tx, rx) = mpsc::channel();
        Self {
            transport,
            tx,
            rx,
            reassembler: Reassembler::new(),
            reassembly_timeout,
            dropped: 0,
        }
    }

    /// Subscribe to a logical filter; chunk sub-topics are covered automatically.
    pub fn subscribe(&mut self, filter: &str) -> Result<()> {
        if !valid_filter(filter) {
            return Err(TransportError::InvalidFilter(filter.to_string()));
        }
        let physical = if filter.ends_with('#') { filter.to_string() } else { format!("{filter}/#") };
        self.transport.subscribe(&physical, self.tx.clone())
    }

    /// Messages dropped so far because they were corrupt, incomplete or misrouted.
    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    /// Wait up to `timeout` for the next complete message.
    pub fn recv(&mut self, timeout: Duration) -> Result<Option<Received>> {
        let deadline = Instant::now() + timeout;
        loop {
            let now = Instant::now();
            for err in self.reassembler.expire(now, self.reassembly_timeout) {
                warn!(code = err.code(), "dropping incomplete message: {err}");
                self.dropped += 1;
            }
            let wait = deadline.saturating_duration_since(now);
            let delivery = match self.rx.recv_timeout(wait) {
                Ok(d) => d,
                Err(RecvTimeoutError::Timeout) => return Ok(None),
                Err(RecvTimeoutError::Disconnected) => return Err(TransportError::Closed),
            };
            if let Some(r) = self.accept(delivery) {
                return Ok(Some(r));
            }
            if Instant::now() >= deadline {
                return Ok(None);
            }
        }
    }

    fn accept(&mut self, d: Delivery) -> Option<Received> {
        if d.payload.is_empty() {
            return None;
        }
        let logical = logical_topic(&d.topic).to_string();
        let result = Chunk::decode(&d.payload)
            .and_then(|c| self.reassembler.push(c, Instant::now()))
            .and_then(|full| full.map(|b| wire::decode(&b)).transpose());
        match result {
            Ok(None) => None,
            Ok(Some(message)) => match parse_topic(&logical) {
                Some(class) if class.admits(message.kind()) && class.experiment() == message.experiment => Some(Received {
                    topic: logical,
                    message,
                }),
                _ => {
                    warn!(topic = %logical, kind = ?message.kind(), "dropping message on a topic of another kind");
                    self.dropped += 1;
                    None
                }
            },
            Err(err) => {
                warn!(code = err.code(), topic = %logical, "dropping message: {err}");
                self.dropped += 1;
                None
            }
        }
    }
}
