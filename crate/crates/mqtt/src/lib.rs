//! MQTT binding of the federation [`Transport`].
//!
//! One background thread drives the rumqttc event loop and fans incoming
//! publishes out to the subscription sinks. All traffic uses QoS 1.

use std::fs;
use std::path::PathBuf;
use std::sync::mpsc::Sender;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use fedgnn::transport::{topic_matches, valid_filter, Delivery, Result, Transport, TransportError};
use rumqttc::{Client, ConnectionError, Event, MqttOptions, Packet, QoS};
use tracing::{debug, info, warn};

/// Largest MQTT packet accepted or sent.
pub const MAX_PACKET: usize = 10 << 20;

/// Certificate files in PEM form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TlsFiles {
    pub ca: PathBuf,
    /// Client certificate and key for mutual TLS.
    pub client: Option<(PathBuf, PathBuf)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MqttConfig {
    pub host: String,
    pub port: u16,
    pub tls: Option<TlsFiles>,
    pub keep_alive: Duration,
    /// Connection attempts before the broker is declared unreachable.
    pub connect_attempts: u32,
    /// First retry delay; doubles per attempt up to `max_backoff`.
    pub backoff: Duration,
    pub max_backoff: Duration,
    /// How long to wait for a subscription acknowledgement.
    pub ack_timeout: Duration,
}

impl Default for MqttConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 1883,
            tls: None,
            keep_alive: Duration::from_secs(30),
            connect_attempts: 5,
            backoff: Duration::from_millis(200),
            max_backoff: Duration::from_secs(5),
            ack_timeout: Duration::from_secs(10),
        }
    }
}

impl MqttConfig {
    /// Parse `host:port`, keeping the other settings.
    pub fn with_broker(mut self, addr: &str) -> Result<Self> {
        let (host, port) = addr
            .rsplit_once(':')
            .ok_or_else(|| TransportError::Unreachable(format!("broker address `{addr}` is not host:port")))?;
        self.port = port
            .parse()
            .map_err(|_| TransportError::Unreachable(format!("bad port in broker address `{addr}`")))?;
        self.host = host.trim_start_matches('[').trim_end_matches(']').to_string();
        Ok(self)
    }
}

#[derive(Default)]
struct State {
    connected: bool,
    ever_connected: bool,
    subacks: u64,
    published: u64,
    acked: u64,
    fatal: Option<TransportError>,
    closed: bool,
}

#[derive(Default)]
struct Shared {
    subscriptions: Mutex<Vec<(String, Sender<Delivery>)>>,
    state: Mutex<State>,
    changed: Condvar,
}

impl Shared {
    fn update(&self, f: impl FnOnce(&mut State)) {
        f(&mut self.state.lock().unwrap());
        self.changed.notify_all();
    }

    fn dispatch(&self, topic: &str, payload: &[u8]) {
        let mut subs = self.subscriptions.lock().unwrap();
        subs.retain(|(filter, tx)| {
            !topic_matches(filter, topic)
                || tx
                    .send(Delivery {
                        topic: topic.to_string(),
                        payload: payload.to_vec(),
                    })
                    .is_ok()
        });
    }
}

/// Connected MQTT session. Dropping it disconnects.
pub struct MqttTransport {
    client: Client,
    shared: Arc<Shared>,
    subscribe_lock: Mutex<()>,
    ack_timeout: Duration,
    worker: Option<JoinHandle<()>>,
}

fn read(path: &PathBuf) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| TransportError::Tls(format!("{}: {e}", path.display())))
}

fn is_tls_failure(e: &ConnectionError) -> bool {
    matches!(e, ConnectionError::Tls(_))
}

impl MqttTransport {
    /// Connect as `participant`, retrying with exponential backoff.
    pub fn connect(config: &MqttConfig, participant: &str) -> Result<Self> {
        let client_id = format!("fgfl-{participant}-{}", uuid::Uuid::new_v4().simple());
        let mut options = MqttOptions::new(&client_id, &config.host, config.port);
        options
            .set_keep_alive(config.keep_alive)
            .set_clean_session(true)
            .set_max_packet_size(MAX_PACKET, MAX_PACKET);
        if let Some(tls) = &config.tls {
            let ca = read(&tls.ca)?;
            let client_auth = match &tls.client {
                Some((cert, key)) => Some((read(cert)?, read(key)?)),
                None => None,
            };
            options.set_transport(rumqttc::Transport::tls(ca, client_auth, None));
        }
        let (client, mut connection) = Client::new(options, 256);
        let shared = Arc::new(Shared::default());

        let worker = {
            let shared = shared.clone();
            let client = client.clone();
            let cfg = config.clone();
            std::thread::Builder::new()
                .name(format!("mqtt-{participant}"))
                .spawn(move || {
                    let mut failures = 0u32;
                    let mut delay = cfg.backoff;
                    for event in connection.iter() {
                        if shared.state.lock().unwrap().closed {
                            break;
                        }
                        match event {
                            Ok(Event::Incoming(Packet::ConnAck(_))) => {
                                failures = 0;
                                delay = cfg.backoff;
                                let reconnect = shared.state.lock().unwrap().ever_connected;
                                if reconnect {
                                    info!("reconnected to broker, restoring subscriptions");
                                    let filters: Vec<String> =
                                        shared.subscriptions.lock().unwrap().iter().map(|(f, _)| f.clone()).collect();
                                    for f in filters {
                                        if let Err(e) = client.try_subscribe(f, QoS::AtLeastOnce) {
                                            warn!("resubscribe failed: {e}");
                                        }
                                    }
                                }
                                shared.update(|s| {
                                    s.connected = true;
                                    s.ever_connected = true;
                                });
                            }
                            Ok(Event::Incoming(Packet::Publish(p))) => {
                                shared.dispatch(&p.topic, &p.payload);
                            }
                            Ok(Event::Incoming(Packet::SubAck(_))) => shared.update(|s| s.subacks += 1),
                            Ok(Event::Incoming(Packet::PubAck(_))) => shared.update(|s| s.acked += 1),
                            Ok(_) => {}
                            Err(e) => {
                                shared.update(|s| s.connected = false);
                                if shared.state.lock().unwrap().closed {
                                    break;
                                }
                                if is_tls_failure(&e) {
                                    shared.update(|s| s.fatal = Some(TransportError::Tls(e.to_string())));
                                    break;
                                }
                                failures += 1;
                                let ever = shared.state.lock().unwrap().ever_connected;
                                if !ever && failures >= cfg.connect_attempts {
                                    shared.update(|s| {
                                        s.fatal = Some(TransportError::Unreachable(format!(
                                            "{}:{} after {failures} attempts: {e}",
                                            cfg.host, cfg.port
                                        )))
                                    });
                                    break;
                                }
                                warn!("broker connection error ({e}); retrying in {delay:?}");
                                std::thread::sleep(delay);
                                delay = (delay * 2).min(cfg.max_backoff);
                            }
                        }
                    }
                    shared.update(|s| {
                        s.connected = false;
                        s.closed = true;
                    });
                    // Dropping the senders wakes any receiver still waiting.
                    shared.subscriptions.lock().unwrap().clear();
                    debug!("mqtt event loop stopped");
                })
                .map_err(|e| TransportError::Io(e.to_string()))?
        };

        let transport = Self {
            client,
            shared,
            subscribe_lock: Mutex::new(()),
            ack_timeout: config.ack_timeout,
            worker: Some(worker),
        };
        {
            let mut st = transport.shared.state.lock().unwrap();
            while !st.connected {
                if let Some(e) = st.fatal.take() {
                    return Err(e);
                }
                if st.closed {
                    return Err(TransportError::Closed);
                }
                st = transport.shared.changed.wait(st).unwrap();
            }
        }
        info!(broker = %format!("{}:{}", config.host, config.port), client = %client_id, "connected");
        Ok(transport)
    }

    fn check_open(&self) -> Result<()> {
        let mut st = self.shared.state.lock().unwrap();
        if let Some(e) = st.fatal.take() {
            return Err(e);
        }
        if st.closed {
            return Err(TransportError::Closed);
        }
        Ok(())
    }
}

impl Transport for MqttTransport {
    fn publish(&self, topic: &str, payload: &[u8], retain: bool) -> Result<()> {
        if topic.is_empty() || topic.contains(['+', '#']) {
            return Err(TransportError::InvalidFilter(topic.to_string()));
        }
        self.check_open()?;
        self.shared.state.lock().unwrap().published += 1;
        self.client
            .publish(topic, QoS::AtLeastOnce, retain, payload.to_vec())
            .map_err(|e| TransportError::Io(e.to_string()))
    }

    /// Returns once the broker has acknowledged the subscription, so retained
    /// payloads and later publishes are not missed.
    fn subscribe(&self, filter: &str, sink: Sender<Delivery>) -> Result<()> {
        if !valid_filter(filter) {
            return Err(TransportError::InvalidFilter(filter.to_string()));
        }
        self.check_open()?;
        let _guard = self.subscribe_lock.lock().unwrap();
        let before = self.shared.state.lock().unwrap().subacks;
        self.shared.subscriptions.lock().unwrap().push((filter.to_string(), sink));
        self.client
            .subscribe(filter, QoS::AtLeastOnce)
            .map_err(|e| TransportError::Io(e.to_string()))?;
        let deadline = Instant::now() + self.ack_timeout;
        let mut st = self.shared.state.lock().unwrap();
        while st.subacks == before {
            if st.closed {
                return Err(st.fatal.take().unwrap_or(TransportError::Closed));
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(TransportError::Io(format!("no acknowledgement for subscription `{filter}`")));
            }
            st = self.shared.changed.wait_timeout(st, left).unwrap().0;
        }
        Ok(())
    }
}

impl Drop for MqttTransport {
    /// Waits briefly for outstanding publishes to be acknowledged, then disconnects.
    fn drop(&mut self) {
        let deadline = Instant::now() + self.ack_timeout;
        let mut st = self.shared.state.lock().unwrap();
        while st.connected && st.acked < st.published {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                warn!(pending = st.published - st.acked, "disconnecting with unacknowledged publishes");
                break;
            }
            st = self.shared.changed.wait_timeout(st, left).unwrap().0;
        }
        drop(st);
        self.shared.update(|s| s.closed = true);
        let _ = self.client.disconnect();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broker_addresses() {
        let c = MqttConfig::default().with_broker("broker.local:8883").unwrap();
        assert_eq!((c.host.as_str(), c.port), ("broker.local", 8883));
        let c = MqttConfig::default().with_broker("[::1]:1883").unwrap();
        assert_eq!(c.host, "::1");
        assert!(MqttConfig::default().with_broker("nohost").is_err());
        assert!(MqttConfig::default().with_broker("h:99999").is_err());
    }

    #[test]
    fn missing_certificate_is_a_tls_error() {
        let cfg = MqttConfig {
            tls: Some(TlsFiles {
                ca: "/nonexistent/ca.pem".into(),
                client: None,
            }),
            ..MqttConfig::default()
        };
        assert!(matches!(MqttTransport::connect(&cfg, "x"), Err(TransportError::Tls(_))));
    }
}
