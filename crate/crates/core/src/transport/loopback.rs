//! In-process broker.
//!
//! Every publish is delivered while holding one lock, so all subscribers see
//! messages in the global publish order.

use std::collections::BTreeMap;
use std::sync::mpsc::Sender;
use std::sync::{Arc, Mutex};

use super::{topic_matches, valid_filter, Delivery, Result, Transport, TransportError};

#[derive(Default)]
struct State {
    subscriptions: Vec<(String, Sender<Delivery>)>,
    retained: BTreeMap<String, Vec<u8>>,
    audit: Vec<(String, bool)>,
}

/// Cloneable handle; all clones share one broker.
#[derive(Clone, Default)]
pub struct LoopbackBroker {
    state: Arc<Mutex<State>>,
}

impl LoopbackBroker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every `(topic, retain)` published so far, in order.
    pub fn audit_log(&self) -> Vec<(String, bool)> {
        self.state.lock().unwrap().audit.clone()
    }

    pub fn retained_topics(&self) -> Vec<String> {
        self.state.lock().unwrap().retained.keys().cloned().collect()
    }
}

impl Transport for LoopbackBroker {
    fn publish(&self, topic: &str, payload: &[u8], retain: bool) -> Result<()> {
        if topic.contains(['+', '#']) || topic.is_empty() {
            return Err(TransportError::InvalidFilter(topic.to_string()));
        }
        let mut st = self.state.lock().unwrap();
        st.audit.push((topic.to_string(), retain));
        if retain {
            if payload.is_empty() {
                st.retained.remove(topic);
            } else {
                st.retained.insert(topic.to_string(), payload.to_vec());
            }
        }
        st.subscriptions.retain(|(filter, tx)| {
            !topic_matches(filter, topic)
                || tx
                    .send(Delivery {
                        topic: topic.to_string(),
                        payload: payload.to_vec(),
                    })
                    .is_ok()
        });
        Ok(())
    }

    fn subscribe(&self, filter: &str, sink: Sender<Delivery>) -> Result<()> {
        if !valid_filter(filter) {
            return Err(TransportError::InvalidFilter(filter.to_string()));
        }
        let mut st = self.state.lock().unwrap();
        for (topic, payload) in &st.retained {
            if topic_matches(filter, topic) {
                let _ = sink.send(Delivery {
                    topic: topic.clone(),
                    payload: payload.clone(),
                });
            }
        }
        st.subscriptions.push((filter.to_string(), sink));
        Ok(())
    }
}
