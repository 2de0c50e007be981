//! Topic-addressed publish/subscribe bus with MQTT-style filters.
//!
//! Filters use `/`-separated levels; `+` matches exactly one level and a
//! trailing `#` matches any number of remaining levels, including none.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::messages::{MessageKind, Payload};
use crate::ids::ActorId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusMessage {
    pub topic: String,
    pub sender: ActorId,
    pub correlation_id: String,
    pub kind: MessageKind,
    pub payload: Payload,
    /// Per-sender counter, starting at 1.
    pub seq: u64,
}

#[derive(Debug, Error, PartialEq)]
pub enum BusError {
    #[error("invalid topic filter {0:?}")]
    InvalidFilter(String),
    #[error("invalid topic {0:?}")]
    InvalidTopic(String),
}

pub fn valid_topic(topic: &str) -> bool {
    !topic.is_empty() && !topic.contains(['+', '#'])
}

pub fn valid_filter(filter: &str) -> bool {
    if filter.is_empty() {
        return false;
    }
    let levels: Vec<&str> = filter.split('/').collect();
    levels.iter().enumerate().all(|(i, l)| match *l {
        "+" => true,
        "#" => i == levels.len() - 1,
        other => !other.contains(['+', '#']),
    })
}

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

#[derive(Debug, Default, Clone)]
pub struct MessageBus {
    subscriptions: BTreeMap<ActorId, BTreeSet<String>>,
    seqs: BTreeMap<ActorId, u64>,
}

impl MessageBus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn subscribe(&mut self, actor: &ActorId, filter: &str) -> Result<(), BusError> {
        if !valid_filter(filter) {
            return Err(BusError::InvalidFilter(filter.to_string()));
        }
        self.subscriptions
            .entry(actor.clone())
            .or_default()
            .insert(filter.to_string());
        Ok(())
    }

    pub fn unsubscribe(&mut self, actor: &ActorId, filter: &str) {
        if let Some(set) = self.subscriptions.get_mut(actor) {
            set.remove(filter);
        }
    }

    pub fn subscriptions(&self, actor: &ActorId) -> impl Iterator<Item = &str> {
        self.subscriptions
            .get(actor)
            .into_iter()
            .flat_map(|s| s.iter().map(String::as_str))
    }

    /// Actors (other than `sender`) with at least one filter matching
    /// `topic`, in id order. Each actor appears once.
    pub fn subscribers(&self, sender: &ActorId, topic: &str) -> Vec<ActorId> {
        self.subscriptions
            .iter()
            .filter(|(a, fs)| *a != sender && fs.iter().any(|f| topic_matches(f, topic)))
            .map(|(a, _)| a.clone())
            .collect()
    }

    /// Stamps the next sequence number of `sender` onto a new message and
    /// returns it together with its receivers.
    pub fn publish(
        &mut self,
        sender: &ActorId,
        topic: impl Into<String>,
        correlation_id: impl Into<String>,
        payload: Payload,
    ) -> Result<(BusMessage, Vec<ActorId>), BusError> {
        let topic = topic.into();
        if !valid_topic(&topic) {
            return Err(BusError::InvalidTopic(topic));
        }
        let seq = self.seqs.entry(sender.clone()).or_insert(0);
        *seq += 1;
        let msg = BusMessage {
            kind: payload.kind(),
            topic,
            sender: sender.clone(),
            correlation_id: correlation_id.into(),
            payload,
            seq: *seq,
        };
        let receivers = self.subscribers(sender, &msg.topic);
        Ok((msg, receivers))
    }
}
