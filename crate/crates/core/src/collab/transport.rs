//! In-process transport honoring the wire contract: per-agent ordered,
//! lossless queues of encoded messages; cross-agent interleaving is
//! timestamp-total-ordered in deterministic mode and randomized in live
//! mode. An early queue truncation models an agent disconnect.

use super::wire::{decode_message, encode_message};
use super::AgentMessage;
use crate::ids::AgentId;
use rand::Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryMode {
    /// Global timestamp order, ties broken by agent id.
    Deterministic,
    /// Arbitrary cross-agent interleaving (per-agent order preserved).
    Live,
}

#[derive(Debug, Default)]
pub struct Transport {
    queues: BTreeMap<AgentId, Vec<Vec<u8>>>,
}

impl Transport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Enqueue an agent's outgoing messages in order.
    pub fn send(&mut self, agent: AgentId, messages: &[AgentMessage]) {
        let queue = self.queues.entry(agent).or_default();
        for m in messages {
            queue.push(encode_message(m));
        }
    }

    /// Drop every queued message of `agent` past the first `keep`.
    pub fn disconnect_after(&mut self, agent: AgentId, keep: usize) {
        if let Some(q) = self.queues.get_mut(&agent) {
            q.truncate(keep);
        }
    }

    /// Drain all queues into one delivery order.
    pub fn deliver<R: Rng>(self, mode: DeliveryMode, rng: &mut R) -> Vec<AgentMessage> {
        let mut decoded: BTreeMap<AgentId, std::collections::VecDeque<AgentMessage>> = self
            .queues
            .into_iter()
            .map(|(agent, q)| {
                let msgs = q
                    .iter()
                    .map(|bytes| decode_message(bytes).expect("self-encoded message").0)
                    .collect();
                (agent, msgs)
            })
            .collect();

        let mut out = Vec::new();
        match mode {
            DeliveryMode::Deterministic => {
                loop {
                    // Peek the earliest head across agents.
                    let next = decoded
                        .iter()
                        .filter_map(|(agent, q)| q.front().map(|m| (m.timestamp(), *agent)))
                        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    let Some((_, agent)) = next else { break };
                    out.push(decoded.get_mut(&agent).unwrap().pop_front().unwrap());
                }
            }
            DeliveryMode::Live => loop {
                let nonempty: Vec<AgentId> = decoded
                    .iter()
                    .filter(|(_, q)| !q.is_empty())
                    .map(|(a, _)| *a)
                    .collect();
                if nonempty.is_empty() {
                    break;
                }
                let pick = nonempty[rng.random_range(0..nonempty.len())];
                out.push(decoded.get_mut(&pick).unwrap().pop_front().unwrap());
            },
        }
        out
    }
}
