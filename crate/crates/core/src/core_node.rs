//! The core component: learns the registry from announce traffic, probes
//! liveness with heartbeats and validates outgoing set-value commands.
//!
//! Membership is derived purely from bus traffic. The core never looks at
//! which slots are physically occupied.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, Address, Frame, Message};
use crate::VirtualMs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeartbeatPolicy {
    pub interval_ms: VirtualMs,
    pub miss_threshold: u32,
    pub reply_window_ms: VirtualMs,
}

impl Default for HeartbeatPolicy {
    fn default() -> Self {
        HeartbeatPolicy {
            interval_ms: 500,
            miss_threshold: 3,
            reply_window_ms: 50,
        }
    }
}

impl HeartbeatPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.miss_threshold == 0 {
            return Err("miss_threshold must be at least 1".into());
        }
        if self.reply_window_ms >= self.interval_ms {
            return Err(format!(
                "reply_window_ms ({}) must be shorter than interval_ms ({})",
                self.reply_window_ms, self.interval_ms
            ));
        }
        Ok(())
    }

    /// Worst-case time from a module vanishing to its removal.
    pub fn detection_bound(&self) -> VirtualMs {
        self.interval_ms * (u64::from(self.miss_threshold) + 1)
    }
}

/// A variable as the core knows it from an announce: no name, just numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnouncedVariable {
    pub index: u8,
    pub min: u8,
    pub max: u8,
    pub granularity: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum Liveness {
    Alive { last_reply: VirtualMs },
    Suspect { missed: u32 },
    Disconnected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub address: Address,
    pub liveness: Liveness,
    pub variables: Vec<AnnouncedVariable>,
}

impl RegistryEntry {
    pub fn variable(&self, index: u8) -> Option<&AnnouncedVariable> {
        self.variables.iter().find(|v| v.index == index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DisconnectReason {
    /// Too many unanswered heartbeat probes.
    HeartbeatTimeout,
    /// A fresh power-up announce arrived from an address already registered.
    Replaced,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoreEvent {
    Registered {
        address: Address,
        variable: AnnouncedVariable,
    },
    DisconnectDetected {
        address: Address,
        reason: DisconnectReason,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoreError {
    #[error("no module registered at address {0}")]
    UnknownModule(Address),
    #[error("module {address} has no variable {var_index}")]
    UnknownVariable { address: Address, var_index: u8 },
    #[error("value {value} outside announced range [{min}, {max}]")]
    ValueOutOfRange { value: u8, min: u8, max: u8 },
}

impl CoreError {
    /// Short name used on the wire and in traces.
    pub fn kind(&self) -> &'static str {
        match self {
            CoreError::UnknownModule(_) => "UnknownModule",
            CoreError::UnknownVariable { .. } => "UnknownVariable",
            CoreError::ValueOutOfRange { .. } => "ValueOutOfRange",
        }
    }
}

/// Counters for traffic the core chose to ignore.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Diagnostics {
    pub undecodable: u64,
    pub unknown_sender: u64,
    pub announce_from_core_address: u64,
}

#[derive(Debug, Clone)]
struct Entry {
    variables: BTreeMap<u8, AnnouncedVariable>,
    registered_at: VirtualMs,
    last_reply: Option<VirtualMs>,
    missed: u32,
}

impl Entry {
    fn new(now: VirtualMs) -> Self {
        Entry {
            variables: BTreeMap::new(),
            registered_at: now,
            last_reply: None,
            missed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoreNode {
    policy: HeartbeatPolicy,
    registry: BTreeMap<Address, Entry>,
    next_probe: VirtualMs,
    last_probe: Option<VirtualMs>,
    diagnostics: Diagnostics,
    events: Vec<CoreEvent>,
}

impl CoreNode {
    pub fn new(policy: HeartbeatPolicy) -> Self {
        CoreNode {
            policy,
            registry: BTreeMap::new(),
            next_probe: 0,
            last_probe: None,
            diagnostics: Diagnostics::default(),
            events: Vec::new(),
        }
    }

    pub fn policy(&self) -> &HeartbeatPolicy {
        &self.policy
    }

    pub fn diagnostics(&self) -> Diagnostics {
        self.diagnostics
    }

    /// When the next heartbeat probe falls due.
    pub fn next_probe_at(&self) -> VirtualMs {
        self.next_probe
    }

    pub fn on_frame(&mut self, frame: &Frame, now: VirtualMs) {
        let msg = match codec::decode(frame) {
            Ok(m) => m,
            Err(_) => {
                self.diagnostics.undecodable += 1;
                return;
            }
        };
        match msg {
            Message::Announce {
                sender,
                min,
                max,
                granularity,
                var_index,
            } => {
                if sender.is_core() {
                    self.diagnostics.announce_from_core_address += 1;
                    return;
                }
                let variable = AnnouncedVariable {
                    index: var_index,
                    min,
                    max,
                    granularity,
                };
                let replaced = self
                    .registry
                    .get(&sender)
                    .is_some_and(|e| e.variables.contains_key(&var_index));
                if replaced {
                    // modules only announce on power-up, so a repeated index
                    // means the previous incarnation is gone
                    self.registry.remove(&sender);
                    self.events.push(CoreEvent::DisconnectDetected {
                        address: sender,
                        reason: DisconnectReason::Replaced,
                    });
                }
                let entry = self.registry.entry(sender).or_insert_with(|| Entry::new(now));
                entry.variables.insert(var_index, variable);
                entry.last_reply = Some(now);
                entry.missed = 0;
                self.events.push(CoreEvent::Registered {
                    address: sender,
                    variable,
                });
            }
            Message::Heartbeat { sender } => match self.registry.get_mut(&sender) {
                Some(entry) => {
                    entry.last_reply = Some(now);
                    entry.missed = 0;
                }
                None => self.diagnostics.unknown_sender += 1,
            },
            // set-value frames are the core's own vocabulary; nothing to learn
            Message::SetValue { .. } => {}
        }
    }

    /// Advances the heartbeat schedule. Returns the probe frame when one is due.
    pub fn tick(&mut self, now: VirtualMs) -> Vec<Frame> {
        if now < self.next_probe {
            return Vec::new();
        }
        if let Some(probe) = self.last_probe {
            let window_end = probe + self.policy.reply_window_ms;
            let mut gone = Vec::new();
            for (&addr, entry) in self.registry.iter_mut() {
                if entry.registered_at > probe {
                    continue;
                }
                let answered = entry
                    .last_reply
                    .is_some_and(|t| t >= probe && t <= window_end);
                if !answered {
                    entry.missed += 1;
                    if entry.missed >= self.policy.miss_threshold {
                        gone.push(addr);
                    }
                }
            }
            for address in gone {
                self.registry.remove(&address);
                self.events.push(CoreEvent::DisconnectDetected {
                    address,
                    reason: DisconnectReason::HeartbeatTimeout,
                });
            }
        }
        self.last_probe = Some(now);
        while self.next_probe <= now {
            self.next_probe += self.policy.interval_ms;
        }
        vec![codec::encode(&Message::Heartbeat {
            sender: Address::CORE,
        })
        .expect("heartbeat encodes")]
    }

    pub fn set_variable(&self, target: Address, var_index: u8, value: u8) -> Result<Frame, CoreError> {
        let entry = self
            .registry
            .get(&target)
            .ok_or(CoreError::UnknownModule(target))?;
        let var = entry
            .variables
            .get(&var_index)
            .ok_or(CoreError::UnknownVariable {
                address: target,
                var_index,
            })?;
        if value < var.min || value > var.max {
            return Err(CoreError::ValueOutOfRange {
                value,
                min: var.min,
                max: var.max,
            });
        }
        let frame = codec::encode(&Message::SetValue {
            sender: Address::CORE,
            target,
            var_index,
            value,
        })
        .map_err(|_| CoreError::UnknownModule(target))?;
        Ok(frame)
    }

    pub fn entry(&self, address: Address) -> Option<RegistryEntry> {
        self.registry.get(&address).map(|e| self.render(address, e))
    }

    pub fn contains(&self, address: Address) -> bool {
        self.registry.contains_key(&address)
    }

    pub fn addresses(&self) -> Vec<Address> {
        self.registry.keys().copied().collect()
    }

    pub fn registry_snapshot(&self) -> Vec<RegistryEntry> {
        self.registry
            .iter()
            .map(|(&a, e)| self.render(a, e))
            .collect()
    }

    fn render(&self, address: Address, e: &Entry) -> RegistryEntry {
        let liveness = if e.missed > 0 {
            Liveness::Suspect { missed: e.missed }
        } else {
            Liveness::Alive {
                last_reply: e.last_reply.unwrap_or(e.registered_at),
            }
        };
        RegistryEntry {
            address,
            liveness,
            variables: e.variables.values().copied().collect(),
        }
    }

    pub fn drain_events(&mut self) -> Vec<CoreEvent> {
        std::mem::take(&mut self.events)
    }
}

/// JSON form of a registry snapshot:
/// `[{address, liveness, variables: [{index, min, max, granularity}]}]`.
pub fn snapshot_json(snapshot: &[RegistryEntry]) -> serde_json::Value {
    serde_json::to_value(snapshot).expect("registry serializes")
}
