//! JSON shapes exchanged with clients. See `docs/wire.md`.

use physbus_core::backplane::BusConfig;
use physbus_core::core_node::RegistryEntry;
use physbus_core::datafeed::MappingRule;
use physbus_core::module::ModuleDescriptor;
use physbus_core::VirtualMs;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub bus: BusConfig,
    /// Virtual milliseconds per real millisecond.
    pub time_ratio: f64,
    /// Real milliseconds between clock advances.
    pub tick_ms: u64,
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            bus: BusConfig::default(),
            time_ratio: 1.0,
            tick_ms: 20,
            seed: 0,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.bus.validate()?;
        if !(self.time_ratio.is_finite() && self.time_ratio > 0.0) {
            return Err("time_ratio must be a positive number".into());
        }
        if self.tick_ms == 0 {
            return Err("tick_ms must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    pub time: VirtualMs,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventBody {
    RegistryChanged { snapshot: Vec<RegistryEntry> },
    FrameSeen { frame: String },
    LevelChanged { address: u8, var_index: u8, level: u8 },
    DisconnectDetected { address: u8 },
    CommandRejected { reason: String, detail: String },
}

/// A descriptor either named from the gateway's palette or given inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DescriptorRef {
    Named(String),
    Inline(ModuleDescriptor),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case", deny_unknown_fields)]
pub enum CommandEnvelope {
    Plug { slot: u8, descriptor: DescriptorRef },
    Unplug { slot: u8 },
    Set { address: u8, var_index: u8, value: u8 },
    LoadCsv { csv: String },
    Map { rules: Vec<MappingRule> },
    ClearMap,
    Replay { cadence_ms: VirtualMs },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub ok: bool,
    pub time: VirtualMs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub ok: bool,
    pub rejected: String,
    pub detail: String,
}

impl Rejection {
    pub fn new(kind: impl Into<String>, detail: impl Into<String>) -> Self {
        Rejection {
            ok: false,
            rejected: kind.into(),
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotState {
    pub slot: u8,
    pub module: Option<String>,
    pub levels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub time: VirtualMs,
    pub rows: u8,
    pub cols: u8,
    pub registry: Vec<RegistryEntry>,
    pub slots: Vec<SlotState>,
}
