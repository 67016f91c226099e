//! Pluggable module: self-describing descriptor, level quantization and the
//! power-up / announce / heartbeat / set-value state machine.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, Address, Frame, Message};
use crate::VirtualMs;

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error("descriptor is not valid JSON: {0}")]
    ParseError(#[from] serde_json::Error),
    #[error("descriptor violates its invariants: {0}")]
    SpecError(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModuleError {
    #[error("module is already powered")]
    AlreadyPowered,
    #[error("module has no variable with index {0}")]
    UnknownVariable(u8),
    #[error("value {value} outside [{min}, {max}]")]
    OutOfRange { value: u8, min: u8, max: u8 },
}

/// Self-description of one physical variable a module can render.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhysicalVariableSpec {
    pub name: String,
    #[serde(default)]
    pub unit: String,
    pub min: u8,
    pub max: u8,
    /// Number of distinct levels between `min` and `max`, inclusive.
    pub granularity: u8,
    pub index: u8,
}

impl PhysicalVariableSpec {
    pub fn check(&self) -> Result<(), String> {
        if self.min > self.max {
            return Err(format!(
                "variable {:?}: min {} exceeds max {}",
                self.name, self.min, self.max
            ));
        }
        let span = u16::from(self.max - self.min) + 1;
        if self.granularity == 0 || u16::from(self.granularity) > span {
            return Err(format!(
                "variable {:?}: granularity {} outside 1..={span}",
                self.name, self.granularity
            ));
        }
        Ok(())
    }

    /// The discrete levels this variable can take, ascending.
    pub fn levels(&self) -> Vec<u8> {
        (0..self.granularity).map(|i| level_at(self, i)).collect()
    }

    pub fn announce(&self, sender: Address) -> Message {
        Message::Announce {
            sender,
            min: self.min,
            max: self.max,
            granularity: self.granularity,
            var_index: self.index,
        }
    }
}

/// `min + round(i * (max - min) / (granularity - 1))`, half-up.
fn level_at(spec: &PhysicalVariableSpec, i: u8) -> u8 {
    if spec.granularity <= 1 {
        return spec.min;
    }
    let span = u32::from(spec.max - spec.min);
    let steps = u32::from(spec.granularity) - 1;
    let offset = (2 * u32::from(i) * span + steps) / (2 * steps);
    spec.min + offset as u8
}

/// Snaps `value` to the nearest of the variable's evenly spaced levels.
/// Exact midpoints go to the lower level.
pub fn quantize(value: u8, spec: &PhysicalVariableSpec) -> Result<u8, ModuleError> {
    if value < spec.min || value > spec.max {
        return Err(ModuleError::OutOfRange {
            value,
            min: spec.min,
            max: spec.max,
        });
    }
    if spec.granularity <= 1 || spec.min == spec.max {
        return Ok(spec.min);
    }
    let span = u32::from(spec.max - spec.min);
    let steps = u32::from(spec.granularity) - 1;
    // the level at or just below value is i or i - 1 once rounding is accounted for
    let i = (u32::from(value - spec.min) * steps / span) as u8;
    let mut best = level_at(spec, i);
    for j in [i.saturating_sub(1), i.saturating_add(1)] {
        if u32::from(j) > steps {
            continue;
        }
        let cand = level_at(spec, j);
        let (d_best, d_cand) = (best.abs_diff(value), cand.abs_diff(value));
        if d_cand < d_best || (d_cand == d_best && cand < best) {
            best = cand;
        }
    }
    Ok(best)
}

/// Shareable description of a module: its name and the variables it renders,
/// in `index` order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleDescriptor {
    pub module_name: String,
    pub variables: Vec<PhysicalVariableSpec>,
}

impl ModuleDescriptor {
    pub fn from_json(text: &str) -> Result<Self, DescriptorError> {
        let d: ModuleDescriptor = serde_json::from_str(text)?;
        d.check().map_err(DescriptorError::SpecError)?;
        Ok(d)
    }

    pub fn check(&self) -> Result<(), String> {
        if self.variables.is_empty() {
            return Err(format!("module {:?} declares no variables", self.module_name));
        }
        if self.variables.len() > 256 {
            return Err("more than 256 variables".into());
        }
        for (pos, var) in self.variables.iter().enumerate() {
            var.check()?;
            if usize::from(var.index) != pos {
                return Err(format!(
                    "variable {:?} has index {} at position {pos}; indices must run 0..{} in order",
                    var.name,
                    var.index,
                    self.variables.len()
                ));
            }
        }
        Ok(())
    }

    pub fn variable(&self, index: u8) -> Option<&PhysicalVariableSpec> {
        self.variables.get(usize::from(index))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Unpowered,
    Addressed(Address),
    Announced(Address),
}

/// Things a module noticed while handling traffic, drained by the backplane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModuleEvent {
    LevelChanged { var_index: u8, level: u8 },
    ValueRejected { var_index: u8, value: u8 },
}

#[derive(Debug, Clone)]
pub struct ModuleNode {
    descriptor: ModuleDescriptor,
    phase: Phase,
    levels: Vec<u8>,
    rejected: u64,
    last_heartbeat_seen: Option<VirtualMs>,
    events: Vec<ModuleEvent>,
}

impl ModuleNode {
    pub fn new(descriptor: ModuleDescriptor) -> Self {
        let levels = descriptor.variables.iter().map(|v| v.min).collect();
        ModuleNode {
            descriptor,
            phase: Phase::Unpowered,
            levels,
            rejected: 0,
            last_heartbeat_seen: None,
            events: Vec::new(),
        }
    }

    pub fn descriptor(&self) -> &ModuleDescriptor {
        &self.descriptor
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn address(&self) -> Option<Address> {
        match self.phase {
            Phase::Unpowered => None,
            Phase::Addressed(a) | Phase::Announced(a) => Some(a),
        }
    }

    pub fn reject_count(&self) -> u64 {
        self.rejected
    }

    pub fn last_heartbeat_seen(&self) -> Option<VirtualMs> {
        self.last_heartbeat_seen
    }

    pub fn current_level(&self, var_index: u8) -> Result<u8, ModuleError> {
        self.levels
            .get(usize::from(var_index))
            .copied()
            .ok_or(ModuleError::UnknownVariable(var_index))
    }

    pub fn levels(&self) -> &[u8] {
        &self.levels
    }

    /// Takes the address handed over by the slot and returns one announce
    /// frame per variable, in index order.
    pub fn on_power(&mut self, address: Address, _now: VirtualMs) -> Result<Vec<Frame>, ModuleError> {
        if self.phase != Phase::Unpowered {
            return Err(ModuleError::AlreadyPowered);
        }
        self.phase = Phase::Addressed(address);
        let frames = self
            .descriptor
            .variables
            .iter()
            .map(|v| codec::encode(&v.announce(address)).expect("descriptor validated on load"))
            .collect();
        self.phase = Phase::Announced(address);
        Ok(frames)
    }

    /// Loss of power: forget the address, actuators fall back to their minimum.
    pub fn power_off(&mut self) {
        self.phase = Phase::Unpowered;
        self.last_heartbeat_seen = None;
        for (level, var) in self.levels.iter_mut().zip(&self.descriptor.variables) {
            *level = var.min;
        }
    }

    pub fn on_frame(&mut self, frame: &Frame, now: VirtualMs) -> Vec<Frame> {
        let Phase::Announced(own) = self.phase else {
            return Vec::new();
        };
        let Ok(msg) = codec::decode(frame) else {
            return Vec::new();
        };
        match msg {
            Message::Heartbeat { sender } if sender.is_core() => {
                self.last_heartbeat_seen = Some(now);
                let reply = codec::encode(&Message::Heartbeat { sender: own }).expect("heartbeat");
                vec![reply]
            }
            Message::SetValue {
                target,
                var_index,
                value,
                ..
            } if target == own => {
                self.apply(var_index, value);
                Vec::new()
            }
            _ => Vec::new(),
        }
    }

    fn apply(&mut self, var_index: u8, value: u8) {
        let level = self
            .descriptor
            .variable(var_index)
            .ok_or(ModuleError::UnknownVariable(var_index))
            .and_then(|spec| quantize(value, spec));
        match level {
            Ok(level) => {
                self.levels[usize::from(var_index)] = level;
                self.events.push(ModuleEvent::LevelChanged { var_index, level });
            }
            Err(_) => {
                self.rejected += 1;
                self.events.push(ModuleEvent::ValueRejected { var_index, value });
            }
        }
    }

    pub fn drain_events(&mut self) -> Vec<ModuleEvent> {
        std::mem::take(&mut self.events)
    }
}
