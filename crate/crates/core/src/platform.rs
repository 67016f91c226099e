//! Command vocabulary shared by the scenario runner and the live gateway, and
//! the small amount of state (loaded dataset, mapping rules) commands act on.

use std::sync::Arc;

use thiserror::Error;

use crate::backplane::{Backplane, BusConfig, BusError, SlotId};
use crate::codec::{Address, Frame};
use crate::core_node::CoreError;
use crate::datafeed::{self, DataError, Dataset, MappingRule};
use crate::module::{ModuleDescriptor, ModuleNode};
use crate::VirtualMs;

#[derive(Debug, Clone)]
pub enum Command {
    Plug {
        slot: SlotId,
        descriptor: ModuleDescriptor,
    },
    Unplug {
        slot: SlotId,
    },
    Set {
        address: Address,
        var_index: u8,
        value: u8,
    },
    /// Puts a raw frame on the bus from the core, bypassing validation.
    Inject {
        frame: Frame,
    },
    LoadCsv {
        dataset: Dataset,
    },
    /// Appends mapping rules.
    Map {
        rules: Vec<MappingRule>,
    },
    ClearMap,
    Replay {
        cadence_ms: VirtualMs,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CommandError {
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("no dataset loaded")]
    NoDataset,
    #[error("replay cadence must be positive")]
    BadCadence,
}

impl CommandError {
    /// Stable short name, as reported to clients.
    pub fn kind(&self) -> &'static str {
        match self {
            CommandError::Bus(e) => e.kind(),
            CommandError::Core(e) => e.kind(),
            CommandError::Data(DataError::MalformedCsv { .. }) => "MalformedCsv",
            CommandError::Data(DataError::EmptyDataset) => "EmptyDataset",
            CommandError::Data(DataError::UnknownColumn(_)) => "UnknownColumn",
            CommandError::Data(DataError::DegenerateDomain { .. }) => "DegenerateDomain",
            CommandError::Data(DataError::BadMapping(_)) => "BadMapping",
            CommandError::NoDataset => "NoDataset",
            CommandError::BadCadence => "BadCadence",
        }
    }
}

/// A backplane with a core attached, plus the dataset and mapping rules the
/// replay commands work from.
#[derive(Debug)]
pub struct Platform {
    bus: Backplane,
    dataset: Option<Arc<Dataset>>,
    rules: Vec<MappingRule>,
}

impl Platform {
    pub fn new(config: BusConfig, seed: u64) -> Self {
        Platform {
            bus: Backplane::with_core(config, seed),
            dataset: None,
            rules: Vec::new(),
        }
    }

    pub fn bus(&self) -> &Backplane {
        &self.bus
    }

    pub fn bus_mut(&mut self) -> &mut Backplane {
        &mut self.bus
    }

    pub fn dataset(&self) -> Option<&Dataset> {
        self.dataset.as_deref()
    }

    pub fn rules(&self) -> &[MappingRule] {
        &self.rules
    }

    pub fn execute(&mut self, cmd: Command, now: VirtualMs) -> Result<(), CommandError> {
        match cmd {
            Command::Plug { slot, descriptor } => {
                self.bus.plug(slot, ModuleNode::new(descriptor), now)?;
            }
            Command::Unplug { slot } => {
                self.bus.unplug(slot, now)?;
            }
            Command::Set {
                address,
                var_index,
                value,
            } => self.bus.set_variable(address, var_index, value, now)?,
            Command::Inject { frame } => {
                let core = self.bus.core_handle().ok_or(BusError::NoCore)?;
                self.bus.transmit(core, frame, now)?;
            }
            Command::LoadCsv { dataset } => {
                self.dataset = Some(Arc::new(dataset));
            }
            Command::Map { rules } => {
                let dataset = self.dataset.as_ref().ok_or(CommandError::NoDataset)?;
                // reject the batch up front if any column is unusable
                datafeed::resolve_rules(dataset, &rules)?;
                self.rules.extend(rules);
            }
            Command::ClearMap => self.rules.clear(),
            Command::Replay { cadence_ms } => {
                if cadence_ms == 0 {
                    return Err(CommandError::BadCadence);
                }
                let dataset = self.dataset.clone().ok_or(CommandError::NoDataset)?;
                let resolved = datafeed::resolve_rules(&dataset, &self.rules)?;
                self.bus.schedule_replay(dataset, resolved, cadence_ms, now)?;
            }
        }
        Ok(())
    }
}
