//! A plug-and-play bus for modular data-physicalisation hardware, in software.
//!
//! A core component sits on a shared CAN-style broadcast bus and hosts a grid
//! of slots. Each slot powers the module plugged into it and hands it a bus
//! address equal to the slot index, so the core always knows *where* a module
//! is. Modules then describe themselves with one announce message per
//! physical variable, answer the core's heartbeat probes, and render values
//! the core sets on them.
//!
//! * [`codec`]: the eight-byte message vocabulary (`n`, `h`, `s`).
//! * [`backplane`]: deterministic discrete-event simulation of the bus.
//! * [`module`]: module state machine and the JSON self-description.
//! * [`core_node`]: registry, heartbeat failure detection and set commands.
//! * [`datafeed`]: CSV ingestion and column → variable mapping.
//! * [`platform`]: the command set shared by the CLI runner and gateway.
//! * [`scenario`]: scripted, assertable scenario runs and trace inspection.

pub mod backplane;
pub mod codec;
pub mod core_node;
pub mod datafeed;
pub mod module;
pub mod platform;
pub mod scenario;

/// Virtual simulation time in milliseconds.
pub type VirtualMs = u64;

pub use backplane::{Backplane, BusConfig, BusError, BusEvent, EventKind, NodeHandle, SlotId};
pub use codec::{decode, encode, Address, CodecError, Frame, Message};
pub use core_node::{CoreError, CoreNode, HeartbeatPolicy, Liveness, RegistryEntry};
pub use datafeed::{normalize, read_csv, Dataset, Domain, MappingRule};
pub use module::{quantize, ModuleDescriptor, ModuleNode, PhysicalVariableSpec};
pub use platform::{Command, CommandError, Platform};
