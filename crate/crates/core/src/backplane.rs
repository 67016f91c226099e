//! Discrete-event simulation of the main bus and the per-slot power/address
//! links.
//!
//! Time is virtual and only advances inside [`Backplane::run_until`] (and the
//! implicit catch-up done by commands). Frames queued for the bus contend by
//! identifier: at every delivery step the pending frame with the lowest
//! `(arbitration id, enqueue sequence)` wins, occupies the bus for `t_bus_ms`
//! and is then broadcast to every attached node except its sender.
//!
//! All frames queued at the same virtual instant take part in the same
//! arbitration round, regardless of the order in which they were produced.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Address, Frame};
use crate::core_node::{AnnouncedVariable, CoreEvent, CoreNode, DisconnectReason, HeartbeatPolicy};
use crate::datafeed::{self, Dataset, Domain, DomainSource, ResolvedRule, SkipReason};
use crate::module::{ModuleEvent, ModuleNode};
use crate::platform::CommandError;
use crate::VirtualMs;

/// A connection point on the core. Its index doubles as the bus address of
/// whatever module is plugged into it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SlotId(pub u8);

impl SlotId {
    pub fn address(self) -> Address {
        Address(self.0)
    }
}

impl fmt::Display for SlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeHandle(pub u32);

impl fmt::Display for NodeHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BusConfig {
    pub slots: u8,
    /// Grid layout, informational only.
    pub rows: u8,
    pub cols: u8,
    pub t_power_ms: VirtualMs,
    pub t_bus_ms: VirtualMs,
    pub heartbeat: HeartbeatPolicy,
    /// Probability that a frame is lost on the bus. Off unless set.
    pub drop_probability: f64,
}

impl Default for BusConfig {
    fn default() -> Self {
        BusConfig {
            slots: 6,
            rows: 2,
            cols: 3,
            t_power_ms: 10,
            t_bus_ms: 1,
            heartbeat: HeartbeatPolicy::default(),
            drop_probability: 0.0,
        }
    }
}

impl BusConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.slots == 0 {
            return Err("at least one slot is required".into());
        }
        if u16::from(self.rows) * u16::from(self.cols) < u16::from(self.slots) {
            return Err(format!(
                "a {}x{} grid cannot hold {} slots",
                self.rows, self.cols, self.slots
            ));
        }
        if self.t_bus_ms == 0 {
            return Err("t_bus_ms must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err("drop_probability must lie in [0, 1]".into());
        }
        self.heartbeat.validate()
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let cfg: BusConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BusError {
    #[error("a core component is already attached")]
    CoreAlreadyAttached,
    #[error("no core component attached")]
    NoCore,
    #[error("slot {0} is occupied")]
    SlotOccupied(SlotId),
    #[error("slot {0} is empty")]
    SlotEmpty(SlotId),
    #[error("slot {0} does not exist on this backplane")]
    InvalidSlot(SlotId),
    #[error("handle {0} is not attached")]
    DetachedHandle(NodeHandle),
    #[error("time {requested} is before the current time {now}")]
    TimeWentBackwards { requested: VirtualMs, now: VirtualMs },
}

impl BusError {
    pub fn kind(&self) -> &'static str {
        match self {
            BusError::CoreAlreadyAttached => "CoreAlreadyAttached",
            BusError::NoCore => "NoCore",
            BusError::SlotOccupied(_) => "SlotOccupied",
            BusError::SlotEmpty(_) => "SlotEmpty",
            BusError::InvalidSlot(_) => "InvalidSlot",
            BusError::DetachedHandle(_) => "DetachedHandle",
            BusError::TimeWentBackwards { .. } => "TimeWentBackwards",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    CoreAttached {
        handle: NodeHandle,
    },
    Plugged {
        slot: SlotId,
        module: String,
        handle: NodeHandle,
    },
    SlotPowered {
        slot: SlotId,
        address: Address,
    },
    SlotUnpowered {
        slot: SlotId,
    },
    FrameDelivered {
        frame: Frame,
        origin: NodeHandle,
    },
    FrameDropped {
        frame: Frame,
        origin: NodeHandle,
    },
    Registered {
        address: Address,
        variable: AnnouncedVariable,
    },
    DisconnectDetected {
        address: Address,
        reason: DisconnectReason,
    },
    LevelChanged {
        address: Address,
        var_index: u8,
        level: u8,
    },
    ValueRejected {
        address: Address,
        var_index: u8,
        value: u8,
    },
    SetRejected {
        address: Address,
        var_index: u8,
        value: u8,
        reason: &'static str,
    },
    ReplayStarted {
        rows: usize,
        cadence_ms: VirtualMs,
    },
    DomainResolved {
        column: String,
        domain: Domain,
        source: DomainSource,
    },
    RuleSkipped {
        row: usize,
        rule: usize,
        address: Address,
        var_index: u8,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BusEvent {
    pub time: VirtualMs,
    pub seq: u64,
    pub kind: EventKind,
}

/// One trace line: `t=<ms> <EVENT> key=value ...`.
impl fmt::Display for BusEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={} ", self.time)?;
        match &self.kind {
            EventKind::CoreAttached { handle } => write!(f, "CORE handle={handle}"),
            EventKind::Plugged { slot, module, handle } => {
                write!(f, "PLUG slot={slot} module={module:?} handle={handle}")
            }
            EventKind::SlotPowered { slot, address } => write!(f, "POWERED slot={slot} addr={address}"),
            EventKind::SlotUnpowered { slot } => write!(f, "UNPOWERED slot={slot}"),
            EventKind::FrameDelivered { frame, origin } => write!(f, "FRAME origin={origin} {frame}"),
            EventKind::FrameDropped { frame, origin } => write!(f, "DROP origin={origin} {frame}"),
            EventKind::Registered { address, variable } => write!(
                f,
                "REGISTERED addr={address} index={} min={} max={} granularity={}",
                variable.index, variable.min, variable.max, variable.granularity
            ),
            EventKind::DisconnectDetected { address, reason } => {
                let reason = match reason {
                    DisconnectReason::HeartbeatTimeout => "heartbeat-timeout",
                    DisconnectReason::Replaced => "replaced",
                };
                write!(f, "DISCONNECT addr={address} reason={reason}")
            }
            EventKind::LevelChanged { address, var_index, level } => {
                write!(f, "LEVEL addr={address} index={var_index} level={level}")
            }
            EventKind::ValueRejected { address, var_index, value } => {
                write!(f, "IGNORED addr={address} index={var_index} value={value}")
            }
            EventKind::SetRejected { address, var_index, value, reason } => write!(
                f,
                "SET-REJECTED addr={address} index={var_index} value={value} reason={reason}"
            ),
            EventKind::ReplayStarted { rows, cadence_ms } => {
                write!(f, "REPLAY rows={rows} cadence={cadence_ms}")
            }
            EventKind::DomainResolved { column, domain, source } => {
                let source = match source {
                    DomainSource::Declared => "declared",
                    DomainSource::Observed => "observed",
                    DomainSource::Mixed => "mixed",
                };
                write!(
                    f,
                    "DOMAIN column={column:?} min={} max={} source={source}",
                    domain.min, domain.max
                )
            }
            EventKind::RuleSkipped { row, rule, address, var_index, reason } => write!(
                f,
                "SKIP row={row} rule={rule} addr={address} index={var_index} reason={reason}"
            ),
        }
    }
}

#[derive(Debug)]
enum Action {
    PowerUp { slot: SlotId, handle: NodeHandle },
    CoreTick { handle: NodeHandle },
    Deliver { frame: Frame, origin: NodeHandle },
    ReplayRow { replay: usize, row: usize },
    Arbitrate,
}

#[derive(Debug)]
struct Scheduled {
    time: VirtualMs,
    // arbitration runs after everything else at the same instant
    late: bool,
    seq: u64,
    action: Action,
}

impl Scheduled {
    fn key(&self) -> (VirtualMs, bool, u64) {
        (self.time, self.late, self.seq)
    }
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

#[derive(Debug, Clone)]
struct Pending {
    frame: Frame,
    origin: NodeHandle,
    seq: u64,
}

#[derive(Debug)]
struct Occupant {
    handle: NodeHandle,
    module: ModuleNode,
}

#[derive(Debug)]
struct Replay {
    dataset: Arc<Dataset>,
    rules: Vec<ResolvedRule>,
}

#[derive(Debug)]
pub struct Backplane {
    config: BusConfig,
    now: VirtualMs,
    queue: BinaryHeap<Reverse<Scheduled>>,
    seq: u64,
    core: Option<(NodeHandle, CoreNode)>,
    slots: Vec<Option<Occupant>>,
    pending: Vec<Pending>,
    busy: bool,
    arbitration_scheduled: bool,
    next_handle: u32,
    replays: Vec<Replay>,
    log: Vec<BusEvent>,
    rng: ChaCha8Rng,
}

impl Backplane {
    pub fn new(config: BusConfig, seed: u64) -> Self {
        let slots = (0..config.slots).map(|_| None).collect();
        Backplane {
            config,
            now: 0,
            queue: BinaryHeap::new(),
            seq: 0,
            core: None,
            slots,
            pending: Vec::new(),
            busy: false,
            arbitration_scheduled: false,
            next_handle: 0,
            replays: Vec::new(),
            log: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A backplane with a core built from the configured heartbeat policy
    /// already attached at t=0.
    pub fn with_core(config: BusConfig, seed: u64) -> Self {
        let policy = config.heartbeat;
        let mut bus = Backplane::new(config, seed);
        bus.attach_core(CoreNode::new(policy)).expect("fresh backplane");
        bus
    }

    pub fn config(&self) -> &BusConfig {
        &self.config
    }

    pub fn now(&self) -> VirtualMs {
        self.now
    }

    pub fn log(&self) -> &[BusEvent] {
        &self.log
    }

    pub fn core(&self) -> Option<&CoreNode> {
        self.core.as_ref().map(|(_, c)| c)
    }

    pub fn core_handle(&self) -> Option<NodeHandle> {
        self.core.as_ref().map(|(h, _)| *h)
    }

    pub fn module(&self, slot: SlotId) -> Option<&ModuleNode> {
        self.slot_index(slot)
            .ok()
            .and_then(|i| self.slots[i].as_ref())
            .map(|o| &o.module)
    }

    pub fn module_at(&self, address: Address) -> Option<&ModuleNode> {
        self.module(SlotId(address.0))
    }

    pub fn occupied_slots(&self) -> Vec<SlotId> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, o)| o.is_some())
            .map(|(i, _)| SlotId(i as u8 + 1))
            .collect()
    }

    pub fn handle_of(&self, slot: SlotId) -> Option<NodeHandle> {
        self.slot_index(slot)
            .ok()
            .and_then(|i| self.slots[i].as_ref())
            .map(|o| o.handle)
    }

    fn slot_index(&self, slot: SlotId) -> Result<usize, BusError> {
        if slot.0 == 0 || slot.0 > self.config.slots {
            Err(BusError::InvalidSlot(slot))
        } else {
            Ok(usize::from(slot.0) - 1)
        }
    }

    fn fresh_handle(&mut self) -> NodeHandle {
        let h = NodeHandle(self.next_handle);
        self.next_handle += 1;
        h
    }

    fn schedule(&mut self, time: VirtualMs, action: Action) {
        let late = matches!(action, Action::Arbitrate);
        self.seq += 1;
        self.queue.push(Reverse(Scheduled {
            time,
            late,
            seq: self.seq,
            action,
        }));
    }

    fn record(&mut self, kind: EventKind) {
        let seq = self.log.len() as u64;
        self.log.push(BusEvent {
            time: self.now,
            seq,
            kind,
        });
    }

    /// Processes everything strictly before `now`, then sets the clock to it.
    fn catch_up(&mut self, now: VirtualMs) -> Result<(), BusError> {
        if now < self.now {
            return Err(BusError::TimeWentBackwards {
                requested: now,
                now: self.now,
            });
        }
        self.process(|t| t < now);
        self.now = now;
        Ok(())
    }

    pub fn attach_core(&mut self, core: CoreNode) -> Result<NodeHandle, BusError> {
        if self.core.is_some() {
            return Err(BusError::CoreAlreadyAttached);
        }
        let handle = self.fresh_handle();
        let first_tick = core.next_probe_at().max(self.now);
        self.core = Some((handle, core));
        self.record(EventKind::CoreAttached { handle });
        self.schedule(first_tick, Action::CoreTick { handle });
        Ok(handle)
    }

    pub fn detach_core(&mut self) -> Option<CoreNode> {
        let (handle, core) = self.core.take()?;
        self.pending.retain(|p| p.origin != handle);
        Some(core)
    }

    /// Plugs a module into `slot`. It is powered and receives its address
    /// `t_power_ms` later, at which point it announces itself.
    pub fn plug(&mut self, slot: SlotId, module: ModuleNode, now: VirtualMs) -> Result<NodeHandle, BusError> {
        let idx = self.slot_index(slot)?;
        if self.slots[idx].is_some() {
            return Err(BusError::SlotOccupied(slot));
        }
        self.catch_up(now)?;
        let handle = self.fresh_handle();
        let name = module.descriptor().module_name.clone();
        self.slots[idx] = Some(Occupant { handle, module });
        self.record(EventKind::Plugged {
            slot,
            module: name,
            handle,
        });
        self.schedule(now + self.config.t_power_ms, Action::PowerUp { slot, handle });
        Ok(handle)
    }

    /// Removes the module in `slot` immediately. Frames it had queued but not
    /// yet won arbitration for are lost.
    pub fn unplug(&mut self, slot: SlotId, now: VirtualMs) -> Result<ModuleNode, BusError> {
        let idx = self.slot_index(slot)?;
        if self.slots[idx].is_none() {
            return Err(BusError::SlotEmpty(slot));
        }
        self.catch_up(now)?;
        let Occupant { handle, mut module } = self.slots[idx].take().expect("checked");
        module.power_off();
        self.pending.retain(|p| p.origin != handle);
        self.record(EventKind::SlotUnpowered { slot });
        Ok(module)
    }

    pub fn transmit(&mut self, handle: NodeHandle, frame: Frame, now: VirtualMs) -> Result<(), BusError> {
        if !self.is_attached(handle) {
            return Err(BusError::DetachedHandle(handle));
        }
        self.catch_up(now)?;
        self.enqueue(handle, frame);
        Ok(())
    }

    fn is_attached(&self, handle: NodeHandle) -> bool {
        self.core_handle() == Some(handle)
            || self.slots.iter().flatten().any(|o| o.handle == handle)
    }

    fn enqueue(&mut self, origin: NodeHandle, frame: Frame) {
        self.seq += 1;
        self.pending.push(Pending {
            frame,
            origin,
            seq: self.seq,
        });
        if !self.busy && !self.arbitration_scheduled {
            self.arbitration_scheduled = true;
            self.schedule(self.now, Action::Arbitrate);
        }
    }

    /// Validates and sends a set-value command from the core. Rejections are
    /// logged as well as returned.
    pub fn set_variable(&mut self, target: Address, var_index: u8, value: u8, now: VirtualMs) -> Result<(), CommandError> {
        // catch up first so the core sees all traffic up to now
        self.catch_up(now)?;
        let Some((handle, core)) = self.core.as_ref() else {
            return Err(BusError::NoCore.into());
        };
        let handle = *handle;
        match core.set_variable(target, var_index, value) {
            Ok(frame) => {
                self.enqueue(handle, frame);
                Ok(())
            }
            Err(e) => {
                self.record(EventKind::SetRejected {
                    address: target,
                    var_index,
                    value,
                    reason: e.kind(),
                });
                Err(e.into())
            }
        }
    }

    /// Schedules one mapping pass per dataset row, `cadence_ms` apart,
    /// starting at `now`.
    pub fn schedule_replay(
        &mut self,
        dataset: Arc<Dataset>,
        rules: Vec<ResolvedRule>,
        cadence_ms: VirtualMs,
        now: VirtualMs,
    ) -> Result<(), BusError> {
        self.catch_up(now)?;
        let rows = dataset.len();
        self.record(EventKind::ReplayStarted { rows, cadence_ms });
        for r in &rules {
            self.record(EventKind::DomainResolved {
                column: r.rule.column.clone(),
                domain: r.domain,
                source: r.source,
            });
        }
        let replay = self.replays.len();
        self.replays.push(Replay { dataset, rules });
        for row in 0..rows {
            self.schedule(now + row as u64 * cadence_ms, Action::ReplayRow { replay, row });
        }
        Ok(())
    }

    /// Processes every event with time ≤ `t_end` and returns the log entries
    /// produced along the way.
    pub fn run_until(&mut self, t_end: VirtualMs) -> Vec<BusEvent> {
        let start = self.log.len();
        if t_end >= self.now {
            self.process(|t| t <= t_end);
            self.now = t_end;
        }
        self.log[start..].to_vec()
    }

    fn process(&mut self, mut within: impl FnMut(VirtualMs) -> bool) {
        while let Some(Reverse(next)) = self.queue.peek() {
            if !within(next.time) {
                break;
            }
            let Reverse(ev) = self.queue.pop().expect("peeked");
            self.now = ev.time;
            self.dispatch(ev.action);
        }
    }

    fn dispatch(&mut self, action: Action) {
        match action {
            Action::PowerUp { slot, handle } => self.power_up(slot, handle),
            Action::CoreTick { handle } => self.core_tick(handle),
            Action::Arbitrate => self.arbitrate(),
            Action::Deliver { frame, origin } => self.deliver(frame, origin),
            Action::ReplayRow { replay, row } => self.replay_row(replay, row),
        }
    }

    fn power_up(&mut self, slot: SlotId, handle: NodeHandle) {
        let now = self.now;
        let Ok(idx) = self.slot_index(slot) else { return };
        let Some(occ) = self.slots[idx].as_mut() else { return };
        if occ.handle != handle {
            // unplugged (and maybe re-plugged) before power settled
            return;
        }
        let address = slot.address();
        let frames = occ.module.on_power(address, now).unwrap_or_default();
        self.record(EventKind::SlotPowered { slot, address });
        for f in frames {
            self.enqueue(handle, f);
        }
    }

    fn core_tick(&mut self, handle: NodeHandle) {
        let now = self.now;
        let Some((h, core)) = self.core.as_mut() else { return };
        if *h != handle {
            return;
        }
        let frames = core.tick(now);
        let next = core.next_probe_at();
        self.drain_core_events();
        for f in frames {
            self.enqueue(handle, f);
        }
        self.schedule(next, Action::CoreTick { handle });
    }

    fn arbitrate(&mut self) {
        self.arbitration_scheduled = false;
        if self.busy {
            return;
        }
        let Some(pos) = self
            .pending
            .iter()
            .enumerate()
            .min_by_key(|(_, p)| (p.frame.id(), p.seq))
            .map(|(i, _)| i)
        else {
            return;
        };
        let winner = self.pending.remove(pos);
        self.busy = true;
        self.schedule(
            self.now + self.config.t_bus_ms,
            Action::Deliver {
                frame: winner.frame,
                origin: winner.origin,
            },
        );
    }

    fn deliver(&mut self, frame: Frame, origin: NodeHandle) {
        let now = self.now;
        self.busy = false;
        let p = self.config.drop_probability;
        if p > 0.0 && self.rng.random::<f64>() < p {
            self.record(EventKind::FrameDropped { frame, origin });
        } else {
            self.record(EventKind::FrameDelivered { frame, origin });
            let mut replies: Vec<(NodeHandle, Frame)> = Vec::new();
            if let Some((h, core)) = self.core.as_mut() {
                if *h != origin {
                    core.on_frame(&frame, now);
                }
            }
            self.drain_core_events();
            for i in 0..self.slots.len() {
                let Some(occ) = self.slots[i].as_mut() else { continue };
                if occ.handle == origin {
                    continue;
                }
                let handle = occ.handle;
                let out = occ.module.on_frame(&frame, now);
                replies.extend(out.into_iter().map(|f| (handle, f)));
                self.drain_module_events(i);
            }
            for (h, f) in replies {
                self.enqueue(h, f);
            }
        }
        if !self.pending.is_empty() && !self.arbitration_scheduled {
            self.arbitration_scheduled = true;
            self.schedule(now, Action::Arbitrate);
        }
    }

    fn replay_row(&mut self, replay: usize, row: usize) {
        let Some((handle, core)) = self.core.as_ref() else { return };
        let handle = *handle;
        let r = &self.replays[replay];
        let outcome = datafeed::apply_row(&r.dataset, row, &r.rules, core);
        for d in outcome.diagnostics {
            let reason = match d.reason {
                SkipReason::Core(e) => e.kind().to_string(),
                SkipReason::Map(e) => e.to_string(),
            };
            self.record(EventKind::RuleSkipped {
                row,
                rule: d.rule,
                address: d.address,
                var_index: d.var_index,
                reason,
            });
        }
        for f in outcome.frames {
            self.enqueue(handle, f);
        }
    }

    fn drain_core_events(&mut self) {
        let Some((_, core)) = self.core.as_mut() else { return };
        for e in core.drain_events() {
            let kind = match e {
                CoreEvent::Registered { address, variable } => EventKind::Registered { address, variable },
                CoreEvent::DisconnectDetected { address, reason } => {
                    EventKind::DisconnectDetected { address, reason }
                }
            };
            self.record(kind);
        }
    }

    fn drain_module_events(&mut self, idx: usize) {
        let Some(occ) = self.slots[idx].as_mut() else { return };
        let address = Address(idx as u8 + 1);
        for e in occ.module.drain_events() {
            let kind = match e {
                ModuleEvent::LevelChanged { var_index, level } => EventKind::LevelChanged {
                    address,
                    var_index,
                    level,
                },
                ModuleEvent::ValueRejected { var_index, value } => EventKind::ValueRejected {
                    address,
                    var_index,
                    value,
                },
            };
            self.record(kind);
        }
    }
}

/// Renders a log segment in the canonical trace form, one event per line.
pub fn render_trace(events: &[BusEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&e.to_string());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{self, Message};
    use crate::module::{ModuleDescriptor, PhysicalVariableSpec};

    fn fan() -> ModuleNode {
        ModuleNode::new(ModuleDescriptor {
            module_name: "fan".into(),
            variables: vec![PhysicalVariableSpec {
                name: "airflow".into(),
                unit: "%".into(),
                min: 0,
                max: 100,
                granularity: 5,
                index: 0,
            }],
        })
    }

    fn delivered(events: &[BusEvent]) -> Vec<(VirtualMs, NodeHandle, Frame)> {
        events
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::FrameDelivered { frame, origin } => Some((e.time, origin, frame)),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn core_attachment() {
        let mut bus = Backplane::new(BusConfig::default(), 0);
        let h = bus.attach_core(CoreNode::new(HeartbeatPolicy::default())).unwrap();
        assert_eq!(h, NodeHandle(0));
        assert_eq!(
            bus.attach_core(CoreNode::new(HeartbeatPolicy::default())),
            Err(BusError::CoreAlreadyAttached)
        );
        assert!(bus.detach_core().is_some());
        let h2 = bus.attach_core(CoreNode::new(HeartbeatPolicy::default())).unwrap();
        assert_ne!(h, h2);
        assert_eq!(bus.core_handle(), Some(h2));
        assert_eq!(bus.transmit(h, codec::encode(&Message::Heartbeat { sender: Address(0) }).unwrap(), 0), Err(BusError::DetachedHandle(h)));
    }

    #[test]
    fn plug_errors() {
        let mut bus = Backplane::with_core(BusConfig::default(), 0);
        bus.plug(SlotId(3), fan(), 0).unwrap();
        assert_eq!(bus.plug(SlotId(3), fan(), 0), Err(BusError::SlotOccupied(SlotId(3))));
        assert_eq!(bus.plug(SlotId(7), fan(), 0), Err(BusError::InvalidSlot(SlotId(7))));
        assert_eq!(bus.plug(SlotId(0), fan(), 0), Err(BusError::InvalidSlot(SlotId(0))));
        assert_eq!(bus.unplug(SlotId(2), 0).unwrap_err(), BusError::SlotEmpty(SlotId(2)));
    }

    #[test]
    fn plug_assigns_slot_address_after_power_delay() {
        let mut bus = Backplane::with_core(BusConfig::default(), 0);
        bus.plug(SlotId(3), fan(), 0).unwrap();
        bus.run_until(9);
        assert_eq!(bus.module(SlotId(3)).unwrap().address(), None);
        let events = bus.run_until(10);
        assert!(events.iter().any(|e| e.time == 10
            && e.kind == EventKind::SlotPowered { slot: SlotId(3), address: Address(3) }));
        assert_eq!(bus.module(SlotId(3)).unwrap().address(), Some(Address(3)));
    }

    #[test]
    fn lowest_id_wins_contention() {
        let mut bus = Backplane::with_core(BusConfig { heartbeat: HeartbeatPolicy { interval_ms: 10_000, ..Default::default() }, ..Default::default() }, 0);
        bus.run_until(5);
        let core = bus.core_handle().unwrap();
        bus.plug(SlotId(3), fan(), 5).unwrap();
        bus.run_until(9);
        // the module powers at t=15 and queues its announce; the core queues at t=15 too
        let hb = codec::encode(&Message::Heartbeat { sender: Address(0) }).unwrap();
        bus.transmit(core, hb, 15).unwrap();
        let events = bus.run_until(30);
        let d = delivered(&events);
        assert_eq!(d[0].0, 16);
        assert_eq!(d[0].1, core);
        assert_eq!(d[1].0, 17);
        assert_eq!(d[1].2.id(), 3);
    }

    #[test]
    fn uncontended_frame_takes_one_bus_slot() {
        let mut bus = Backplane::with_core(BusConfig::default(), 0);
        bus.run_until(5);
        let core = bus.core_handle().unwrap();
        let f = codec::encode(&Message::Heartbeat { sender: Address(0) }).unwrap();
        bus.transmit(core, f, 10).unwrap();
        let d = delivered(&bus.run_until(20));
        assert_eq!(d, vec![(11, core, f)]);
    }

    #[test]
    fn unplug_drops_queued_frames_and_detaches() {
        let mut bus = Backplane::with_core(BusConfig::default(), 0);
        let three_vars = ModuleNode::new(ModuleDescriptor {
            module_name: "three".into(),
            variables: (0..3)
                .map(|i| PhysicalVariableSpec { name: format!("v{i}"), unit: String::new(), min: 0, max: 9, granularity: 2, index: i })
                .collect(),
        });
        let h = bus.plug(SlotId(2), three_vars, 0).unwrap();
        bus.run_until(11); // first announce delivered at 11, second in flight
        bus.unplug(SlotId(2), 11).unwrap();
        let later = bus.run_until(100);
        let from_module: Vec<_> = delivered(&later).into_iter().filter(|d| d.1 == h).collect();
        // only the announce already holding the bus gets through
        assert_eq!(from_module.len(), 1);
        assert_eq!(bus.transmit(h, codec::encode(&Message::Heartbeat { sender: Address(2) }).unwrap(), 100), Err(BusError::DetachedHandle(h)));
    }

    #[test]
    fn broadcast_skips_sender_only() {
        let mut bus = Backplane::with_core(BusConfig::default(), 0);
        bus.plug(SlotId(1), fan(), 0).unwrap();
        bus.plug(SlotId(2), fan(), 0).unwrap();
        bus.run_until(100);
        // both modules registered: the core heard both announces
        assert_eq!(bus.core().unwrap().addresses(), vec![Address(1), Address(2)]);
        // probe at 500 is answered by both
        let events = bus.run_until(510);
        let replies: Vec<_> = delivered(&events).into_iter().filter(|d| d.2.id() != 0).collect();
        assert_eq!(replies.len(), 2);
    }

    #[test]
    fn time_cannot_go_backwards() {
        let mut bus = Backplane::with_core(BusConfig::default(), 0);
        bus.run_until(100);
        assert_eq!(
            bus.plug(SlotId(1), fan(), 50),
            Err(BusError::TimeWentBackwards { requested: 50, now: 100 })
        );
        assert!(bus.run_until(50).is_empty());
        assert_eq!(bus.now(), 100);
    }

    #[test]
    fn empty_system_stays_quiet() {
        let mut bus = Backplane::new(BusConfig::default(), 0);
        assert!(bus.run_until(100).is_empty());
    }

    #[test]
    fn trace_line_forms() {
        let e = BusEvent {
            time: 11,
            seq: 0,
            kind: EventKind::FrameDelivered {
                frame: Frame::new(1, &[1, 0x6e, 0, 0x64, 5, 0]).unwrap(),
                origin: NodeHandle(1),
            },
        };
        assert_eq!(e.to_string(), "t=11 FRAME origin=#1 ID=001 [01 6e 00 64 05 00]");
    }

    #[test]
    fn config_validation() {
        assert!(BusConfig::default().validate().is_ok());
        assert!(BusConfig { slots: 0, ..Default::default() }.validate().is_err());
        assert!(BusConfig { slots: 7, ..Default::default() }.validate().is_err());
        assert!(BusConfig { drop_probability: 1.5, ..Default::default() }.validate().is_err());
        let c = BusConfig::from_json(r#"{"slots": 4, "rows": 2, "cols": 2, "heartbeat": {"interval_ms": 200, "miss_threshold": 2, "reply_window_ms": 20}}"#).unwrap();
        assert_eq!(c.slots, 4);
        assert_eq!(c.t_power_ms, 10);
        assert!(BusConfig::from_json(r#"{"slotz": 4}"#).is_err());
    }
}
