//! One live simulation per session, advanced on a paced virtual clock.
//!
//! The simulation lives inside a single task. Clients only reach it through
//! the command channel, and only observe it through the event log and its
//! broadcast feed.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use physbus_core::backplane::{EventKind, SlotId};
use physbus_core::codec::Address;
use physbus_core::core_node::{Liveness, RegistryEntry};
use physbus_core::datafeed;
use physbus_core::module::ModuleDescriptor;
use physbus_core::platform::{Command, Platform};
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio::time::Instant;

use crate::wire::{
    Ack, CommandEnvelope, DescriptorRef, EventBody, Rejection, SessionConfig, SessionEvent, SessionState, SlotState,
};

pub(crate) type Reply = oneshot::Sender<Result<Ack, Rejection>>;

pub(crate) enum Request {
    Command(CommandEnvelope, Reply),
    State(oneshot::Sender<SessionState>),
}

/// Append-only event log plus a live feed of new entries.
pub(crate) struct EventLog {
    events: Mutex<Vec<SessionEvent>>,
    live: broadcast::Sender<SessionEvent>,
}

impl EventLog {
    fn new() -> Self {
        let (live, _) = broadcast::channel(1024);
        EventLog {
            events: Mutex::new(Vec::new()),
            live,
        }
    }

    fn push(&self, time: u64, body: EventBody) {
        let mut events = self.events.lock().expect("event log poisoned");
        let event = SessionEvent {
            seq: events.len() as u64 + 1,
            time,
            body,
        };
        events.push(event.clone());
        // no receivers is fine
        let _ = self.live.send(event);
    }

    /// Events with `seq >= from_seq`, and a receiver for everything after them.
    pub(crate) fn subscribe(&self, from_seq: u64) -> (Vec<SessionEvent>, broadcast::Receiver<SessionEvent>) {
        let events = self.events.lock().expect("event log poisoned");
        let rx = self.live.subscribe();
        let start = from_seq.saturating_sub(1) as usize;
        (events.get(start..).unwrap_or_default().to_vec(), rx)
    }

    pub(crate) fn since(&self, from_seq: u64) -> Vec<SessionEvent> {
        self.subscribe(from_seq).0
    }
}

pub(crate) struct SessionHandle {
    pub(crate) requests: mpsc::Sender<Request>,
    pub(crate) log: Arc<EventLog>,
    task: tokio::task::JoinHandle<()>,
}

impl Drop for SessionHandle {
    fn drop(&mut self) {
        self.task.abort();
    }
}

type Shape = Vec<(u8, Vec<(u8, u8, u8, u8)>, u32)>;

/// Registry contents that matter to a viewer: membership, variables and
/// whether each module is currently answering.
fn registry_shape(snapshot: &[RegistryEntry]) -> Shape {
    snapshot
        .iter()
        .map(|e| {
            let missed = match e.liveness {
                Liveness::Suspect { missed } => missed,
                _ => 0,
            };
            let vars = e.variables.iter().map(|v| (v.index, v.min, v.max, v.granularity)).collect();
            (e.address.0, vars, missed)
        })
        .collect()
}

struct Loop {
    platform: Platform,
    palette: Arc<BTreeMap<String, ModuleDescriptor>>,
    log: Arc<EventLog>,
    cursor: usize,
    shape: Shape,
}

impl Loop {
    fn now(&self) -> u64 {
        self.platform.bus().now()
    }

    fn snapshot(&self) -> Vec<RegistryEntry> {
        self.platform.bus().core().map(|c| c.registry_snapshot()).unwrap_or_default()
    }

    /// Converts bus activity since the last call into session events.
    fn publish(&mut self) {
        let bus = self.platform.bus();
        for e in &bus.log()[self.cursor..] {
            let body = match &e.kind {
                EventKind::FrameDelivered { frame, .. } => EventBody::FrameSeen { frame: frame.to_string() },
                EventKind::LevelChanged { address, var_index, level } => EventBody::LevelChanged {
                    address: address.0,
                    var_index: *var_index,
                    level: *level,
                },
                EventKind::DisconnectDetected { address, .. } => EventBody::DisconnectDetected { address: address.0 },
                _ => continue,
            };
            self.log.push(e.time, body);
        }
        self.cursor = bus.log().len();
        let snapshot = self.snapshot();
        let shape = registry_shape(&snapshot);
        if shape != self.shape {
            self.shape = shape;
            self.log.push(self.now(), EventBody::RegistryChanged { snapshot });
        }
    }

    fn resolve(&self, env: CommandEnvelope) -> Result<Command, Rejection> {
        Ok(match env {
            CommandEnvelope::Plug { slot, descriptor } => {
                let descriptor = match descriptor {
                    DescriptorRef::Named(name) => self
                        .palette
                        .get(&name)
                        .cloned()
                        .ok_or_else(|| Rejection::new("UnknownDescriptor", format!("no descriptor named {name:?}")))?,
                    DescriptorRef::Inline(d) => {
                        d.check().map_err(|e| Rejection::new("SpecError", e))?;
                        d
                    }
                };
                Command::Plug { slot: SlotId(slot), descriptor }
            }
            CommandEnvelope::Unplug { slot } => Command::Unplug { slot: SlotId(slot) },
            CommandEnvelope::Set { address, var_index, value } => Command::Set {
                address: Address(address),
                var_index,
                value,
            },
            CommandEnvelope::LoadCsv { csv } => {
                let dataset = datafeed::read_csv(csv.as_bytes()).map_err(|e| {
                    let kind = physbus_core::CommandError::Data(e.clone()).kind();
                    Rejection::new(kind, e.to_string())
                })?;
                Command::LoadCsv { dataset }
            }
            CommandEnvelope::Map { rules } => Command::Map { rules },
            CommandEnvelope::ClearMap => Command::ClearMap,
            CommandEnvelope::Replay { cadence_ms } => Command::Replay { cadence_ms },
        })
    }

    fn command(&mut self, env: CommandEnvelope) -> Result<Ack, Rejection> {
        let now = self.now();
        let result = self.resolve(env).and_then(|cmd| {
            self.platform
                .execute(cmd, now)
                .map_err(|e| Rejection::new(e.kind(), e.to_string()))
        });
        self.publish();
        match result {
            Ok(()) => Ok(Ack { ok: true, time: now }),
            Err(r) => {
                self.log.push(
                    now,
                    EventBody::CommandRejected {
                        reason: r.rejected.clone(),
                        detail: r.detail.clone(),
                    },
                );
                Err(r)
            }
        }
    }

    fn state(&self) -> SessionState {
        let bus = self.platform.bus();
        let cfg = bus.config();
        let slots = (1..=cfg.slots)
            .map(|s| {
                let m = bus.module(SlotId(s));
                SlotState {
                    slot: s,
                    module: m.map(|m| m.descriptor().module_name.clone()),
                    levels: m.map(|m| m.levels().to_vec()).unwrap_or_default(),
                }
            })
            .collect();
        SessionState {
            time: bus.now(),
            rows: cfg.rows,
            cols: cfg.cols,
            registry: self.snapshot(),
            slots,
        }
    }
}

pub(crate) fn spawn(config: SessionConfig, palette: Arc<BTreeMap<String, ModuleDescriptor>>) -> SessionHandle {
    let log = Arc::new(EventLog::new());
    let (tx, mut rx) = mpsc::channel::<Request>(64);
    let mut state = Loop {
        platform: Platform::new(config.bus.clone(), config.seed),
        palette,
        log: Arc::clone(&log),
        cursor: 0,
        shape: Vec::new(),
    };
    // a fresh session always opens with the (empty) registry
    log.push(0, EventBody::RegistryChanged { snapshot: Vec::new() });
    state.cursor = state.platform.bus().log().len();

    let ratio = config.time_ratio;
    let tick = Duration::from_millis(config.tick_ms);
    let task = tokio::spawn(async move {
        let started = Instant::now();
        let mut ticker = tokio::time::interval(tick);
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
        loop {
            tokio::select! {
                req = rx.recv() => match req {
                    None => break,
                    Some(Request::Command(env, reply)) => {
                        let _ = reply.send(state.command(env));
                    }
                    Some(Request::State(reply)) => {
                        let _ = reply.send(state.state());
                    }
                },
                _ = ticker.tick() => {
                    let target = (started.elapsed().as_secs_f64() * 1000.0 * ratio) as u64;
                    state.platform.bus_mut().run_until(target);
                    state.publish();
                }
            }
        }
    });
    SessionHandle {
        requests: tx,
        log,
        task,
    }
}
