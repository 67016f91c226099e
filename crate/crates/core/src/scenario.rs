//! Scripted scenarios: a line-oriented, time-stamped command language that
//! drives a fresh platform and checks assertions against it, and a reader
//! that summarises the traces such runs produce.
//!
//! ```text
//! # <virtual ms> <verb> <args...>
//! 0     plug 1 fan.module.json
//! 100   expect registry 1
//! 100   set 1 0 60
//! 200   expect level 1 0 50
//! 700   unplug 1
//! 2700  expect disconnect_detected_by 1 2700
//! ```
//!
//! Verbs: `plug <slot> <descriptor>`, `unplug <slot>`,
//! `set <addr> <index> <value>`, `inject <hex bytes...>`, `load_csv <path>`,
//! `map <mapping.json>` or `map <column> <addr> <index> [domain=<lo>:<hi>] [clamp=<bool>]`,
//! `replay <cadence ms>`, `run_until`, `expect <assertion>`.
//!
//! Assertions: `registry <addr,...|->`, `registry_contains <addr>`,
//! `registry_lacks <addr>`, `variables <addr> <n>`,
//! `level <addr> <index> <level>`, `rejects <addr> <n>`,
//! `disconnect_detected_by <addr> <t>`.
//!
//! Relative paths resolve against the script's directory. Commands at time
//! `t` act before any bus activity scheduled at `t`; `expect` and `run_until`
//! observe the state after everything at `t` has happened.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::backplane::{BusConfig, EventKind, SlotId};
use crate::codec::{self, Address, Frame, Message};
use crate::datafeed::{self, Dataset, MappingRule};
use crate::module::ModuleDescriptor;
use crate::platform::{Command, Platform};
use crate::VirtualMs;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ScriptSyntaxError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Assertion {
    Registry(BTreeSet<u8>),
    RegistryContains(u8),
    RegistryLacks(u8),
    Variables { address: u8, count: usize },
    Level { address: u8, var_index: u8, level: u8 },
    Rejects { address: u8, count: u64 },
    DisconnectDetectedBy { address: u8, by: VirtualMs },
}

impl fmt::Display for Assertion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Assertion::Registry(set) => {
                if set.is_empty() {
                    write!(f, "registry -")
                } else {
                    let list: Vec<String> = set.iter().map(u8::to_string).collect();
                    write!(f, "registry {}", list.join(","))
                }
            }
            Assertion::RegistryContains(a) => write!(f, "registry_contains {a}"),
            Assertion::RegistryLacks(a) => write!(f, "registry_lacks {a}"),
            Assertion::Variables { address, count } => write!(f, "variables {address} {count}"),
            Assertion::Level { address, var_index, level } => write!(f, "level {address} {var_index} {level}"),
            Assertion::Rejects { address, count } => write!(f, "rejects {address} {count}"),
            Assertion::DisconnectDetectedBy { address, by } => write!(f, "disconnect_detected_by {address} {by}"),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Step {
    Command { verb: &'static str, command: Command },
    RunUntil,
    Expect(Assertion),
}

#[derive(Debug, Clone)]
pub struct ScriptLine {
    pub line: usize,
    pub time: VirtualMs,
    pub step: Step,
}

#[derive(Debug, Clone, Default)]
pub struct ScenarioScript {
    pub lines: Vec<ScriptLine>,
}

impl ScenarioScript {
    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn end_time(&self) -> VirtualMs {
        self.lines.last().map(|l| l.time).unwrap_or(0)
    }
}

/// Parses a script, loading every referenced file relative to `base_dir`.
pub fn parse_script(text: &str, base_dir: &Path) -> Result<ScenarioScript, ScriptSyntaxError> {
    let mut script = ScenarioScript::default();
    let mut last_time = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |message: String| ScriptSyntaxError { line, message };
        let mut tokens = content.split_whitespace();
        let time_tok = tokens.next().expect("non-empty line");
        let time: VirtualMs = time_tok
            .parse()
            .map_err(|_| err(format!("expected a timestamp, found {time_tok:?}")))?;
        if time < last_time {
            return Err(err(format!("timestamp {time} is earlier than the previous {last_time}")));
        }
        last_time = time;
        let verb = tokens.next().ok_or_else(|| err("missing verb".into()))?;
        let args: Vec<&str> = tokens.collect();
        let step = parse_step(verb, &args, base_dir).map_err(err)?;
        script.lines.push(ScriptLine { line, time, step });
    }
    Ok(script)
}

fn want_args(verb: &str, args: &[&str], n: usize) -> Result<(), String> {
    if args.len() != n {
        Err(format!("{verb} takes {n} argument(s), got {}", args.len()))
    } else {
        Ok(())
    }
}

fn num<T: std::str::FromStr>(what: &str, s: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("invalid {what} {s:?}"))
}

fn read_file(base: &Path, rel: &str) -> Result<(PathBuf, String), String> {
    let path = base.join(rel);
    let text = std::fs::read_to_string(&path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    Ok((path, text))
}

fn parse_step(verb: &str, args: &[&str], base: &Path) -> Result<Step, String> {
    let cmd = |verb: &'static str, command| Ok(Step::Command { verb, command });
    match verb {
        "plug" => {
            want_args(verb, args, 2)?;
            let slot = SlotId(num("slot", args[0])?);
            let (path, text) = read_file(base, args[1])?;
            let descriptor = ModuleDescriptor::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))?;
            cmd("plug", Command::Plug { slot, descriptor })
        }
        "unplug" => {
            want_args(verb, args, 1)?;
            cmd("unplug", Command::Unplug { slot: SlotId(num("slot", args[0])?) })
        }
        "set" => {
            want_args(verb, args, 3)?;
            cmd(
                "set",
                Command::Set {
                    address: Address(num("address", args[0])?),
                    var_index: num("variable index", args[1])?,
                    value: num("value", args[2])?,
                },
            )
        }
        "inject" => {
            let bytes = args
                .iter()
                .map(|b| u8::from_str_radix(b, 16).map_err(|_| format!("invalid hex byte {b:?}")))
                .collect::<Result<Vec<u8>, _>>()?;
            let frame = Frame::new(u16::from(Address::CORE.0), &bytes).map_err(|e| e.to_string())?;
            cmd("inject", Command::Inject { frame })
        }
        "load_csv" => {
            want_args(verb, args, 1)?;
            let (path, text) = read_file(base, args[0])?;
            let dataset: Dataset =
                datafeed::read_csv(text.as_bytes()).map_err(|e| format!("{}: {e}", path.display()))?;
            cmd("load_csv", Command::LoadCsv { dataset })
        }
        "map" => {
            let rules = if args.len() == 1 {
                let (path, text) = read_file(base, args[0])?;
                datafeed::parse_mapping(&text).map_err(|e| format!("{}: {e}", path.display()))?
            } else {
                vec![parse_inline_rule(args)?]
            };
            cmd("map", Command::Map { rules })
        }
        "replay" => {
            want_args(verb, args, 1)?;
            cmd("replay", Command::Replay { cadence_ms: num("cadence", args[0])? })
        }
        "run_until" => {
            want_args(verb, args, 0)?;
            Ok(Step::RunUntil)
        }
        "expect" => parse_assertion(args).map(Step::Expect),
        other => Err(format!("unknown verb {other:?}")),
    }
}

fn parse_inline_rule(args: &[&str]) -> Result<MappingRule, String> {
    if args.len() < 3 {
        return Err("map takes <column> <addr> <index> [domain=<lo>:<hi>] [clamp=<bool>]".into());
    }
    let mut rule = MappingRule::new(args[0], Address(num("address", args[1])?), num("variable index", args[2])?);
    for opt in &args[3..] {
        match opt.split_once('=') {
            Some(("domain", v)) => {
                let (lo, hi) = v.split_once(':').ok_or_else(|| format!("domain must be <lo>:<hi>, got {v:?}"))?;
                rule = rule.with_domain(num("domain bound", lo)?, num("domain bound", hi)?);
            }
            Some(("clamp", v)) => rule.clamp = num("clamp flag", v)?,
            _ => return Err(format!("unknown map option {opt:?}")),
        }
    }
    Ok(rule)
}

fn parse_assertion(args: &[&str]) -> Result<Assertion, String> {
    let (&kind, rest) = args.split_first().ok_or("expect needs an assertion")?;
    let arity = |n: usize| {
        if rest.len() == n {
            Ok(())
        } else {
            Err(format!("expect {kind} takes {n} argument(s), got {}", rest.len()))
        }
    };
    let a = match kind {
        "registry" => {
            arity(1)?;
            let set = if rest[0] == "-" {
                BTreeSet::new()
            } else {
                rest[0]
                    .split(',')
                    .map(|s| num("address", s))
                    .collect::<Result<_, _>>()?
            };
            Assertion::Registry(set)
        }
        "registry_contains" => {
            arity(1)?;
            Assertion::RegistryContains(num("address", rest[0])?)
        }
        "registry_lacks" => {
            arity(1)?;
            Assertion::RegistryLacks(num("address", rest[0])?)
        }
        "variables" => {
            arity(2)?;
            Assertion::Variables { address: num("address", rest[0])?, count: num("count", rest[1])? }
        }
        "level" => {
            arity(3)?;
            Assertion::Level {
                address: num("address", rest[0])?,
                var_index: num("variable index", rest[1])?,
                level: num("level", rest[2])?,
            }
        }
        "rejects" => {
            arity(2)?;
            Assertion::Rejects { address: num("address", rest[0])?, count: num("count", rest[1])? }
        }
        "disconnect_detected_by" => {
            arity(2)?;
            Assertion::DisconnectDetectedBy { address: num("address", rest[0])?, by: num("time", rest[1])? }
        }
        other => return Err(format!("unknown assertion {other:?}")),
    };
    Ok(a)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssertionFailure {
    pub line: usize,
    pub time: VirtualMs,
    pub assertion: Assertion,
    pub detail: String,
}

impl fmt::Display for AssertionFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {} (t={}): expect {} failed: {}", self.line, self.time, self.assertion, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunReport {
    pub assertions: usize,
    pub failures: Vec<AssertionFailure>,
    pub rejected_commands: usize,
}

impl RunReport {
    /// 0 when every assertion held, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            1
        }
    }
}

/// Runs `script` on a fresh platform, writing the canonical trace to `out`.
pub fn run<W: Write>(script: &ScenarioScript, seed: u64, config: &BusConfig, out: &mut W) -> io::Result<RunReport> {
    let mut platform = Platform::new(config.clone(), seed);
    let mut written = 0;
    let mut report = RunReport { assertions: 0, failures: Vec::new(), rejected_commands: 0 };

    fn flush<W: Write>(p: &Platform, written: &mut usize, out: &mut W) -> io::Result<()> {
        for e in &p.bus().log()[*written..] {
            writeln!(out, "{e}")?;
        }
        *written = p.bus().log().len();
        Ok(())
    }

    for line in &script.lines {
        match &line.step {
            Step::Command { verb, command } => {
                let res = platform.execute(command.clone(), line.time);
                flush(&platform, &mut written, out)?;
                if let Err(e) = res {
                    report.rejected_commands += 1;
                    // core-side set rejections already appear in the bus log
                    if !matches!(command, Command::Set { .. }) {
                        writeln!(out, "t={} REJECTED {verb} reason={}", line.time, e.kind())?;
                    }
                }
            }
            Step::RunUntil => {
                platform.bus_mut().run_until(line.time);
                flush(&platform, &mut written, out)?;
            }
            Step::Expect(assertion) => {
                platform.bus_mut().run_until(line.time);
                flush(&platform, &mut written, out)?;
                report.assertions += 1;
                match check(&platform, assertion) {
                    Ok(()) => writeln!(out, "t={} EXPECT {assertion} ok", line.time)?,
                    Err(detail) => {
                        writeln!(out, "t={} EXPECT {assertion} FAIL {detail}", line.time)?;
                        report.failures.push(AssertionFailure {
                            line: line.line,
                            time: line.time,
                            assertion: assertion.clone(),
                            detail,
                        });
                    }
                }
            }
        }
    }
    platform.bus_mut().run_until(script.end_time());
    flush(&platform, &mut written, out)?;
    Ok(report)
}

fn check(p: &Platform, a: &Assertion) -> Result<(), String> {
    let core = p.bus().core().ok_or("no core attached")?;
    let registry: BTreeSet<u8> = core.addresses().into_iter().map(|a| a.0).collect();
    let expect = |ok: bool, detail: String| if ok { Ok(()) } else { Err(detail) };
    match *a {
        Assertion::Registry(ref want) => expect(*want == registry, format!("registry is {registry:?}")),
        Assertion::RegistryContains(addr) => expect(registry.contains(&addr), format!("registry is {registry:?}")),
        Assertion::RegistryLacks(addr) => expect(!registry.contains(&addr), format!("registry is {registry:?}")),
        Assertion::Variables { address, count } => {
            let entry = core.entry(Address(address)).ok_or(format!("{address} not registered"))?;
            expect(entry.variables.len() == count, format!("{} variables", entry.variables.len()))
        }
        Assertion::Level { address, var_index, level } => {
            let module = p.bus().module_at(Address(address)).ok_or(format!("slot {address} is empty"))?;
            let got = module.current_level(var_index).map_err(|e| e.to_string())?;
            expect(got == level, format!("level is {got}"))
        }
        Assertion::Rejects { address, count } => {
            let module = p.bus().module_at(Address(address)).ok_or(format!("slot {address} is empty"))?;
            expect(module.reject_count() == count, format!("{} rejects", module.reject_count()))
        }
        Assertion::DisconnectDetectedBy { address, by } => {
            let log = p.bus().log();
            let since = log
                .iter()
                .rev()
                .find(|e| e.kind == EventKind::SlotUnpowered { slot: SlotId(address) })
                .map(|e| e.time);
            let hit = log.iter().find(|e| {
                matches!(e.kind, EventKind::DisconnectDetected { address: a, .. } if a.0 == address)
                    && since.is_none_or(|s| e.time >= s)
                    && e.time <= by
            });
            expect(hit.is_some(), format!("no disconnect of {address} detected by t={by}"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("trace line {line}: {message}")]
pub struct TraceParseError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModuleSummary {
    pub plugs: u32,
    pub unplugs: u32,
    pub variables: BTreeMap<u8, (u8, u8, u8)>,
    pub levels: BTreeMap<u8, u8>,
    pub disconnects: Vec<VirtualMs>,
    pub ignored_sets: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceSummary {
    pub end_time: VirtualMs,
    pub announces: u64,
    pub heartbeats: u64,
    pub sets: u64,
    pub undecodable: u64,
    pub dropped: u64,
    pub registry: BTreeSet<u8>,
    pub modules: BTreeMap<u8, ModuleSummary>,
    pub expects_ok: u64,
    pub expects_failed: u64,
    pub rejected: u64,
}

fn field<'a>(rest: &'a str, key: &str) -> Option<&'a str> {
    rest.split_whitespace()
        .find_map(|tok| tok.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
}

/// Rebuilds registries, levels and traffic counts from a trace.
pub fn inspect(trace: &str) -> Result<TraceSummary, TraceParseError> {
    let mut s = TraceSummary::default();
    for (i, line) in trace.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: &str| TraceParseError { line: i + 1, message: message.to_string() };
        let (t, rest) = line.split_once(' ').ok_or_else(|| err("missing event"))?;
        let time: VirtualMs = t
            .strip_prefix("t=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err("missing t=<ms> prefix"))?;
        s.end_time = s.end_time.max(time);
        let (event, rest) = rest.split_once(' ').unwrap_or((rest, ""));
        let get = |key: &str| -> Result<u8, TraceParseError> {
            field(rest, key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| err(&format!("{event} without a numeric {key}")))
        };
        match event {
            "PLUG" => s.modules.entry(get("slot")?).or_default().plugs += 1,
            "UNPOWERED" => {
                let m = s.modules.entry(get("slot")?).or_default();
                m.unplugs += 1;
                m.levels.clear();
            }
            "FRAME" | "DROP" => {
                let at = rest.find("ID=").ok_or_else(|| err("frame without ID="))?;
                let frame: Frame = rest[at..].parse().map_err(|e: codec::FrameError| err(&e.to_string()))?;
                if event == "DROP" {
                    s.dropped += 1;
                    continue;
                }
                match codec::decode(&frame) {
                    Ok(Message::Announce { .. }) => s.announces += 1,
                    Ok(Message::Heartbeat { .. }) => s.heartbeats += 1,
                    Ok(Message::SetValue { .. }) => s.sets += 1,
                    Err(_) => s.undecodable += 1,
                }
            }
            "REGISTERED" => {
                let addr = get("addr")?;
                s.registry.insert(addr);
                let var = (get("min")?, get("max")?, get("granularity")?);
                s.modules.entry(addr).or_default().variables.insert(get("index")?, var);
            }
            "DISCONNECT" => {
                let addr = get("addr")?;
                s.registry.remove(&addr);
                let m = s.modules.entry(addr).or_default();
                m.disconnects.push(time);
                m.variables.clear();
            }
            "LEVEL" => {
                let addr = get("addr")?;
                s.modules.entry(addr).or_default().levels.insert(get("index")?, get("level")?);
            }
            "IGNORED" => s.modules.entry(get("addr")?).or_default().ignored_sets += 1,
            "EXPECT" => {
                if rest.ends_with(" ok") {
                    s.expects_ok += 1;
                } else {
                    s.expects_failed += 1;
                }
            }
            "REJECTED" | "SET-REJECTED" => s.rejected += 1,
            "CORE" | "POWERED" | "REPLAY" | "DOMAIN" | "SKIP" => {}
            other => return Err(err(&format!("unknown event {other:?}"))),
        }
    }
    Ok(s)
}

impl fmt::Display for TraceSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "trace ends at t={} ms", self.end_time)?;
        writeln!(
            f,
            "frames: {} announce, {} heartbeat, {} set, {} undecodable, {} dropped",
            self.announces, self.heartbeats, self.sets, self.undecodable, self.dropped
        )?;
        let reg: Vec<String> = self.registry.iter().map(u8::to_string).collect();
        writeln!(f, "final registry: [{}]", reg.join(", "))?;
        for (addr, m) in &self.modules {
            writeln!(
                f,
                "  slot {addr}: plugged {}x, unplugged {}x, disconnects detected at {:?}, ignored sets {}",
                m.plugs, m.unplugs, m.disconnects, m.ignored_sets
            )?;
            for (idx, (min, max, g)) in &m.variables {
                let level = m.levels.get(idx).map(u8::to_string).unwrap_or_else(|| "-".into());
                writeln!(f, "    var {idx}: [{min}, {max}] x{g}, level {level}")?;
            }
        }
        write!(
            f,
            "assertions: {} ok, {} failed; {} commands rejected",
            self.expects_ok, self.expects_failed, self.rejected
        )
    }
}
