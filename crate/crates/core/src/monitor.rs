//! Per-task runtime-verification monitor.
//!
//! Each spawned task gets a deterministic automaton over pairs of
//! (task state, `need_sched`). Kernel hooks feed it [`MonitorEvent`]s; an
//! event with no outgoing transition from the current state is a violation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{TaskId, TaskState};

/// The `need_sched` component of a monitor state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NeedSchedFlag {
    False,
    True,
    /// Used for terminal states, where the flag is irrelevant.
    DontCare,
}

impl fmt::Display for NeedSchedFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NeedSchedFlag::False => "false",
            NeedSchedFlag::True => "true",
            NeedSchedFlag::DontCare => "*",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MonitorState {
    /// Synthetic state before the task is spawned.
    Init,
    Task { base: TaskState, flag: NeedSchedFlag },
}

impl MonitorState {
    /// Builds a state, forcing `DontCare` for terminal bases.
    pub fn of(base: TaskState, need_sched: bool) -> Self {
        let flag = if base.is_terminal() {
            NeedSchedFlag::DontCare
        } else if need_sched {
            NeedSchedFlag::True
        } else {
            NeedSchedFlag::False
        };
        MonitorState::Task { base, flag }
    }

    pub fn base(self) -> Option<TaskState> {
        match self {
            MonitorState::Init => None,
            MonitorState::Task { base, .. } => Some(base),
        }
    }

    pub fn flag(self) -> Option<NeedSchedFlag> {
        match self {
            MonitorState::Init => None,
            MonitorState::Task { flag, .. } => Some(flag),
        }
    }

    pub fn is_terminal(self) -> bool {
        self.base().is_some_and(TaskState::is_terminal)
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            MonitorState::Init => 0xff,
            MonitorState::Task { base, flag } => {
                let f = match flag {
                    NeedSchedFlag::False => 0,
                    NeedSchedFlag::True => 1,
                    NeedSchedFlag::DontCare => 2,
                };
                base.code() * 3 + f
            }
        }
    }
}

impl fmt::Display for MonitorState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MonitorState::Init => f.write_str("Init"),
            MonitorState::Task { base, flag } => write!(f, "{base}({flag})"),
        }
    }
}

impl std::str::FromStr for MonitorState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "Init" {
            return Ok(MonitorState::Init);
        }
        let (base, rest) = s.split_once('(').ok_or_else(|| format!("bad monitor state {s:?}"))?;
        let flag = rest.strip_suffix(')').ok_or_else(|| format!("bad monitor state {s:?}"))?;
        let base = match base {
            "Runnable" => TaskState::Runnable,
            "Running" => TaskState::Running,
            "Waiting" => TaskState::Waiting,
            "Preempted" => TaskState::Preempted,
            "Terminated" => TaskState::Terminated,
            "Panicked" => TaskState::Panicked,
            _ => return Err(format!("bad task state {base:?}")),
        };
        let flag = match flag {
            "false" => NeedSchedFlag::False,
            "true" => NeedSchedFlag::True,
            "*" => NeedSchedFlag::DontCare,
            _ => return Err(format!("bad flag {flag:?}")),
        };
        if (flag == NeedSchedFlag::DontCare) != base.is_terminal() {
            return Err(format!("flag {flag} not allowed for {base}"));
        }
        Ok(MonitorState::Task { base, flag })
    }
}

impl Serialize for MonitorState {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MonitorState {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MonitorEvent {
    Spawn,
    Wake,
    SetNeedSched,
    GetNext,
    PollPending,
    PollReady,
    Preempt,
    Panic,
}

impl MonitorEvent {
    pub const ALL: [MonitorEvent; 8] = [
        MonitorEvent::Spawn,
        MonitorEvent::Wake,
        MonitorEvent::SetNeedSched,
        MonitorEvent::GetNext,
        MonitorEvent::PollPending,
        MonitorEvent::PollReady,
        MonitorEvent::Preempt,
        MonitorEvent::Panic,
    ];
}

impl fmt::Display for MonitorEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// One edge `from -- event --> to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transition {
    pub from: MonitorState,
    pub event: MonitorEvent,
    pub to: MonitorState,
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -- {} --> {}", self.from, self.event, self.to)
    }
}

/// Renders a transition as a log line: `task=1 Running(false) -- PollPending --> Waiting(false)`.
pub fn format_transition(
    task: TaskId,
    from: MonitorState,
    event: MonitorEvent,
    to: MonitorState,
) -> String {
    format!("task={task} {from} -- {event} --> {to}")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TableError {
    #[error("nondeterministic: {0} has two successors on {1}")]
    Nondeterministic(MonitorState, MonitorEvent),
    #[error("terminal state {0} has an outgoing transition")]
    TerminalNotAbsorbing(MonitorState),
}

#[derive(Debug, Clone)]
pub struct TransitionTable {
    triples: Vec<Transition>,
    initial: MonitorState,
    index: HashMap<(MonitorState, MonitorEvent), MonitorState>,
}

impl TransitionTable {
    pub fn new(initial: MonitorState, triples: Vec<Transition>) -> Result<Self, TableError> {
        let mut index = HashMap::with_capacity(triples.len());
        for t in &triples {
            if t.from.is_terminal() {
                return Err(TableError::TerminalNotAbsorbing(t.from));
            }
            if index.insert((t.from, t.event), t.to).is_some() {
                return Err(TableError::Nondeterministic(t.from, t.event));
            }
        }
        Ok(TransitionTable {
            triples,
            initial,
            index,
        })
    }

    pub fn initial(&self) -> MonitorState {
        self.initial
    }

    pub fn triples(&self) -> &[Transition] {
        &self.triples
    }

    pub fn successor(&self, from: MonitorState, event: MonitorEvent) -> Option<MonitorState> {
        self.index.get(&(from, event)).copied()
    }
}

/// The task-transition model: every edge the kernel is expected to take,
/// including the `need_sched` refinements.
pub fn default_table() -> TransitionTable {
    use MonitorEvent::*;
    use TaskState::*;
    let s = MonitorState::of;
    let edge = |from, event, to| Transition { from, event, to };
    let triples = vec![
        edge(MonitorState::Init, Spawn, s(Waiting, false)),
        edge(s(Waiting, false), Wake, s(Runnable, false)),
        edge(s(Runnable, false), GetNext, s(Running, false)),
        edge(s(Running, false), PollPending, s(Waiting, false)),
        edge(s(Running, false), SetNeedSched, s(Running, true)),
        edge(s(Running, true), SetNeedSched, s(Running, true)),
        edge(s(Running, true), PollPending, s(Runnable, false)),
        edge(s(Running, true), Preempt, s(Preempted, true)),
        edge(s(Running, false), PollReady, s(Terminated, false)),
        edge(s(Running, true), PollReady, s(Terminated, false)),
        edge(s(Preempted, true), GetNext, s(Running, false)),
        edge(s(Preempted, false), GetNext, s(Running, false)),
        edge(s(Running, false), Panic, s(Panicked, false)),
        edge(s(Running, true), Panic, s(Panicked, false)),
    ];
    TransitionTable::new(MonitorState::Init, triples).expect("default table is well formed")
}

/// An event with no defined transition from the current state.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("Error: an invalid transition is found.\n  current state: {current}\n  symbol: {symbol}")]
pub struct InvalidTransition {
    pub current: MonitorState,
    pub symbol: MonitorEvent,
    pub history: Vec<Transition>,
}

#[derive(Debug, Clone)]
pub struct TaskMonitor {
    table: Arc<TransitionTable>,
    current: MonitorState,
    history: Vec<Transition>,
}

impl TaskMonitor {
    pub fn new(table: Arc<TransitionTable>) -> Self {
        let current = table.initial();
        TaskMonitor {
            table,
            current,
            history: Vec::new(),
        }
    }

    pub fn current(&self) -> MonitorState {
        self.current
    }

    pub fn history(&self) -> &[Transition] {
        &self.history
    }

    /// Advances on `event`, or reports a violation and stays put.
    pub fn next(&mut self, event: MonitorEvent) -> Result<Transition, InvalidTransition> {
        match self.table.successor(self.current, event) {
            Some(to) => {
                let t = Transition {
                    from: self.current,
                    event,
                    to,
                };
                self.current = to;
                self.history.push(t);
                Ok(t)
            }
            None => Err(InvalidTransition {
                current: self.current,
                symbol: event,
                history: self.history.clone(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("task {0} already has a monitor")]
    Duplicate(TaskId),
    #[error("task {0} has no monitor")]
    Unknown(TaskId),
    #[error("task {task}: {source}")]
    Violation {
        task: TaskId,
        #[source]
        source: InvalidTransition,
    },
}

/// Monitors keyed by task id. Monitors are never removed.
#[derive(Debug, Clone)]
pub struct MonitorRegistry {
    table: Arc<TransitionTable>,
    monitors: BTreeMap<TaskId, TaskMonitor>,
}

impl Default for MonitorRegistry {
    fn default() -> Self {
        MonitorRegistry::new(Arc::new(default_table()))
    }
}

impl MonitorRegistry {
    pub fn new(table: Arc<TransitionTable>) -> Self {
        MonitorRegistry {
            table,
            monitors: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, task: TaskId) -> Result<(), RegistryError> {
        if self.monitors.contains_key(&task) {
            return Err(RegistryError::Duplicate(task));
        }
        self.monitors
            .insert(task, TaskMonitor::new(Arc::clone(&self.table)));
        Ok(())
    }

    pub fn fire(&mut self, task: TaskId, event: MonitorEvent) -> Result<Transition, RegistryError> {
        let monitor = self
            .monitors
            .get_mut(&task)
            .ok_or(RegistryError::Unknown(task))?;
        monitor
            .next(event)
            .map_err(|source| RegistryError::Violation { task, source })
    }

    pub fn get(&self, task: TaskId) -> Option<&TaskMonitor> {
        self.monitors.get(&task)
    }

    pub fn len(&self) -> usize {
        self.monitors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monitors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (TaskId, &TaskMonitor)> {
        self.monitors.iter().map(|(k, v)| (*k, v))
    }

    /// Current states only; histories are path data, not state.
    pub(crate) fn encode(&self, out: &mut Vec<u8>) {
        out.push(self.monitors.len() as u8);
        for (id, m) in &self.monitors {
            out.push(id.0);
            out.push(m.current.code());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use MonitorEvent::*;
    use TaskState::*;

    fn st(base: TaskState, flag: bool) -> MonitorState {
        MonitorState::of(base, flag)
    }

    #[test]
    fn table_contains_observed_edges() {
        let t = default_table();
        assert_eq!(t.successor(st(Running, false), SetNeedSched), Some(st(Running, true)));
        assert_eq!(t.successor(st(Running, true), Preempt), Some(st(Preempted, true)));
        assert_eq!(t.successor(st(Runnable, false), GetNext), Some(st(Running, false)));
        assert_eq!(t.successor(st(Running, false), PollPending), Some(st(Waiting, false)));
        assert_eq!(t.triples().len(), 14);
    }

    #[test]
    fn terminal_states_have_no_edges() {
        let t = default_table();
        assert!(t.triples().iter().all(|e| !e.from.is_terminal()));
        for ev in MonitorEvent::ALL {
            assert_eq!(t.successor(st(Terminated, false), ev), None);
            assert_eq!(t.successor(st(Panicked, true), ev), None);
        }
    }

    #[test]
    fn table_rejects_nondeterminism() {
        let a = Transition { from: MonitorState::Init, event: Spawn, to: st(Waiting, false) };
        let b = Transition { from: MonitorState::Init, event: Spawn, to: st(Runnable, false) };
        assert_eq!(
            TransitionTable::new(MonitorState::Init, vec![a, b]).unwrap_err(),
            TableError::Nondeterministic(MonitorState::Init, Spawn)
        );
        let c = Transition { from: st(Terminated, false), event: Wake, to: st(Runnable, false) };
        assert!(TransitionTable::new(MonitorState::Init, vec![c]).is_err());
    }

    #[test]
    fn next_accepts_and_rejects() {
        let mut m = TaskMonitor::new(Arc::new(default_table()));
        m.next(Spawn).unwrap();
        m.next(Wake).unwrap();
        let t = m.next(GetNext).unwrap();
        assert_eq!(t.to, st(Running, false));

        let err = m.next(GetNext).unwrap_err();
        assert_eq!(err.current, st(Running, false));
        assert_eq!(err.symbol, GetNext);
        assert_eq!(err.history.len(), 3);
        assert_eq!(
            err.to_string(),
            "Error: an invalid transition is found.\n  current state: Running(false)\n  symbol: GetNext"
        );
        // unchanged after a violation
        assert_eq!(m.current(), st(Running, false));
        assert_eq!(m.history().len(), 3);
    }

    #[test]
    fn terminated_rejects_wake() {
        let mut m = TaskMonitor::new(Arc::new(default_table()));
        for ev in [Spawn, Wake, GetNext, PollReady] {
            m.next(ev).unwrap();
        }
        assert_eq!(m.current().to_string(), "Terminated(*)");
        assert!(m.next(Wake).is_err());
    }

    #[test]
    fn registry_register_and_fire() {
        let mut reg = MonitorRegistry::default();
        reg.register(TaskId(0)).unwrap();
        assert_eq!(reg.get(TaskId(0)).unwrap().current(), MonitorState::Init);
        reg.fire(TaskId(0), Spawn).unwrap();
        assert_eq!(reg.get(TaskId(0)).unwrap().current(), st(Waiting, false));
        assert_eq!(reg.register(TaskId(0)), Err(RegistryError::Duplicate(TaskId(0))));
        assert_eq!(reg.fire(TaskId(7), Wake), Err(RegistryError::Unknown(TaskId(7))));
    }

    #[test]
    fn registry_clone_is_independent() {
        let mut reg = MonitorRegistry::default();
        reg.register(TaskId(0)).unwrap();
        let snapshot = reg.clone();
        reg.fire(TaskId(0), Spawn).unwrap();
        assert_eq!(snapshot.get(TaskId(0)).unwrap().current(), MonitorState::Init);
    }

    #[test]
    fn transition_lines() {
        let line = format_transition(TaskId(1), st(Running, false), PollPending, st(Waiting, false));
        assert_eq!(line, "task=1 Running(false) -- PollPending --> Waiting(false)");
        assert_eq!(
            format_transition(TaskId(2), st(Running, true), PollReady, st(Terminated, true)),
            "task=2 Running(true) -- PollReady --> Terminated(*)"
        );
    }

    #[test]
    fn state_text_round_trip() {
        for s in ["Init", "Running(false)", "Preempted(true)", "Panicked(*)"] {
            assert_eq!(s.parse::<MonitorState>().unwrap().to_string(), s);
        }
        assert!("Terminated(false)".parse::<MonitorState>().is_err());
        assert!("Running(*)".parse::<MonitorState>().is_err());
    }
}
