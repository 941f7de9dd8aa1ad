//! Executable model of the preemptive task scheduler.
//!
//! The world is a single [`KernelState`]: task control blocks, the shared run
//! queue, the timer registry, one primary core and a set of worker cores,
//! context slots, and the per-task monitors. Every operation here is one
//! atomic step; the explorer decides which step runs next.
//!
//! Three operations take more than one step:
//!
//! * registering a timer, then transitioning to `Waiting`,
//! * deciding to preempt a core, then sending the IPI,
//! * marking a preempted task `Preempted` and putting it back on the queue.

mod config;
mod context;
mod invariants;
mod queue;
mod task;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{ConfigError, KernelConfig, MAX_TASKS, MAX_WORKERS};
pub use context::{ContextSlot, ContextSlotId, ContextTable, CtxState};
pub use invariants::{InvariantFailure, InvariantKind};
pub use queue::{QueueError, RunQueue, TimerRegistry};
pub use task::{
    format_task_plan, parse_task_plan, ProgramPoint, ScriptAction, TaskControlBlock, TaskId,
    TaskKind, TaskScript, TaskState,
};

use crate::monitor::{InvalidTransition, MonitorEvent, MonitorRegistry, RegistryError, Transition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CoreId(pub u8);

impl fmt::Display for CoreId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoreRole {
    Primary,
    Worker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PreemptDecision {
    pub target_core: CoreId,
    pub observed_task: TaskId,
}

/// Progress of a preemption that has passed the IPI checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreemptionPhase {
    SaveContext,
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoreState {
    pub id: CoreId,
    pub role: CoreRole,
    pub current_task: Option<TaskId>,
    pub interrupt_flag: bool,
    pub pending_ipi: Option<PreemptDecision>,
    pub active_context: Option<ContextSlotId>,
    pub preemption: Option<PreemptionPhase>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("unknown core {0}")]
    UnknownCore(CoreId),
    #[error("core {0} is the primary core and does not run tasks")]
    PrimaryCore(CoreId),
    #[error("step not enabled: {0}")]
    Disabled(&'static str),
}

/// A monitor rejected an event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservedViolation {
    pub task: TaskId,
    pub error: InvalidTransition,
}

/// Everything observable that happened during one step.
#[derive(Debug, Clone, Default)]
pub struct StepLog {
    pub transitions: Vec<(TaskId, Transition)>,
    pub violation: Option<ObservedViolation>,
    pub assertion: Option<String>,
}

impl StepLog {
    pub fn is_violating(&self) -> bool {
        self.violation.is_some() || self.assertion.is_some()
    }

    fn fail(&mut self, msg: String) {
        if self.assertion.is_none() {
            self.assertion = Some(msg);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FetchOutcome {
    Idle,
    /// Dequeued a task that was still running and put it back.
    Skipped(TaskId),
    Started(TaskId),
    Resumed(TaskId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IpiOutcome {
    Canceled,
    Preempting(TaskId),
}

/// The single step a worker core can take in a given state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerAction {
    Preemption,
    HandleIpi,
    Poll,
    Fetch,
}

/// Canonical, injective byte encoding of a [`KernelState`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Snapshot(Vec<u8>);

impl Snapshot {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

#[derive(Debug, Clone)]
pub struct KernelState {
    config: Arc<KernelConfig>,
    tcbs: Vec<TaskControlBlock>,
    run_queue: RunQueue,
    timers: TimerRegistry,
    cores: Vec<CoreState>,
    contexts: ContextTable,
    decision: Option<PreemptDecision>,
    preempt_in_flight: bool,
    spawn_cursor: usize,
    monitors: MonitorRegistry,
}

impl KernelState {
    /// Builds the boot state and spawns the first planned task.
    pub fn initial(config: KernelConfig) -> Result<(Self, StepLog), ConfigError> {
        let mut state = Self::empty(config)?;
        let mut log = StepLog::default();
        state.spawn_next(&mut log);
        Ok((state, log))
    }

    /// Boot state without any task spawned.
    pub fn empty(config: KernelConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let workers = config.worker_count;
        let mut cores = vec![CoreState {
            id: CoreId(0),
            role: CoreRole::Primary,
            current_task: None,
            interrupt_flag: false,
            pending_ipi: None,
            active_context: None,
            preemption: None,
        }];
        for w in 0..workers {
            cores.push(CoreState {
                id: CoreId(w as u8 + 1),
                role: CoreRole::Worker,
                current_task: None,
                interrupt_flag: false,
                pending_ipi: None,
                active_context: Some(ContextSlotId(w as u8)),
                preemption: None,
            });
        }
        Ok(KernelState {
            run_queue: RunQueue::with_capacity(config.task_plan.len()),
            timers: TimerRegistry::default(),
            contexts: ContextTable::new(workers, config.context_slots()),
            tcbs: Vec::with_capacity(config.task_plan.len()),
            cores,
            decision: None,
            preempt_in_flight: false,
            spawn_cursor: 0,
            monitors: MonitorRegistry::default(),
            config: Arc::new(config),
        })
    }

    pub fn config(&self) -> &KernelConfig {
        &self.config
    }

    pub fn tasks(&self) -> &[TaskControlBlock] {
        &self.tcbs
    }

    pub fn task(&self, id: TaskId) -> Option<&TaskControlBlock> {
        self.tcbs.get(id.index())
    }

    pub fn run_queue(&self) -> &RunQueue {
        &self.run_queue
    }

    pub fn timers(&self) -> &TimerRegistry {
        &self.timers
    }

    pub fn cores(&self) -> &[CoreState] {
        &self.cores
    }

    pub fn core(&self, id: CoreId) -> Option<&CoreState> {
        self.cores.get(id.0 as usize)
    }

    pub fn worker_ids(&self) -> impl Iterator<Item = CoreId> + '_ {
        self.cores
            .iter()
            .filter(|c| c.role == CoreRole::Worker)
            .map(|c| c.id)
    }

    pub fn contexts(&self) -> &ContextTable {
        &self.contexts
    }

    pub fn decision(&self) -> Option<PreemptDecision> {
        self.decision
    }

    pub fn preempt_in_flight(&self) -> bool {
        self.preempt_in_flight
    }

    pub fn spawn_cursor(&self) -> usize {
        self.spawn_cursor
    }

    pub fn plan_exhausted(&self) -> bool {
        self.spawn_cursor >= self.config.task_plan.len()
    }

    pub fn monitors(&self) -> &MonitorRegistry {
        &self.monitors
    }

    /// Every planned task was spawned and has reached a terminal state.
    pub fn all_terminal(&self) -> bool {
        self.plan_exhausted() && self.tcbs.iter().all(|t| t.state.is_terminal())
    }

    pub fn snapshot(&self) -> Snapshot {
        let mut out = Vec::with_capacity(96);
        out.push(self.tcbs.len() as u8);
        for t in &self.tcbs {
            out.extend([
                t.state.code(),
                t.need_sched as u8,
                t.in_queue as u8,
                t.preempt_context.map_or(0xff, |c| c.0),
                t.point.pc,
                t.point.pending_wait as u8,
                t.remaining_waits,
                t.remaining_preemptions,
            ]);
        }
        self.run_queue.encode(&mut out);
        self.timers.encode(&mut out);
        for c in &self.cores {
            out.extend([
                c.current_task.map_or(0xff, |t| t.0),
                c.interrupt_flag as u8,
                c.active_context.map_or(0xff, |s| s.0),
                match c.preemption {
                    None => 0,
                    Some(PreemptionPhase::SaveContext) => 1,
                    Some(PreemptionPhase::First) => 2,
                    Some(PreemptionPhase::Second) => 3,
                },
            ]);
            encode_decision(c.pending_ipi, &mut out);
        }
        self.contexts.encode(&mut out);
        encode_decision(self.decision, &mut out);
        out.push(self.preempt_in_flight as u8);
        out.push(self.spawn_cursor as u8);
        self.monitors.encode(&mut out);
        Snapshot(out)
    }

    fn tcb_mut(&mut self, id: TaskId) -> Result<&mut TaskControlBlock, ModelError> {
        self.tcbs.get_mut(id.index()).ok_or(ModelError::UnknownTask(id))
    }

    fn worker_mut(&mut self, id: CoreId) -> Result<&mut CoreState, ModelError> {
        let core = self
            .cores
            .get_mut(id.0 as usize)
            .ok_or(ModelError::UnknownCore(id))?;
        if core.role == CoreRole::Primary {
            return Err(ModelError::PrimaryCore(id));
        }
        Ok(core)
    }

    fn emit(&mut self, task: TaskId, event: MonitorEvent, log: &mut StepLog) {
        match self.monitors.fire(task, event) {
            Ok(t) => log.transitions.push((task, t)),
            Err(RegistryError::Violation { task, source }) => {
                if log.violation.is_none() {
                    log.violation = Some(ObservedViolation { task, error: source });
                }
            }
            Err(e) => log.fail(e.to_string()),
        }
    }

    fn enqueue(&mut self, id: TaskId, log: &mut StepLog) {
        match self.run_queue.push_back(id) {
            Ok(()) => self.tcbs[id.index()].in_queue = true,
            Err(e) => log.fail(format!("enqueue of task {id} failed: {e}")),
        }
    }

    /// Creates the next planned task and wakes it. Returns `None` when the
    /// plan is exhausted.
    pub fn spawn_next(&mut self, log: &mut StepLog) -> Option<TaskId> {
        if self.plan_exhausted() {
            return None;
        }
        let index = self.spawn_cursor;
        let id = TaskId(index as u8);
        let script = self.config.script_for(index);
        let heavy = script.kind == TaskKind::Heavy;
        self.tcbs.push(TaskControlBlock {
            id,
            state: TaskState::Waiting,
            need_sched: false,
            in_queue: false,
            preempt_context: None,
            remaining_waits: script.waits().min(u8::MAX as usize) as u8,
            remaining_preemptions: if heavy {
                self.config.max_preemptions_per_task
            } else {
                0
            },
            script,
            point: ProgramPoint::default(),
        });
        self.spawn_cursor += 1;
        if let Err(e) = self.monitors.register(id) {
            log.fail(e.to_string());
        }
        self.emit(id, MonitorEvent::Spawn, log);
        // The spawn hook always wakes the new task.
        self.wake(id, log).expect("task was just created");
        Some(id)
    }

    /// The timer callback. Enqueues a waiting task; for a running task it
    /// either records `need_sched` or, without the fix, does nothing.
    pub fn wake(&mut self, id: TaskId, log: &mut StepLog) -> Result<(), ModelError> {
        let fix = self.config.fix_wait_need_sched;
        let tcb = self.tcb_mut(id)?;
        match tcb.state {
            TaskState::Waiting => {
                tcb.state = TaskState::Runnable;
                self.enqueue(id, log);
                self.emit(id, MonitorEvent::Wake, log);
            }
            TaskState::Running if fix => {
                tcb.need_sched = true;
                self.emit(id, MonitorEvent::SetNeedSched, log);
            }
            _ => {}
        }
        Ok(())
    }

    /// Fires the `choice`-th pending timer (ascending task id).
    pub fn timer_fire(&mut self, choice: usize, log: &mut StepLog) -> Result<TaskId, ModelError> {
        let id = self
            .timers
            .take_nth(choice)
            .ok_or(ModelError::Disabled("no such pending timer"))?;
        self.wake(id, log)?;
        Ok(id)
    }

    /// Worker cores whose running task may be chosen for preemption.
    pub fn preempt_candidates(&self) -> Vec<CoreId> {
        if self.preempt_in_flight {
            return Vec::new();
        }
        self.cores
            .iter()
            .filter(|c| c.role == CoreRole::Worker && c.preemption.is_none())
            .filter(|c| {
                c.current_task.is_some_and(|t| {
                    let t = &self.tcbs[t.index()];
                    t.state == TaskState::Running
                        && t.kind() == TaskKind::Heavy
                        && t.remaining_preemptions > 0
                })
            })
            .map(|c| c.id)
            .collect()
    }

    /// The round-robin check: picks a core to preempt and records the
    /// decision. The IPI goes out in a later, separate step.
    pub fn preempt_decide(
        &mut self,
        choice: usize,
        log: &mut StepLog,
    ) -> Result<PreemptDecision, ModelError> {
        let core = *self
            .preempt_candidates()
            .get(choice)
            .ok_or(ModelError::Disabled("no preemption candidate"))?;
        let task = self.cores[core.0 as usize]
            .current_task
            .expect("candidate has a task");
        let decision = PreemptDecision {
            target_core: core,
            observed_task: task,
        };
        self.decision = Some(decision);
        self.preempt_in_flight = true;
        if self.config.fix_preempt_need_sched {
            self.tcbs[task.index()].need_sched = true;
            self.emit(task, MonitorEvent::SetNeedSched, log);
        }
        Ok(decision)
    }

    pub fn send_ipi(&mut self) -> Result<CoreId, ModelError> {
        let d = self.decision.ok_or(ModelError::Disabled("no preemption decision"))?;
        let core = self.worker_mut(d.target_core)?;
        if core.pending_ipi.is_some() {
            return Err(ModelError::Disabled("IPI already pending"));
        }
        core.pending_ipi = Some(d);
        core.interrupt_flag = true;
        self.decision = None;
        Ok(d.target_core)
    }

    /// What `core` would do next, if anything.
    ///
    /// An IPI is not taken while the running task sits between registering
    /// its timer and the transition to waiting; it is handled right after.
    pub fn worker_action(&self, core: CoreId) -> Option<WorkerAction> {
        let c = self.cores.get(core.0 as usize)?;
        if c.role != CoreRole::Worker {
            return None;
        }
        if c.preemption.is_some() {
            return Some(WorkerAction::Preemption);
        }
        let mid_wait = c
            .current_task
            .is_some_and(|t| self.tcbs[t.index()].point.pending_wait);
        if c.pending_ipi.is_some() && !mid_wait {
            return Some(WorkerAction::HandleIpi);
        }
        if c.current_task.is_some() {
            return Some(WorkerAction::Poll);
        }
        if !self.run_queue.is_empty() {
            return Some(WorkerAction::Fetch);
        }
        None
    }

    /// Dequeues the next task for an idle worker.
    pub fn get_next_task(
        &mut self,
        core: CoreId,
        log: &mut StepLog,
    ) -> Result<FetchOutcome, ModelError> {
        let c = self.worker_mut(core)?;
        if c.current_task.is_some() || c.preemption.is_some() {
            return Err(ModelError::Disabled("core is busy"));
        }
        if c.interrupt_flag {
            log.fail(format!("interrupt_flag set on core {core} at task fetch"));
        }
        let Some(id) = self.run_queue.pop_front() else {
            return Ok(FetchOutcome::Idle);
        };
        self.tcbs[id.index()].in_queue = false;
        let state = self.tcbs[id.index()].state;

        if state == TaskState::Running && !self.config.fault_skip_running_check {
            self.enqueue(id, log);
            return Ok(FetchOutcome::Skipped(id));
        }
        if !matches!(
            state,
            TaskState::Runnable | TaskState::Preempted | TaskState::Running
        ) {
            log.fail(format!("dequeued task {id} in state {state}"));
        }

        let set_running = !self.config.fault_skip_resume_state;
        if let Some(slot) = self.tcbs[id.index()].preempt_context.take() {
            // yield_and_pool: park the current context, switch to the saved one.
            let old = self.cores[core.0 as usize].active_context;
            if let Some(old) = old {
                self.contexts.release(old);
            }
            let point = self.contexts.restore(slot);
            self.cores[core.0 as usize].active_context = Some(slot);
            self.cores[core.0 as usize].current_task = Some(id);
            let tcb = &mut self.tcbs[id.index()];
            match point {
                Some(p) => tcb.point = p,
                None => log.fail(format!("context {slot} of task {id} has no saved point")),
            }
            tcb.need_sched = false;
            if set_running {
                tcb.state = TaskState::Running;
                self.emit(id, MonitorEvent::GetNext, log);
            }
            Ok(FetchOutcome::Resumed(id))
        } else {
            let tcb = &mut self.tcbs[id.index()];
            tcb.state = TaskState::Running;
            self.cores[core.0 as usize].current_task = Some(id);
            self.emit(id, MonitorEvent::GetNext, log);
            Ok(FetchOutcome::Started(id))
        }
    }

    /// Runs the next atomic piece of the current task's script.
    pub fn poll_step(&mut self, core: CoreId, log: &mut StepLog) -> Result<(), ModelError> {
        let c = self.worker_mut(core)?;
        if c.preemption.is_some() {
            return Err(ModelError::Disabled("core is preempting"));
        }
        let id = c.current_task.ok_or(ModelError::Disabled("no current task"))?;
        let ci = core.0 as usize;
        let state = self.tcbs[id.index()].state;
        let runnable_here = state == TaskState::Running
            || (state == TaskState::Preempted && self.config.fault_skip_resume_state);
        if !runnable_here {
            return Err(ModelError::Disabled("current task is not running"));
        }

        if self.tcbs[id.index()].point.pending_wait {
            let requeue = self.tcbs[id.index()].need_sched;
            let tcb = &mut self.tcbs[id.index()];
            tcb.point.pending_wait = false;
            tcb.remaining_waits = tcb.remaining_waits.saturating_sub(1);
            if requeue {
                tcb.need_sched = false;
                tcb.state = TaskState::Runnable;
            } else {
                tcb.state = TaskState::Waiting;
            }
            self.cores[ci].current_task = None;
            if requeue {
                self.enqueue(id, log);
            }
            self.emit(id, MonitorEvent::PollPending, log);
            return Ok(());
        }

        let Some(action) = self.tcbs[id.index()].next_action() else {
            log.fail(format!("task {id} ran past the end of its script"));
            return Ok(());
        };
        self.tcbs[id.index()].point.pc += 1;
        match action {
            ScriptAction::Compute => {}
            ScriptAction::RegisterTimerAndPend => {
                self.tcbs[id.index()].point.pending_wait = true;
                self.timers.register(id);
            }
            ScriptAction::SpawnNext => {
                self.spawn_next(log);
            }
            ScriptAction::Finish => {
                self.tcbs[id.index()].state = TaskState::Terminated;
                self.cores[ci].current_task = None;
                self.emit(id, MonitorEvent::PollReady, log);
            }
            ScriptAction::Panic => {
                self.tcbs[id.index()].state = TaskState::Panicked;
                self.cores[ci].current_task = None;
                self.emit(id, MonitorEvent::Panic, log);
            }
        }
        Ok(())
    }

    /// Takes a pending IPI on `core` and decides whether to preempt.
    pub fn handle_ipi(&mut self, core: CoreId, log: &mut StepLog) -> Result<IpiOutcome, ModelError> {
        let c = self.worker_mut(core)?;
        if c.pending_ipi.take().is_none() {
            return Err(ModelError::Disabled("no pending IPI"));
        }
        c.interrupt_flag = false;
        let current = c.current_task;
        let active = c.active_context;
        let Some(task) = current else {
            self.preempt_in_flight = false;
            return Ok(IpiOutcome::Canceled);
        };
        if self.config.fix_preempt_need_sched && !self.tcbs[task.index()].need_sched {
            self.preempt_in_flight = false;
            return Ok(IpiOutcome::Canceled);
        }
        self.cores[core.0 as usize].preemption = Some(PreemptionPhase::SaveContext);
        match active {
            Some(slot) => self.contexts.set_state(slot, CtxState::CtxDoPreemption),
            None => log.fail(format!("core {core} has no active context")),
        }
        Ok(IpiOutcome::Preempting(task))
    }

    /// Advances an in-progress preemption by one atomic sub-step.
    pub fn preemption_step(&mut self, core: CoreId, log: &mut StepLog) -> Result<(), ModelError> {
        let c = self.worker_mut(core)?;
        let phase = c.preemption.ok_or(ModelError::Disabled("no preemption in progress"))?;
        let task = c.current_task.expect("preempting core has a task");
        let active = c.active_context;
        let ci = core.0 as usize;
        let enqueue_first = self.config.fault_enqueue_before_state;
        match phase {
            PreemptionPhase::SaveContext => {
                self.cores[ci].preemption = Some(PreemptionPhase::First);
                let slot = active.expect("checked when the IPI was taken");
                let point = self.tcbs[task.index()].point;
                self.contexts.save(slot, point);
                self.tcbs[task.index()].preempt_context = Some(slot);
            }
            PreemptionPhase::First => {
                self.cores[ci].preemption = Some(PreemptionPhase::Second);
                if enqueue_first {
                    self.enqueue(task, log);
                } else {
                    self.mark_preempted(task, log);
                }
            }
            PreemptionPhase::Second => {
                if enqueue_first {
                    self.mark_preempted(task, log);
                } else {
                    self.enqueue(task, log);
                }
                let tcb = &mut self.tcbs[task.index()];
                tcb.remaining_preemptions = tcb.remaining_preemptions.saturating_sub(1);
                let fresh = self.contexts.activate_pooled();
                if fresh.is_none() {
                    log.fail(format!("context pool exhausted on core {core}"));
                }
                let c = &mut self.cores[ci];
                c.active_context = fresh;
                c.current_task = None;
                c.preemption = None;
                self.preempt_in_flight = false;
            }
        }
        Ok(())
    }

    fn mark_preempted(&mut self, task: TaskId, log: &mut StepLog) {
        self.tcbs[task.index()].state = TaskState::Preempted;
        self.emit(task, MonitorEvent::Preempt, log);
    }

    /// The spawner may run while some task is running (the spawn happens
    /// inside it), or once every spawned task has finished.
    pub fn spawner_enabled(&self) -> bool {
        if self.plan_exhausted() {
            return false;
        }
        let running = self.tcbs.iter().any(|t| t.state == TaskState::Running);
        running || self.tcbs.iter().all(|t| t.state.is_terminal())
    }

    /// Runs a worker's single enabled action.
    pub fn worker_step(&mut self, core: CoreId, log: &mut StepLog) -> Result<(), ModelError> {
        match self.worker_action(core) {
            Some(WorkerAction::Preemption) => self.preemption_step(core, log),
            Some(WorkerAction::HandleIpi) => self.handle_ipi(core, log).map(drop),
            Some(WorkerAction::Poll) => self.poll_step(core, log),
            Some(WorkerAction::Fetch) => self.get_next_task(core, log).map(drop),
            None => Err(ModelError::Disabled("worker has nothing to do")),
        }
    }
}

/// States compare by their canonical encoding.
impl PartialEq for KernelState {
    fn eq(&self, other: &Self) -> bool {
        self.snapshot() == other.snapshot()
    }
}

impl Eq for KernelState {}

fn encode_decision(d: Option<PreemptDecision>, out: &mut Vec<u8>) {
    match d {
        Some(d) => out.extend([1, d.target_core.0, d.observed_task.0]),
        None => out.push(0),
    }
}
