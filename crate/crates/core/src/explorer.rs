//! Interleaving search over the scheduler model.
//!
//! Every atomic step belongs to a [`VirtualProcess`]: the primary core's timer
//! handler, its preemption logic, the task spawner, or one worker core. The
//! explorer picks which process moves next. [`explore`] enumerates all
//! interleavings depth-first with a visited set, [`random_walk`] samples a
//! single schedule from a seeded generator, and [`replay`] re-executes a
//! recorded schedule.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{
    ConfigError, CoreId, KernelConfig, KernelState, ModelError, Snapshot, StepLog, TaskId,
    TaskKind, TaskState,
};
use crate::monitor::{format_transition, MonitorEvent, MonitorState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum VirtualProcess {
    PrimaryTimer,
    PrimaryPreempter,
    Spawner,
    Worker(CoreId),
}

impl fmt::Display for VirtualProcess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VirtualProcess::PrimaryTimer => f.write_str("PrimaryTimer"),
            VirtualProcess::PrimaryPreempter => f.write_str("PrimaryPreempter"),
            VirtualProcess::Spawner => f.write_str("Spawner"),
            VirtualProcess::Worker(c) => write!(f, "Worker({c})"),
        }
    }
}

impl FromStr for VirtualProcess {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "PrimaryTimer" => Ok(VirtualProcess::PrimaryTimer),
            "PrimaryPreempter" => Ok(VirtualProcess::PrimaryPreempter),
            "Spawner" => Ok(VirtualProcess::Spawner),
            _ => s
                .strip_prefix("Worker(")
                .and_then(|r| r.strip_suffix(')'))
                .and_then(|n| n.parse().ok())
                .map(|n| VirtualProcess::Worker(CoreId(n)))
                .ok_or_else(|| format!("unknown process {s:?}")),
        }
    }
}

impl From<VirtualProcess> for String {
    fn from(p: VirtualProcess) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for VirtualProcess {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScheduleStep {
    pub process: VirtualProcess,
    pub variant: usize,
}

impl ScheduleStep {
    pub fn new(process: VirtualProcess, variant: usize) -> Self {
        ScheduleStep { process, variant }
    }
}

impl fmt::Display for ScheduleStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.variant == 0 {
            write!(f, "{}", self.process)
        } else {
            write!(f, "{}/{}", self.process, self.variant)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StepError {
    #[error("step {0} is not enabled")]
    NotEnabled(ScheduleStep),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// All steps that can run in `state`, in a fixed order: timer, preempter,
/// spawner, then workers by ascending core id.
pub fn enabled(state: &KernelState) -> Vec<ScheduleStep> {
    let mut out = Vec::new();
    for v in 0..state.timers().len() {
        out.push(ScheduleStep::new(VirtualProcess::PrimaryTimer, v));
    }
    match state.decision() {
        Some(d) => {
            let free = state.core(d.target_core).is_some_and(|c| c.pending_ipi.is_none());
            if free {
                out.push(ScheduleStep::new(VirtualProcess::PrimaryPreempter, 0));
            }
        }
        None => {
            for v in 0..state.preempt_candidates().len() {
                out.push(ScheduleStep::new(VirtualProcess::PrimaryPreempter, v));
            }
        }
    }
    if state.spawner_enabled() {
        out.push(ScheduleStep::new(VirtualProcess::Spawner, 0));
    }
    for core in state.worker_ids() {
        if state.worker_action(core).is_some() {
            out.push(ScheduleStep::new(VirtualProcess::Worker(core), 0));
        }
    }
    out
}

/// Applies `choice` to a copy of `state`.
pub fn step(state: &KernelState, choice: ScheduleStep) -> Result<(KernelState, StepLog), StepError> {
    if !enabled(state).contains(&choice) {
        return Err(StepError::NotEnabled(choice));
    }
    let mut next = state.clone();
    let mut log = StepLog::default();
    match choice.process {
        VirtualProcess::PrimaryTimer => {
            next.timer_fire(choice.variant, &mut log)?;
        }
        VirtualProcess::PrimaryPreempter => {
            if next.decision().is_some() {
                next.send_ipi()?;
            } else {
                next.preempt_decide(choice.variant, &mut log)?;
            }
        }
        VirtualProcess::Spawner => {
            next.spawn_next(&mut log);
        }
        VirtualProcess::Worker(core) => next.worker_step(core, &mut log)?,
    }
    Ok((next, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    MonitorViolation,
    Deadlock,
    AssertionFailure,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// The monitor state and event that had no transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OffendingPair {
    pub task: TaskId,
    pub state: MonitorState,
    pub event: MonitorEvent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub id: TaskId,
    pub kind: TaskKind,
    pub state: TaskState,
    pub need_sched: bool,
    pub in_queue: bool,
}

fn summarize(state: &KernelState) -> Vec<TaskSummary> {
    state
        .tasks()
        .iter()
        .map(|t| TaskSummary {
            id: t.id,
            kind: t.kind(),
            state: t.state,
            need_sched: t.need_sched,
            in_queue: t.in_queue,
        })
        .collect()
}

/// What went wrong at the end of a trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub verdict: Verdict,
    pub offending: Option<OffendingPair>,
    pub message: String,
}

/// Judges a single step. Monitor violations take precedence over assertion
/// failures raised in the same step.
fn judge_step(prev: &KernelState, next: &KernelState, log: &StepLog) -> Option<Finding> {
    if let Some(v) = &log.violation {
        return Some(Finding {
            verdict: Verdict::MonitorViolation,
            offending: Some(OffendingPair {
                task: v.task,
                state: v.error.current,
                event: v.error.symbol,
            }),
            message: format!("task={}\n{}", v.task, v.error),
        });
    }
    if let Some(msg) = &log.assertion {
        return Some(assertion(msg.clone()));
    }
    let mut failures = prev.check_transition(next);
    failures.extend(next.check_invariants());
    failures.first().map(|f| assertion(f.to_string()))
}

fn assertion(message: String) -> Finding {
    Finding {
        verdict: Verdict::AssertionFailure,
        offending: None,
        message,
    }
}

/// Judges a state where no process can move.
fn judge_quiescent(state: &KernelState) -> Option<Finding> {
    if state.all_terminal() {
        return None;
    }
    let stuck: Vec<String> = state
        .tasks()
        .iter()
        .filter(|t| !t.state.is_terminal())
        .map(|t| format!("task {} {}", t.id, t.state))
        .collect();
    Some(Finding {
        verdict: Verdict::Deadlock,
        offending: None,
        message: format!("no process can move; not terminated: {}", stuck.join(", ")),
    })
}

/// A schedule from the initial state together with what it produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub steps: Vec<ScheduleStep>,
    /// Monitor lines per step, aligned with `steps`.
    pub annotations: Vec<Vec<String>>,
    pub verdict: Verdict,
    pub offending: Option<OffendingPair>,
    pub message: String,
    pub final_tasks: Vec<TaskSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplorationReport {
    pub states_visited: u64,
    pub transitions_taken: u64,
    pub max_depth: u64,
    /// Stored counterexamples, at most the configured cap.
    pub violations: Vec<Trace>,
    /// All violations found, stored or not.
    pub violations_total: u64,
    pub all_paths_terminal_ok: bool,
    /// Quiescent states where every task had terminated.
    pub terminal_states: u64,
    /// A state or depth limit cut the search short.
    pub incomplete: bool,
}

impl ExplorationReport {
    fn empty() -> Self {
        ExplorationReport {
            states_visited: 0,
            transitions_taken: 0,
            max_depth: 0,
            violations: Vec::new(),
            violations_total: 0,
            all_paths_terminal_ok: false,
            terminal_states: 0,
            incomplete: false,
        }
    }

    fn finish(&mut self) {
        self.all_paths_terminal_ok = self.violations_total == 0 && !self.incomplete;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub max_states: Option<u64>,
    pub max_depth: Option<u64>,
    pub max_violations: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_states: None,
            max_depth: None,
            max_violations: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExploreError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("limits must be positive")]
    BadLimits,
    #[error("max_steps must be positive")]
    BadSteps,
    #[error("the initial state already violates: {0}")]
    BadInitialState(String),
}

/// Callbacks for [`explore_with`].
pub enum ExploreEvent<'a> {
    /// A state seen for the first time, including the initial state.
    NewState(&'a KernelState),
    /// Any step taken, whether or not it led to a new state.
    Transition {
        from: &'a KernelState,
        step: ScheduleStep,
        to: &'a KernelState,
    },
}

fn initial_state(config: &KernelConfig) -> Result<KernelState, ExploreError> {
    let (state, log) = KernelState::initial(config.clone())?;
    if log.is_violating() {
        let msg = log
            .assertion
            .or_else(|| log.violation.map(|v| v.error.to_string()))
            .unwrap_or_default();
        return Err(ExploreError::BadInitialState(msg));
    }
    Ok(state)
}

/// Exhaustive depth-first search.
pub fn explore(config: &KernelConfig, limits: Limits) -> Result<ExplorationReport, ExploreError> {
    explore_with(config, limits, |_| {})
}

pub fn explore_with<F>(
    config: &KernelConfig,
    limits: Limits,
    mut observe: F,
) -> Result<ExplorationReport, ExploreError>
where
    F: FnMut(ExploreEvent<'_>),
{
    if limits.max_states == Some(0) || limits.max_depth == Some(0) {
        return Err(ExploreError::BadLimits);
    }
    let root = initial_state(config)?;
    let mut report = ExplorationReport::empty();
    let mut visited: HashSet<Snapshot> = HashSet::new();
    visited.insert(root.snapshot());
    report.states_visited = 1;
    observe(ExploreEvent::NewState(&root));

    struct Frame {
        state: KernelState,
        choices: Vec<ScheduleStep>,
        next: usize,
    }
    let mut path: Vec<ScheduleStep> = Vec::new();
    let mut stack: Vec<Frame> = Vec::new();
    let record = |report: &mut ExplorationReport, path: &[ScheduleStep], finding: Finding, last: &KernelState| {
        report.violations_total += 1;
        if report.violations.len() < limits.max_violations {
            report.violations.push(build_trace(config, path, finding, last));
        }
    };

    let choices = enabled(&root);
    if choices.is_empty() {
        if let Some(f) = judge_quiescent(&root) {
            record(&mut report, &path, f, &root);
        } else {
            report.terminal_states += 1;
        }
    }
    stack.push(Frame { state: root, choices, next: 0 });

    'search: while let Some(frame) = stack.last_mut() {
        if frame.next >= frame.choices.len() {
            stack.pop();
            path.pop();
            continue;
        }
        let choice = frame.choices[frame.next];
        frame.next += 1;
        let (succ, log) = step(&frame.state, choice).expect("enumerated steps are enabled");
        report.transitions_taken += 1;
        observe(ExploreEvent::Transition {
            from: &frame.state,
            step: choice,
            to: &succ,
        });
        let finding = judge_step(&frame.state, &succ, &log);
        if !visited.insert(succ.snapshot()) {
            continue;
        }
        report.states_visited += 1;
        observe(ExploreEvent::NewState(&succ));

        let depth = stack.len() as u64;
        report.max_depth = report.max_depth.max(depth);
        path.push(choice);
        if let Some(f) = finding {
            record(&mut report, &path, f, &succ);
            path.pop();
        } else {
            let choices = enabled(&succ);
            if choices.is_empty() {
                match judge_quiescent(&succ) {
                    Some(f) => record(&mut report, &path, f, &succ),
                    None => report.terminal_states += 1,
                }
                path.pop();
            } else if limits.max_depth.is_some_and(|d| depth >= d) {
                report.incomplete = true;
                path.pop();
            } else {
                stack.push(Frame { state: succ, choices, next: 0 });
            }
        }
        if limits.max_states.is_some_and(|m| report.states_visited >= m) {
            let unexplored = stack.iter().any(|f| f.next < f.choices.len());
            if unexplored {
                report.incomplete = true;
                break 'search;
            }
        }
    }
    report.finish();
    Ok(report)
}

/// Rebuilds the per-step monitor lines for a schedule.
fn build_trace(
    config: &KernelConfig,
    steps: &[ScheduleStep],
    finding: Finding,
    last: &KernelState,
) -> Trace {
    let mut annotations = Vec::with_capacity(steps.len());
    if let Ok(mut state) = initial_state(config) {
        for &s in steps {
            match step(&state, s) {
                Ok((next, log)) => {
                    annotations.push(annotate(&log));
                    state = next;
                }
                Err(_) => break,
            }
        }
    }
    Trace {
        steps: steps.to_vec(),
        annotations,
        verdict: finding.verdict,
        offending: finding.offending,
        message: finding.message,
        final_tasks: summarize(last),
    }
}

fn annotate(log: &StepLog) -> Vec<String> {
    let mut lines: Vec<String> = log
        .transitions
        .iter()
        .map(|(task, t)| format_transition(*task, t.from, t.event, t.to))
        .collect();
    if let Some(v) = &log.violation {
        lines.push(format!(
            "task={} {} -- {} --> (none)",
            v.task, v.error.current, v.error.symbol
        ));
    }
    lines
}

/// Follows one pseudo-random schedule.
pub fn random_walk(
    config: &KernelConfig,
    seed: u64,
    max_steps: u64,
) -> Result<ExplorationReport, ExploreError> {
    if max_steps == 0 {
        return Err(ExploreError::BadSteps);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = initial_state(config)?;
    let mut report = ExplorationReport::empty();
    let mut seen: HashSet<Snapshot> = HashSet::new();
    seen.insert(state.snapshot());
    let mut path = Vec::new();
    let mut annotations = Vec::new();
    let finding = loop {
        let choices = enabled(&state);
        if choices.is_empty() {
            match judge_quiescent(&state) {
                Some(f) => break Some(f),
                None => {
                    report.terminal_states += 1;
                    break None;
                }
            }
        }
        if path.len() as u64 >= max_steps {
            report.incomplete = true;
            break None;
        }
        let choice = choices[rng.gen_range(0..choices.len())];
        let (next, log) = step(&state, choice).expect("enumerated steps are enabled");
        report.transitions_taken += 1;
        path.push(choice);
        annotations.push(annotate(&log));
        let finding = judge_step(&state, &next, &log);
        state = next;
        seen.insert(state.snapshot());
        if finding.is_some() {
            break finding;
        }
    };
    report.states_visited = seen.len() as u64;
    report.max_depth = path.len() as u64;
    if let Some(f) = finding {
        report.violations_total = 1;
        report.violations.push(Trace {
            steps: path,
            annotations,
            verdict: f.verdict,
            offending: f.offending,
            message: f.message,
            final_tasks: summarize(&state),
        });
    }
    report.finish();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Config(#[from] ExploreError),
    #[error("step #{index} ({step}) is not enabled")]
    Diverged { index: usize, step: ScheduleStep },
    #[error("trace continues after the verdict reached at step #{index}")]
    PastVerdict { index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayOutcome {
    /// `None` means the schedule ran without a violation.
    pub finding: Option<Finding>,
    pub final_state: KernelState,
}

impl ReplayOutcome {
    pub fn verdict(&self) -> Option<Verdict> {
        self.finding.as_ref().map(|f| f.verdict)
    }
}

/// Re-executes a schedule from the initial state.
pub fn replay(config: &KernelConfig, steps: &[ScheduleStep]) -> Result<ReplayOutcome, ReplayError> {
    let mut state = initial_state(config)?;
    for (index, &s) in steps.iter().enumerate() {
        let (next, log) = step(&state, s).map_err(|_| ReplayError::Diverged { index, step: s })?;
        let finding = judge_step(&state, &next, &log);
        state = next;
        if finding.is_some() {
            if index + 1 != steps.len() {
                return Err(ReplayError::PastVerdict { index });
            }
            return Ok(ReplayOutcome { finding, final_state: state });
        }
    }
    let finding = if enabled(&state).is_empty() {
        judge_quiescent(&state)
    } else {
        None
    };
    Ok(ReplayOutcome { finding, final_state: state })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worker(n: u8) -> VirtualProcess {
        VirtualProcess::Worker(CoreId(n))
    }

    #[test]
    fn process_names_round_trip() {
        for p in [
            VirtualProcess::PrimaryTimer,
            VirtualProcess::PrimaryPreempter,
            VirtualProcess::Spawner,
            worker(3),
        ] {
            assert_eq!(p.to_string().parse::<VirtualProcess>(), Ok(p));
        }
        assert!("Worker(x)".parse::<VirtualProcess>().is_err());
    }

    #[test]
    fn initial_single_heavy_has_only_worker_steps() {
        let cfg = KernelConfig::default().with_plan(&[TaskKind::Heavy]).with_workers(1);
        let s = initial_state(&cfg).unwrap();
        assert_eq!(enabled(&s), vec![ScheduleStep::new(worker(1), 0)]);
    }

    #[test]
    fn disabled_choice_is_rejected() {
        let cfg = KernelConfig::default().with_plan(&[TaskKind::Heavy]).with_workers(1);
        let s = initial_state(&cfg).unwrap();
        let bad = ScheduleStep::new(VirtualProcess::PrimaryTimer, 0);
        assert_eq!(step(&s, bad).unwrap_err(), StepError::NotEnabled(bad));
    }

    #[test]
    fn fetch_makes_task_running() {
        let cfg = KernelConfig::default().with_plan(&[TaskKind::Heavy]).with_workers(1);
        let s = initial_state(&cfg).unwrap();
        let (a, _) = step(&s, ScheduleStep::new(worker(1), 0)).unwrap();
        let (b, _) = step(&s, ScheduleStep::new(worker(1), 0)).unwrap();
        assert_eq!(a.snapshot(), b.snapshot());
        assert_eq!(a.tasks()[0].state, TaskState::Running);
    }

    #[test]
    fn timer_and_ipi_both_enabled() {
        // H waits once and may be preempted once: run until a timer is
        // pending while an IPI sits at the worker.
        let cfg = KernelConfig::default().with_plan(&[TaskKind::Heavy]).with_workers(1);
        let s = initial_state(&cfg).unwrap();
        let w = ScheduleStep::new(worker(1), 0);
        let pre = ScheduleStep::new(VirtualProcess::PrimaryPreempter, 0);
        let mut s = s;
        for c in [w, w, w, pre, pre] {
            s = step(&s, c).unwrap().0;
        }
        // Fetch, Compute, register timer, decide, send. The IPI waits until
        // the task has reached the waiting check.
        assert_eq!(s.timers().len(), 1);
        assert!(s.cores()[1].pending_ipi.is_some());
        let en = enabled(&s);
        assert!(en.contains(&ScheduleStep::new(VirtualProcess::PrimaryTimer, 0)));
        assert!(en.contains(&w));
    }

    #[test]
    fn empty_replay_has_no_verdict() {
        let cfg = KernelConfig::default();
        let out = replay(&cfg, &[]).unwrap();
        assert_eq!(out.verdict(), None);
    }

    #[test]
    fn replay_reports_first_divergent_step() {
        let cfg = KernelConfig::default().with_plan(&[TaskKind::Heavy]).with_workers(1);
        let steps = [
            ScheduleStep::new(worker(1), 0),
            ScheduleStep::new(VirtualProcess::Spawner, 0),
        ];
        assert_eq!(
            replay(&cfg, &steps).unwrap_err(),
            ReplayError::Diverged { index: 1, step: steps[1] }
        );
    }

    #[test]
    fn explore_rejects_zero_limits() {
        let limits = Limits { max_states: Some(0), ..Limits::default() };
        assert_eq!(
            explore(&KernelConfig::default(), limits).unwrap_err(),
            ExploreError::BadLimits
        );
    }

    #[test]
    fn state_bound_flags_incomplete() {
        let limits = Limits { max_states: Some(10), ..Limits::default() };
        let r = explore(&KernelConfig::default(), limits).unwrap();
        assert!(r.incomplete);
        assert!(!r.all_paths_terminal_ok);
        assert_eq!(r.states_visited, 10);
    }
}
