//! Task identities, scripts and control blocks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::context::ContextSlotId;
use super::ConfigError;

/// Index of a task in spawn order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u8);

impl TaskId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskState {
    Runnable,
    Running,
    Waiting,
    Preempted,
    Terminated,
    Panicked,
}

impl TaskState {
    /// Terminated and Panicked never change again.
    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Terminated | TaskState::Panicked)
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            TaskState::Runnable => 0,
            TaskState::Running => 1,
            TaskState::Waiting => 2,
            TaskState::Preempted => 3,
            TaskState::Terminated => 4,
            TaskState::Panicked => 5,
        }
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskState::Runnable => "Runnable",
            TaskState::Running => "Running",
            TaskState::Waiting => "Waiting",
            TaskState::Preempted => "Preempted",
            TaskState::Terminated => "Terminated",
            TaskState::Panicked => "Panicked",
        };
        f.write_str(s)
    }
}

/// Workload class. Light tasks finish quickly and are never chosen for
/// preemption; Heavy tasks wait on timers and may be preempted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    Light,
    Heavy,
}

impl TaskKind {
    pub fn letter(self) -> char {
        match self {
            TaskKind::Light => 'L',
            TaskKind::Heavy => 'H',
        }
    }
}

impl FromStr for TaskKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "H" | "h" | "Heavy" | "heavy" => Ok(TaskKind::Heavy),
            "L" | "l" | "Light" | "light" => Ok(TaskKind::Light),
            other => Err(ConfigError::BadTaskKind(other.to_string())),
        }
    }
}

/// Parses a comma separated plan such as `H,L,L`.
pub fn parse_task_plan(s: &str) -> Result<Vec<TaskKind>, ConfigError> {
    if s.trim().is_empty() {
        return Err(ConfigError::EmptyPlan);
    }
    s.split(',').map(str::parse).collect()
}

pub fn format_task_plan(plan: &[TaskKind]) -> String {
    plan.iter()
        .map(|k| k.letter().to_string())
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScriptAction {
    Compute,
    /// Register a timed event, then return `Pending`. Executed as two
    /// atomic steps: the registration, then the transition to waiting.
    RegisterTimerAndPend,
    SpawnNext,
    Finish,
    Panic,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskScript {
    pub kind: TaskKind,
    pub steps: Vec<ScriptAction>,
}

impl TaskScript {
    /// Default scripts: Heavy alternates Compute with one
    /// RegisterTimerAndPend per allowed wait; Light is two Computes.
    pub fn for_kind(kind: TaskKind, max_waits: u8) -> Self {
        let mut steps = vec![ScriptAction::Compute];
        if kind == TaskKind::Heavy {
            for _ in 0..max_waits {
                steps.push(ScriptAction::RegisterTimerAndPend);
                steps.push(ScriptAction::Compute);
            }
        } else {
            steps.push(ScriptAction::Compute);
        }
        steps.push(ScriptAction::Finish);
        TaskScript { kind, steps }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.steps.last() != Some(&ScriptAction::Finish) {
            return Err(ConfigError::BadScript("last action must be Finish".into()));
        }
        if self.kind == TaskKind::Light && self.steps.contains(&ScriptAction::RegisterTimerAndPend) {
            return Err(ConfigError::BadScript(
                "light tasks cannot wait on timers".into(),
            ));
        }
        if self.steps.len() > u8::MAX as usize {
            return Err(ConfigError::BadScript("script too long".into()));
        }
        Ok(())
    }

    pub fn waits(&self) -> usize {
        self.steps
            .iter()
            .filter(|a| **a == ScriptAction::RegisterTimerAndPend)
            .count()
    }
}

/// Position inside a task script. `pending_wait` is set between the timer
/// registration and the transition to waiting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ProgramPoint {
    pub pc: u8,
    pub pending_wait: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskControlBlock {
    pub id: TaskId,
    pub state: TaskState,
    pub need_sched: bool,
    pub in_queue: bool,
    pub preempt_context: Option<ContextSlotId>,
    pub script: TaskScript,
    pub point: ProgramPoint,
    pub remaining_waits: u8,
    pub remaining_preemptions: u8,
}

impl TaskControlBlock {
    pub fn kind(&self) -> TaskKind {
        self.script.kind
    }

    pub fn next_action(&self) -> Option<ScriptAction> {
        self.script.steps.get(self.point.pc as usize).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scripts() {
        use ScriptAction::*;
        assert_eq!(
            TaskScript::for_kind(TaskKind::Heavy, 1).steps,
            vec![Compute, RegisterTimerAndPend, Compute, Finish]
        );
        assert_eq!(TaskScript::for_kind(TaskKind::Heavy, 0).steps, vec![Compute, Finish]);
        assert_eq!(
            TaskScript::for_kind(TaskKind::Light, 3).steps,
            vec![Compute, Compute, Finish]
        );
        assert_eq!(TaskScript::for_kind(TaskKind::Heavy, 2).waits(), 2);
    }

    #[test]
    fn script_validation() {
        let light = TaskScript {
            kind: TaskKind::Light,
            steps: vec![ScriptAction::RegisterTimerAndPend, ScriptAction::Finish],
        };
        assert!(light.validate().is_err());
        let unterminated = TaskScript {
            kind: TaskKind::Heavy,
            steps: vec![ScriptAction::Compute],
        };
        assert!(unterminated.validate().is_err());
    }

    #[test]
    fn plan_parsing() {
        assert_eq!(
            parse_task_plan("H,L,L").unwrap(),
            vec![TaskKind::Heavy, TaskKind::Light, TaskKind::Light]
        );
        assert!(parse_task_plan("H,X").is_err());
        assert!(parse_task_plan("").is_err());
        assert_eq!(format_task_plan(&parse_task_plan("h, l").unwrap()), "H,L");
    }
}
