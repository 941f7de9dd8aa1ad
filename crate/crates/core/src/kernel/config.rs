use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::task::{TaskKind, TaskScript};

pub const MAX_WORKERS: usize = 8;
pub const MAX_TASKS: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("task plan is empty")]
    EmptyPlan,
    #[error("task plan has {0} entries, at most {MAX_TASKS} are supported")]
    PlanTooLong(usize),
    #[error("unknown task kind {0:?} (expected H or L)")]
    BadTaskKind(String),
    #[error("worker count must be between 1 and {MAX_WORKERS}, got {0}")]
    BadWorkerCount(usize),
    #[error("invalid script: {0}")]
    BadScript(String),
    #[error("script override for task {0} is outside the plan")]
    OverrideOutOfRange(usize),
    #[error("script override for task {0} has kind {1:?} but the plan says {2:?}")]
    OverrideKindMismatch(usize, TaskKind, TaskKind),
}

/// Scheduler model parameters: workload, fixes and injected faults, and the
/// bounds that keep the state space finite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub worker_count: usize,
    pub task_plan: Vec<TaskKind>,
    /// `wake()` on a running task sets `need_sched` instead of being dropped.
    pub fix_wait_need_sched: bool,
    /// The preemption decision sets `need_sched` and the IPI handler cancels
    /// preemption when the flag is clear.
    pub fix_preempt_need_sched: bool,
    pub fault_enqueue_before_state: bool,
    pub fault_skip_resume_state: bool,
    pub fault_skip_running_check: bool,
    pub max_waits_per_task: u8,
    pub max_preemptions_per_task: u8,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub script_overrides: BTreeMap<usize, TaskScript>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            worker_count: 2,
            task_plan: vec![TaskKind::Heavy, TaskKind::Light, TaskKind::Light],
            fix_wait_need_sched: true,
            fix_preempt_need_sched: true,
            fault_enqueue_before_state: false,
            fault_skip_resume_state: false,
            fault_skip_running_check: false,
            max_waits_per_task: 1,
            max_preemptions_per_task: 1,
            script_overrides: BTreeMap::new(),
        }
    }
}

impl KernelConfig {
    pub fn with_plan(mut self, plan: &[TaskKind]) -> Self {
        self.task_plan = plan.to_vec();
        self
    }

    pub fn with_workers(mut self, n: usize) -> Self {
        self.worker_count = n;
        self
    }

    pub fn with_bounds(mut self, waits: u8, preemptions: u8) -> Self {
        self.max_waits_per_task = waits;
        self.max_preemptions_per_task = preemptions;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.task_plan.is_empty() {
            return Err(ConfigError::EmptyPlan);
        }
        if self.task_plan.len() > MAX_TASKS {
            return Err(ConfigError::PlanTooLong(self.task_plan.len()));
        }
        if self.worker_count == 0 || self.worker_count > MAX_WORKERS {
            return Err(ConfigError::BadWorkerCount(self.worker_count));
        }
        for (&idx, script) in &self.script_overrides {
            let planned = *self
                .task_plan
                .get(idx)
                .ok_or(ConfigError::OverrideOutOfRange(idx))?;
            if planned != script.kind {
                return Err(ConfigError::OverrideKindMismatch(idx, script.kind, planned));
            }
            script.validate()?;
        }
        Ok(())
    }

    pub fn any_fault(&self) -> bool {
        self.fault_enqueue_before_state
            || self.fault_skip_resume_state
            || self.fault_skip_running_check
    }

    pub fn script_for(&self, index: usize) -> TaskScript {
        self.script_overrides
            .get(&index)
            .cloned()
            .unwrap_or_else(|| TaskScript::for_kind(self.task_plan[index], self.max_waits_per_task))
    }

    /// Enough slots for every worker's active context plus one saved
    /// context per preemptible task, and never fewer than one active slot per
    /// worker plus one per allowed preemption.
    pub fn context_slots(&self) -> usize {
        let per_worker = self.worker_count * (1 + self.max_preemptions_per_task as usize);
        let preemptible = if self.max_preemptions_per_task == 0 {
            0
        } else {
            self.task_plan.iter().filter(|k| **k == TaskKind::Heavy).count()
        };
        per_worker.max(self.worker_count + preemptible)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::ScriptAction;

    #[test]
    fn defaults() {
        let c = KernelConfig::default();
        assert_eq!(c.worker_count, 2);
        assert_eq!(c.task_plan, vec![TaskKind::Heavy, TaskKind::Light, TaskKind::Light]);
        assert!(c.fix_wait_need_sched && c.fix_preempt_need_sched);
        assert!(!c.any_fault());
        assert_eq!(c.context_slots(), 4);
        let many = c.clone().with_plan(&[TaskKind::Heavy; 4]).with_workers(1);
        assert_eq!(many.context_slots(), 5);
        assert_eq!(many.with_bounds(1, 0).context_slots(), 1);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        assert_eq!(
            KernelConfig::default().with_plan(&[]).validate(),
            Err(ConfigError::EmptyPlan)
        );
        assert_eq!(
            KernelConfig::default().with_workers(0).validate(),
            Err(ConfigError::BadWorkerCount(0))
        );
        let mut c = KernelConfig::default();
        c.script_overrides.insert(
            5,
            TaskScript { kind: TaskKind::Heavy, steps: vec![ScriptAction::Finish] },
        );
        assert_eq!(c.validate(), Err(ConfigError::OverrideOutOfRange(5)));
    }
}
