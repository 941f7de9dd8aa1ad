//! State and transition invariants of the scheduler model.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{CoreRole, CtxState, KernelState, TaskKind, TaskState};
use crate::monitor::MonitorState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InvariantKind {
    QueueDuplicate,
    QueueCapacity,
    InQueueConsistency,
    PreemptInFlight,
    PreemptContext,
    RunningOwnership,
    ContextSlots,
    LightNeverTargeted,
    MonitorAgreement,
    AbsorbingTerminal,
}

impl InvariantKind {
    /// Invariants that injected faults are expected to break.
    pub fn needs_fault_free(self) -> bool {
        matches!(
            self,
            InvariantKind::PreemptContext
                | InvariantKind::RunningOwnership
                | InvariantKind::ContextSlots
                | InvariantKind::MonitorAgreement
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantFailure {
    pub kind: InvariantKind,
    pub detail: String,
}

impl fmt::Display for InvariantFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.detail)
    }
}

impl KernelState {
    /// Checks every state invariant that applies under the current config.
    pub fn check_invariants(&self) -> Vec<InvariantFailure> {
        let mut out = Vec::new();
        let mut fail = |kind: InvariantKind, detail: String| {
            out.push(InvariantFailure { kind, detail });
        };
        let fault_free = !self.config.any_fault();
        let fully_fixed = self.config.fix_wait_need_sched && self.config.fix_preempt_need_sched;

        let queued: Vec<_> = self.run_queue.iter().collect();
        for (i, id) in queued.iter().enumerate() {
            if queued[..i].contains(id) {
                fail(InvariantKind::QueueDuplicate, format!("task {id} queued twice"));
            }
        }
        if queued.len() > self.config.task_plan.len() {
            fail(
                InvariantKind::QueueCapacity,
                format!("queue length {} exceeds {}", queued.len(), self.config.task_plan.len()),
            );
        }

        for t in &self.tcbs {
            if t.in_queue != queued.contains(&t.id) {
                fail(
                    InvariantKind::InQueueConsistency,
                    format!("task {} in_queue={} but membership differs", t.id, t.in_queue),
                );
            }
        }

        let pending: Vec<_> = self.cores.iter().filter_map(|c| c.pending_ipi).collect();
        let preempting = self.cores.iter().filter(|c| c.preemption.is_some()).count();
        let outstanding = self.decision.is_some() as usize + pending.len() + preempting;
        if outstanding > 1 || self.preempt_in_flight != (outstanding == 1) {
            fail(
                InvariantKind::PreemptInFlight,
                format!(
                    "in_flight={} with {} outstanding decisions/IPIs/preemptions",
                    self.preempt_in_flight, outstanding
                ),
            );
        }
        for d in self.decision.iter().chain(pending.iter()) {
            if self.tcbs[d.observed_task.index()].kind() == TaskKind::Light {
                fail(
                    InvariantKind::LightNeverTargeted,
                    format!("light task {} observed by a preemption decision", d.observed_task),
                );
            }
        }

        if fault_free {
            let mid_preemption = |id| {
                self.cores
                    .iter()
                    .any(|c| c.preemption.is_some() && c.current_task == Some(id))
            };
            for t in &self.tcbs {
                if mid_preemption(t.id) {
                    continue;
                }
                if (t.state == TaskState::Preempted) != t.preempt_context.is_some() {
                    fail(
                        InvariantKind::PreemptContext,
                        format!("task {} is {} with context {:?}", t.id, t.state, t.preempt_context),
                    );
                }
            }

            for t in &self.tcbs {
                let owners = self
                    .cores
                    .iter()
                    .filter(|c| c.current_task == Some(t.id))
                    .count();
                let expected = if t.state == TaskState::Running { 1 } else { owners.min(1) };
                if owners != expected || owners > 1 {
                    fail(
                        InvariantKind::RunningOwnership,
                        format!("task {} ({}) is current on {owners} cores", t.id, t.state),
                    );
                }
            }
            for c in &self.cores {
                if c.role == CoreRole::Primary && c.current_task.is_some() {
                    fail(InvariantKind::RunningOwnership, "primary core runs a task".into());
                }
                if let Some(t) = c.current_task {
                    let state = self.tcbs[t.index()].state;
                    let ok = state == TaskState::Running
                        || (c.preemption.is_some() && state == TaskState::Preempted);
                    if !ok {
                        fail(
                            InvariantKind::RunningOwnership,
                            format!("core {} runs task {t} in state {state}", c.id),
                        );
                    }
                }
            }

            for slot in self.contexts.slots() {
                if slot.saved_pc.is_some() != (slot.ctx_state == CtxState::CtxPreempted) {
                    fail(
                        InvariantKind::ContextSlots,
                        format!("{} is {:?} with saved point {:?}", slot.id, slot.ctx_state, slot.saved_pc),
                    );
                }
            }
            for c in &self.cores {
                if c.role != CoreRole::Worker || c.preemption.is_some() {
                    continue;
                }
                let active = c.active_context.map(|s| self.contexts.slot(s).ctx_state);
                if active != Some(CtxState::CtxActive) {
                    fail(
                        InvariantKind::ContextSlots,
                        format!("core {} active context is {active:?}", c.id),
                    );
                }
            }
            let active_slots = self
                .contexts
                .slots()
                .iter()
                .filter(|s| s.ctx_state == CtxState::CtxActive)
                .count();
            let settled = self
                .cores
                .iter()
                .filter(|c| c.role == CoreRole::Worker && c.preemption.is_none())
                .count();
            if active_slots != settled {
                fail(
                    InvariantKind::ContextSlots,
                    format!("{active_slots} active contexts for {settled} settled workers"),
                );
            }

            if fully_fixed {
                for t in &self.tcbs {
                    let expected = MonitorState::of(t.state, t.need_sched);
                    let actual = self.monitors.get(t.id).map(|m| m.current());
                    if actual != Some(expected) {
                        fail(
                            InvariantKind::MonitorAgreement,
                            format!("task {} is {expected} but its monitor is {actual:?}", t.id),
                        );
                    }
                }
            }
        }
        out
    }

    /// Checks properties relating a state to its successor.
    pub fn check_transition(&self, next: &KernelState) -> Vec<InvariantFailure> {
        let mut out = Vec::new();
        for t in self.tcbs.iter().filter(|t| t.state.is_terminal()) {
            let after = &next.tcbs[t.id.index()];
            let running_somewhere = next.cores.iter().any(|c| c.current_task == Some(t.id));
            if after.state != t.state || after.in_queue || running_somewhere {
                out.push(InvariantFailure {
                    kind: InvariantKind::AbsorbingTerminal,
                    detail: format!("task {} left {} (now {})", t.id, t.state, after.state),
                });
            }
        }
        out
    }
}
