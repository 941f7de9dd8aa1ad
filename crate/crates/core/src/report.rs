//! Report documents: the JSON schema and the human-readable text form.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::explorer::{ExplorationReport, Trace, Verdict};
use crate::kernel::{format_task_plan, KernelConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Explore,
    Walk,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub states_visited: u64,
    pub transitions_taken: u64,
    pub max_depth: u64,
    pub violations_total: u64,
    pub terminal_states: u64,
}

/// Result of replaying one input trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayCheck {
    pub expected: Option<Verdict>,
    pub reproduced: Option<Verdict>,
    pub matches: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub schema: u32,
    pub tool_version: String,
    pub mode: RunMode,
    pub config: KernelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub counters: Counters,
    pub incomplete: bool,
    pub all_paths_terminal_ok: bool,
    pub violations: Vec<Trace>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub replays: Vec<ReplayCheck>,
}

impl ReportDocument {
    pub fn new(mode: RunMode, config: KernelConfig, seed: Option<u64>, r: ExplorationReport) -> Self {
        ReportDocument {
            schema: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            mode,
            config,
            seed,
            counters: Counters {
                states_visited: r.states_visited,
                transitions_taken: r.transitions_taken,
                max_depth: r.max_depth,
                violations_total: r.violations_total,
                terminal_states: r.terminal_states,
            },
            incomplete: r.incomplete,
            all_paths_terminal_ok: r.all_paths_terminal_ok,
            violations: r.violations,
            replays: Vec::new(),
        }
    }

    /// 0 clean, 1 violations, 3 cut short by a bound. Usage errors (2) never
    /// produce a report.
    pub fn exit_code(&self) -> i32 {
        if self.counters.violations_total > 0 {
            1
        } else if self.incomplete {
            3
        } else {
            0
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    pub fn to_text(&self, quiet: bool) -> String {
        let mut out = String::new();
        let c = &self.config;
        let on = |b: bool| if b { "on" } else { "off" };
        let mut faults = Vec::new();
        if c.fault_enqueue_before_state {
            faults.push("enqueue-before-state");
        }
        if c.fault_skip_resume_state {
            faults.push("skip-resume-state");
        }
        if c.fault_skip_running_check {
            faults.push("skip-running-check");
        }
        let _ = writeln!(out, "schedcheck {} mode={:?}", self.tool_version, self.mode);
        let _ = writeln!(
            out,
            "config: workers={} tasks={} fix-wait={} fix-preempt={} faults={} max-waits={} max-preemptions={}",
            c.worker_count,
            format_task_plan(&c.task_plan),
            on(c.fix_wait_need_sched),
            on(c.fix_preempt_need_sched),
            if faults.is_empty() { "none".to_string() } else { faults.join(",") },
            c.max_waits_per_task,
            c.max_preemptions_per_task,
        );
        if let Some(seed) = self.seed {
            let _ = writeln!(out, "seed: {seed}");
        }
        let n = &self.counters;
        let _ = writeln!(
            out,
            "states_visited={} transitions_taken={} max_depth={} terminal_states={} violations={} incomplete={} all_paths_terminal_ok={}",
            n.states_visited,
            n.transitions_taken,
            n.max_depth,
            n.terminal_states,
            n.violations_total,
            self.incomplete,
            self.all_paths_terminal_ok,
        );
        for r in &self.replays {
            let _ = writeln!(
                out,
                "replay: expected={} reproduced={} matches={}",
                verdict_text(r.expected),
                verdict_text(r.reproduced),
                r.matches
            );
        }
        if quiet {
            return out;
        }
        for (i, t) in self.violations.iter().enumerate() {
            let _ = writeln!(out);
            let _ = write!(out, "violation {}/{}: {}", i + 1, self.violations.len(), t.verdict);
            if let Some(o) = t.offending {
                let _ = write!(out, " (task={} {} -- {})", o.task, o.state, o.event);
            }
            let _ = writeln!(out);
            out.push_str(&trace_text(t));
        }
        out
    }
}

fn verdict_text(v: Option<Verdict>) -> String {
    v.map_or_else(|| "none".to_string(), |v| v.to_string())
}

/// One line per monitor transition, prefixed by the step that caused it.
/// Steps without monitor events get a bare attribution line.
pub fn trace_text(t: &Trace) -> String {
    let mut out = String::new();
    for (i, step) in t.steps.iter().enumerate() {
        let lines = t.annotations.get(i).map(Vec::as_slice).unwrap_or(&[]);
        if lines.is_empty() {
            let _ = writeln!(out, "#{} {}", i + 1, step);
        }
        for line in lines {
            let _ = writeln!(out, "#{} {} | {}", i + 1, step, line);
        }
    }
    for line in t.message.lines() {
        let _ = writeln!(out, "{line}");
    }
    let tasks: Vec<String> = t
        .final_tasks
        .iter()
        .map(|s| format!("{}:{}:{}", s.id, s.kind.letter(), s.state))
        .collect();
    let _ = writeln!(out, "final: {}", tasks.join(" "));
    out
}
