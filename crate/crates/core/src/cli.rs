//! Command-line front end.
//!
//! Exit codes: 0 no violation and complete, 1 violations found, 2 usage or
//! configuration error, 3 a bound was hit before the search completed.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use clap::{Parser, ValueEnum};
use thiserror::Error;

use crate::explorer::{explore, random_walk, replay, ExploreError, Limits, ReplayError, Trace};
use crate::kernel::{parse_task_plan, ConfigError, KernelConfig};
use crate::report::{ReplayCheck, ReportDocument, RunMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INCOMPLETE: i32 = 3;

const DEFAULT_WALK_STEPS: u64 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    EnqueueBeforeState,
    SkipResumeState,
    SkipRunningCheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Explore,
    Walk,
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Text,
    Json,
}

#[derive(Debug, Clone, Parser)]
#[command(name = "schedcheck", version, about = "Model checker for a preemptive multicore task scheduler")]
pub struct Args {
    /// Number of worker cores.
    #[arg(long, default_value_t = 2)]
    pub workers: usize,
    /// Comma-separated task plan, H for heavy and L for light tasks.
    #[arg(long, default_value = "H,L,L")]
    pub tasks: String,
    #[arg(long, value_enum, default_value = "on")]
    pub fix_wait: Toggle,
    #[arg(long, value_enum, default_value = "on")]
    pub fix_preempt: Toggle,
    /// Inject a fault; may be repeated.
    #[arg(long = "fault", value_enum)]
    pub faults: Vec<Fault>,
    #[arg(long, default_value_t = 1)]
    pub max_waits: u8,
    #[arg(long, default_value_t = 1)]
    pub max_preemptions: u8,
    #[arg(long, value_enum, default_value = "explore")]
    pub mode: ModeArg,
    /// Seed for walk mode.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Step bound for walk mode.
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub max_states: Option<u64>,
    #[arg(long)]
    pub max_depth: Option<u64>,
    /// Counterexamples kept in the report.
    #[arg(long, default_value_t = 16)]
    pub max_violations: usize,
    /// Trace or report JSON to replay.
    #[arg(long)]
    pub trace_in: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    pub out: OutputFormat,
    /// Print only the summary lines.
    #[arg(long)]
    pub quiet: bool,
    /// File with one task plan per line; each runs in its own process.
    #[arg(long)]
    pub sweep: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Explore(#[from] ExploreError),
    #[error("replay failed: {0}")]
    Replay(#[from] ReplayError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: not a trace or report: {source}")]
    TraceFormat {
        path: String,
        source: serde_json::Error,
    },
}

/// A fully parsed command line.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub config: KernelConfig,
    pub mode: RunMode,
    pub args: Args,
}

/// Outcome of argument parsing that does not yield a run.
#[derive(Debug)]
pub enum ParseOutcome {
    Run(Invocation),
    /// `--help` or `--version`: print and exit 0.
    Info(String),
}

pub fn parse_args<I, T>(argv: I) -> Result<ParseOutcome, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    Ok(ParseOutcome::Info(e.render().to_string()))
                }
                _ => Err(CliError::Usage(e.render().to_string().trim_end().to_string())),
            };
        }
    };
    let config = build_config(&args)?;
    let mode = match args.mode {
        ModeArg::Explore => RunMode::Explore,
        ModeArg::Walk => {
            if args.seed.is_none() {
                return Err(CliError::Usage("--mode walk requires --seed".into()));
            }
            RunMode::Walk
        }
        ModeArg::Replay => {
            if args.trace_in.is_none() {
                return Err(CliError::Usage("--mode replay requires --trace-in".into()));
            }
            RunMode::Replay
        }
    };
    if args.max_states == Some(0) || args.max_depth == Some(0) || args.max_steps == Some(0) {
        return Err(CliError::Usage("limits must be positive".into()));
    }
    Ok(ParseOutcome::Run(Invocation { config, mode, args }))
}

fn build_config(args: &Args) -> Result<KernelConfig, CliError> {
    let mut c = KernelConfig::default()
        .with_plan(&parse_task_plan(&args.tasks)?)
        .with_workers(args.workers)
        .with_bounds(args.max_waits, args.max_preemptions);
    c.fix_wait_need_sched = args.fix_wait == Toggle::On;
    c.fix_preempt_need_sched = args.fix_preempt == Toggle::On;
    for f in &args.faults {
        match f {
            Fault::EnqueueBeforeState => c.fault_enqueue_before_state = true,
            Fault::SkipResumeState => c.fault_skip_resume_state = true,
            Fault::SkipRunningCheck => c.fault_skip_running_check = true,
        }
    }
    c.validate()?;
    Ok(c)
}

/// Executes a parsed invocation (not a sweep) and returns its report.
pub fn run(inv: &Invocation) -> Result<ReportDocument, CliError> {
    let a = &inv.args;
    match inv.mode {
        RunMode::Explore => {
            let limits = Limits {
                max_states: a.max_states,
                max_depth: a.max_depth,
                max_violations: a.max_violations,
            };
            let r = explore(&inv.config, limits)?;
            Ok(ReportDocument::new(RunMode::Explore, inv.config.clone(), None, r))
        }
        RunMode::Walk => {
            let seed = a.seed.expect("checked by parse_args");
            let steps = a.max_steps.unwrap_or(DEFAULT_WALK_STEPS);
            let r = random_walk(&inv.config, seed, steps)?;
            Ok(ReportDocument::new(RunMode::Walk, inv.config.clone(), Some(seed), r))
        }
        RunMode::Replay => {
            let path = a.trace_in.as_deref().expect("checked by parse_args");
            let traces = load_traces(path)?;
            replay_all(&inv.config, traces)
        }
    }
}

fn load_traces(path: &Path) -> Result<Vec<Trace>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if let Ok(doc) = ReportDocument::from_json(&text) {
        return Ok(doc.violations);
    }
    serde_json::from_str::<Trace>(&text)
        .map(|t| vec![t])
        .map_err(|source| CliError::TraceFormat {
            path: path.display().to_string(),
            source,
        })
}

fn replay_all(config: &KernelConfig, traces: Vec<Trace>) -> Result<ReportDocument, CliError> {
    let mut report = crate::explorer::ExplorationReport {
        states_visited: 0,
        transitions_taken: 0,
        max_depth: 0,
        violations: Vec::new(),
        violations_total: 0,
        all_paths_terminal_ok: true,
        terminal_states: 0,
        incomplete: false,
    };
    let mut checks = Vec::new();
    for t in traces {
        let outcome = replay(config, &t.steps)?;
        let reproduced = outcome.verdict();
        report.transitions_taken += t.steps.len() as u64;
        report.max_depth = report.max_depth.max(t.steps.len() as u64);
        checks.push(ReplayCheck {
            expected: Some(t.verdict),
            reproduced,
            matches: reproduced == Some(t.verdict),
        });
        if let Some(f) = outcome.finding {
            report.violations_total += 1;
            report.all_paths_terminal_ok = false;
            report.violations.push(Trace {
                verdict: f.verdict,
                offending: f.offending,
                message: f.message,
                ..t
            });
        }
    }
    let mut doc = ReportDocument::new(RunMode::Replay, config.clone(), None, report);
    doc.replays = checks;
    Ok(doc)
}

fn render(doc: &ReportDocument, args: &Args) -> String {
    match args.out {
        OutputFormat::Json => doc.to_json() + "\n",
        OutputFormat::Text => doc.to_text(args.quiet),
    }
}

/// Parses, runs and prints; returns the process exit code.
pub fn main_with<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let inv = match parse_args(argv.clone()) {
        Ok(ParseOutcome::Run(inv)) => inv,
        Ok(ParseOutcome::Info(text)) => {
            let _ = write!(stdout, "{text}");
            return EXIT_OK;
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return EXIT_USAGE;
        }
    };
    if let Some(path) = inv.args.sweep.clone() {
        return sweep(&path, &argv, &inv.args, stdout, stderr);
    }
    match run(&inv) {
        Ok(doc) => {
            let _ = write!(stdout, "{}", render(&doc, &inv.args));
            doc.exit_code()
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_USAGE
        }
    }
}

/// Runs one child process per plan listed in `path` and combines the exit
/// codes: any usage error wins, then violations, then incompleteness.
fn sweep(
    path: &Path,
    argv: &[OsString],
    args: &Args,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> i32 {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            let _ = writeln!(stderr, "error: {}: {e}", path.display());
            return EXIT_USAGE;
        }
    };
    let plans: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect();
    if let Some(bad) = plans.iter().find(|p| parse_task_plan(p).is_err()) {
        let _ = writeln!(stderr, "error: {}: malformed task plan {bad:?}", path.display());
        return EXIT_USAGE;
    }
    let exe = match std::env::current_exe() {
        Ok(e) => e,
        Err(e) => {
            let _ = writeln!(stderr, "error: cannot locate executable: {e}");
            return EXIT_USAGE;
        }
    };
    let base = strip_flags(&argv[1..], &["--sweep", "--tasks"]);
    let mut children = Vec::new();
    for plan in &plans {
        let child = Command::new(&exe)
            .args(&base)
            .arg("--tasks")
            .arg(plan)
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn();
        match child {
            Ok(c) => children.push((plan, c)),
            Err(e) => {
                let _ = writeln!(stderr, "error: spawning sweep child: {e}");
                return EXIT_USAGE;
            }
        }
    }
    let mut codes = Vec::new();
    let mut json_docs = Vec::new();
    for (plan, child) in children {
        let out = match child.wait_with_output() {
            Ok(o) => o,
            Err(e) => {
                let _ = writeln!(stderr, "error: sweep child for {plan}: {e}");
                codes.push(EXIT_USAGE);
                continue;
            }
        };
        let code = out.status.code().unwrap_or(EXIT_USAGE);
        codes.push(code);
        let body = String::from_utf8_lossy(&out.stdout);
        let _ = stderr.write_all(&out.stderr);
        match args.out {
            OutputFormat::Text => {
                let _ = writeln!(stdout, "== plan {plan} (exit {code}) ==");
                let _ = write!(stdout, "{body}");
            }
            OutputFormat::Json => {
                let report = serde_json::from_str::<serde_json::Value>(&body)
                    .unwrap_or(serde_json::Value::Null);
                json_docs.push(serde_json::json!({
                    "plan": plan,
                    "exit_code": code,
                    "report": report,
                }));
            }
        }
    }
    if args.out == OutputFormat::Json {
        let doc = serde_json::json!({ "schema": crate::report::SCHEMA_VERSION, "sweep": json_docs });
        let _ = writeln!(stdout, "{}", serde_json::to_string_pretty(&doc).expect("json"));
    }
    combine_exit_codes(&codes)
}

fn combine_exit_codes(codes: &[i32]) -> i32 {
    [EXIT_USAGE, EXIT_VIOLATION, EXIT_INCOMPLETE]
        .into_iter()
        .find(|c| codes.contains(c))
        .unwrap_or(EXIT_OK)
}

/// Removes `flags` and their values, in both `--flag v` and `--flag=v` form.
fn strip_flags(argv: &[OsString], flags: &[&str]) -> Vec<OsString> {
    let mut out = Vec::new();
    let mut skip_next = false;
    for a in argv {
        if skip_next {
            skip_next = false;
            continue;
        }
        let s = a.to_string_lossy();
        if flags.contains(&s.as_ref()) {
            skip_next = true;
        } else if !flags.iter().any(|f| s.starts_with(&format!("{f}="))) {
            out.push(a.clone());
        }
    }
    out
}
