//! Explicit-state model checker for a preemptive multicore task scheduler.
//!
//! [`kernel`] holds the executable scheduler model, [`monitor`] the per-task
//! state machine that checks it at run time, and [`explorer`] the search
//! engines. [`report`] and [`cli`] turn results into text and JSON.

pub mod kernel;
pub mod monitor;
pub mod explorer;
pub mod report;
pub mod cli;
