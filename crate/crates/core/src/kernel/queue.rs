//! Scheduling queue and timed-event registry.

use std::collections::{BTreeSet, VecDeque};

use super::task::TaskId;

/// FIFO run queue with a fixed capacity equal to the number of tasks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunQueue {
    fifo: VecDeque<TaskId>,
    capacity: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QueueError {
    #[error("task {0} is already queued")]
    Duplicate(TaskId),
    #[error("run queue is full (capacity {0})")]
    Full(usize),
}

impl RunQueue {
    pub fn with_capacity(capacity: usize) -> Self {
        RunQueue {
            fifo: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push_back(&mut self, id: TaskId) -> Result<(), QueueError> {
        if self.fifo.contains(&id) {
            return Err(QueueError::Duplicate(id));
        }
        if self.fifo.len() >= self.capacity {
            return Err(QueueError::Full(self.capacity));
        }
        self.fifo.push_back(id);
        Ok(())
    }

    pub fn pop_front(&mut self) -> Option<TaskId> {
        self.fifo.pop_front()
    }

    pub fn contains(&self, id: TaskId) -> bool {
        self.fifo.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.fifo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fifo.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.fifo.iter().copied()
    }

    pub(crate) fn encode(&self, out: &mut Vec<u8>) {
        out.push(self.fifo.len() as u8);
        out.extend(self.fifo.iter().map(|t| t.0));
    }
}

/// Tasks with a registered timed event. Each id appears at most once.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TimerRegistry {
    pending: BTreeSet<TaskId>,
}

impl TimerRegistry {
    pub fn register(&mut self, id: TaskId) {
        self.pending.insert(id);
    }

    /// Removes and returns the `nth` registration in ascending id order.
    pub fn take_nth(&mut self, nth: usize) -> Option<TaskId> {
        let id = *self.pending.iter().nth(nth)?;
        self.pending.remove(&id);
        Some(id)
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn contains(&self, id: TaskId) -> bool {
        self.pending.contains(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.pending.iter().copied()
    }

    pub(crate) fn encode(&self, out: &mut Vec<u8>) {
        out.push(self.pending.len() as u8);
        out.extend(self.pending.iter().map(|t| t.0));
    }
}
