//! Abstract thread contexts used to save and restore preempted tasks.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::task::ProgramPoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContextSlotId(pub u8);

impl fmt::Display for ContextSlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ctx{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CtxState {
    CtxNotInitialized,
    CtxActive,
    CtxDoPreemption,
    CtxPreempted,
    CtxInThreadPool,
}

impl CtxState {
    pub(crate) fn code(self) -> u8 {
        match self {
            CtxState::CtxNotInitialized => 0,
            CtxState::CtxActive => 1,
            CtxState::CtxDoPreemption => 2,
            CtxState::CtxPreempted => 3,
            CtxState::CtxInThreadPool => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextSlot {
    pub id: ContextSlotId,
    pub ctx_state: CtxState,
    /// Present iff `ctx_state` is `CtxPreempted`.
    pub saved_pc: Option<ProgramPoint>,
}

/// All context slots plus the pool of idle ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextTable {
    slots: Vec<ContextSlot>,
    pool: BTreeSet<ContextSlotId>,
}

impl ContextTable {
    /// `active` slots start `CtxActive` (one per worker); the rest are
    /// uninitialised and pooled.
    pub fn new(active: usize, total: usize) -> Self {
        let slots = (0..total)
            .map(|i| ContextSlot {
                id: ContextSlotId(i as u8),
                ctx_state: if i < active {
                    CtxState::CtxActive
                } else {
                    CtxState::CtxNotInitialized
                },
                saved_pc: None,
            })
            .collect();
        let pool = (active..total).map(|i| ContextSlotId(i as u8)).collect();
        ContextTable { slots, pool }
    }

    pub fn slot(&self, id: ContextSlotId) -> &ContextSlot {
        &self.slots[id.0 as usize]
    }

    pub fn slots(&self) -> &[ContextSlot] {
        &self.slots
    }

    pub fn pool(&self) -> &BTreeSet<ContextSlotId> {
        &self.pool
    }

    pub(crate) fn set_state(&mut self, id: ContextSlotId, state: CtxState) {
        self.slots[id.0 as usize].ctx_state = state;
    }

    pub(crate) fn save(&mut self, id: ContextSlotId, point: ProgramPoint) {
        let slot = &mut self.slots[id.0 as usize];
        slot.ctx_state = CtxState::CtxPreempted;
        slot.saved_pc = Some(point);
    }

    /// Reactivates a saved slot and returns the program point it held.
    pub(crate) fn restore(&mut self, id: ContextSlotId) -> Option<ProgramPoint> {
        let slot = &mut self.slots[id.0 as usize];
        slot.ctx_state = CtxState::CtxActive;
        slot.saved_pc.take()
    }

    /// `yield_and_pool`: returns a previously active slot to the pool.
    pub(crate) fn release(&mut self, id: ContextSlotId) {
        self.slots[id.0 as usize].ctx_state = CtxState::CtxInThreadPool;
        self.pool.insert(id);
    }

    /// Takes the lowest pooled slot and makes it active.
    pub(crate) fn activate_pooled(&mut self) -> Option<ContextSlotId> {
        let id = self.pool.pop_first()?;
        self.slots[id.0 as usize].ctx_state = CtxState::CtxActive;
        Some(id)
    }

    pub(crate) fn encode(&self, out: &mut Vec<u8>) {
        for slot in &self.slots {
            out.push(slot.ctx_state.code());
            match slot.saved_pc {
                Some(p) => out.extend([1, p.pc, p.pending_wait as u8]),
                None => out.push(0),
            }
        }
        out.push(self.pool.len() as u8);
        out.extend(self.pool.iter().map(|s| s.0));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_restore_cycle() {
        let mut t = ContextTable::new(1, 3);
        assert_eq!(t.slot(ContextSlotId(0)).ctx_state, CtxState::CtxActive);
        assert_eq!(t.pool().len(), 2);

        let p = ProgramPoint { pc: 4, pending_wait: false };
        t.save(ContextSlotId(0), p);
        assert_eq!(t.slot(ContextSlotId(0)).saved_pc, Some(p));
        let fresh = t.activate_pooled().unwrap();
        assert_eq!(fresh, ContextSlotId(1));

        // resume elsewhere: pool the current context, activate the saved one
        t.release(fresh);
        assert_eq!(t.restore(ContextSlotId(0)), Some(p));
        assert_eq!(t.slot(ContextSlotId(0)).ctx_state, CtxState::CtxActive);
        assert_eq!(t.slot(fresh).ctx_state, CtxState::CtxInThreadPool);
        assert!(t.pool().contains(&fresh));
    }
}
