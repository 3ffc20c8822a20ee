//! Crash injection for durable writes.
//!
//! Every durable write (device block write, log record append, checkpoint
//! publish) consumes one event. When the budget runs out the write in
//! progress is cut short and every later write fails with [`Error::Crashed`]
//! until the owner is reopened from disk.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct CrashInjector {
    budget: AtomicU64,
    armed: AtomicBool,
    consumed: AtomicU64,
    crashed: AtomicBool,
}

/// Outcome of asking for permission to perform one durable write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteGate {
    Proceed,
    /// This write is torn; the system crashes right after it.
    Torn,
}

impl CrashInjector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Crash on the `events`-th durable write from now (counted from 1).
    pub fn arm(&self, events: u64) {
        self.budget.store(events, Ordering::SeqCst);
        self.armed.store(true, Ordering::SeqCst);
    }

    pub fn disarm(&self) {
        self.armed.store(false, Ordering::SeqCst);
    }

    /// Clears a crash so the owner can be reopened.
    pub fn reset(&self) {
        self.disarm();
        self.crashed.store(false, Ordering::SeqCst);
    }

    pub fn crashed(&self) -> bool {
        self.crashed.load(Ordering::SeqCst)
    }

    pub fn consumed(&self) -> u64 {
        self.consumed.load(Ordering::SeqCst)
    }

    pub fn gate(&self) -> Result<WriteGate> {
        if self.crashed() {
            return Err(Error::Crashed);
        }
        self.consumed.fetch_add(1, Ordering::SeqCst);
        if !self.armed.load(Ordering::SeqCst) {
            return Ok(WriteGate::Proceed);
        }
        let left = self.budget.fetch_sub(1, Ordering::SeqCst);
        if left <= 1 {
            self.crashed.store(true, Ordering::SeqCst);
            self.armed.store(false, Ordering::SeqCst);
            Ok(WriteGate::Torn)
        } else {
            Ok(WriteGate::Proceed)
        }
    }
}
