//! Accounting of transient scratch memory.

use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

/// Transient allocations made by one operator call. Inputs and outputs are not counted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationLedger {
    /// Highest number of scratch bytes alive at the same time.
    pub peak_bytes: usize,
    /// Size of the largest single scratch allocation.
    pub largest_allocation: usize,
    pub allocations: usize,
}

impl AllocationLedger {
    pub fn has_allocation_at_least(&self, bytes: usize) -> bool {
        self.allocations > 0 && self.largest_allocation >= bytes
    }
}

#[derive(Debug, Default)]
pub struct ScratchTracker {
    current: AtomicUsize,
    peak: AtomicUsize,
    largest: AtomicUsize,
    count: AtomicUsize,
}

impl ScratchTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_alloc(&self, bytes: usize) {
        let now = self.current.fetch_add(bytes, Ordering::Relaxed) + bytes;
        self.peak.fetch_max(now, Ordering::Relaxed);
        self.largest.fetch_max(bytes, Ordering::Relaxed);
        self.count.fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_free(&self, bytes: usize) {
        self.current.fetch_sub(bytes, Ordering::Relaxed);
    }

    /// A zero-filled buffer whose lifetime is tracked.
    pub fn alloc<T: Copy + Default>(&self, len: usize) -> Scratch<'_, T> {
        self.record_alloc(len * std::mem::size_of::<T>());
        Scratch {
            buf: vec![T::default(); len],
            tracker: self,
        }
    }

    pub fn ledger(&self) -> AllocationLedger {
        AllocationLedger {
            peak_bytes: self.peak.load(Ordering::Relaxed),
            largest_allocation: self.largest.load(Ordering::Relaxed),
            allocations: self.count.load(Ordering::Relaxed),
        }
    }
}

pub struct Scratch<'a, T> {
    buf: Vec<T>,
    tracker: &'a ScratchTracker,
}

impl<T> Deref for Scratch<'_, T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.buf
    }
}

impl<T> DerefMut for Scratch<'_, T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.buf
    }
}

impl<T> Drop for Scratch<'_, T> {
    fn drop(&mut self) {
        self.tracker
            .record_free(self.buf.len() * std::mem::size_of::<T>());
    }
}
