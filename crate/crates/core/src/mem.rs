//! Per-thread accounting of live tensor bytes.
//!
//! Every [`Buf`] registers its size on the thread that created it and
//! unregisters on drop, so `peak_bytes()` reports the peak of
//! concurrently-live tensor storage (data, gradients, optimizer moments)
//! for the current thread's run. A training run is confined to one thread,
//! so parallel runs get independent counters.

use std::cell::Cell;
use std::ops::{Deref, DerefMut};

thread_local! {
    static CURRENT: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

/// Live tensor bytes on this thread right now.
pub fn current_bytes() -> usize {
    CURRENT.with(|c| c.get())
}

/// Peak live tensor bytes on this thread since the last reset.
pub fn peak_bytes() -> usize {
    PEAK.with(|p| p.get())
}

/// Resets the peak to the current live total. The next reading grows from
/// whatever is still allocated, not from the old high-water mark.
pub fn reset_peak() {
    let now = current_bytes();
    PEAK.with(|p| p.set(now));
}

fn register(bytes: usize) {
    CURRENT.with(|c| {
        let now = c.get() + bytes;
        c.set(now);
        PEAK.with(|p| {
            if now > p.get() {
                p.set(now);
            }
        });
    });
}

fn unregister(bytes: usize) {
    CURRENT.with(|c| c.set(c.get().saturating_sub(bytes)));
}

/// Tracked flat f64 storage. All tensor data, gradients and optimizer
/// moments live in `Buf`s so the memory proxy sees them.
///
/// Must be created and dropped on the thread that owns the run; kernels
/// allocate outputs before fanning work out to worker threads.
#[derive(Debug)]
pub struct Buf {
    v: Vec<f64>,
}

impl Buf {
    pub fn zeros(len: usize) -> Self {
        register(len * 8);
        Buf { v: vec![0.0; len] }
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        register(v.len() * 8);
        Buf { v }
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.v
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.v
    }

    pub fn into_vec(mut self) -> Vec<f64> {
        unregister(self.v.len() * 8);
        std::mem::take(&mut self.v) // Drop then sees an empty vec
    }
}

impl Clone for Buf {
    fn clone(&self) -> Self {
        Buf::from_vec(self.v.clone())
    }
}

impl Drop for Buf {
    fn drop(&mut self) {
        unregister(self.v.len() * 8);
    }
}

impl Deref for Buf {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.v
    }
}

impl DerefMut for Buf {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.v
    }
}
