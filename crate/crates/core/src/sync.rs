//! Coordination primitives shared by the serving, judging, training, and
//! recording loops.
//!
//! Everything here is deliberately small: a pausable [`Gate`] for stalling a
//! single loop while the others keep running, a cooperative [`ShutdownFlag`],
//! and the hash-based seed derivation that gives every loop, request, and
//! vote its own reproducible random stream.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::{Condvar, Mutex};
use sha2::{Digest, Sha256};

/// A checkpoint that a loop passes through on every iteration.
///
/// Gates start open and cost one uncontended atomic load per pass. Closing a
/// gate parks every caller inside [`Gate::pass`] until it reopens. Tests use
/// this to stall exactly one loop (trainer, judge, or record writer) and
/// observe that the others continue; nothing closes a gate in normal
/// operation.
#[derive(Clone)]
pub struct Gate {
    inner: Arc<GateInner>,
}

struct GateInner {
    // Fast-path flag mirrored by the mutex-guarded bool; checked first so an
    // open gate never touches the lock.
    open_hint: AtomicBool,
    open: Mutex<bool>,
    cond: Condvar,
}

impl Default for Gate {
    fn default() -> Self {
        Self::new()
    }
}

impl Gate {
    /// A new, open gate.
    pub fn new() -> Self {
        Gate {
            inner: Arc::new(GateInner {
                open_hint: AtomicBool::new(true),
                open: Mutex::new(true),
                cond: Condvar::new(),
            }),
        }
    }

    /// Blocks while the gate is closed; returns immediately when open.
    pub fn pass(&self) {
        if self.inner.open_hint.load(Ordering::Acquire) {
            return;
        }
        let mut open = self.inner.open.lock();
        while !*open {
            self.inner.cond.wait(&mut open);
        }
    }

    /// Closes the gate; subsequent `pass` calls block.
    pub fn close(&self) {
        let mut open = self.inner.open.lock();
        *open = false;
        self.inner.open_hint.store(false, Ordering::Release);
    }

    /// Reopens the gate and wakes every blocked caller.
    pub fn open(&self) {
        let mut open = self.inner.open.lock();
        *open = true;
        self.inner.open_hint.store(true, Ordering::Release);
        self.inner.cond.notify_all();
    }

    /// Whether the gate is currently open.
    pub fn is_open(&self) -> bool {
        self.inner.open_hint.load(Ordering::Acquire)
    }
}

/// Cooperative shutdown signal observed by every loop.
#[derive(Clone, Default)]
pub struct ShutdownFlag {
    flag: Arc<AtomicBool>,
}

impl ShutdownFlag {
    pub fn new() -> Self {
        Self::default()
    }

    /// Requests shutdown; loops exit at their next checkpoint.
    pub fn trigger(&self) {
        self.flag.store(true, Ordering::Release);
    }

    pub fn is_triggered(&self) -> bool {
        self.flag.load(Ordering::Acquire)
    }
}

/// Monotonic-enough wall clock in milliseconds for record timestamps.
pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// A process-wide counter for things that need distinct ids but not
/// reproducibility (anonymous session fallbacks, temp file suffixes).
pub fn next_unique() -> u64 {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    COUNTER.fetch_add(1, Ordering::Relaxed)
}

/// Derives a 64-bit seed from a run seed and a list of scope labels.
///
/// Every source of randomness in the system (generation per request, judge
/// vote streams, world instances) seeds its own generator through this
/// function, so two runs with the same run seed replay identically while
/// different scopes never share a stream.
pub fn derive_seed(run_seed: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(run_seed.to_le_bytes());
    for part in parts {
        // Length-prefix each part so ("ab","c") and ("a","bc") differ.
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest longer than 8 bytes"))
}
