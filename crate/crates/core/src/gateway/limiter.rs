//! Per-role concurrency limiter with RAII slot leases.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use thiserror::Error;

use super::WorkerRole;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("limiter is shutting down; lease denied")]
pub struct LeaseDenied;

struct Inner {
    caps: [usize; 3],
    in_flight: Mutex<[usize; 3]>,
    available: Condvar,
    max_seen: [AtomicUsize; 3],
    shutdown: AtomicBool,
}

/// Bounds in-flight requests per role. Cloning shares the same state.
#[derive(Clone)]
pub struct RoleLimiter {
    inner: Arc<Inner>,
}

impl RoleLimiter {
    /// Caps below 1 are clamped to 1.
    pub fn new(generator: usize, critic: usize, reviser: usize) -> Self {
        Self {
            inner: Arc::new(Inner {
                caps: [generator.max(1), critic.max(1), reviser.max(1)],
                in_flight: Mutex::new([0; 3]),
                available: Condvar::new(),
                max_seen: [AtomicUsize::new(0), AtomicUsize::new(0), AtomicUsize::new(0)],
                shutdown: AtomicBool::new(false),
            }),
        }
    }

    pub fn cap(&self, role: WorkerRole) -> usize {
        self.inner.caps[role.index()]
    }

    /// Block until a slot is free for `role`. Denied once shutdown begins.
    pub fn acquire(&self, role: WorkerRole) -> Result<SlotLease, LeaseDenied> {
        let i = role.index();
        let mut counts = self.inner.in_flight.lock().expect("limiter poisoned");
        loop {
            if self.inner.shutdown.load(Ordering::SeqCst) {
                return Err(LeaseDenied);
            }
            if counts[i] < self.inner.caps[i] {
                counts[i] += 1;
                self.inner.max_seen[i].fetch_max(counts[i], Ordering::SeqCst);
                return Ok(SlotLease {
                    inner: Arc::clone(&self.inner),
                    role,
                    released: false,
                });
            }
            counts = self
                .inner
                .available
                .wait(counts)
                .expect("limiter poisoned");
        }
    }

    /// Deny all future leases; outstanding leases still release normally.
    pub fn begin_shutdown(&self) {
        self.inner.shutdown.store(true, Ordering::SeqCst);
        self.inner.available.notify_all();
    }

    pub fn in_flight(&self, role: WorkerRole) -> usize {
        self.inner.in_flight.lock().expect("limiter poisoned")[role.index()]
    }

    /// Instrumentation hook: the highest simultaneous in-flight count seen.
    pub fn max_in_flight(&self, role: WorkerRole) -> usize {
        self.inner.max_seen[role.index()].load(Ordering::SeqCst)
    }
}

/// Holding a lease occupies one slot; dropping or releasing frees it.
pub struct SlotLease {
    inner: Arc<Inner>,
    role: WorkerRole,
    released: bool,
}

impl SlotLease {
    /// Idempotent: calling twice is a no-op.
    pub fn release(&mut self) {
        if self.released {
            return;
        }
        self.released = true;
        let mut counts = self.inner.in_flight.lock().expect("limiter poisoned");
        counts[self.role.index()] -= 1;
        drop(counts);
        self.inner.available.notify_all();
    }
}

impl Drop for SlotLease {
    fn drop(&mut self) {
        self.release();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;
    use std::time::Duration;

    #[test]
    fn serial_when_cap_is_one() {
        let limiter = RoleLimiter::new(1, 1, 1);
        let order = Arc::new(Mutex::new(Vec::new()));
        std::thread::scope(|s| {
            for id in 0..2 {
                let limiter = limiter.clone();
                let order = Arc::clone(&order);
                s.spawn(move || {
                    let mut lease = limiter.acquire(WorkerRole::Generator).unwrap();
                    order.lock().unwrap().push((id, "start"));
                    std::thread::sleep(Duration::from_millis(10));
                    order.lock().unwrap().push((id, "end"));
                    lease.release();
                });
            }
        });
        let order = order.lock().unwrap();
        // Strictly-after ordering: no interleaving of start/end pairs.
        assert_eq!(order[0].1, "start");
        assert_eq!(order[1].1, "end");
        assert_eq!(order[0].0, order[1].0);
        assert_eq!(limiter.max_in_flight(WorkerRole::Generator), 1);
    }

    #[test]
    fn bound_holds_under_load() {
        let limiter = RoleLimiter::new(8, 1, 1);
        let peak = Arc::new(AtomicU32::new(0));
        let current = Arc::new(AtomicU32::new(0));
        std::thread::scope(|s| {
            for _ in 0..100 {
                let limiter = limiter.clone();
                let peak = Arc::clone(&peak);
                let current = Arc::clone(&current);
                s.spawn(move || {
                    let _lease = limiter.acquire(WorkerRole::Generator).unwrap();
                    let now = current.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(2));
                    current.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 8);
        assert_eq!(limiter.max_in_flight(WorkerRole::Generator), 8);
        assert_eq!(limiter.in_flight(WorkerRole::Generator), 0);
    }

    #[test]
    fn double_release_is_noop() {
        let limiter = RoleLimiter::new(1, 1, 1);
        let mut lease = limiter.acquire(WorkerRole::Reviser).unwrap();
        lease.release();
        lease.release();
        assert_eq!(limiter.in_flight(WorkerRole::Reviser), 0);
        // A fresh lease still works after the double release.
        let _again = limiter.acquire(WorkerRole::Reviser).unwrap();
    }

    #[test]
    fn shutdown_denies_new_leases() {
        let limiter = RoleLimiter::new(2, 2, 2);
        limiter.begin_shutdown();
        assert!(limiter.acquire(WorkerRole::Generator).is_err());
    }
}
