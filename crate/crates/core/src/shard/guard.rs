use std::sync::atomic::{fence, AtomicU64, Ordering};

/// The per-key dual version counter pair.
///
/// A writer bumps `v_a`, installs the new data, then bumps `v_b`. A reader
/// samples `v_b`, copies the data, then samples `v_a`; the copy is valid only
/// if the two samples are equal. `v_a - v_b` is 1 while an update is in
/// flight and 0 otherwise.
#[derive(Debug, Default)]
pub struct SeqGuard {
    v_a: AtomicU64,
    v_b: AtomicU64,
}

/// Snapshot of both counters, for tests and diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GuardState {
    pub v_a: u64,
    pub v_b: u64,
}

impl SeqGuard {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(&self) -> GuardState {
        // v_b first so the pair never shows v_b > v_a
        let v_b = self.v_b.load(Ordering::Acquire);
        let v_a = self.v_a.load(Ordering::Acquire);
        GuardState { v_a, v_b }
    }

    /// Opens an update window. Must be paired with [`SeqGuard::end_write`]
    /// from the same (sole) writer.
    pub fn begin_write(&self) -> u64 {
        let next = self.v_a.load(Ordering::Relaxed) + 1;
        self.v_a.store(next, Ordering::Relaxed);
        fence(Ordering::Release);
        next
    }

    pub fn end_write(&self, ticket: u64) {
        debug_assert_eq!(self.v_a.load(Ordering::Relaxed), ticket);
        self.v_b.store(ticket, Ordering::Release);
    }

    /// Reader side, step one.
    pub fn read_begin(&self) -> u64 {
        self.v_b.load(Ordering::Acquire)
    }

    /// Reader side, step three: true when the data read since
    /// [`SeqGuard::read_begin`] returned `start` is consistent.
    pub fn read_validate(&self, start: u64) -> bool {
        fence(Ordering::Acquire);
        self.v_a.load(Ordering::Relaxed) == start
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_window_transitions() {
        let g = SeqGuard::new();
        for _ in 0..3 {
            let t = g.begin_write();
            g.end_write(t);
        }
        assert_eq!(g.state(), GuardState { v_a: 3, v_b: 3 });
        let t = g.begin_write();
        assert_eq!(g.state(), GuardState { v_a: 4, v_b: 3 });
        g.end_write(t);
        assert_eq!(g.state(), GuardState { v_a: 4, v_b: 4 });
    }

    #[test]
    fn reader_rejects_open_window() {
        let g = SeqGuard::new();
        let start = g.read_begin();
        let t = g.begin_write();
        assert!(!g.read_validate(start));
        g.end_write(t);
        let start = g.read_begin();
        assert!(g.read_validate(start));
    }
}
