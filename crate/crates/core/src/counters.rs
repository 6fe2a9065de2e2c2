//! Exact FLOP and allocation accounting.
//!
//! Counting is scoped: [`CounterScope::enter`] pushes a fresh set of counters
//! for the current thread, and every tensor buffer allocated while the scope
//! is active charges its bytes to it (and to any enclosing scopes) until the
//! buffer is dropped. FLOPs are charged by the kernels that perform
//! multiply-accumulate work, two per MAC. Work spawned onto other threads is
//! not attributed unless those threads enter a scope themselves, which is how
//! parallel sweeps keep per-point counters isolated.

use std::cell::RefCell;
use std::marker::PhantomData;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

/// Snapshot of one counting scope.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounters {
    /// Floating-point operations from matmul/conv, 2 per multiply-accumulate.
    pub flops: u64,
    /// High-water mark of live tensor bytes allocated inside the scope.
    pub peak_bytes: u64,
    /// Bytes allocated inside the scope and not yet freed.
    pub live_bytes: u64,
    /// Number of tensor buffers allocated.
    pub allocs: u64,
    /// Slices that hit the 0/0 guard of an L2 normalization.
    pub zero_slices: u64,
}

#[derive(Debug, Default)]
pub(crate) struct ScopeState {
    parent: Option<Arc<ScopeState>>,
    flops: AtomicU64,
    live: AtomicU64,
    peak: AtomicU64,
    allocs: AtomicU64,
    zero_slices: AtomicU64,
}

impl ScopeState {
    fn chain(self: &Arc<Self>) -> impl Iterator<Item = &ScopeState> {
        std::iter::successors(Some(self.as_ref()), |s| s.parent.as_deref())
    }

    fn snapshot(&self) -> OpCounters {
        OpCounters {
            flops: self.flops.load(Ordering::Relaxed),
            peak_bytes: self.peak.load(Ordering::Relaxed),
            live_bytes: self.live.load(Ordering::Relaxed),
            allocs: self.allocs.load(Ordering::Relaxed),
            zero_slices: self.zero_slices.load(Ordering::Relaxed),
        }
    }
}

thread_local! {
    static CURRENT: RefCell<Option<Arc<ScopeState>>> = const { RefCell::new(None) };
}

/// RAII guard for a counting scope. Not `Send`: a scope belongs to the thread
/// that entered it.
pub struct CounterScope {
    state: Arc<ScopeState>,
    _not_send: PhantomData<*const ()>,
}

impl CounterScope {
    pub fn enter() -> Self {
        let state = CURRENT.with(|cur| {
            let parent = cur.borrow().clone();
            let state = Arc::new(ScopeState {
                parent,
                ..Default::default()
            });
            *cur.borrow_mut() = Some(state.clone());
            state
        });
        CounterScope {
            state,
            _not_send: PhantomData,
        }
    }

    pub fn snapshot(&self) -> OpCounters {
        self.state.snapshot()
    }

    /// Zeroes flops, allocs and the zero-slice flag, and lowers the peak to the
    /// bytes currently live.
    pub fn reset(&self) {
        let s = &self.state;
        s.flops.store(0, Ordering::Relaxed);
        s.allocs.store(0, Ordering::Relaxed);
        s.zero_slices.store(0, Ordering::Relaxed);
        s.peak.store(s.live.load(Ordering::Relaxed), Ordering::Relaxed);
    }
}

impl Drop for CounterScope {
    fn drop(&mut self) {
        CURRENT.with(|cur| {
            *cur.borrow_mut() = self.state.parent.clone();
        });
    }
}

/// Runs `f` inside a fresh scope and returns its result with the counters.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, OpCounters) {
    let scope = CounterScope::enter();
    let out = f();
    let counts = scope.snapshot();
    (out, counts)
}

fn with_current(f: impl FnOnce(&Arc<ScopeState>)) {
    CURRENT.with(|cur| {
        if let Some(state) = cur.borrow().as_ref() {
            f(state);
        }
    });
}

pub(crate) fn add_flops(n: u64) {
    with_current(|s| {
        for scope in s.chain() {
            scope.flops.fetch_add(n, Ordering::Relaxed);
        }
    });
}

pub(crate) fn add_zero_slices(n: u64) {
    if n == 0 {
        return;
    }
    with_current(|s| {
        for scope in s.chain() {
            scope.zero_slices.fetch_add(n, Ordering::Relaxed);
        }
    });
}

/// Charges an allocation to the active scopes; the returned handle must be
/// passed to [`release`] when the buffer is freed.
pub(crate) fn charge(bytes: u64) -> Option<Arc<ScopeState>> {
    let mut handle = None;
    with_current(|s| {
        for scope in s.chain() {
            let live = scope.live.fetch_add(bytes, Ordering::Relaxed) + bytes;
            scope.peak.fetch_max(live, Ordering::Relaxed);
            scope.allocs.fetch_add(1, Ordering::Relaxed);
        }
        handle = Some(s.clone());
    });
    handle
}

pub(crate) fn release(handle: &Arc<ScopeState>, bytes: u64) {
    for scope in handle.chain() {
        scope.live.fetch_sub(bytes, Ordering::Relaxed);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_tracks_high_water_mark() {
        let scope = CounterScope::enter();
        let a = charge(100).unwrap();
        let b = charge(50).unwrap();
        release(&b, 50);
        let _c = charge(20).unwrap();
        let s = scope.snapshot();
        assert_eq!(s.peak_bytes, 150);
        assert_eq!(s.live_bytes, 120);
        assert_eq!(s.allocs, 3);
        release(&a, 100);
    }

    #[test]
    fn nested_scopes_charge_parents() {
        let outer = CounterScope::enter();
        add_flops(10);
        {
            let inner = CounterScope::enter();
            add_flops(5);
            assert_eq!(inner.snapshot().flops, 5);
        }
        add_flops(1);
        assert_eq!(outer.snapshot().flops, 16);
    }

    #[test]
    fn no_scope_means_no_tracking() {
        assert!(charge(8).is_none());
        add_flops(3);
    }

    #[test]
    fn reset_keeps_live_bytes_as_peak() {
        let scope = CounterScope::enter();
        let h = charge(64).unwrap();
        let g = charge(64).unwrap();
        release(&g, 64);
        add_flops(7);
        scope.reset();
        let s = scope.snapshot();
        assert_eq!((s.flops, s.peak_bytes, s.allocs), (0, 64, 0));
        release(&h, 64);
    }
}
