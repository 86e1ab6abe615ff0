//! Instrumented global allocator used to verify buffer-count claims.
//!
//! Install in a binary or test harness with
//! `#[global_allocator] static A: CountingAlloc = CountingAlloc;` and wrap the
//! code under measurement in an [`AllocProbe`]. Counters are per thread, so
//! concurrent tests and fabric workers do not see each other's allocations.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::sync::atomic::{AtomicBool, Ordering};

pub struct CountingAlloc;

static INSTALLED: AtomicBool = AtomicBool::new(false);

thread_local! {
    static THRESHOLD: Cell<usize> = const { Cell::new(usize::MAX) };
    static LARGE_COUNT: Cell<usize> = const { Cell::new(0) };
    static LARGE_BYTES: Cell<usize> = const { Cell::new(0) };
    static LIVE: Cell<isize> = const { Cell::new(0) };
    static PEAK: Cell<isize> = const { Cell::new(0) };
}

#[inline]
fn on_alloc(size: usize) {
    let _ = LIVE.try_with(|live| {
        let now = live.get() + size as isize;
        live.set(now);
        let _ = PEAK.try_with(|p| {
            if now > p.get() {
                p.set(now)
            }
        });
    });
    let _ = THRESHOLD.try_with(|t| {
        if size >= t.get() {
            let _ = LARGE_COUNT.try_with(|c| c.set(c.get() + 1));
            let _ = LARGE_BYTES.try_with(|b| b.set(b.get() + size));
        }
    });
}

#[inline]
fn on_free(size: usize) {
    let _ = LIVE.try_with(|live| live.set(live.get() - size as isize));
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let p = System.alloc(layout);
        if !p.is_null() {
            on_alloc(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            on_alloc(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        on_free(layout.size());
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            on_free(layout.size());
            on_alloc(new_size);
        }
        p
    }
}

/// Whether [`CountingAlloc`] is the active global allocator.
pub fn counting_installed() -> bool {
    // force at least one allocation through whatever allocator is active
    drop(std::hint::black_box(Box::new(0u64)));
    INSTALLED.load(Ordering::Relaxed)
}

/// Allocation activity on the current thread between `start` and `finish`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AllocReport {
    /// Allocations of at least the probe threshold.
    pub large_allocations: usize,
    pub large_bytes: usize,
    /// Peak live bytes above the level at probe start.
    pub peak_bytes: usize,
}

pub struct AllocProbe {
    prev_threshold: usize,
    count0: usize,
    bytes0: usize,
    peak0: isize,
    live0: isize,
}

impl AllocProbe {
    /// Starts counting allocations of `threshold_bytes` or more.
    pub fn start(threshold_bytes: usize) -> Self {
        let prev_threshold = THRESHOLD.with(|t| t.replace(threshold_bytes));
        let live0 = LIVE.with(|l| l.get());
        let peak0 = PEAK.with(|p| p.replace(live0));
        Self {
            prev_threshold,
            count0: LARGE_COUNT.with(|c| c.get()),
            bytes0: LARGE_BYTES.with(|b| b.get()),
            peak0,
            live0,
        }
    }

    pub fn report(&self) -> AllocReport {
        AllocReport {
            large_allocations: LARGE_COUNT.with(|c| c.get()) - self.count0,
            large_bytes: LARGE_BYTES.with(|b| b.get()) - self.bytes0,
            peak_bytes: (PEAK.with(|p| p.get()) - self.live0).max(0) as usize,
        }
    }

    pub fn finish(self) -> AllocReport {
        self.report()
    }
}

impl Drop for AllocProbe {
    fn drop(&mut self) {
        THRESHOLD.with(|t| t.set(self.prev_threshold));
        PEAK.with(|p| p.set(p.get().max(self.peak0)));
    }
}

/// Bytes in one lattice-sized `f64` buffer with `n` voxels.
pub fn lattice_bytes(n: usize) -> usize {
    n * std::mem::size_of::<f64>()
}
