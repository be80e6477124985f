//! Thread-local allocation meter for engine arrays.
//!
//! Counts bytes held by live [`Array`](super::Array) buffers on the current
//! thread. Benchmarks read the high-water mark instead of OS RSS so the
//! figure is deterministic. An optional budget turns excess allocation into
//! an out-of-memory error at the next tape checkpoint.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static BUDGET: Cell<Option<usize>> = const { Cell::new(None) };
    static FINITE_CHECKS: Cell<bool> = const { Cell::new(true) };
}

pub(crate) fn on_alloc(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

pub(crate) fn on_free(bytes: usize) {
    // Arrays dropped on a different thread than they were created on can
    // drive this below zero; saturate rather than wrap.
    LIVE.with(|live| live.set(live.get().saturating_sub(bytes)));
}

pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

pub fn peak_bytes() -> usize {
    PEAK.with(Cell::get)
}

/// Restarts the high-water mark from the current live total.
pub fn reset_peak() {
    let live = live_bytes();
    PEAK.with(|p| p.set(live));
}

/// Caps live bytes on this thread; `None` removes the cap.
pub fn set_budget(bytes: Option<usize>) {
    BUDGET.with(|b| b.set(bytes));
}

pub fn budget() -> Option<usize> {
    BUDGET.with(Cell::get)
}

/// `Some((live, budget))` when the budget is exceeded.
pub fn over_budget() -> Option<(usize, usize)> {
    let budget = budget()?;
    let live = live_bytes();
    (live > budget).then_some((live, budget))
}

/// Toggles the debug-build NaN/Inf assertion on tape outputs.
///
/// Release builds never check. Benchmarks switch it off for timed regions.
pub fn set_finite_checks(enabled: bool) {
    FINITE_CHECKS.with(|c| c.set(enabled));
}

pub fn finite_checks_enabled() -> bool {
    FINITE_CHECKS.with(Cell::get)
}

pub(crate) fn finite_checks() -> bool {
    cfg!(debug_assertions) && FINITE_CHECKS.with(Cell::get)
}

/// Number of worker threads the engine itself uses. Kernels are
/// single-threaded; the bench harness refuses to time anything else.
pub fn engine_threads() -> usize {
    1
}
