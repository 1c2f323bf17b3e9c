//! Runtime multiply-accumulate counter.
//!
//! Taped matrix products and dynamic convolutions report their nominal MAC
//! count (zero-padded taps included) here. The counter is thread-local and
//! only active inside [`count_macs`], which lets tests cross-check the
//! symbolic cost model against what the forward pass actually executes.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

pub(crate) fn record(macs: usize) {
    COUNTER.with(|c| {
        if let Some(n) = c.get() {
            c.set(Some(n + macs as u64));
        }
    });
}

/// Runs `f` and returns its result together with the MACs it executed.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let prev = COUNTER.with(|c| c.replace(Some(0)));
    let out = f();
    let n = COUNTER.with(|c| c.replace(prev)).unwrap_or(0);
    if let Some(p) = prev {
        COUNTER.with(|c| c.set(Some(p + n)));
    }
    (out, n)
}
