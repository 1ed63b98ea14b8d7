//! Branch-decision tracing for non-smooth ops.
//!
//! ReLU, max reductions and max pooling are piecewise smooth. A finite
//! difference that straddles one of their switch points measures a
//! meaningless slope. While a trace is active on the current thread those
//! ops fold every branch decision (sign of a ReLU input, index of a winning
//! element) into a running hash, so two evaluations can be compared for
//! "same smooth piece or not".

use std::cell::Cell;

thread_local! {
    static ACTIVE: Cell<Option<u64>> = const { Cell::new(None) };
}

const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const PRIME: u64 = 0x0000_0100_0000_01b3;

pub struct KinkHasher(u64);

impl KinkHasher {
    #[inline]
    pub fn push(&mut self, v: u64) {
        self.0 = (self.0 ^ v).wrapping_mul(PRIME);
    }
}

/// Runs `f`, returning its result and the hash of all branch decisions
/// taken inside it on this thread.
pub fn trace<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let outer = ACTIVE.with(|a| a.replace(Some(OFFSET)));
    let out = f();
    let sig = ACTIVE.with(|a| a.replace(outer)).unwrap_or(OFFSET);
    (out, sig)
}

pub fn is_active() -> bool {
    ACTIVE.with(|a| a.get().is_some())
}

/// Feeds decisions into the active trace. `f` only runs when a trace is on.
#[inline]
pub fn record(f: impl FnOnce(&mut KinkHasher)) {
    ACTIVE.with(|a| {
        if let Some(state) = a.get() {
            let mut h = KinkHasher(state);
            f(&mut h);
            a.set(Some(h.0));
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inactive_by_default() {
        assert!(!is_active());
        let mut ran = false;
        record(|_| ran = true);
        assert!(!ran);
    }

    #[test]
    fn nested_traces_restore_outer_state() {
        let ((_, inner), outer) = trace(|| {
            record(|h| h.push(1));
            let inner = trace(|| record(|h| h.push(2)));
            record(|h| h.push(3));
            inner
        });
        let (_, alone) = trace(|| record(|h| h.push(2)));
        assert_eq!(inner, alone);
        let (_, expected) = trace(|| {
            record(|h| h.push(1));
            record(|h| h.push(3));
        });
        assert_eq!(outer, expected);
        assert!(!is_active());
    }
}
