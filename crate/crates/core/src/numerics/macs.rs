//! Multiply-accumulate instrumentation.
//!
//! Every forward matmul registers `m·n·k` per batch element against the
//! current thread's counter, tagged with the active [`MacCategory`]. Counters
//! are thread-local, so concurrent runs on separate threads never mix.
//! Backward-pass matmuls are not counted.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacCategory {
    /// Projections, score products and gating inside attention blocks.
    Attention,
    /// Feed-forward layers.
    Ffn,
    /// Patch embedding, merging, classifier head and anything untagged.
    Other,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCounts {
    pub attention: u64,
    pub ffn: u64,
    pub other: u64,
}

impl MacCounts {
    pub fn total(&self) -> u64 {
        self.attention + self.ffn + self.other
    }
}

impl std::ops::Add for MacCounts {
    type Output = MacCounts;
    fn add(self, o: MacCounts) -> MacCounts {
        MacCounts {
            attention: self.attention + o.attention,
            ffn: self.ffn + o.ffn,
            other: self.other + o.other,
        }
    }
}

impl std::ops::Sub for MacCounts {
    type Output = MacCounts;
    fn sub(self, o: MacCounts) -> MacCounts {
        MacCounts {
            attention: self.attention - o.attention,
            ffn: self.ffn - o.ffn,
            other: self.other - o.other,
        }
    }
}

thread_local! {
    static COUNTS: Cell<MacCounts> = const { Cell::new(MacCounts { attention: 0, ffn: 0, other: 0 }) };
    static CATEGORY: Cell<MacCategory> = const { Cell::new(MacCategory::Other) };
}

pub fn reset() {
    COUNTS.with(|c| c.set(MacCounts::default()));
}

pub fn snapshot() -> MacCounts {
    COUNTS.with(|c| c.get())
}

pub(crate) fn record(macs: u64) {
    let cat = CATEGORY.with(|c| c.get());
    COUNTS.with(|c| {
        let mut v = c.get();
        match cat {
            MacCategory::Attention => v.attention += macs,
            MacCategory::Ffn => v.ffn += macs,
            MacCategory::Other => v.other += macs,
        }
        c.set(v);
    });
}

/// Restores the previous category on drop.
pub struct CategoryGuard {
    previous: MacCategory,
}

impl Drop for CategoryGuard {
    fn drop(&mut self) {
        let prev = self.previous;
        CATEGORY.with(|c| c.set(prev));
    }
}

#[must_use]
pub fn category(cat: MacCategory) -> CategoryGuard {
    let previous = CATEGORY.with(|c| c.replace(cat));
    CategoryGuard { previous }
}

/// Runs `f` with a freshly reset counter and returns its result along with
/// the MACs it recorded. The counter is restored afterwards so that an
/// enclosing measurement still sees the nested work.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, MacCounts) {
    let outer = snapshot();
    reset();
    let out = f();
    let inner = snapshot();
    COUNTS.with(|c| c.set(outer + inner));
    (out, inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_nest_and_restore() {
        let (_, counts) = measure(|| {
            record(5);
            {
                let _g = category(MacCategory::Attention);
                record(7);
                {
                    let _f = category(MacCategory::Ffn);
                    record(11);
                }
                record(1);
            }
            record(2);
        });
        assert_eq!(
            counts,
            MacCounts {
                attention: 8,
                ffn: 11,
                other: 7
            }
        );
        assert_eq!(counts.total(), 26);
    }

    #[test]
    fn nested_measurements_are_additive() {
        let (inner, outer) = measure(|| {
            record(3);
            let (_, inner) = measure(|| record(4));
            inner
        });
        assert_eq!(inner.total(), 4);
        assert_eq!(outer.total(), 7);
    }
}
