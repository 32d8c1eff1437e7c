//! Multiply-accumulate accounting.
//!
//! Kernels report the MACs they perform into a thread-local counter, split
//! into projection work (linear/conv layers) and attention work (score and
//! value products), plus weighted-sum aggregation inside the positional
//! encodings. [`measure`] forces sequential execution so every MAC lands on
//! the measuring thread.

use std::cell::Cell;

use crate::exec::{self, Exec};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCount {
    pub projection: u64,
    pub attention: u64,
    pub aggregation: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.projection + self.attention + self.aggregation
    }
}

impl std::ops::Add for MacCount {
    type Output = MacCount;
    fn add(self, o: MacCount) -> MacCount {
        MacCount {
            projection: self.projection + o.projection,
            attention: self.attention + o.attention,
            aggregation: self.aggregation + o.aggregation,
        }
    }
}

#[derive(Clone, Copy)]
pub(crate) enum Kind {
    Projection,
    Attention,
    Aggregation,
}

thread_local! {
    static COUNTER: Cell<MacCount> = const { Cell::new(MacCount { projection: 0, attention: 0, aggregation: 0 }) };
}

#[inline]
pub(crate) fn add(kind: Kind, n: u64) {
    COUNTER.with(|c| {
        let mut v = c.get();
        match kind {
            Kind::Projection => v.projection += n,
            Kind::Attention => v.attention += n,
            Kind::Aggregation => v.aggregation += n,
        }
        c.set(v);
    });
}

/// Runs `f` sequentially and returns its result with the MACs it performed.
/// Nested measurements also count toward the enclosing one.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, MacCount) {
    let before = COUNTER.with(|c| c.replace(MacCount::default()));
    let out = exec::scoped(Exec::Sequential, f);
    let counted = COUNTER.with(|c| c.replace(MacCount::default()));
    COUNTER.with(|c| c.set(before + counted));
    (out, counted)
}
