//! Fault injection for mutation-testing the invariant suite.
//!
//! Faults are thread-local; [`with_faults`] therefore also switches the
//! calling thread to sequential execution so no work escapes to a pool
//! thread that cannot see them.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Softmax returns `exp(x - max)` without dividing by the sum.
    SkipSoftmaxNormalization,
    /// The auxiliary head's logits leak into the decoder's width features.
    AuxIntoDecoder,
}

impl Fault {
    fn bit(self) -> u8 {
        match self {
            Fault::SkipSoftmaxNormalization => 1,
            Fault::AuxIntoDecoder => 2,
        }
    }

    pub fn parse(name: &str) -> Option<Fault> {
        match name {
            "skip-softmax" => Some(Fault::SkipSoftmaxNormalization),
            "aux-into-decoder" => Some(Fault::AuxIntoDecoder),
            _ => None,
        }
    }
}

thread_local! {
    static ACTIVE: Cell<u8> = const { Cell::new(0) };
}

pub fn is_active(fault: Fault) -> bool {
    ACTIVE.with(|a| a.get() & fault.bit() != 0)
}

/// Runs `f` sequentially with `faults` enabled on this thread.
pub fn with_faults<R>(faults: &[Fault], f: impl FnOnce() -> R) -> R {
    struct Restore(u8);
    impl Drop for Restore {
        fn drop(&mut self) {
            ACTIVE.with(|a| a.set(self.0));
        }
    }
    let mask = faults.iter().fold(0u8, |m, f| m | f.bit());
    let _restore = Restore(ACTIVE.with(|a| a.replace(a.get() | mask)));
    crate::exec::scoped(crate::exec::Exec::Sequential, f)
}
