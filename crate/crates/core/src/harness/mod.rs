//! Scene generation, robustness sweeps, cost benchmarks and the invariant
//! check runner behind the command-line tool.

pub mod bench;
pub mod checks;
pub mod scene;
pub mod sweep;

/// Seed used when neither a flag nor `BVT_SEED` provides one.
pub const DEFAULT_SEED: u64 = 7;

/// PRNG stream ids. Every consumer draws from its own stream so adding
/// draws to one never shifts another.
pub mod streams {
    pub const FEATURES: u64 = 1;
    pub const WEIGHTS: u64 = 2;
    pub const TARGETS: u64 = 3;
    /// Sweep tasks use `SWEEP + task`.
    pub const SWEEP: u64 = 1 << 32;
}
