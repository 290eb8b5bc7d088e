//! Task-incremental experiments: synthetic task streams, the per-seed
//! training loop with diagnostics, seed aggregation and comparison tables.

mod compare;
mod config;
mod run;
mod stream;

pub use compare::{compare, format_table, write_summary, ComparisonRow};
pub use config::{arrow_label, ExperimentConfig, GridSpec, OptimizerConfig};
pub use run::{
    mean_std, run, run_seed, seed_mean_series, sgd_apply, write_metrics_csv, write_seed, Divergence,
    Optimizer, RunRecord, SeedRecord, SeedRun, Trainer,
};
pub use stream::{gather_rows, make_stream, Generator, StreamConfig, TaskData, TaskStream};

/// Independent sub-seed for a named purpose (SplitMix64 finalizer over the
/// base seed, an FNV-1a hash of the tag, and the index).
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = base ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
