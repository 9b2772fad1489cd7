//! Shared fixtures for the benchmarks.

use have_core::synth::{random_snapshot_with, synth_policy};
use have_core::trace::{TraceFile, TraceHeader};
use have_core::{HaveConfig, ModelDims, StepSnapshot};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic snapshot with the given shape.
pub fn snapshot(dims: ModelDims, ctx: usize, seed: u64) -> StepSnapshot {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_snapshot_with(&mut rng, dims, ctx)
}

pub fn have_config() -> HaveConfig {
    let mut cfg = HaveConfig::default();
    cfg.calibration.sink_policy = synth_policy();
    cfg
}

/// Trace of `steps` snapshots with strictly increasing step indices.
pub fn trace(dims: ModelDims, ctx: usize, steps: usize) -> TraceFile {
    let mut file = TraceFile::new(TraceHeader::new(dims, 1, "bench"));
    file.snapshots = (0..steps)
        .map(|i| {
            let mut s = snapshot(dims, ctx, i as u64);
            s.step = i as u64;
            s
        })
        .collect();
    file
}
