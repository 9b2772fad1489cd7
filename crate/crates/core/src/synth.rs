//! Random well-formed snapshots for property tests and benchmarks.
//!
//! Token id 0 renders as `<s>` and id 1 as a single space, so under
//! [`SinkPolicy::v1`]`([0])` both are sinks. Other ids render as `w{id}`.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::calibration::SinkPolicy;
use crate::snapshot::{AttentionRow, ContextToken, ModelDims, StepSnapshot, ValueNorms};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthShape {
    pub max_layers: usize,
    pub max_heads: usize,
    pub max_context: usize,
    pub max_vocab: usize,
}

impl Default for SynthShape {
    fn default() -> Self {
        Self {
            max_layers: 4,
            max_heads: 4,
            max_context: 32,
            max_vocab: 64,
        }
    }
}

pub fn synth_policy() -> SinkPolicy {
    SinkPolicy::v1([0])
}

pub fn surface_of(id: u32) -> String {
    match id {
        0 => "<s>".into(),
        1 => " ".into(),
        n => format!("w{n}"),
    }
}

/// Snapshot with random shape, repeated tokens, occasional sinks, peaked or
/// flat attention, some zero value norms and logits ranging from flat to
/// nearly one-hot.
pub fn random_snapshot<R: Rng + ?Sized>(rng: &mut R, shape: SynthShape) -> StepSnapshot {
    let layers = rng.random_range(1..=shape.max_layers);
    let heads = rng.random_range(1..=shape.max_heads);
    let divisors: Vec<usize> = (1..=heads).filter(|d| heads % d == 0).collect();
    let kv_heads = *divisors.choose(rng).expect("1 divides everything");
    let vocab = rng.random_range(2..=shape.max_vocab.max(2));
    let ctx = rng.random_range(1..=shape.max_context);
    random_snapshot_with(rng, ModelDims::new(vocab, layers, heads, kv_heads), ctx)
}

pub fn random_snapshot_with<R: Rng + ?Sized>(
    rng: &mut R,
    dims: ModelDims,
    ctx: usize,
) -> StepSnapshot {
    let vocab = dims.vocab as u32;
    // a small pool forces repeated ids
    let pool_size = rng.random_range(1..=vocab.min(ctx as u32 + 2).max(1));
    let pool: Vec<u32> = (0..pool_size).map(|_| rng.random_range(0..vocab)).collect();
    let policy = synth_policy();
    let context: Vec<ContextToken> = (0..ctx)
        .map(|position| {
            let token_id = if position == 0 && rng.random_bool(0.5) {
                0
            } else {
                *pool.choose(rng).expect("non-empty pool")
            };
            let surface = surface_of(token_id);
            let is_sink = policy.is_sink(token_id, &surface);
            ContextToken {
                position,
                token_id,
                surface,
                is_sink,
            }
        })
        .collect();

    let std_normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let mut attention = Vec::with_capacity(dims.head_count());
    for layer in 0..dims.layers {
        for head in 0..dims.heads {
            let temperature = rng.random_range(0.1..4.0);
            let z: Vec<f64> = (0..ctx)
                .map(|_| std_normal.sample(rng) * temperature)
                .collect();
            attention.push(AttentionRow {
                layer,
                head,
                weights: softmax32(&z),
            });
        }
    }

    let mut value_norms = Vec::with_capacity(dims.layers * dims.kv_heads);
    for layer in 0..dims.layers {
        for kv_head in 0..dims.kv_heads {
            let norms = (0..ctx)
                .map(|_| {
                    if rng.random_bool(0.05) {
                        0.0
                    } else {
                        rng.random_range(0.05f32..6.0)
                    }
                })
                .collect();
            value_norms.push(ValueNorms {
                layer,
                kv_head,
                norms,
            });
        }
    }

    let logit_scale = rng.random_range(0.0..6.0);
    let mut logits: Vec<f32> = (0..dims.vocab)
        .map(|_| (std_normal.sample(rng) * logit_scale) as f32)
        .collect();
    if rng.random_bool(0.1) {
        let hot = rng.random_range(0..dims.vocab);
        logits[hot] += 40.0;
    }

    StepSnapshot {
        step: rng.random_range(0..1_000_000),
        dims,
        context,
        attention,
        value_norms,
        logits,
    }
}

/// Softmax computed in f64, stored as f32.
pub fn softmax32(z: &[f64]) -> Vec<f32> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| (v / total) as f32).collect()
}
