//! A small decoder-only transformer with frozen random weights.
//!
//! Pre-norm blocks (RMS norm without gain), learned absolute position
//! offsets, grouped-query attention over a KV cache with optional
//! sliding-window eviction, and one ReLU MLP per block. All arithmetic is
//! `f32`.
//!
//! Weights come from a ChaCha8 stream seeded with `ToyConfig::seed`, drawn
//! in a fixed order (token embedding, position table, then per layer
//! `wq, wk, wv, wo, w1, w2`, then the unembedding), each entry
//! `N(0, 1/fan_in)` except the two embedding tables which are `N(0, 1)`.

use std::collections::VecDeque;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::calibration::SinkPolicy;
use crate::error::{HaveError, Result};
use crate::fusion::{FusedDistribution, Policy};
use crate::snapshot::{AttentionRow, ContextToken, ModelDims, StepSnapshot, ValueNorms};
use crate::trace::{TraceFile, TraceHeader};

pub const TOKENIZER_NAME: &str = "toy-words-v1";
pub const BOS_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const SPACE_ID: u32 = 2;
const FIRST_WORD_ID: u32 = 3;
const SYLLABLES: [&str; 8] = ["ka", "lo", "mi", "ne", "ru", "sa", "ti", "vo"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub vocab: usize,
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub max_context: usize,
    #[serde(default)]
    pub window: Option<usize>,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            layers: 2,
            heads: 4,
            kv_heads: 2,
            head_dim: 8,
            max_context: 256,
            window: None,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HaveError::Config(m));
        if self.vocab < 4 {
            return bad(format!("vocab must be >= 4, got {}", self.vocab));
        }
        if self.layers == 0 || self.heads == 0 || self.kv_heads == 0 || self.head_dim == 0 {
            return bad("layers, heads, kv_heads and head_dim must be positive".into());
        }
        if !self.heads.is_multiple_of(self.kv_heads) {
            return bad(format!(
                "heads ({}) must be divisible by kv_heads ({})",
                self.heads, self.kv_heads
            ));
        }
        if self.max_context == 0 {
            return bad("max_context must be positive".into());
        }
        if self.window == Some(0) {
            return bad("window must be >= 1".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ToyConfig =
            toml::from_str(text).map_err(|e| HaveError::Config(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims::new(self.vocab, self.layers, self.heads, self.kv_heads)
    }

    fn d_model(&self) -> usize {
        self.heads * self.head_dim
    }

    fn kv_dim(&self) -> usize {
        self.kv_heads * self.head_dim
    }
}

/// Word-level vocabulary: `<s>`, `</s>`, a space token, then synthetic
/// words spelled from a fixed syllable table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyTokenizer {
    surfaces: Vec<String>,
}

impl ToyTokenizer {
    pub fn new(vocab: usize) -> Self {
        let mut surfaces = vec!["<s>".to_string(), "</s>".to_string(), " ".to_string()];
        for i in 0..vocab.saturating_sub(FIRST_WORD_ID as usize) {
            surfaces.push(word(i));
        }
        surfaces.truncate(vocab);
        Self { surfaces }
    }

    pub fn surface(&self, id: u32) -> &str {
        self.surfaces
            .get(id as usize)
            .map_or("<unk>", String::as_str)
    }

    pub fn special_ids(&self) -> [u32; 2] {
        [BOS_ID, EOS_ID]
    }

    pub fn sink_policy(&self) -> SinkPolicy {
        SinkPolicy::v1(self.special_ids())
    }

    /// Whitespace-split words. Known surfaces map to their id; unknown words
    /// hash (FNV-1a) onto the word range so any text encodes.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let words = self.surfaces.len() as u32 - FIRST_WORD_ID;
        text.split_whitespace()
            .map(|w| {
                if let Some(id) = self.surfaces.iter().position(|s| s == w) {
                    return id as u32;
                }
                let mut h: u32 = 0x811c_9dc5;
                for b in w.bytes() {
                    h ^= b as u32;
                    h = h.wrapping_mul(0x0100_0193);
                }
                FIRST_WORD_ID + h % words
            })
            .collect()
    }

    /// Joins non-special, non-blank surfaces with single spaces.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id >= FIRST_WORD_ID)
            .map(|&id| self.surface(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn word(mut i: usize) -> String {
    let mut out = String::new();
    for _ in 0..2 {
        out.push_str(SYLLABLES[i % SYLLABLES.len()]);
        i /= SYLLABLES.len();
    }
    while i > 0 {
        out.push_str(SYLLABLES[i % SYLLABLES.len()]);
        i /= SYLLABLES.len();
    }
    out
}

/// Row-major `rows x cols` matrix.
#[derive(Debug, Clone)]
struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    fn random(rows: usize, cols: usize, std: f32, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0f32, std).expect("positive std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Self { rows, cols, data }
    }

    fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `x (1 x rows) * self`.
    fn left_mul(&self, x: &[f32]) -> Vec<f32> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0f32; self.cols];
        for (r, &xv) in x.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += xv * w;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Block {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w1: Matrix,
    w2: Matrix,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    cfg: ToyConfig,
    tokenizer: ToyTokenizer,
    embed: Matrix,
    positions: Matrix,
    blocks: Vec<Block>,
    unembed: Matrix,
}

fn fan_in_std(fan_in: usize) -> f32 {
    1.0 / (fan_in as f32).sqrt()
}

impl ToyModel {
    pub fn new(cfg: ToyConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model();
        let kv = cfg.kv_dim();
        let embed = Matrix::random(cfg.vocab, d, 1.0, &mut rng);
        let positions = Matrix::random(cfg.max_context, d, 1.0, &mut rng);
        let blocks = (0..cfg.layers)
            .map(|_| Block {
                wq: Matrix::random(d, d, fan_in_std(d), &mut rng),
                wk: Matrix::random(d, kv, fan_in_std(d), &mut rng),
                wv: Matrix::random(d, kv, fan_in_std(d), &mut rng),
                wo: Matrix::random(d, d, fan_in_std(d), &mut rng),
                w1: Matrix::random(d, 4 * d, fan_in_std(d), &mut rng),
                w2: Matrix::random(4 * d, d, fan_in_std(4 * d), &mut rng),
            })
            .collect();
        let unembed = Matrix::random(d, cfg.vocab, fan_in_std(d), &mut rng);
        Ok(Self {
            tokenizer: ToyTokenizer::new(cfg.vocab),
            cfg,
            embed,
            positions,
            blocks,
            unembed,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    pub fn tokenizer(&self) -> &ToyTokenizer {
        &self.tokenizer
    }

    pub fn dims(&self) -> ModelDims {
        self.cfg.dims()
    }

    pub fn trace_header(&self) -> TraceHeader {
        TraceHeader::new(self.dims(), SinkPolicy::V1, TOKENIZER_NAME)
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(&self.cfg)
    }

    /// FNV-1a over the bit patterns of every weight, in draw order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |m: &Matrix| {
            for v in &m.data {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        };
        eat(&self.embed);
        eat(&self.positions);
        for b in &self.blocks {
            for m in [&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2] {
                eat(m);
            }
        }
        eat(&self.unembed);
        h
    }

    /// Feeds one token, appends its keys/values (evicting per the window),
    /// and returns the snapshot of this step. `snapshot.logits` predict the
    /// next token.
    pub fn forward_step(&self, cache: &mut KvCache, token_id: u32) -> Result<StepSnapshot> {
        let cfg = &self.cfg;
        if token_id as usize >= cfg.vocab {
            return Err(HaveError::Config(format!(
                "token id {token_id} outside vocabulary of {}",
                cfg.vocab
            )));
        }
        if cache.layers.len() != cfg.layers
            || cache.kv_dim != cfg.kv_dim()
            || cache.window != cfg.window
        {
            return Err(HaveError::Config(
                "KV cache does not belong to this model".into(),
            ));
        }
        let position = cache.next_position;
        if position >= cfg.max_context {
            return Err(HaveError::Config(format!(
                "position {position} exceeds max_context {}",
                cfg.max_context
            )));
        }
        cache.admit(position, token_id);

        let hd = cfg.head_dim;
        let group = cfg.heads / cfg.kv_heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut x: Vec<f32> = self
            .embed
            .row(token_id as usize)
            .iter()
            .zip(self.positions.row(position))
            .map(|(a, b)| a + b)
            .collect();

        let ctx = cache.len();
        let mut attention = Vec::with_capacity(cfg.layers * cfg.heads);
        for (layer, block) in self.blocks.iter().enumerate() {
            let h = rms_norm(&x);
            let q = block.wq.left_mul(&h);
            let k = block.wk.left_mul(&h);
            let v = block.wv.left_mul(&h);
            cache.push(layer, k, v);

            let keys = &cache.layers[layer].keys;
            let values = &cache.layers[layer].values;
            let mut mixed = vec![0.0f32; cfg.d_model()];
            for head in 0..cfg.heads {
                let kvh = head / group;
                let qh = &q[head * hd..(head + 1) * hd];
                let logits: Vec<f32> = keys
                    .iter()
                    .map(|k| dot(qh, &k[kvh * hd..(kvh + 1) * hd]) * scale)
                    .collect();
                let weights = softmax_f32(&logits);
                let out = &mut mixed[head * hd..(head + 1) * hd];
                for (w, val) in weights.iter().zip(values) {
                    for (o, &vv) in out.iter_mut().zip(&val[kvh * hd..(kvh + 1) * hd]) {
                        *o += w * vv;
                    }
                }
                attention.push(AttentionRow {
                    layer,
                    head,
                    weights,
                });
            }
            for (xi, a) in x.iter_mut().zip(block.wo.left_mul(&mixed)) {
                *xi += a;
            }
            let h2 = rms_norm(&x);
            let hidden: Vec<f32> = block
                .w1
                .left_mul(&h2)
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            for (xi, m) in x.iter_mut().zip(block.w2.left_mul(&hidden)) {
                *xi += m;
            }
        }
        let logits = self.unembed.left_mul(&rms_norm(&x));

        let policy = self.tokenizer.sink_policy();
        let context = cache
            .tokens
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                let surface = self.tokenizer.surface(id).to_string();
                let is_sink = policy.is_sink(id, &surface);
                ContextToken {
                    position: i,
                    token_id: id,
                    surface,
                    is_sink,
                }
            })
            .collect::<Vec<_>>();
        debug_assert_eq!(context.len(), ctx);

        Ok(StepSnapshot {
            step: position as u64,
            dims: self.dims(),
            context,
            attention,
            value_norms: cache.value_norms(),
            logits,
        })
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rms_norm(x: &[f32]) -> Vec<f32> {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().map(|v| v * inv).collect()
}

fn softmax_f32(z: &[f32]) -> Vec<f32> {
    let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f32 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, Default)]
struct LayerCache {
    /// One `kv_heads * head_dim` vector per visible position, oldest first.
    keys: VecDeque<Vec<f32>>,
    values: VecDeque<Vec<f32>>,
}

/// Per-layer key/value store. Every layer sees the same visible positions.
#[derive(Debug, Clone)]
pub struct KvCache {
    layers: Vec<LayerCache>,
    positions: VecDeque<usize>,
    tokens: VecDeque<u32>,
    window: Option<usize>,
    kv_dim: usize,
    kv_heads: usize,
    next_position: usize,
}

impl KvCache {
    pub fn new(cfg: &ToyConfig) -> Self {
        Self {
            layers: vec![LayerCache::default(); cfg.layers],
            positions: VecDeque::new(),
            tokens: VecDeque::new(),
            window: cfg.window,
            kv_dim: cfg.kv_dim(),
            kv_heads: cfg.kv_heads,
            next_position: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Absolute positions currently visible, oldest first.
    pub fn visible_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.positions.iter().copied()
    }

    fn admit(&mut self, position: usize, token: u32) {
        if let Some(w) = self.window {
            while self.positions.len() >= w {
                self.positions.pop_front();
                self.tokens.pop_front();
                for l in &mut self.layers {
                    l.keys.pop_front();
                    l.values.pop_front();
                }
            }
        }
        self.positions.push_back(position);
        self.tokens.push_back(token);
        self.next_position = position + 1;
    }

    fn push(&mut self, layer: usize, key: Vec<f32>, value: Vec<f32>) {
        let l = &mut self.layers[layer];
        l.keys.push_back(key);
        l.values.push_back(value);
    }

    /// Euclidean norm of every cached value vector, per (layer, kv-head).
    fn value_norms(&self) -> Vec<ValueNorms> {
        let hd = self.kv_dim / self.kv_heads;
        let mut out = Vec::with_capacity(self.layers.len() * self.kv_heads);
        for (layer, l) in self.layers.iter().enumerate() {
            for kv_head in 0..self.kv_heads {
                let norms = l
                    .values
                    .iter()
                    .map(|v| {
                        v[kv_head * hd..(kv_head + 1) * hd]
                            .iter()
                            .map(|x| x * x)
                            .sum::<f32>()
                            .sqrt()
                    })
                    .collect();
                out.push(ValueNorms {
                    layer,
                    kv_head,
                    norms,
                });
            }
        }
        out
    }

    #[cfg(test)]
    fn value_vector(&self, layer: usize, kv_head: usize, index: usize) -> &[f32] {
        let hd = self.kv_dim / self.kv_heads;
        &self.layers[layer].values[index][kv_head * hd..(kv_head + 1) * hd]
    }
}

/// Output of a live run.
#[derive(Debug, Clone)]
pub struct LiveRun {
    pub snapshots: Vec<StepSnapshot>,
    pub generated: Vec<u32>,
    pub steps: Vec<FusedDistribution>,
}

/// Feeds `prompt`, then decodes up to `max_steps` tokens with `policy`,
/// stopping early after emitting `stop`.
pub fn live_decode(
    model: &ToyModel,
    prompt: &[u32],
    policy: &Policy,
    max_steps: usize,
    stop: Option<u32>,
) -> Result<LiveRun> {
    if prompt.is_empty() {
        return Err(HaveError::Config(
            "prompt must contain at least one token".into(),
        ));
    }
    if max_steps == 0 {
        return Err(HaveError::Config("step count must be >= 1".into()));
    }
    let mut cache = model.new_cache();
    let mut snapshot = None;
    for &t in prompt {
        snapshot = Some(model.forward_step(&mut cache, t)?);
    }
    let mut snapshot = snapshot.expect("non-empty prompt");
    let mut run = LiveRun {
        snapshots: Vec::new(),
        generated: Vec::new(),
        steps: Vec::new(),
    };
    loop {
        let fused = policy.select(&snapshot)?;
        let next = fused.chosen;
        run.snapshots.push(snapshot);
        run.generated.push(next);
        run.steps.push(fused);
        if run.generated.len() == max_steps || stop == Some(next) {
            break;
        }
        snapshot = model.forward_step(&mut cache, next)?;
    }
    Ok(run)
}

/// Runs exactly `steps` decoding steps and records every snapshot.
pub fn run_and_trace(
    model: &ToyModel,
    prompt: &[u32],
    steps: usize,
    policy: &Policy,
) -> Result<(TraceFile, Vec<u32>)> {
    let run = live_decode(model, prompt, policy, steps, None)?;
    let trace = TraceFile {
        header: model.trace_header(),
        snapshots: run.snapshots,
    };
    Ok((trace, run.generated))
}
