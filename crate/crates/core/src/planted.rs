//! Constructed snapshots with a known correct next token.
//!
//! Each instance has a near-uniform model distribution over a small set of
//! top candidates, one of which is the gold token. The context contains the
//! gold token once, a competing candidate repeated several times, a sink
//! prefix, a whitespace token and unrelated fillers. A minority of
//! "retrieval" heads attend to the gold position; the remaining heads spread
//! their mass over the repeated competitor. Gold positions carry large value
//! norms, the competitor small ones.
//!
//! With `diluting` set, a lower-ranked token with strong evidence of its own
//! is planted as well. It sits just outside the nominal Top-R set, so it
//! only competes once the support is widened.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::calibration::{CalibrationConfig, SinkPolicy};
use crate::error::{HaveError, Result};
use crate::fusion::{decode_step, greedy_step, Ablation, FusionConfig, HaveConfig};
use crate::snapshot::{
    probabilities, AttentionRow, ContextToken, ModelDims, StepSnapshot, ValueNorms,
};
use crate::synth::softmax32;

const BOS: u32 = 0;
const SPACE: u32 = 2;
const FIRST_CONTENT: u32 = 3;

/// Minimum normalized entropy of an accepted instance.
pub const MIN_ENTROPY: f64 = 0.9;
/// Minimum share of calibrated evidence on the gold token.
pub const MIN_GOLD_SHARE: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedConfig {
    pub vocab: usize,
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub context_len: usize,
    /// Size of the top candidate tier; also the nominal Top-R.
    pub nominal_rank: usize,
    /// Size of the second probability tier (ranks just below the top tier).
    pub second_tier: usize,
    pub retrieval_heads: usize,
    pub competitor_repeats: usize,
    pub diluting: bool,
    /// Replace the logits by an exactly one-hot distribution.
    pub one_hot: bool,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            vocab: 512,
            layers: 2,
            heads: 4,
            kv_heads: 2,
            context_len: 16,
            nominal_rank: 5,
            second_tier: 10,
            retrieval_heads: 3,
            competitor_repeats: 4,
            diluting: false,
            one_hot: false,
        }
    }
}

impl PlantedConfig {
    pub fn with_diluting(self) -> Self {
        Self {
            diluting: true,
            ..self
        }
    }

    pub fn with_one_hot(self) -> Self {
        Self {
            one_hot: true,
            ..self
        }
    }

    fn dims(&self) -> ModelDims {
        ModelDims::new(self.vocab, self.layers, self.heads, self.kv_heads)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedInstance {
    pub snapshot: StepSnapshot,
    pub gold: u32,
    pub competitor: u32,
    pub diluter: u32,
    pub retrieval: Vec<(usize, usize)>,
}

/// Measured construction properties of one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conditions {
    pub gold_in_support: bool,
    pub entropy: f64,
    /// Gold share of the per-position evidence (`diluting` off) or of the
    /// restricted vocabulary evidence (`diluting` on), under full gating and
    /// calibration at the nominal rank.
    pub gold_share: f64,
}

impl Conditions {
    pub fn accepted(&self, cfg: &PlantedConfig) -> bool {
        if cfg.one_hot {
            return true;
        }
        self.gold_in_support && self.entropy >= MIN_ENTROPY && self.gold_share >= MIN_GOLD_SHARE
    }
}

pub fn sink_policy() -> SinkPolicy {
    SinkPolicy::v1([BOS, 1])
}

/// HAVE configuration matching the planted vocabulary's sink policy.
pub fn have_config(alpha: f64, top_rank: usize, ablation: Ablation) -> Result<HaveConfig> {
    Ok(HaveConfig {
        fusion: FusionConfig::new(alpha, top_rank)?,
        calibration: CalibrationConfig {
            sink_policy: sink_policy(),
            ..Default::default()
        },
        ablation,
        ..Default::default()
    })
}

fn surface(id: u32) -> String {
    match id {
        BOS => "<s>".into(),
        1 => "</s>".into(),
        SPACE => " ".into(),
        n => format!("tok{n}"),
    }
}

/// One unfiltered draw. [`generate_suite`] keeps only accepted draws.
pub fn draw<R: Rng + ?Sized>(cfg: &PlantedConfig, rng: &mut R) -> PlantedInstance {
    let dims = cfg.dims();
    let noise = Normal::new(0.0f64, 0.05).expect("valid std");
    let att_noise = Normal::new(0.0f64, 0.3).expect("valid std");

    let mut content: Vec<u32> = (FIRST_CONTENT..cfg.vocab as u32).collect();
    content.shuffle(rng);
    let top = &content[..cfg.nominal_rank];
    let second = &content[cfg.nominal_rank..cfg.nominal_rank + cfg.second_tier];
    let background = &content[cfg.nominal_rank + cfg.second_tier..];

    let gold = *top.choose(rng).expect("non-empty top tier");
    let competitor = *top
        .iter()
        .filter(|&&t| t != gold)
        .collect::<Vec<_>>()
        .choose(rng)
        .copied()
        .expect("top tier has >= 2 ids");
    let diluter = *second.choose(rng).expect("non-empty second tier");

    let mut logits: Vec<f32> = (0..cfg.vocab).map(|_| noise.sample(rng) as f32).collect();
    for &t in top {
        logits[t as usize] += 1.0;
    }
    for &t in second {
        logits[t as usize] += 0.7;
    }
    if cfg.one_hot {
        let hot = *top.choose(rng).expect("non-empty");
        logits.iter_mut().for_each(|z| *z = 0.0);
        logits[hot as usize] = 1000.0;
    }

    // context layout
    let n = cfg.context_len;
    let mut slots: Vec<usize> = (1..n).collect();
    slots.shuffle(rng);
    let mut slots = slots.into_iter();
    let mut ids = vec![u32::MAX; n];
    ids[0] = BOS;
    ids[slots.next().expect("room for space")] = SPACE;
    let gold_pos = slots.next().expect("room for gold");
    ids[gold_pos] = gold;
    let comp_pos: Vec<usize> = (0..cfg.competitor_repeats)
        .map(|_| slots.next().expect("room for competitor"))
        .collect();
    for &p in &comp_pos {
        ids[p] = competitor;
    }
    let dil_pos: Vec<usize> = (0..2)
        .map(|_| slots.next().expect("room for diluter"))
        .collect();
    for &p in &dil_pos {
        ids[p] = diluter;
    }
    for p in slots {
        ids[p] = *background.choose(rng).expect("non-empty background");
    }
    let policy = sink_policy();
    let context: Vec<ContextToken> = ids
        .iter()
        .enumerate()
        .map(|(position, &token_id)| {
            let surface = surface(token_id);
            let is_sink = policy.is_sink(token_id, &surface);
            ContextToken {
                position,
                token_id,
                surface,
                is_sink,
            }
        })
        .collect();

    let mut heads: Vec<(usize, usize)> = (0..cfg.layers)
        .flat_map(|l| (0..cfg.heads).map(move |h| (l, h)))
        .collect();
    heads.shuffle(rng);
    let mut retrieval: Vec<(usize, usize)> = heads[..cfg.retrieval_heads].to_vec();
    retrieval.sort_unstable();

    let dilute_boost = if cfg.diluting { 3.4 } else { 0.0 };
    let mut attention = Vec::with_capacity(dims.head_count());
    for layer in 0..cfg.layers {
        for head in 0..cfg.heads {
            let is_retrieval = retrieval.contains(&(layer, head));
            let mut z: Vec<f64> = (0..n).map(|_| att_noise.sample(rng)).collect();
            z[0] += 1.0;
            if is_retrieval {
                z[gold_pos] += 4.0 + rng.random_range(0.0..0.5);
                for &p in &dil_pos {
                    z[p] += dilute_boost * 0.9;
                }
            } else {
                for &p in &comp_pos {
                    z[p] += 2.8 + rng.random_range(0.0..0.4);
                }
                z[gold_pos] += 0.3;
                for &p in &dil_pos {
                    z[p] += dilute_boost;
                }
            }
            attention.push(AttentionRow {
                layer,
                head,
                weights: softmax32(&z),
            });
        }
    }

    let mut value_norms = Vec::with_capacity(cfg.layers * cfg.kv_heads);
    for layer in 0..cfg.layers {
        for kv_head in 0..cfg.kv_heads {
            let norms = (0..n)
                .map(|p| {
                    let range = if p == gold_pos {
                        5.0..7.0
                    } else if comp_pos.contains(&p) {
                        0.6..1.0
                    } else if dil_pos.contains(&p) && cfg.diluting {
                        5.0..7.0
                    } else if p == 0 {
                        0.3..0.5
                    } else {
                        0.8..1.2
                    };
                    rng.random_range(range) as f32
                })
                .collect();
            value_norms.push(ValueNorms {
                layer,
                kv_head,
                norms,
            });
        }
    }

    PlantedInstance {
        snapshot: StepSnapshot {
            step: 0,
            dims,
            context,
            attention,
            value_norms,
            logits,
        },
        gold,
        competitor,
        diluter,
        retrieval,
    }
}

/// Measures the construction properties of `inst`.
pub fn conditions(inst: &PlantedInstance, cfg: &PlantedConfig) -> Result<Conditions> {
    let p = probabilities(&inst.snapshot.logits)?;
    let full = decode_step(
        &inst.snapshot,
        &have_config(1.0, cfg.nominal_rank, Ablation::FULL)?,
    )?;
    let gold_share = if cfg.diluting {
        full.evidence
            .vocab_scores
            .get(&inst.gold)
            .copied()
            .unwrap_or(0.0)
    } else {
        let total: f64 = full.evidence.ctx_scores.iter().sum();
        let gold: f64 = inst
            .snapshot
            .context
            .iter()
            .zip(&full.evidence.ctx_scores)
            .filter(|(t, _)| t.token_id == inst.gold)
            .map(|(_, u)| u)
            .sum();
        if total > 0.0 {
            gold / total
        } else {
            0.0
        }
    };
    Ok(Conditions {
        gold_in_support: full.support.contains(&inst.gold),
        entropy: crate::fusion::normalized_entropy(&p)?,
        gold_share,
    })
}

/// Draws `count` instances that satisfy the construction conditions.
/// Rejected draws are discarded; the seed fixes the whole suite.
pub fn generate_suite(
    cfg: &PlantedConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<PlantedInstance>> {
    if cfg.nominal_rank < 2 || cfg.context_len < cfg.competitor_repeats + 5 {
        return Err(HaveError::Config("planted suite shape is too small".into()));
    }
    if cfg.retrieval_heads > cfg.layers * cfg.heads {
        return Err(HaveError::Config("more retrieval heads than heads".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let max_draws = count.saturating_mul(50).max(100);
    for _ in 0..max_draws {
        if out.len() == count {
            break;
        }
        let inst = draw(cfg, &mut rng);
        if conditions(&inst, cfg)?.accepted(cfg) {
            out.push(inst);
        }
    }
    if out.len() < count {
        return Err(HaveError::Config(format!(
            "only {} of {count} planted instances met the construction conditions",
            out.len()
        )));
    }
    Ok(out)
}

/// Fraction of instances where HAVE under `cfg` picks the gold token.
pub fn have_gold_rate(suite: &[PlantedInstance], cfg: &HaveConfig) -> Result<f64> {
    let mut hits = 0usize;
    for inst in suite {
        if decode_step(&inst.snapshot, cfg)?.chosen == inst.gold {
            hits += 1;
        }
    }
    Ok(hits as f64 / suite.len().max(1) as f64)
}

pub fn greedy_gold_rate(suite: &[PlantedInstance]) -> Result<f64> {
    let mut hits = 0usize;
    for inst in suite {
        if greedy_step(&inst.snapshot)? == inst.gold {
            hits += 1;
        }
    }
    Ok(hits as f64 / suite.len().max(1) as f64)
}

/// Gold-selection rate of full HAVE at each `alpha` (rank fixed).
pub fn sweep_alpha(
    suite: &[PlantedInstance],
    alphas: &[f64],
    top_rank: usize,
) -> Result<Vec<(f64, f64)>> {
    alphas
        .iter()
        .map(|&a| {
            Ok((
                a,
                have_gold_rate(suite, &have_config(a, top_rank, Ablation::FULL)?)?,
            ))
        })
        .collect()
}

/// Gold-selection rate of full HAVE at each Top-R (alpha fixed).
pub fn sweep_rank(
    suite: &[PlantedInstance],
    ranks: &[usize],
    alpha: f64,
) -> Result<Vec<(f64, f64)>> {
    ranks
        .iter()
        .map(|&r| {
            Ok((
                r as f64,
                have_gold_rate(suite, &have_config(alpha, r, Ablation::FULL)?)?,
            ))
        })
        .collect()
}
