//! Value calibration: turns attention rows and value norms into a
//! vocabulary-aligned evidence distribution confined to the Top-R support.
//!
//! Per head: mask sink tokens and renormalize, weight by the value norm,
//! renormalize within the head. Heads are then combined with the gating
//! weights (optionally scaled per position by a logistic estimator mask),
//! projected onto token ids and restricted to the candidate set. When the
//! restricted mass vanishes the pipeline is rerun with uniform head weights
//! and no estimator mask; if that also vanishes the evidence is empty.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{HaveError, Result};
use crate::gating::{DedupWeights, HeadWeights};
use crate::snapshot::{ContextToken, StepSnapshot};

/// Stabilizer used in every renormalization.
pub const DEFAULT_EPSILON: f64 = 1e-12;
/// Restricted evidence mass below which the gated path counts as degenerate.
pub const DEFAULT_FALLBACK_THRESHOLD: f64 = 1e-6;

/// Identifies how sink tokens are classified.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SinkPolicy {
    pub id: u16,
    pub special_ids: BTreeSet<u32>,
}

impl SinkPolicy {
    /// Special ids plus empty or whitespace-only surfaces.
    pub const V1: u16 = 1;

    pub fn v1(special_ids: impl IntoIterator<Item = u32>) -> Self {
        Self {
            id: Self::V1,
            special_ids: special_ids.into_iter().collect(),
        }
    }

    /// Recovers the special-id set from the sink flags recorded in a trace:
    /// any flagged token whose surface is not whitespace counts as special.
    pub fn from_recorded<'a>(snapshots: impl IntoIterator<Item = &'a StepSnapshot>) -> Self {
        let mut special = BTreeSet::new();
        for s in snapshots {
            for tok in &s.context {
                if tok.is_sink && !is_blank(&tok.surface) {
                    special.insert(tok.token_id);
                }
            }
        }
        Self {
            id: Self::V1,
            special_ids: special,
        }
    }

    pub fn is_sink(&self, token_id: u32, surface: &str) -> bool {
        self.special_ids.contains(&token_id) || is_blank(surface)
    }
}

impl Default for SinkPolicy {
    fn default() -> Self {
        Self::v1([])
    }
}

fn is_blank(surface: &str) -> bool {
    surface.chars().all(char::is_whitespace)
}

/// `true` marks a position that keeps its attention (not a sink).
pub fn sink_mask(context: &[ContextToken], policy: &SinkPolicy) -> Vec<bool> {
    context
        .iter()
        .map(|t| !policy.is_sink(t.token_id, &t.surface))
        .collect()
}

/// Zeroes masked positions and renormalizes the surviving mass.
pub fn sink_correct(row: &[f64], mask: &[bool], eps: f64) -> Vec<f64> {
    let kept: f64 = row
        .iter()
        .zip(mask)
        .map(|(&a, &keep)| if keep { a } else { 0.0 })
        .sum();
    let denom = kept + eps;
    row.iter()
        .zip(mask)
        .map(|(&a, &keep)| if keep { a / denom } else { 0.0 })
        .collect()
}

/// Attention times value norm, elementwise.
pub fn value_augment(a_tilde: &[f64], norms: &[f64]) -> Result<Vec<f64>> {
    if a_tilde.len() != norms.len() {
        return Err(HaveError::DimensionMismatch {
            what: "value norms",
            expected: a_tilde.len(),
            found: norms.len(),
        });
    }
    Ok(a_tilde.iter().zip(norms).map(|(a, n)| a * n).collect())
}

pub fn head_normalize(r: &[f64], eps: f64) -> Vec<f64> {
    let denom = r.iter().sum::<f64>() + eps;
    r.iter().map(|v| v / denom).collect()
}

/// Calibrated evidence of one (layer, head).
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedHead {
    pub layer: usize,
    pub head: usize,
    /// Sink-corrected attention.
    pub a_tilde: Vec<f64>,
    /// Within-head normalized evidence. Equals `a_tilde` when value
    /// augmentation is off.
    pub r_hat: Vec<f64>,
}

/// Runs sink correction and (optionally) value augmentation for every head.
pub fn calibrate_heads(
    s: &StepSnapshot,
    mask: &[bool],
    eps: f64,
    augment_values: bool,
) -> Result<Vec<CalibratedHead>> {
    let dims = s.dims;
    let ctx = s.context_len();
    if mask.len() != ctx {
        return Err(HaveError::DimensionMismatch {
            what: "sink mask",
            expected: ctx,
            found: mask.len(),
        });
    }
    let mut out = Vec::with_capacity(dims.head_count());
    for layer in 0..dims.layers {
        for head in 0..dims.heads {
            let row: Vec<f64> = s
                .attention_row(layer, head)
                .iter()
                .map(|&a| a as f64)
                .collect();
            if row.len() != ctx {
                return Err(HaveError::DimensionMismatch {
                    what: "attention row",
                    expected: ctx,
                    found: row.len(),
                });
            }
            let a_tilde = sink_correct(&row, mask, eps);
            let r_hat = if augment_values {
                let norms: Vec<f64> = s
                    .value_norms_for_head(layer, head)
                    .iter()
                    .map(|&n| n as f64)
                    .collect();
                head_normalize(&value_augment(&a_tilde, &norms)?, eps)
            } else {
                a_tilde.clone()
            };
            out.push(CalibratedHead {
                layer,
                head,
                a_tilde,
                r_hat,
            });
        }
    }
    Ok(out)
}

/// Names of the estimator feature channels, in order.
pub const FEATURE_NAMES: [&str; 7] = [
    "gated_attention",
    "gated_calibrated",
    "max_attention",
    "max_calibrated",
    "value_norm_z",
    "relative_position",
    "dedup_weight",
];
pub const FEATURE_COUNT: usize = FEATURE_NAMES.len();

pub type Features = [f64; FEATURE_COUNT];

/// Logistic per-position mask parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSpec {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub enabled: bool,
}

impl EstimatorSpec {
    /// Parses `w[i] <float>` lines (one per feature) and a `b <float>` line.
    /// Blank lines and `#` comments (whole-line or trailing) are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut weights: Vec<Option<f64>> = vec![None; FEATURE_COUNT];
        let mut bias = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| HaveError::Config(format!("estimator line {}: {msg}", n + 1));
            let mut parts = line.split_whitespace();
            let (Some(key), Some(value), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad("expected `<key> <value>`"));
            };
            let value: f64 = value.parse().map_err(|_| bad("value is not a number"))?;
            if !value.is_finite() {
                return Err(bad("value is not finite"));
            }
            if key == "b" {
                bias = Some(value);
                continue;
            }
            let idx = key
                .strip_prefix("w[")
                .and_then(|k| k.strip_suffix(']'))
                .and_then(|k| k.parse::<usize>().ok())
                .ok_or_else(|| bad("unknown key"))?;
            if idx >= FEATURE_COUNT {
                return Err(HaveError::LayoutMismatch {
                    expected: FEATURE_COUNT,
                    found: idx + 1,
                });
            }
            weights[idx] = Some(value);
        }
        let found = weights.iter().filter(|w| w.is_some()).count();
        let weights: Option<Vec<f64>> = weights.into_iter().collect();
        let weights = weights.ok_or(HaveError::LayoutMismatch {
            expected: FEATURE_COUNT,
            found,
        })?;
        let bias =
            bias.ok_or_else(|| HaveError::Config("estimator file has no `b` line".into()))?;
        Ok(Self {
            weights,
            bias,
            enabled: true,
        })
    }
}

/// Builds the per-position feature vectors consumed by the estimator.
pub fn estimator_features(
    s: &StepSnapshot,
    heads: &[CalibratedHead],
    hw: &HeadWeights,
    omega: &DedupWeights,
) -> Vec<Features> {
    let ctx = s.context_len();
    let dims = s.dims;

    let mean_norm: Vec<f64> = (0..ctx)
        .map(|j| {
            let total: f64 = s.value_norms.iter().map(|v| v.norms[j] as f64).sum();
            total / s.value_norms.len().max(1) as f64
        })
        .collect();
    let mu = mean_norm.iter().sum::<f64>() / ctx.max(1) as f64;
    let var = mean_norm.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / ctx.max(1) as f64;
    let sd = var.sqrt();

    (0..ctx)
        .map(|j| {
            let mut f = [0.0; FEATURE_COUNT];
            for h in heads {
                let w = hw.get(h.layer, h.head);
                f[0] += w * h.a_tilde[j];
                f[1] += w * h.r_hat[j];
                f[2] = f[2].max(h.a_tilde[j]);
                f[3] = f[3].max(h.r_hat[j]);
            }
            f[4] = if sd > 1e-12 {
                (mean_norm[j] - mu) / sd
            } else {
                0.0
            };
            f[5] = j as f64 / ctx as f64;
            f[6] = omega.omega[j];
            debug_assert_eq!(heads.len(), dims.head_count());
            f
        })
        .collect()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn estimator_mask(features: &[Features], spec: &EstimatorSpec) -> Result<Vec<f64>> {
    if spec.weights.len() != FEATURE_COUNT {
        return Err(HaveError::LayoutMismatch {
            expected: FEATURE_COUNT,
            found: spec.weights.len(),
        });
    }
    Ok(features
        .iter()
        .map(|f| {
            let z: f64 = f.iter().zip(&spec.weights).map(|(x, w)| x * w).sum::<f64>() + spec.bias;
            logistic(z)
        })
        .collect())
}

/// Weighted sum of calibrated heads per context position, optionally
/// scaled by a per-position mask.
pub fn aggregate_evidence(
    heads: &[CalibratedHead],
    hw: &HeadWeights,
    mask: Option<&[f64]>,
) -> Vec<f64> {
    let ctx = heads.first().map_or(0, |h| h.r_hat.len());
    let mut u = vec![0.0; ctx];
    for h in heads {
        let w = hw.get(h.layer, h.head);
        for (acc, r) in u.iter_mut().zip(&h.r_hat) {
            *acc += w * r;
        }
    }
    if let Some(m) = mask {
        for (acc, m) in u.iter_mut().zip(m) {
            *acc *= m;
        }
    }
    u
}

/// Sums position scores per token id. Positions with zero score add no key.
pub fn project_to_vocab(u_ctx: &[f64], context: &[ContextToken]) -> Result<BTreeMap<u32, f64>> {
    if u_ctx.len() != context.len() {
        return Err(HaveError::DimensionMismatch {
            what: "context scores",
            expected: context.len(),
            found: u_ctx.len(),
        });
    }
    let mut out = BTreeMap::new();
    for (&u, tok) in u_ctx.iter().zip(context) {
        if u != 0.0 {
            *out.entry(tok.token_id).or_insert(0.0) += u;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Restricted {
    Evidence(BTreeMap<u32, f64>),
    /// Surviving mass fell below the fallback threshold.
    Degenerate {
        mass: f64,
    },
}

/// Drops ids outside `support` and renormalizes what survives.
pub fn restrict_top_r(
    u: &BTreeMap<u32, f64>,
    support: &BTreeSet<u32>,
    eps: f64,
    threshold: f64,
) -> Restricted {
    let kept: Vec<(u32, f64)> = u
        .iter()
        .filter(|(id, _)| support.contains(id))
        .map(|(&id, &m)| (id, m))
        .collect();
    let mass: f64 = kept.iter().map(|(_, m)| m).sum();
    if mass.is_nan() || mass < threshold {
        return Restricted::Degenerate { mass };
    }
    let denom = mass + eps;
    Restricted::Evidence(kept.into_iter().map(|(id, m)| (id, m / denom)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationConfig {
    pub sink_policy: SinkPolicy,
    pub epsilon: f64,
    pub fallback_threshold: f64,
    pub estimator: Option<EstimatorSpec>,
    /// Attention x value-norm evidence; off means sink-corrected attention only.
    pub augment_values: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            sink_policy: SinkPolicy::default(),
            epsilon: DEFAULT_EPSILON,
            fallback_threshold: DEFAULT_FALLBACK_THRESHOLD,
            estimator: None,
            augment_values: true,
        }
    }
}

impl CalibrationConfig {
    fn active_estimator(&self) -> Option<&EstimatorSpec> {
        self.estimator.as_ref().filter(|e| e.enabled)
    }
}

/// Evidence for one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEvidence {
    /// Per-position scores of whichever path produced the evidence.
    pub ctx_scores: Vec<f64>,
    /// Restricted, renormalized vocabulary evidence. Empty on total degeneracy.
    pub vocab_scores: BTreeMap<u32, f64>,
    pub fallback_used: bool,
}

impl TokenEvidence {
    pub fn empty(ctx: usize) -> Self {
        Self {
            ctx_scores: vec![0.0; ctx],
            vocab_scores: BTreeMap::new(),
            fallback_used: false,
        }
    }

    pub fn mass(&self) -> f64 {
        self.vocab_scores.values().fold(0.0, |acc, m| acc + m)
    }
}

/// Context scores from uniform head weights with no estimator mask.
pub fn fallback_evidence(s: &StepSnapshot, cfg: &CalibrationConfig) -> Result<Vec<f64>> {
    let mask = sink_mask(&s.context, &cfg.sink_policy);
    let heads = calibrate_heads(s, &mask, cfg.epsilon, cfg.augment_values)?;
    let uniform = HeadWeights::uniform(s.dims.layers, s.dims.heads);
    Ok(aggregate_evidence(&heads, &uniform, None))
}

/// Composes the whole calibration path for one snapshot.
pub fn build_utilization(
    s: &StepSnapshot,
    hw: &HeadWeights,
    support: &BTreeSet<u32>,
    cfg: &CalibrationConfig,
) -> Result<TokenEvidence> {
    let mask = sink_mask(&s.context, &cfg.sink_policy);
    let heads = calibrate_heads(s, &mask, cfg.epsilon, cfg.augment_values)?;

    let est_mask = match cfg.active_estimator() {
        Some(spec) => {
            let omega = crate::gating::dedup_weights(&s.context)?;
            let features = estimator_features(s, &heads, hw, &omega);
            Some(estimator_mask(&features, spec)?)
        }
        None => None,
    };
    let u_ctx = aggregate_evidence(&heads, hw, est_mask.as_deref());
    let projected = project_to_vocab(&u_ctx, &s.context)?;
    if let Restricted::Evidence(vocab_scores) =
        restrict_top_r(&projected, support, cfg.epsilon, cfg.fallback_threshold)
    {
        return Ok(TokenEvidence {
            ctx_scores: u_ctx,
            vocab_scores,
            fallback_used: false,
        });
    }

    let u_fb = fallback_evidence(s, cfg)?;
    let projected = project_to_vocab(&u_fb, &s.context)?;
    let vocab_scores =
        match restrict_top_r(&projected, support, cfg.epsilon, cfg.fallback_threshold) {
            Restricted::Evidence(v) => v,
            Restricted::Degenerate { .. } => BTreeMap::new(),
        };
    Ok(TokenEvidence {
        ctx_scores: u_fb,
        vocab_scores,
        fallback_used: true,
    })
}
