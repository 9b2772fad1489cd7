//! Instance-level soft head gating.
//!
//! Each (layer, head) gets a context-sensitivity score from its raw last-row
//! attention, weighted so that repeated tokens share one unit of credit.
//! Scores are normalized into instance weights, optionally multiplied by
//! base priors, floored at `eta` and renormalized. Every head keeps a
//! strictly positive weight.

use std::collections::HashMap;

use crate::error::{HaveError, Result};
use crate::snapshot::{ContextToken, StepSnapshot};

pub const DEFAULT_ETA: f64 = 1e-4;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Dense `layers x heads` matrix, row-major by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMatrix {
    pub layers: usize,
    pub heads: usize,
    pub values: Vec<f64>,
}

impl HeadMatrix {
    pub fn new(layers: usize, heads: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != layers * heads {
            return Err(HaveError::DimensionMismatch {
                what: "head matrix",
                expected: layers * heads,
                found: values.len(),
            });
        }
        Ok(Self {
            layers,
            heads,
            values,
        })
    }

    pub fn filled(layers: usize, heads: usize, value: f64) -> Self {
        Self {
            layers,
            heads,
            values: vec![value; layers * heads],
        }
    }

    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.values[layer * self.heads + head]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Parses whitespace-separated numbers, one layer per non-empty line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|_| {
                        HaveError::Config(format!("line {}: bad number {tok:?}", n + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let heads = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || rows.iter().any(|r| r.len() != heads) {
            return Err(HaveError::Config(
                "head matrix rows are empty or ragged".into(),
            ));
        }
        let layers = rows.len();
        Self::new(layers, heads, rows.concat())
    }
}

/// Per-position weights that split one unit of credit across all
/// occurrences of the same token id.
#[derive(Debug, Clone, PartialEq)]
pub struct DedupWeights {
    pub omega: Vec<f64>,
}

pub fn dedup_weights(context: &[ContextToken]) -> Result<DedupWeights> {
    if context.is_empty() {
        return Err(HaveError::EmptyContext);
    }
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for tok in context {
        *counts.entry(tok.token_id).or_default() += 1;
    }
    let omega = context
        .iter()
        .map(|tok| 1.0 / counts[&tok.token_id] as f64)
        .collect();
    Ok(DedupWeights { omega })
}

/// Context-sensitivity scores, one per (layer, head).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadScores(pub HeadMatrix);

/// Scores on RAW attention, before any sink masking.
pub fn head_scores(s: &StepSnapshot, omega: &DedupWeights) -> Result<HeadScores> {
    let ctx = s.context_len();
    if omega.omega.len() != ctx {
        return Err(HaveError::DimensionMismatch {
            what: "dedup weights",
            expected: ctx,
            found: omega.omega.len(),
        });
    }
    let dims = s.dims;
    let mut values = Vec::with_capacity(dims.head_count());
    for layer in 0..dims.layers {
        for head in 0..dims.heads {
            let row = s.attention_row(layer, head);
            if row.len() != ctx {
                return Err(HaveError::DimensionMismatch {
                    what: "attention row",
                    expected: ctx,
                    found: row.len(),
                });
            }
            let score: f64 = row
                .iter()
                .zip(&omega.omega)
                .map(|(&a, &w)| a as f64 * w)
                .sum();
            values.push(score);
        }
    }
    Ok(HeadScores(HeadMatrix::new(
        dims.layers,
        dims.heads,
        values,
    )?))
}

/// Softmax over `log(s + epsilon)`. Since `exp(log x) = x` this is the
/// proportional normalization `(s + epsilon) / sum(s + epsilon)`; the
/// exp/log form is kept and tested against the closed form. A zero total
/// (only possible with `epsilon == 0`) falls back to uniform.
pub fn instance_weights(scores: &HeadScores, epsilon: f64) -> HeadMatrix {
    let m = &scores.0;
    let logs: Vec<f64> = m.values.iter().map(|&s| (s + epsilon).ln()).collect();
    let exps: Vec<f64> = logs.iter().map(|l| l.exp()).collect();
    let total: f64 = exps.iter().sum();
    let values = if total > 0.0 && total.is_finite() {
        exps.iter().map(|e| e / total).collect()
    } else {
        vec![1.0 / m.len() as f64; m.len()]
    };
    HeadMatrix {
        layers: m.layers,
        heads: m.heads,
        values,
    }
}

/// Final per-head weights: strictly positive and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub weights: HeadMatrix,
    pub eta: f64,
    pub epsilon: f64,
}

impl HeadWeights {
    /// Equal weight `1 / (layers * heads)` for every head.
    pub fn uniform(layers: usize, heads: usize) -> Self {
        let n = (layers * heads).max(1);
        Self {
            weights: HeadMatrix::filled(layers, heads, 1.0 / n as f64),
            eta: 0.0,
            epsilon: 0.0,
        }
    }

    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.weights.get(layer, head)
    }

    pub fn min(&self) -> f64 {
        self.weights
            .values
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.weights
            .values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `w ∝ max(base * inst, eta)`, renormalized. Missing base priors count as
/// all ones.
pub fn gate_heads(inst: &HeadMatrix, base: Option<&HeadMatrix>, eta: f64) -> Result<HeadWeights> {
    if eta.is_nan() || eta <= 0.0 {
        return Err(HaveError::Domain(format!(
            "eta must be positive, got {eta}"
        )));
    }
    if let Some(b) = base {
        if b.len() != inst.len() {
            return Err(HaveError::DimensionMismatch {
                what: "base head priors",
                expected: inst.len(),
                found: b.len(),
            });
        }
        if b.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(HaveError::Domain(
                "base priors must be finite and non-negative".into(),
            ));
        }
    }
    let floored: Vec<f64> = inst
        .values
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let prior = base.map_or(1.0, |b| b.values[i]);
            (prior * w).max(eta)
        })
        .collect();
    let total: f64 = floored.iter().sum();
    Ok(HeadWeights {
        weights: HeadMatrix {
            layers: inst.layers,
            heads: inst.heads,
            values: floored.into_iter().map(|v| v / total).collect(),
        },
        eta,
        epsilon: 0.0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatingConfig {
    pub eta: f64,
    pub epsilon: f64,
    pub base: Option<HeadMatrix>,
}

impl Default for GatingConfig {
    fn default() -> Self {
        Self {
            eta: DEFAULT_ETA,
            epsilon: DEFAULT_EPSILON,
            base: None,
        }
    }
}

/// Full gating pass over one snapshot.
pub fn compute_head_weights(s: &StepSnapshot, cfg: &GatingConfig) -> Result<HeadWeights> {
    let omega = dedup_weights(&s.context)?;
    let scores = head_scores(s, &omega)?;
    let inst = instance_weights(&scores, cfg.epsilon);
    let mut hw = gate_heads(&inst, cfg.base.as_ref(), cfg.eta)?;
    hw.epsilon = cfg.epsilon;
    Ok(hw)
}
