//! Per-step activation snapshots.
//!
//! A [`StepSnapshot`] holds everything the decoder consumes at one step:
//! the visible context, the last-row attention of every (layer, head), the
//! Euclidean norms of the cached value vectors of every (layer, kv-head),
//! and the raw logits. Tensors are kept as `f32` to match the trace format;
//! all downstream arithmetic widens to `f64`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{HaveError, Result};

/// Tolerance on attention row sums accepted by [`validate_snapshot`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Model shape shared by a trace header and each of its snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
}

impl ModelDims {
    pub fn new(vocab: usize, layers: usize, heads: usize, kv_heads: usize) -> Self {
        Self {
            vocab,
            layers,
            heads,
            kv_heads,
        }
    }

    /// Number of query heads sharing one kv-head. Zero when the shape is
    /// not divisible (validation reports that case).
    pub fn gqa_group_size(&self) -> usize {
        if self.kv_heads == 0 || !self.heads.is_multiple_of(self.kv_heads) {
            0
        } else {
            self.heads / self.kv_heads
        }
    }

    /// kv-head that query head `head` reads its values from.
    pub fn kv_head_of(&self, head: usize) -> usize {
        head / self.gqa_group_size().max(1)
    }

    pub fn head_count(&self) -> usize {
        self.layers * self.heads
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextToken {
    /// 0-based index into the visible context.
    pub position: usize,
    pub token_id: u32,
    /// Token text exactly as the tokenizer renders it.
    pub surface: String,
    pub is_sink: bool,
}

impl ContextToken {
    pub fn new(position: usize, token_id: u32, surface: impl Into<String>, is_sink: bool) -> Self {
        Self {
            position,
            token_id,
            surface: surface.into(),
            is_sink,
        }
    }
}

/// Last-row attention of one (layer, head) over the visible context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub layer: usize,
    pub head: usize,
    pub weights: Vec<f32>,
}

/// Norms of the cached value vectors of one (layer, kv-head).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueNorms {
    pub layer: usize,
    pub kv_head: usize,
    pub norms: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSnapshot {
    pub step: u64,
    pub dims: ModelDims,
    pub context: Vec<ContextToken>,
    /// `layers * heads` rows ordered by (layer, head).
    pub attention: Vec<AttentionRow>,
    /// `layers * kv_heads` entries ordered by (layer, kv-head).
    pub value_norms: Vec<ValueNorms>,
    pub logits: Vec<f32>,
}

impl StepSnapshot {
    pub fn context_len(&self) -> usize {
        self.context.len()
    }

    pub fn gqa_group_size(&self) -> usize {
        self.dims.gqa_group_size()
    }

    /// Attention weights of `(layer, head)`. Assumes the (layer, head) row
    /// ordering checked by [`validate_snapshot`].
    pub fn attention_row(&self, layer: usize, head: usize) -> &[f32] {
        &self.attention[layer * self.dims.heads + head].weights
    }

    /// Value norms seen by query head `(layer, head)` through the GQA grouping.
    pub fn value_norms_for_head(&self, layer: usize, head: usize) -> &[f32] {
        let kv = self.dims.kv_head_of(head);
        &self.value_norms[layer * self.dims.kv_heads + kv].norms
    }

    pub fn token_ids(&self) -> Vec<u32> {
        self.context.iter().map(|t| t.token_id).collect()
    }

    /// Fails with the first structural violation, if any. Attention rows that
    /// are merely off-normalization are accepted.
    pub fn ensure_well_formed(&self) -> Result<()> {
        let report = validate_snapshot(self, &self.dims);
        match report.violations.iter().find(|v| v.is_structural()) {
            Some(v) => Err(HaveError::InvalidSnapshot(v.to_string())),
            None => Ok(()),
        }
    }
}

/// One violated snapshot invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    ZeroDimension(&'static str),
    HeadDivisibility {
        heads: usize,
        kv_heads: usize,
    },
    DimsDiffer {
        snapshot: ModelDims,
        header: ModelDims,
    },
    EmptyContext,
    ContextPosition {
        index: usize,
        found: usize,
    },
    TokenOutOfVocab {
        position: usize,
        token_id: u32,
    },
    AttentionRowCount {
        expected: usize,
        found: usize,
    },
    AttentionRowOrder {
        index: usize,
        layer: usize,
        head: usize,
    },
    AttentionRowLength {
        layer: usize,
        head: usize,
        expected: usize,
        found: usize,
    },
    AttentionNonFinite {
        layer: usize,
        head: usize,
    },
    AttentionOutOfRange {
        layer: usize,
        head: usize,
        position: usize,
        value: f32,
    },
    AttentionNotNormalized {
        layer: usize,
        head: usize,
        sum: f64,
    },
    ValueNormCount {
        expected: usize,
        found: usize,
    },
    ValueNormOrder {
        index: usize,
        layer: usize,
        kv_head: usize,
    },
    ValueNormLength {
        layer: usize,
        kv_head: usize,
        expected: usize,
        found: usize,
    },
    ValueNormInvalid {
        layer: usize,
        kv_head: usize,
        position: usize,
        value: f32,
    },
    LogitCount {
        expected: usize,
        found: usize,
    },
    LogitNonFinite {
        index: usize,
    },
}

impl Violation {
    /// Structural violations make a snapshot unusable by the pipeline;
    /// normalization drift does not.
    pub fn is_structural(&self) -> bool {
        !matches!(
            self,
            Violation::AttentionNotNormalized { .. } | Violation::TokenOutOfVocab { .. }
        )
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            ZeroDimension(what) => write!(f, "{what} is zero"),
            HeadDivisibility { heads, kv_heads } => {
                write!(f, "heads ({heads}) not divisible by kv_heads ({kv_heads})")
            }
            DimsDiffer { snapshot, header } => {
                write!(
                    f,
                    "snapshot dims {snapshot:?} differ from header {header:?}"
                )
            }
            EmptyContext => write!(f, "empty context"),
            ContextPosition { index, found } => {
                write!(f, "context token {index} has position {found}")
            }
            TokenOutOfVocab { position, token_id } => {
                write!(
                    f,
                    "context token at {position} has id {token_id} outside the vocabulary"
                )
            }
            AttentionRowCount { expected, found } => {
                write!(f, "expected {expected} attention rows, found {found}")
            }
            AttentionRowOrder { index, layer, head } => {
                write!(
                    f,
                    "attention row {index} labelled ({layer}, {head}) out of order"
                )
            }
            AttentionRowLength {
                layer,
                head,
                expected,
                found,
            } => write!(
                f,
                "attention row ({layer}, {head}) has length {found}, context has {expected}"
            ),
            AttentionNonFinite { layer, head } => {
                write!(f, "attention row ({layer}, {head}) contains NaN/Inf")
            }
            AttentionOutOfRange {
                layer,
                head,
                position,
                value,
            } => write!(
                f,
                "attention ({layer}, {head}) at {position} is {value}, outside [0, 1]"
            ),
            AttentionNotNormalized { layer, head, sum } => {
                write!(f, "attention row ({layer}, {head}) sums to {sum}")
            }
            ValueNormCount { expected, found } => {
                write!(f, "expected {expected} value-norm rows, found {found}")
            }
            ValueNormOrder {
                index,
                layer,
                kv_head,
            } => {
                write!(
                    f,
                    "value-norm row {index} labelled ({layer}, {kv_head}) out of order"
                )
            }
            ValueNormLength {
                layer,
                kv_head,
                expected,
                found,
            } => write!(
                f,
                "value norms ({layer}, {kv_head}) have length {found}, context has {expected}"
            ),
            ValueNormInvalid {
                layer,
                kv_head,
                position,
                value,
            } => write!(
                f,
                "value norm ({layer}, {kv_head}) at {position} is {value}"
            ),
            LogitCount { expected, found } => {
                write!(f, "expected {expected} logits, found {found}")
            }
            LogitNonFinite { index } => write!(f, "logit {index} is NaN/Inf"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every snapshot invariant against the trace header dimensions.
/// Never aborts: an empty report means the snapshot is valid.
pub fn validate_snapshot(s: &StepSnapshot, header: &ModelDims) -> ValidationReport {
    let mut out = Vec::new();
    let dims = *header;

    for (name, value) in [
        ("vocab", dims.vocab),
        ("layers", dims.layers),
        ("heads", dims.heads),
        ("kv_heads", dims.kv_heads),
    ] {
        if value == 0 {
            out.push(Violation::ZeroDimension(name));
        }
    }
    if dims.kv_heads != 0 && !dims.heads.is_multiple_of(dims.kv_heads) {
        out.push(Violation::HeadDivisibility {
            heads: dims.heads,
            kv_heads: dims.kv_heads,
        });
    }
    if s.dims != dims {
        out.push(Violation::DimsDiffer {
            snapshot: s.dims,
            header: dims,
        });
    }

    let ctx_len = s.context.len();
    if ctx_len == 0 {
        out.push(Violation::EmptyContext);
    }
    for (i, tok) in s.context.iter().enumerate() {
        if tok.position != i {
            out.push(Violation::ContextPosition {
                index: i,
                found: tok.position,
            });
        }
        if tok.token_id as usize >= dims.vocab {
            out.push(Violation::TokenOutOfVocab {
                position: i,
                token_id: tok.token_id,
            });
        }
    }

    let expected_rows = dims.layers * dims.heads;
    if s.attention.len() != expected_rows {
        out.push(Violation::AttentionRowCount {
            expected: expected_rows,
            found: s.attention.len(),
        });
    }
    for (i, row) in s.attention.iter().enumerate() {
        let (layer, head) = (row.layer, row.head);
        if dims.heads > 0 && (layer != i / dims.heads || head != i % dims.heads) {
            out.push(Violation::AttentionRowOrder {
                index: i,
                layer,
                head,
            });
        }
        if row.weights.len() != ctx_len {
            out.push(Violation::AttentionRowLength {
                layer,
                head,
                expected: ctx_len,
                found: row.weights.len(),
            });
            continue;
        }
        if row.weights.iter().any(|w| !w.is_finite()) {
            out.push(Violation::AttentionNonFinite { layer, head });
            continue;
        }
        if let Some((position, &value)) = row
            .weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(0.0..=1.0).contains(*w))
        {
            out.push(Violation::AttentionOutOfRange {
                layer,
                head,
                position,
                value,
            });
        }
        let sum: f64 = row.weights.iter().map(|&w| w as f64).sum();
        if ctx_len > 0 && (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            out.push(Violation::AttentionNotNormalized { layer, head, sum });
        }
    }

    let expected_norms = dims.layers * dims.kv_heads;
    if s.value_norms.len() != expected_norms {
        out.push(Violation::ValueNormCount {
            expected: expected_norms,
            found: s.value_norms.len(),
        });
    }
    for (i, vn) in s.value_norms.iter().enumerate() {
        let (layer, kv_head) = (vn.layer, vn.kv_head);
        if dims.kv_heads > 0 && (layer != i / dims.kv_heads || kv_head != i % dims.kv_heads) {
            out.push(Violation::ValueNormOrder {
                index: i,
                layer,
                kv_head,
            });
        }
        if vn.norms.len() != ctx_len {
            out.push(Violation::ValueNormLength {
                layer,
                kv_head,
                expected: ctx_len,
                found: vn.norms.len(),
            });
            continue;
        }
        if let Some((position, &value)) = vn
            .norms
            .iter()
            .enumerate()
            .find(|(_, n)| !n.is_finite() || **n < 0.0)
        {
            out.push(Violation::ValueNormInvalid {
                layer,
                kv_head,
                position,
                value,
            });
        }
    }

    if s.logits.len() != dims.vocab {
        out.push(Violation::LogitCount {
            expected: dims.vocab,
            found: s.logits.len(),
        });
    }
    if let Some(index) = s.logits.iter().position(|z| !z.is_finite()) {
        out.push(Violation::LogitNonFinite { index });
    }

    ValidationReport { violations: out }
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(HaveError::Domain("softmax of an empty vector".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(HaveError::NonFinite {
            what: "softmax input",
        });
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Softmax over `f32` logits, widened to `f64`.
pub fn probabilities(logits: &[f32]) -> Result<Vec<f64>> {
    let z: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
    softmax(&z)
}

/// Index of the largest entry, ties broken toward the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
