//! Top-R support, normalized entropy and the entropy-scaled additive fusion
//! `S = P + (alpha * H_norm(P)) * U`, plus the full single-step decoder.

use std::collections::BTreeSet;

use crate::calibration::{build_utilization, CalibrationConfig, TokenEvidence};
use crate::error::{HaveError, Result};
use crate::gating::{compute_head_weights, GatingConfig, HeadWeights};
use crate::snapshot::{argmax_lowest, probabilities, StepSnapshot};

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_TOP_RANK: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub alpha: f64,
    pub top_rank: usize,
}

impl FusionConfig {
    pub fn new(alpha: f64, top_rank: usize) -> Result<Self> {
        if alpha.is_nan() || alpha < 0.0 || !alpha.is_finite() {
            return Err(HaveError::Config(format!(
                "alpha must be finite and >= 0, got {alpha}"
            )));
        }
        if top_rank == 0 {
            return Err(HaveError::Config("top_rank must be >= 1".into()));
        }
        Ok(Self { alpha, top_rank })
    }
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            top_rank: DEFAULT_TOP_RANK,
        }
    }
}

/// The `R` most probable ids. Ties at the cut go to the lower id.
pub fn top_r_support(p: &[f64], r: usize) -> BTreeSet<u32> {
    let mut ids: Vec<usize> = (0..p.len()).collect();
    ids.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    ids.into_iter().take(r).map(|i| i as u32).collect()
}

/// Shannon entropy divided by `ln |V|`, clamped to `[0, 1]`. `0 ln 0 = 0`.
pub fn normalized_entropy(p: &[f64]) -> Result<f64> {
    if p.len() < 2 {
        return Err(HaveError::Domain(format!(
            "normalized entropy needs |V| >= 2, got {}",
            p.len()
        )));
    }
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    Ok((h / (p.len() as f64).ln()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub fallback_used: bool,
    /// Gated head weights for this step.
    pub head_weights: HeadWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedDistribution {
    pub probs: Vec<f64>,
    pub support: BTreeSet<u32>,
    pub evidence: TokenEvidence,
    pub entropy: f64,
    /// Unnormalized fused scores used for selection.
    pub scores: Vec<f64>,
    /// `scores / sum(scores)`, for reporting only.
    pub normalized: Vec<f64>,
    pub chosen: u32,
    pub diagnostics: Diagnostics,
}

impl FusedDistribution {
    pub fn evidence_mass_on(&self, ids: &BTreeSet<u32>) -> f64 {
        self.evidence
            .vocab_scores
            .iter()
            .filter(|(id, _)| ids.contains(id))
            .fold(0.0, |acc, (_, m)| acc + m)
    }
}

/// Adds `alpha * H_norm * U(v)` to `P(v)` for ids carrying evidence; every
/// other entry is copied untouched.
pub fn fuse(
    p: &[f64],
    support: BTreeSet<u32>,
    evidence: TokenEvidence,
    cfg: &FusionConfig,
    head_weights: HeadWeights,
) -> Result<FusedDistribution> {
    let entropy = normalized_entropy(p)?;
    let gain = cfg.alpha * entropy;
    let mut scores = p.to_vec();
    for (&id, &u) in &evidence.vocab_scores {
        debug_assert!(support.contains(&id));
        let slot = scores
            .get_mut(id as usize)
            .ok_or(HaveError::DimensionMismatch {
                what: "evidence token id",
                expected: p.len(),
                found: id as usize,
            })?;
        *slot = p[id as usize] + gain * u;
    }
    let total: f64 = scores.iter().sum();
    let normalized = scores.iter().map(|s| s / total).collect();
    let chosen = argmax_lowest(&scores) as u32;
    Ok(FusedDistribution {
        probs: p.to_vec(),
        support,
        diagnostics: Diagnostics {
            fallback_used: evidence.fallback_used,
            head_weights,
        },
        evidence,
        entropy,
        scores,
        normalized,
        chosen,
    })
}

/// Component switches for ablation runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Ablation {
    /// Uniform head weights instead of gating.
    pub no_hag: bool,
    /// Sink-corrected attention only; no value-norm weighting.
    pub no_vc: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        no_hag: false,
        no_vc: false,
    };

    pub fn label(&self) -> &'static str {
        match (self.no_hag, self.no_vc) {
            (false, false) => "HAVE",
            (true, false) => "w/o HAG",
            (false, true) => "w/o VC",
            (true, true) => "w/o HAG+VC",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HaveConfig {
    pub fusion: FusionConfig,
    pub gating: GatingConfig,
    pub calibration: CalibrationConfig,
    pub ablation: Ablation,
}

/// One full decoding step: gating, calibration, fusion and selection.
pub fn decode_step(s: &StepSnapshot, cfg: &HaveConfig) -> Result<FusedDistribution> {
    s.ensure_well_formed()?;
    let p = probabilities(&s.logits)?;
    let support = top_r_support(&p, cfg.fusion.top_rank);

    let hw = if cfg.ablation.no_hag {
        HeadWeights::uniform(s.dims.layers, s.dims.heads)
    } else {
        compute_head_weights(s, &cfg.gating)?
    };
    let calibration;
    let calib = if cfg.ablation.no_vc && cfg.calibration.augment_values {
        calibration = CalibrationConfig {
            augment_values: false,
            ..cfg.calibration.clone()
        };
        &calibration
    } else {
        &cfg.calibration
    };
    let evidence = build_utilization(s, &hw, &support, calib)?;
    fuse(&p, support, evidence, &cfg.fusion, hw)
}

/// Greedy choice straight from the logits.
pub fn greedy_step(s: &StepSnapshot) -> Result<u32> {
    let p = probabilities(&s.logits)?;
    Ok(argmax_lowest(&p) as u32)
}

/// Greedy step reported in the same shape as a fused step: no evidence,
/// `S == P`.
pub fn greedy_distribution(s: &StepSnapshot) -> Result<FusedDistribution> {
    s.ensure_well_formed()?;
    let p = probabilities(&s.logits)?;
    let support = top_r_support(&p, 1);
    let cfg = FusionConfig {
        alpha: 0.0,
        top_rank: 1,
    };
    fuse(
        &p,
        support,
        TokenEvidence::empty(s.context_len()),
        &cfg,
        HeadWeights::uniform(s.dims.layers, s.dims.heads),
    )
}

/// Token selection rule for a generation loop.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Greedy,
    Have(Box<HaveConfig>),
}

impl Policy {
    pub fn have(cfg: HaveConfig) -> Self {
        Policy::Have(Box::new(cfg))
    }

    pub fn select(&self, s: &StepSnapshot) -> Result<FusedDistribution> {
        match self {
            Policy::Greedy => greedy_distribution(s),
            Policy::Have(cfg) => decode_step(s, cfg),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Policy::Greedy => "greedy".into(),
            Policy::Have(cfg) => format!(
                "{} alpha={} R={}",
                cfg.ablation.label(),
                cfg.fusion.alpha,
                cfg.fusion.top_rank
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::SinkPolicy;
    use crate::snapshot::{AttentionRow, ContextToken, ModelDims, ValueNorms};
    use std::collections::BTreeMap;

    fn evidence(pairs: &[(u32, f64)]) -> TokenEvidence {
        TokenEvidence {
            ctx_scores: vec![],
            vocab_scores: pairs.iter().copied().collect::<BTreeMap<_, _>>(),
            fallback_used: false,
        }
    }

    #[test]
    fn support_examples() {
        assert_eq!(top_r_support(&[0.5, 0.3, 0.2], 2), [0, 1].into());
        assert_eq!(top_r_support(&[0.5, 0.3, 0.2], 7), [0, 1, 2].into());
        assert_eq!(top_r_support(&[0.25; 4], 1), [0].into());
        assert_eq!(top_r_support(&[0.1, 0.3, 0.3, 0.3], 2), [1, 2].into());
    }

    #[test]
    fn entropy_examples() {
        for n in [2usize, 3, 17, 1000] {
            let h = normalized_entropy(&vec![1.0 / n as f64; n]).unwrap();
            assert!((h - 1.0).abs() < 1e-12);
        }
        assert_eq!(normalized_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let h = normalized_entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!((h - 0.5).abs() < 1e-15);
        assert!(normalized_entropy(&[1.0]).is_err());
    }

    #[test]
    fn entropy_is_log_base_invariant() {
        let p = [0.7, 0.2, 0.1];
        let nat = normalized_entropy(&p).unwrap();
        let bits: f64 = -p.iter().map(|x| x * x.log2()).sum::<f64>() / 3f64.log2();
        let dec: f64 = -p.iter().map(|x| x * x.log10()).sum::<f64>() / 3f64.log10();
        assert!((nat - bits).abs() < 1e-14 && (nat - dec).abs() < 1e-14);
    }

    #[test]
    fn zero_alpha_is_identity() {
        let p = [0.1, 0.6, 0.3];
        let cfg = FusionConfig::new(0.0, 2).unwrap();
        let f = fuse(
            &p,
            [1, 2].into(),
            evidence(&[(2, 1.0)]),
            &cfg,
            HeadWeights::uniform(1, 1),
        )
        .unwrap();
        assert_eq!(f.scores, p.to_vec());
        assert_eq!(f.chosen, 1);
    }

    #[test]
    fn uniform_p_full_evidence() {
        let p = [0.25; 4];
        let cfg = FusionConfig::new(1.0, 4).unwrap();
        let f = fuse(
            &p,
            (0..4).collect(),
            evidence(&[(2, 1.0)]),
            &cfg,
            HeadWeights::uniform(1, 1),
        )
        .unwrap();
        assert_eq!(f.scores, vec![0.25, 0.25, 1.25, 0.25]);
        assert_eq!(f.chosen, 2);
        assert!((f.normalized.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sharp_p_with_strong_alpha() {
        // H = -(0.7 ln .7 + .2 ln .2 + .1 ln .1) / ln 3 = 0.7298466991...
        let p = [0.7, 0.2, 0.1];
        let cfg = FusionConfig::new(2.0, 2).unwrap();
        let f = fuse(
            &p,
            [0, 1].into(),
            evidence(&[(1, 1.0)]),
            &cfg,
            HeadWeights::uniform(1, 1),
        )
        .unwrap();
        assert!((f.entropy - 0.729_846_699_162_097_5).abs() < 1e-12);
        assert!((f.scores[1] - (0.2 + 2.0 * 0.729_846_699_162_097_5)).abs() < 1e-12);
        assert_eq!(f.scores[0], 0.7);
        assert_eq!(f.scores[2], 0.1);
        assert_eq!(f.chosen, 1);
    }

    #[test]
    fn config_validation() {
        assert!(FusionConfig::new(-0.1, 3).is_err());
        assert!(FusionConfig::new(1.0, 0).is_err());
        assert!(FusionConfig::new(f64::NAN, 3).is_err());
    }

    fn paris_snapshot() -> StepSnapshot {
        // vocab: 0 <s>, 1..4 fillers, 5 Paris; near-uniform logits with
        // a slight edge for id 1.
        let mut logits = vec![0.0f32; 8];
        logits[1] = 0.05;
        StepSnapshot {
            step: 0,
            dims: ModelDims::new(8, 1, 1, 1),
            context: vec![
                ContextToken::new(0, 0, "<s>", true),
                ContextToken::new(1, 5, "Paris", false),
                ContextToken::new(2, 5, "Paris", false),
            ],
            attention: vec![AttentionRow {
                layer: 0,
                head: 0,
                weights: vec![0.2, 0.5, 0.3],
            }],
            value_norms: vec![ValueNorms {
                layer: 0,
                kv_head: 0,
                norms: vec![9.0, 2.0, 2.0],
            }],
            logits,
        }
    }

    fn have(alpha: f64, r: usize) -> HaveConfig {
        HaveConfig {
            fusion: FusionConfig::new(alpha, r).unwrap(),
            calibration: CalibrationConfig {
                sink_policy: SinkPolicy::v1([0]),
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn paris_pipeline() {
        let s = paris_snapshot();
        assert_eq!(greedy_step(&s).unwrap(), 1);
        let f = decode_step(&s, &have(1.0, 8)).unwrap();
        assert_eq!(f.chosen, 5);
        assert!((f.evidence.vocab_scores[&5] - 1.0).abs() < 1e-9);
        assert_eq!(decode_step(&s, &have(0.0, 8)).unwrap().chosen, 1);
    }

    #[test]
    fn single_head_no_hag_matches_full() {
        let s = paris_snapshot();
        let full = decode_step(&s, &have(1.0, 8)).unwrap();
        let mut cfg = have(1.0, 8);
        cfg.ablation.no_hag = true;
        let ab = decode_step(&s, &cfg).unwrap();
        assert_eq!(full.scores, ab.scores);
        assert_eq!(full.chosen, ab.chosen);
    }

    #[test]
    fn all_sink_context_is_greedy() {
        let mut s = paris_snapshot();
        for t in &mut s.context {
            t.token_id = 0;
        }
        let f = decode_step(&s, &have(4.0, 8)).unwrap();
        assert!(f.evidence.vocab_scores.is_empty());
        assert_eq!(f.scores, f.probs);
        assert_eq!(f.chosen, greedy_step(&s).unwrap());
    }

    #[test]
    fn malformed_snapshot_rejected() {
        let mut s = paris_snapshot();
        s.logits.pop();
        assert!(matches!(
            decode_step(&s, &have(1.0, 3)),
            Err(HaveError::InvalidSnapshot(_))
        ));
    }
}
