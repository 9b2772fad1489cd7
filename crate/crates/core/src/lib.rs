//! Attention-guided decoding over per-step activation snapshots.
//!
//! The pipeline for one step is:
//!
//! 1. [`gating`]: score every (layer, head) by how much deduplicated context
//!    it attends to and turn the scores into strictly positive weights.
//! 2. [`calibration`]: mask sink tokens, weight attention by value norms,
//!    aggregate heads, project onto token ids and confine to the Top-R set.
//! 3. [`fusion`]: add the evidence to the model distribution, scaled by its
//!    normalized entropy, and pick the argmax.
//!
//! Snapshots come either from the bundled [`toy`] transformer or from trace
//! files ([`trace`]) recorded against external models.

pub mod calibration;
pub mod error;
pub mod fusion;
pub mod gating;
pub mod harness;
pub mod metrics;
pub mod planted;
pub mod snapshot;
pub mod synth;
pub mod toy;
pub mod trace;

pub use calibration::{CalibrationConfig, EstimatorSpec, SinkPolicy, TokenEvidence};
pub use error::{HaveError, Result};
pub use fusion::{decode_step, Ablation, FusedDistribution, FusionConfig, HaveConfig, Policy};
pub use gating::{GatingConfig, HeadMatrix, HeadWeights};
pub use snapshot::{
    validate_snapshot, AttentionRow, ContextToken, ModelDims, StepSnapshot, ValidationReport,
    ValueNorms, Violation,
};
pub use toy::{ToyConfig, ToyModel};
pub use trace::{read_trace, write_trace, TraceError, TraceFile, TraceHeader};
