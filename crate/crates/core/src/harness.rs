//! Generation loop over a live toy model or a recorded trace, and the
//! EM/F1 evaluation harness with ablation rows and alpha / Top-R sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::{EstimatorSpec, SinkPolicy};
use crate::error::{HaveError, Result};
use crate::fusion::{Ablation, FusedDistribution, FusionConfig, HaveConfig, Policy};
use crate::gating::HeadMatrix;
use crate::metrics::{exact_match, token_f1};
use crate::toy::{live_decode, ToyModel, BOS_ID, EOS_ID};
use crate::trace::{read_trace, TraceFile};

pub const DEFAULT_MAX_LEN: usize = 32;
pub const DEFAULT_ALPHAS: [f64; 6] = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0];
pub const DEFAULT_RANKS: [usize; 6] = [1, 2, 5, 10, 20, 50];

/// Where step snapshots come from.
#[derive(Debug, Clone, Copy)]
pub enum Source<'a> {
    Model(&'a ToyModel),
    Trace(&'a TraceFile),
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub ids: Vec<u32>,
    pub steps: Vec<FusedDistribution>,
}

/// Sequential single-pass decoding. Stops after emitting `stop` or after
/// `max_len` tokens. A trace is replayed in order and the prompt is ignored
/// (the trace already fixes the context).
pub fn generate(
    source: Source<'_>,
    prompt: &[u32],
    policy: &Policy,
    max_len: usize,
    stop: Option<u32>,
) -> Result<Generation> {
    if max_len == 0 {
        return Err(HaveError::Config("max_len must be >= 1".into()));
    }
    match source {
        Source::Model(model) => {
            let run = live_decode(model, prompt, policy, max_len, stop)?;
            Ok(Generation {
                ids: run.generated,
                steps: run.steps,
            })
        }
        Source::Trace(trace) => {
            let mut out = Generation {
                ids: Vec::new(),
                steps: Vec::new(),
            };
            for i in 0..max_len {
                let s = trace.snapshots.get(i).ok_or(HaveError::TraceExhausted {
                    requested: i + 1,
                    available: trace.snapshots.len(),
                })?;
                let fused = policy.select(s)?;
                let chosen = fused.chosen;
                out.ids.push(chosen);
                out.steps.push(fused);
                if stop == Some(chosen) {
                    break;
                }
            }
            Ok(out)
        }
    }
}

/// One question-answering record. Context and question may be given as
/// text (tokenized by the toy tokenizer) or as token ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaInstance {
    pub id: String,
    #[serde(default)]
    pub context: Option<String>,
    #[serde(default)]
    pub context_ids: Option<Vec<u32>>,
    #[serde(default)]
    pub question: Option<String>,
    #[serde(default)]
    pub question_ids: Option<Vec<u32>>,
    pub answers: Vec<String>,
    /// Trace file (relative to the dataset file) for replay evaluation.
    #[serde(default)]
    pub trace: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub instances: Vec<QaInstance>,
    pub errors: Vec<LineError>,
    pub base_dir: Option<PathBuf>,
}

/// One JSON object per line. Bad lines are recorded with their 1-based
/// line number and skipped.
pub fn parse_dataset(text: &str) -> Dataset {
    let mut ds = Dataset::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        match serde_json::from_str::<QaInstance>(trimmed) {
            Ok(inst) if inst.answers.is_empty() => ds.errors.push(LineError {
                line: line_no,
                message: format!("instance {:?} has no gold answers", inst.id),
            }),
            Ok(inst) => ds.instances.push(inst),
            Err(e) => ds.errors.push(LineError {
                line: line_no,
                message: e.to_string(),
            }),
        }
    }
    ds
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut ds = parse_dataset(&std::fs::read_to_string(path)?);
    ds.base_dir = path.parent().map(Path::to_path_buf);
    Ok(ds)
}

/// One row of the evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridEntry {
    pub name: String,
    #[serde(default)]
    pub greedy: bool,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_rank")]
    pub top_rank: usize,
    #[serde(default)]
    pub no_hag: bool,
    #[serde(default)]
    pub no_vc: bool,
}

fn default_alpha() -> f64 {
    crate::fusion::DEFAULT_ALPHA
}

fn default_rank() -> usize {
    crate::fusion::DEFAULT_TOP_RANK
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    #[serde(default)]
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub rank: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalGrid {
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_stop")]
    pub stop_id: Option<u32>,
    /// Width of the prompt-length bins, in tokens.
    #[serde(default = "default_bin")]
    pub length_bin: usize,
    #[serde(default)]
    pub estimator: Option<PathBuf>,
    #[serde(default)]
    pub head_priors: Option<PathBuf>,
    #[serde(default, rename = "config")]
    pub configs: Vec<GridEntry>,
    #[serde(default)]
    pub sweep: SweepAxes,
}

fn default_max_len() -> usize {
    DEFAULT_MAX_LEN
}

fn default_stop() -> Option<u32> {
    Some(EOS_ID)
}

fn default_bin() -> usize {
    200
}

impl Default for EvalGrid {
    /// Greedy, full HAVE, the three ablations, and the default sweeps.
    fn default() -> Self {
        let have = |name: &str, no_hag, no_vc| GridEntry {
            name: name.into(),
            greedy: false,
            alpha: default_alpha(),
            top_rank: default_rank(),
            no_hag,
            no_vc,
        };
        Self {
            max_len: DEFAULT_MAX_LEN,
            stop_id: default_stop(),
            length_bin: default_bin(),
            estimator: None,
            head_priors: None,
            configs: vec![
                GridEntry {
                    greedy: true,
                    ..have("greedy", false, false)
                },
                have("HAVE", false, false),
                have("w/o HAG", true, false),
                have("w/o VC", false, true),
                have("w/o HAG+VC", true, true),
            ],
            sweep: SweepAxes {
                alpha: DEFAULT_ALPHAS.to_vec(),
                rank: DEFAULT_RANKS.to_vec(),
            },
        }
    }
}

impl EvalGrid {
    pub fn from_toml(text: &str) -> Result<Self> {
        let g: EvalGrid =
            toml::from_str(text).map_err(|e| HaveError::Config(format!("grid: {e}")))?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty() && self.sweep.alpha.is_empty() && self.sweep.rank.is_empty()
    }
}

/// Builds a policy from a grid row.
pub fn policy_for(
    entry: &GridEntry,
    sink_policy: &SinkPolicy,
    estimator: Option<&EstimatorSpec>,
    head_priors: Option<&HeadMatrix>,
) -> Result<Policy> {
    if entry.greedy {
        return Ok(Policy::Greedy);
    }
    let mut cfg = HaveConfig {
        fusion: FusionConfig::new(entry.alpha, entry.top_rank)?,
        ablation: Ablation {
            no_hag: entry.no_hag,
            no_vc: entry.no_vc,
        },
        ..Default::default()
    };
    cfg.calibration.sink_policy = sink_policy.clone();
    cfg.calibration.estimator = estimator.cloned();
    cfg.gating.base = head_priors.cloned();
    Ok(Policy::have(cfg))
}

/// Evaluation backend.
#[derive(Debug)]
#[allow(clippy::large_enum_variant)]
pub enum EvalSource {
    Model(ToyModel),
    /// Per-instance traces, resolved against the dataset directory.
    Traces,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceRecord {
    pub config: String,
    pub id: String,
    pub prediction: String,
    pub generated: Vec<u32>,
    pub em: u8,
    pub f1: f64,
    pub prompt_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthBin {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
    pub em: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigResult {
    pub config: String,
    pub policy: String,
    pub instances: usize,
    /// Percent.
    pub em: f64,
    /// Percent.
    pub f1: f64,
    pub steps: usize,
    pub mean_entropy: f64,
    pub fallback_rate: f64,
    pub gold_evidence_mass: f64,
    pub bins: Vec<LengthBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub x: f64,
    pub em: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSeries {
    pub axis: String,
    pub points: Vec<SweepPoint>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct EvalReport {
    pub configs: Vec<ConfigResult>,
    pub instances: Vec<InstanceRecord>,
    pub sweeps: Vec<SweepSeries>,
    pub errors: Vec<LineError>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ReportLine<'a> {
    Config(&'a ConfigResult),
    Instance(&'a InstanceRecord),
    Sweep(&'a SweepSeries),
    Error(&'a LineError),
}

impl EvalReport {
    /// One JSON object per line: configs, instances, sweeps, then errors.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let lines = self
            .configs
            .iter()
            .map(ReportLine::Config)
            .chain(self.instances.iter().map(ReportLine::Instance))
            .chain(self.sweeps.iter().map(ReportLine::Sweep))
            .chain(self.errors.iter().map(ReportLine::Error));
        for line in lines {
            out.push_str(&serde_json::to_string(&line).expect("report serializes"));
            out.push('\n');
        }
        out
    }

    /// Two-column `x em` series for each sweep axis.
    pub fn plot_series(&self) -> BTreeMap<String, String> {
        self.sweeps
            .iter()
            .map(|s| {
                (
                    s.axis.clone(),
                    two_column(s.points.iter().map(|p| (p.x, p.em))),
                )
            })
            .collect()
    }

    pub fn config(&self, name: &str) -> Option<&ConfigResult> {
        self.configs.iter().find(|c| c.config == name)
    }
}

/// Formats `(x, y)` pairs as whitespace-separated two-column text.
pub fn two_column(points: impl IntoIterator<Item = (f64, f64)>) -> String {
    points
        .into_iter()
        .map(|(x, y)| format!("{x} {y}\n"))
        .collect()
}

struct Prepared {
    inst: QaInstance,
    prompt: Vec<u32>,
    trace: Option<TraceFile>,
    gold_ids: BTreeSet<u32>,
    sink_policy: SinkPolicy,
}

fn prepare(ds: &Dataset, source: &EvalSource, errors: &mut Vec<LineError>) -> Vec<Prepared> {
    let mut out = Vec::new();
    for inst in &ds.instances {
        match prepare_one(inst, ds.base_dir.as_deref(), source) {
            Ok(p) => out.push(p),
            Err(e) => errors.push(LineError {
                line: 0,
                message: format!("instance {:?}: {e}", inst.id),
            }),
        }
    }
    out
}

fn prepare_one(inst: &QaInstance, base: Option<&Path>, source: &EvalSource) -> Result<Prepared> {
    match source {
        EvalSource::Model(model) => {
            let tok = model.tokenizer();
            let ids = |ids: &Option<Vec<u32>>, text: &Option<String>| -> Vec<u32> {
                match (ids, text) {
                    (Some(ids), _) => ids.clone(),
                    (None, Some(t)) => tok.encode(t),
                    (None, None) => Vec::new(),
                }
            };
            let mut prompt = vec![BOS_ID];
            prompt.extend(ids(&inst.context_ids, &inst.context));
            prompt.extend(ids(&inst.question_ids, &inst.question));
            if let Some(&bad) = prompt.iter().find(|&&t| t as usize >= model.config().vocab) {
                return Err(HaveError::Config(format!(
                    "token id {bad} outside vocabulary"
                )));
            }
            let gold_ids = inst.answers.iter().flat_map(|a| tok.encode(a)).collect();
            Ok(Prepared {
                inst: inst.clone(),
                prompt,
                trace: None,
                gold_ids,
                sink_policy: tok.sink_policy(),
            })
        }
        EvalSource::Traces => {
            let rel = inst
                .trace
                .as_ref()
                .ok_or_else(|| HaveError::Config("no trace path for replay evaluation".into()))?;
            let path = base.map_or_else(|| PathBuf::from(rel), |b| b.join(rel));
            let trace = read_trace(std::io::BufReader::new(std::fs::File::open(&path)?))?;
            let sink_policy = SinkPolicy::from_recorded(&trace.snapshots);
            if trace.header.sink_policy_id != sink_policy.id {
                log::warn!(
                    "trace {} records sink policy {} but replay uses {}",
                    path.display(),
                    trace.header.sink_policy_id,
                    sink_policy.id
                );
            }
            let surfaces = surface_table(&trace);
            let gold_ids = surfaces
                .iter()
                .filter(|(_, s)| {
                    let s = clean_surface(s);
                    !s.is_empty()
                        && inst
                            .answers
                            .iter()
                            .any(|a| a.split_whitespace().any(|w| w.eq_ignore_ascii_case(&s)))
                })
                .map(|(&id, _)| id)
                .collect();
            let prompt_len = trace.snapshots.first().map_or(0, |s| s.context_len());
            Ok(Prepared {
                inst: inst.clone(),
                prompt: vec![0; prompt_len],
                trace: Some(trace),
                gold_ids,
                sink_policy,
            })
        }
    }
}

fn surface_table(trace: &TraceFile) -> BTreeMap<u32, String> {
    let mut table = BTreeMap::new();
    for s in &trace.snapshots {
        for t in &s.context {
            table.entry(t.token_id).or_insert_with(|| t.surface.clone());
        }
    }
    table
}

fn clean_surface(s: &str) -> String {
    s.replace('\u{2581}', " ").trim().to_string()
}

fn detokenize(p: &Prepared, source: &EvalSource, ids: &[u32], stop: Option<u32>) -> String {
    let ids: Vec<u32> = ids.iter().copied().filter(|&t| Some(t) != stop).collect();
    match (source, &p.trace) {
        (EvalSource::Model(model), _) => model.tokenizer().decode(&ids),
        (_, Some(trace)) => {
            let table = surface_table(trace);
            let text: String = ids
                .iter()
                .map(|id| {
                    table
                        .get(id)
                        .map(|s| s.replace('\u{2581}', " "))
                        .unwrap_or_else(|| format!(" <unk:{id}>"))
                })
                .collect();
            text.trim().to_string()
        }
        _ => String::new(),
    }
}

struct Tally {
    result: ConfigResult,
    records: Vec<InstanceRecord>,
}

fn evaluate(
    name: &str,
    entry: &GridEntry,
    prepared: &[Prepared],
    source: &EvalSource,
    grid: &EvalGrid,
    estimator: Option<&EstimatorSpec>,
    priors: Option<&HeadMatrix>,
) -> Result<Tally> {
    let mut records = Vec::with_capacity(prepared.len());
    let (mut steps, mut entropy, mut fallbacks, mut gold_mass) = (0usize, 0.0, 0usize, 0.0);
    let mut policy_label = String::new();
    for p in prepared {
        let policy = policy_for(entry, &p.sink_policy, estimator, priors)?;
        policy_label = policy.label();
        let generation = match (source, &p.trace) {
            (EvalSource::Model(model), _) => generate(
                Source::Model(model),
                &p.prompt,
                &policy,
                grid.max_len,
                grid.stop_id,
            )?,
            (_, Some(trace)) => {
                let len = grid.max_len.min(trace.snapshots.len());
                generate(
                    Source::Trace(trace),
                    &p.prompt,
                    &policy,
                    len.max(1),
                    grid.stop_id,
                )?
            }
            _ => unreachable!("prepared instances carry their source"),
        };
        for step in &generation.steps {
            steps += 1;
            entropy += step.entropy;
            fallbacks += usize::from(step.diagnostics.fallback_used);
            gold_mass += step.evidence_mass_on(&p.gold_ids);
        }
        let prediction = detokenize(p, source, &generation.ids, grid.stop_id);
        records.push(InstanceRecord {
            config: name.to_string(),
            id: p.inst.id.clone(),
            em: exact_match(&prediction, &p.inst.answers),
            f1: token_f1(&prediction, &p.inst.answers),
            prediction,
            generated: generation.ids,
            prompt_len: p.prompt.len(),
        });
    }
    let n = records.len();
    let mean = |total: f64, count: usize| {
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    };
    let em = 100.0 * mean(records.iter().map(|r| r.em as f64).sum(), n);
    let f1 = 100.0 * mean(records.iter().map(|r| r.f1).sum(), n);
    Ok(Tally {
        result: ConfigResult {
            config: name.to_string(),
            policy: policy_label,
            instances: n,
            em,
            f1,
            steps,
            mean_entropy: mean(entropy, steps),
            fallback_rate: mean(fallbacks as f64, steps),
            gold_evidence_mass: mean(gold_mass, steps),
            bins: length_bins(&records, grid.length_bin.max(1)),
        },
        records,
    })
}

/// EM/F1 per prompt-length bucket of width `width`.
pub fn length_bins(records: &[InstanceRecord], width: usize) -> Vec<LengthBin> {
    let mut buckets: BTreeMap<usize, Vec<&InstanceRecord>> = BTreeMap::new();
    for r in records {
        buckets.entry(r.prompt_len / width).or_default().push(r);
    }
    buckets
        .into_iter()
        .map(|(b, rs)| {
            let n = rs.len() as f64;
            LengthBin {
                lo: b * width,
                hi: (b + 1) * width,
                count: rs.len(),
                em: 100.0 * rs.iter().map(|r| r.em as f64).sum::<f64>() / n,
                f1: 100.0 * rs.iter().map(|r| r.f1).sum::<f64>() / n,
            }
        })
        .collect()
}

/// Runs every grid row and sweep point over the dataset.
pub fn run_eval(ds: &Dataset, source: &EvalSource, grid: &EvalGrid) -> Result<EvalReport> {
    if grid.is_empty() {
        return Err(HaveError::Config(
            "evaluation grid has no configurations".into(),
        ));
    }
    if grid.max_len == 0 {
        return Err(HaveError::Config("max_len must be >= 1".into()));
    }
    let estimator = grid
        .estimator
        .as_deref()
        .map(|p| EstimatorSpec::parse(&std::fs::read_to_string(p)?))
        .transpose()?;
    let priors = grid
        .head_priors
        .as_deref()
        .map(|p| HeadMatrix::parse(&std::fs::read_to_string(p)?))
        .transpose()?;

    let mut report = EvalReport {
        errors: ds.errors.clone(),
        ..Default::default()
    };
    let prepared = prepare(ds, source, &mut report.errors);

    for entry in &grid.configs {
        let tally = evaluate(
            &entry.name,
            entry,
            &prepared,
            source,
            grid,
            estimator.as_ref(),
            priors.as_ref(),
        )?;
        report.configs.push(tally.result);
        report.instances.extend(tally.records);
    }

    let base = GridEntry {
        name: String::new(),
        greedy: false,
        alpha: default_alpha(),
        top_rank: default_rank(),
        no_hag: false,
        no_vc: false,
    };
    let mut sweep = |axis: &str, entries: Vec<(f64, GridEntry)>| -> Result<()> {
        let mut points = Vec::new();
        for (x, entry) in entries {
            let t = evaluate(
                &entry.name,
                &entry,
                &prepared,
                source,
                grid,
                estimator.as_ref(),
                priors.as_ref(),
            )?;
            points.push(SweepPoint {
                x,
                em: t.result.em,
                f1: t.result.f1,
            });
        }
        if !points.is_empty() {
            report.sweeps.push(SweepSeries {
                axis: axis.to_string(),
                points,
            });
        }
        Ok(())
    };
    sweep(
        "alpha",
        grid.sweep
            .alpha
            .iter()
            .map(|&a| {
                (
                    a,
                    GridEntry {
                        name: format!("alpha={a}"),
                        alpha: a,
                        ..base.clone()
                    },
                )
            })
            .collect(),
    )?;
    sweep(
        "rank",
        grid.sweep
            .rank
            .iter()
            .map(|&r| {
                (
                    r as f64,
                    GridEntry {
                        name: format!("rank={r}"),
                        top_rank: r,
                        ..base.clone()
                    },
                )
            })
            .collect(),
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::ToyConfig;

    fn model() -> ToyModel {
        ToyModel::new(ToyConfig {
            vocab: 64,
            layers: 2,
            heads: 4,
            kv_heads: 2,
            head_dim: 4,
            max_context: 128,
            window: None,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn dataset_parsing_keeps_going_after_bad_lines() {
        let text = r#"{"id":"a","context_ids":[5,6],"answers":["x"]}
not json
{"id":"b","answers":[]}

{"id":"c","context":"kaka loka","question":"mika","answers":["y","z"]}
"#;
        let ds = parse_dataset(text);
        assert_eq!(ds.instances.len(), 2);
        assert_eq!(
            ds.errors.iter().map(|e| e.line).collect::<Vec<_>>(),
            vec![2, 3]
        );
    }

    #[test]
    fn max_len_one_emits_one_step() {
        let m = model();
        let g = generate(Source::Model(&m), &[0, 5, 6], &Policy::Greedy, 1, None).unwrap();
        assert_eq!(g.ids.len(), 1);
        assert_eq!(g.steps.len(), 1);
        assert!(generate(Source::Model(&m), &[0], &Policy::Greedy, 0, None).is_err());
    }

    #[test]
    fn replay_runs_out_of_trace() {
        let m = model();
        let (trace, _) = crate::toy::run_and_trace(&m, &[0, 5], 3, &Policy::Greedy).unwrap();
        let err = generate(Source::Trace(&trace), &[], &Policy::Greedy, 4, None).unwrap_err();
        assert!(matches!(
            err,
            HaveError::TraceExhausted {
                requested: 4,
                available: 3
            }
        ));
    }

    #[test]
    fn stop_token_ends_generation() {
        let m = model();
        let free = generate(Source::Model(&m), &[0, 7, 8], &Policy::Greedy, 6, None).unwrap();
        let stop = free.ids[2];
        let first = free.ids.iter().position(|&t| t == stop).unwrap();
        let g = generate(
            Source::Model(&m),
            &[0, 7, 8],
            &Policy::Greedy,
            6,
            Some(stop),
        )
        .unwrap();
        assert_eq!(g.ids, free.ids[..=first].to_vec());
    }

    #[test]
    fn grid_toml() {
        let g = EvalGrid::from_toml(
            r#"
max_len = 4
[[config]]
name = "greedy"
greedy = true
[[config]]
name = "HAVE"
alpha = 0.5
top_rank = 3
[sweep]
alpha = [0.0, 1.0]
"#,
        )
        .unwrap();
        assert_eq!(g.configs.len(), 2);
        assert_eq!(g.configs[1].top_rank, 3);
        assert_eq!(g.sweep.alpha, vec![0.0, 1.0]);
        assert_eq!(g.stop_id, Some(EOS_ID));
        assert!(EvalGrid::from_toml("[[config]]\nname = 1\n").is_err());
    }

    #[test]
    fn empty_grid_is_an_error() {
        let grid = EvalGrid {
            configs: vec![],
            sweep: SweepAxes::default(),
            ..Default::default()
        };
        let ds = parse_dataset(r#"{"id":"a","context_ids":[5],"answers":["x"]}"#);
        assert!(run_eval(&ds, &EvalSource::Model(model()), &grid).is_err());
    }

    #[test]
    fn length_binning() {
        let rec = |len, em| InstanceRecord {
            config: "c".into(),
            id: "i".into(),
            prediction: String::new(),
            generated: vec![],
            em,
            f1: em as f64,
            prompt_len: len,
        };
        let bins = length_bins(&[rec(10, 1), rec(150, 0), rec(250, 1)], 200);
        assert_eq!(bins.len(), 2);
        assert_eq!((bins[0].lo, bins[0].hi, bins[0].count), (0, 200, 2));
        assert_eq!(bins[0].em, 50.0);
        assert_eq!(bins[1].em, 100.0);
    }

    #[test]
    fn two_column_format() {
        assert_eq!(two_column([(0.0, 10.0), (0.5, 12.5)]), "0 10\n0.5 12.5\n");
    }
}
