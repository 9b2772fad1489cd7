use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use have_core::harness::{
    generate, load_dataset, run_eval, EvalGrid, EvalSource, Source, SweepAxes, DEFAULT_MAX_LEN,
};
use have_core::planted::{self, PlantedConfig};
use have_core::trace::manifest;
use have_core::{
    read_trace, write_trace, Ablation, EstimatorSpec, FusionConfig, HaveConfig, HaveError,
    HeadMatrix, Policy, SinkPolicy, ToyConfig, ToyModel, TraceError,
};

#[derive(Parser)]
#[command(
    name = "have",
    version,
    about = "Attention-guided decoding over activation snapshots"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a recorded trace under a decoding policy.
    Decode(DecodeArgs),
    /// Run the toy transformer and record a trace.
    Generate(GenerateArgs),
    /// EM/F1 evaluation of a grid of policies over a dataset.
    Eval(EvalArgs),
    /// Gold-selection rate (or EM) as a function of alpha or Top-R.
    Sweep(SweepArgs),
    /// Check a trace file for format and structural problems.
    ValidateTrace(ValidateArgs),
}

#[derive(Args, Clone)]
struct HaveArgs {
    #[arg(long, default_value_t = have_core::fusion::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = have_core::fusion::DEFAULT_TOP_RANK)]
    top_rank: usize,
    #[arg(long)]
    no_hag: bool,
    #[arg(long)]
    no_vc: bool,
    /// Logistic estimator weights (`w[i] value` / `b value` lines).
    #[arg(long)]
    estimator: Option<PathBuf>,
    /// Per-head prior weights, one whitespace-separated row per layer.
    #[arg(long)]
    head_priors: Option<PathBuf>,
}

impl HaveArgs {
    fn config(&self, sink_policy: SinkPolicy) -> anyhow::Result<HaveConfig> {
        let mut cfg = HaveConfig {
            fusion: FusionConfig::new(self.alpha, self.top_rank)?,
            ablation: Ablation {
                no_hag: self.no_hag,
                no_vc: self.no_vc,
            },
            ..Default::default()
        };
        cfg.calibration.sink_policy = sink_policy;
        if let Some(p) = &self.estimator {
            cfg.calibration.estimator = Some(EstimatorSpec::parse(&read_text(p)?)?);
        }
        if let Some(p) = &self.head_priors {
            cfg.gating.base = Some(HeadMatrix::parse(&read_text(p)?)?);
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyKind {
    Greedy,
    Have,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_enum, default_value_t = PolicyKind::Have)]
    policy: PolicyKind,
    #[command(flatten)]
    have: HaveArgs,
    /// Number of steps to replay (default: whole trace).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    stop_id: Option<u32>,
    /// Per-step report (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Toy model configuration (TOML). Defaults are used when absent.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Overrides the seed from the model configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated prompt token ids.
    #[arg(long, value_delimiter = ',', required = true)]
    prompt_ids: Vec<u32>,
    #[arg(long, default_value_t = 16)]
    steps: usize,
    #[arg(long, value_enum, default_value_t = PolicyKind::Greedy)]
    policy: PolicyKind,
    #[command(flatten)]
    have: HaveArgs,
    /// Trace output; a `.manifest` sidecar is written next to it.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Grid file (TOML). Defaults to greedy, HAVE and the three ablations.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Evaluate live on the toy model instead of replaying per-instance traces.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for two-column sweep series (`<axis>.dat`).
    #[arg(long)]
    series_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Axis {
    Alpha,
    Rank,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Base,
    Diluting,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    axis: Axis,
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    values: Vec<f64>,
    /// Sweep EM over a dataset instead of the planted-evidence suite.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Suite::Base)]
    suite: Suite,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Value of the fixed parameter (alpha for a rank sweep and vice versa).
    #[arg(long)]
    fixed: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    trace: PathBuf,
}

/// Bad user input: exit code 1.
#[derive(Debug)]
struct InputError(String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn input(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(InputError(msg.into()))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<HaveError>() {
            return if e.is_input_error() { 1 } else { 2 };
        }
        if cause.is::<InputError>() || cause.is::<TraceError>() || cause.is::<std::io::Error>() {
            return 1;
        }
    }
    2
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn open_trace(path: &Path) -> anyhow::Result<have_core::TraceFile> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_trace(BufReader::new(f)).with_context(|| format!("reading trace {}", path.display()))
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn load_model(path: Option<&Path>, seed: Option<u64>) -> anyhow::Result<ToyModel> {
    let mut cfg = match path {
        Some(p) => ToyConfig::load(p)?,
        None => ToyConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(ToyModel::new(cfg)?)
}

fn policy(kind: PolicyKind, have: &HaveArgs, sink_policy: SinkPolicy) -> anyhow::Result<Policy> {
    Ok(match kind {
        PolicyKind::Greedy => Policy::Greedy,
        PolicyKind::Have => Policy::have(have.config(sink_policy)?),
    })
}

fn decode(args: DecodeArgs) -> anyhow::Result<()> {
    let trace = open_trace(&args.trace)?;
    if trace.snapshots.is_empty() {
        return Err(input("trace has no steps"));
    }
    let sink_policy = SinkPolicy::from_recorded(&trace.snapshots);
    if trace.header.sink_policy_id != sink_policy.id {
        log::warn!(
            "trace records sink policy {} but this build implements {}",
            trace.header.sink_policy_id,
            sink_policy.id
        );
    }
    let policy = policy(args.policy, &args.have, sink_policy)?;
    let steps = args.steps.unwrap_or(trace.snapshots.len());
    let run = generate(Source::Trace(&trace), &[], &policy, steps, args.stop_id)?;

    let mut out = output(args.out.as_deref())?;
    let mut fallbacks = 0usize;
    let mut changed = 0usize;
    for (i, step) in run.steps.iter().enumerate() {
        let greedy = have_core::snapshot::argmax_lowest(&step.probs) as u32;
        fallbacks += usize::from(step.diagnostics.fallback_used);
        changed += usize::from(greedy != step.chosen);
        writeln!(
            out,
            "{{\"kind\":\"step\",\"index\":{i},\"step\":{},\"chosen\":{},\"greedy\":{greedy},\"entropy\":{},\"evidence_mass\":{},\"fallback\":{}}}",
            trace.snapshots[i].step,
            step.chosen,
            step.entropy,
            step.evidence.mass(),
            step.diagnostics.fallback_used
        )?;
    }
    let ids: Vec<String> = run.ids.iter().map(u32::to_string).collect();
    writeln!(
        out,
        "{{\"kind\":\"summary\",\"policy\":\"{}\",\"steps\":{},\"changed_vs_greedy\":{changed},\"fallback_steps\":{fallbacks},\"ids\":[{}]}}",
        policy.label(),
        run.steps.len(),
        ids.join(",")
    )?;
    out.flush()?;
    Ok(())
}

fn generate_cmd(args: GenerateArgs) -> anyhow::Result<()> {
    let model = load_model(args.model_config.as_deref(), args.seed)?;
    let policy = policy(args.policy, &args.have, model.tokenizer().sink_policy())?;
    let (trace, ids) =
        have_core::toy::run_and_trace(&model, &args.prompt_ids, args.steps, &policy)?;
    if let Some(path) = &args.trace_out {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(f);
        let bytes = write_trace(&trace, &mut w)?;
        w.flush()?;
        let mut sidecar = path.as_os_str().to_owned();
        sidecar.push(".manifest");
        let mut text = manifest(&trace);
        text.push_str(&format!(
            "model_checksum = {:016x}\nbytes = {bytes}\n",
            model.checksum()
        ));
        std::fs::write(PathBuf::from(sidecar), text)?;
        log::info!(
            "wrote {} steps ({bytes} bytes) to {}",
            trace.snapshots.len(),
            path.display()
        );
    }
    let text = model.tokenizer().decode(&ids);
    let ids: Vec<String> = ids.iter().map(u32::to_string).collect();
    println!("{}", ids.join(","));
    println!("{text}");
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> anyhow::Result<()> {
    let ds = load_dataset(&args.dataset)?;
    for e in &ds.errors {
        log::warn!("{}:{}: {}", args.dataset.display(), e.line, e.message);
    }
    let grid = match &args.grid {
        Some(p) => EvalGrid::load(p)?,
        None => EvalGrid::default(),
    };
    let source = match &args.model_config {
        Some(p) => EvalSource::Model(load_model(Some(p), None)?),
        None => EvalSource::Traces,
    };
    let report = run_eval(&ds, &source, &grid)?;
    let mut out = output(args.out.as_deref())?;
    out.write_all(report.to_jsonl().as_bytes())?;
    out.flush()?;
    if let Some(dir) = &args.series_dir {
        std::fs::create_dir_all(dir)?;
        for (axis, series) in report.plot_series() {
            std::fs::write(dir.join(format!("{axis}.dat")), series)?;
        }
    }
    for c in &report.configs {
        log::info!(
            "{:<12} EM {:6.2}  F1 {:6.2}  n={}",
            c.config,
            c.em,
            c.f1,
            c.instances
        );
    }
    Ok(())
}

fn sweep_cmd(args: SweepArgs) -> anyhow::Result<()> {
    let ranks = || -> anyhow::Result<Vec<usize>> {
        args.values
            .iter()
            .map(|&v| {
                if v >= 1.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(input(format!(
                        "rank values must be positive integers, got {v}"
                    )))
                }
            })
            .collect()
    };
    let points: Vec<(f64, f64)> = match &args.dataset {
        Some(path) => {
            let ds = load_dataset(path)?;
            let mut grid = EvalGrid {
                configs: vec![],
                sweep: SweepAxes::default(),
                max_len: DEFAULT_MAX_LEN,
                ..Default::default()
            };
            match args.axis {
                Axis::Alpha => grid.sweep.alpha = args.values.clone(),
                Axis::Rank => grid.sweep.rank = ranks()?,
            }
            let source = match &args.model_config {
                Some(p) => EvalSource::Model(load_model(Some(p), None)?),
                None => EvalSource::Traces,
            };
            let report = run_eval(&ds, &source, &grid)?;
            report.sweeps[0]
                .points
                .iter()
                .map(|p| (p.x, p.em))
                .collect()
        }
        None => {
            let cfg = match args.suite {
                Suite::Base => PlantedConfig::default(),
                Suite::Diluting => PlantedConfig::default().with_diluting(),
            };
            let suite = planted::generate_suite(&cfg, args.count, args.seed)?;
            let rates = match args.axis {
                Axis::Alpha => {
                    let rank = args.fixed.map_or(cfg.nominal_rank, |r| r as usize);
                    planted::sweep_alpha(&suite, &args.values, rank)?
                }
                Axis::Rank => planted::sweep_rank(&suite, &ranks()?, args.fixed.unwrap_or(1.0))?,
            };
            rates.into_iter().map(|(x, r)| (x, 100.0 * r)).collect()
        }
    };
    let mut out = output(args.out.as_deref())?;
    out.write_all(have_core::harness::two_column(points).as_bytes())?;
    out.flush()?;
    Ok(())
}

fn validate(args: ValidateArgs) -> anyhow::Result<()> {
    let trace = open_trace(&args.trace)?;
    let report = trace.validate();
    println!(
        "{}: version {}, vocab {}, layers {}, heads {}, kv_heads {}, tokenizer {:?}, steps {}",
        args.trace.display(),
        trace.header.version,
        trace.header.dims.vocab,
        trace.header.dims.layers,
        trace.header.dims.heads,
        trace.header.dims.kv_heads,
        trace.header.tokenizer,
        trace.snapshots.len()
    );
    for (i, step) in report.steps.iter().enumerate() {
        for v in &step.violations {
            println!("step {i} (t={}): {v}", trace.snapshots[i].step);
        }
    }
    for (i, step) in &report.non_increasing {
        println!("step {i}: step index {step} does not increase");
    }
    let n = report.violation_count();
    println!("{n} violation(s)");
    if n > 0 {
        return Err(input(format!(
            "{n} violation(s) in {}",
            args.trace.display()
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Decode(a) => decode(a),
        Command::Generate(a) => generate_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::ValidateTrace(a) => validate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
