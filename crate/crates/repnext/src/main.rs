//! Operator CLI: build seeded weights, fuse them, verify equivalence,
//! count params/MACs, benchmark both forms, run a tensor through a model.
//!
//! Exit codes are a stable contract: 0 success, 1 verification or data
//! failure, 2 usage or config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use repnext::model::weights::{
    load_tensor, load_weights, save_tensor, save_weights, LoadedModel, LoadedTensor,
};
use repnext::model::{
    build_model, count::count_report, fuse_model, Form, Model, ModelConfig, StageTrace,
};
use repnext::tensor::{Element, Shape, Tensor};
use repnext::verify::run_full_audit;
use repnext::Error;

const EXIT_DATA: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "repnext",
    about = "Reparameterizable inference engine: multi-branch training forms, fused inference forms, and the proofs that they match",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a model from a config with seeded random weights and save it.
    Build(BuildArgs),
    /// Print the stage-by-stage shape trace for an input size.
    Trace(TraceArgs),
    /// Fuse a training-form weight file into its inference form.
    Fuse(FuseArgs),
    /// Run the full equivalence audit (transforms, blocks, model, laws).
    Verify(VerifyArgs),
    /// Tabulate parameters and MACs, analytic vs enumerated, both forms.
    Count(CountArgs),
    /// Time training vs fused forwards and emit a CSV summary.
    Bench(BenchArgs),
    /// Run one input tensor through a weight file and save the logits.
    Run(RunArgs),
}

#[derive(Args)]
struct ConfigSource {
    /// Path to a model config JSON file.
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config name (m1..m5).
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
}

impl ConfigSource {
    fn load(&self) -> Result<ModelConfig, CmdError> {
        match (&self.config, &self.preset) {
            (Some(path), None) => ModelConfig::load_file(path).map_err(usage),
            (None, Some(name)) => ModelConfig::preset(name).ok_or_else(|| CmdError {
                code: EXIT_USAGE,
                message: format!(
                    "unknown preset `{name}` (available: {})",
                    ModelConfig::preset_names().join(", ")
                ),
            }),
            _ => Err(CmdError {
                code: EXIT_USAGE,
                message: "exactly one of --config or --preset is required".to_string(),
            }),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
    Csv,
}

#[derive(Clone, Copy)]
struct InputShape([usize; 4]);

fn parse_shape(s: &str) -> Result<InputShape, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 4 {
        return Err(format!("expected N,C,H,W (four comma-separated integers), got `{s}`"));
    }
    let mut dims = [0usize; 4];
    for (slot, part) in dims.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse::<usize>()
            .map_err(|_| format!("`{part}` is not a positive integer"))?;
        if *slot == 0 {
            return Err("all input dimensions must be >= 1".to_string());
        }
    }
    Ok(InputShape(dims))
}

impl InputShape {
    fn shape(self) -> Shape {
        Shape::new(self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum WeightDType {
    Single,
    Double,
}

#[derive(Args)]
struct BuildArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Seed for weight initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Element type of the saved weights.
    #[arg(long, value_enum, default_value_t = WeightDType::Double)]
    dtype: WeightDType,
    /// Output weight file.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Input shape as N,C,H,W.
    #[arg(long, value_parser = parse_shape, default_value = "1,3,224,224")]
    input: InputShape,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct FuseArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Training-form weight file to fuse.
    #[arg(long, value_name = "PATH")]
    weights: PathBuf,
    /// Output path for the fused weight file.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Input shape used for the MAC comparison.
    #[arg(long, value_parser = parse_shape, default_value = "1,3,224,224")]
    input: InputShape,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Trials per transform/block unit (the model tier is fixed at 20).
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Override every tolerance in the ladder with one value.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct CountArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Input shape as N,C,H,W.
    #[arg(long, value_parser = parse_shape, default_value = "1,3,224,224")]
    input: InputShape,
    /// Seed for the throwaway weights backing the enumerated columns.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Optional weight file; otherwise seeded weights are built in memory.
    #[arg(long, value_name = "PATH")]
    weights: Option<PathBuf>,
    #[arg(long, value_parser = parse_shape, default_value = "1,3,224,224")]
    input: InputShape,
    /// Timed repetitions per form.
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    /// Untimed warmup runs per form.
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Weight file (training or fused form, auto-detected).
    #[arg(long, value_name = "PATH")]
    weights: PathBuf,
    /// Input tensor file in the single-record weight format.
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    /// Output tensor file for the logits.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// How many top class indices to print per batch item.
    #[arg(long, default_value_t = 5)]
    topk: usize,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

struct CmdError {
    code: u8,
    message: String,
}

fn usage(err: Error) -> CmdError {
    CmdError {
        code: EXIT_USAGE,
        message: err.to_string(),
    }
}

fn data(err: Error) -> CmdError {
    CmdError {
        code: EXIT_DATA,
        message: err.to_string(),
    }
}

fn reject_csv(format: Format) -> Result<(), CmdError> {
    if format == Format::Csv {
        return Err(CmdError {
            code: EXIT_USAGE,
            message: "csv format is only available for the bench subcommand".to_string(),
        });
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Build(args) => cmd_build(args),
        Command::Trace(args) => cmd_trace(args),
        Command::Fuse(args) => cmd_fuse(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Count(args) => cmd_count(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Run(args) => cmd_run(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {}", err.message);
            ExitCode::from(err.code)
        }
    }
}

#[derive(Serialize)]
struct BuildSummary {
    variant: String,
    form: String,
    dtype: String,
    seed: u64,
    params: u64,
    path: String,
}

fn cmd_build(args: BuildArgs) -> Result<u8, CmdError> {
    reject_csv(args.format)?;
    let config = args.source.load()?;
    let summary = match args.dtype {
        WeightDType::Single => build_and_save::<f32>(&config, args.seed, &args.out)?,
        WeightDType::Double => build_and_save::<f64>(&config, args.seed, &args.out)?,
    };
    match args.format {
        Format::Json => print_json(&summary),
        _ => println!(
            "built variant={} form={} dtype={} seed={} params={} -> {}",
            summary.variant, summary.form, summary.dtype, summary.seed, summary.params, summary.path
        ),
    }
    Ok(0)
}

fn build_and_save<T: Element>(
    config: &ModelConfig,
    seed: u64,
    out: &Path,
) -> Result<BuildSummary, CmdError> {
    let model: Model<T> = build_model(config, seed).map_err(usage)?;
    save_weights(&model, out).map_err(data)?;
    Ok(BuildSummary {
        variant: config.variant.clone(),
        form: model.form().as_str().to_string(),
        dtype: T::DTYPE.to_string(),
        seed,
        params: model.param_counts().total(),
        path: out.display().to_string(),
    })
}

#[derive(Serialize)]
struct TraceSummary {
    variant: String,
    form: String,
    input: [usize; 4],
    stages: Vec<StageTrace>,
    output: [usize; 4],
}

fn cmd_trace(args: TraceArgs) -> Result<u8, CmdError> {
    reject_csv(args.format)?;
    let config = args.source.load()?;
    // Weight values are irrelevant to shape arithmetic; a fixed-seed f32
    // build keeps this cheap.
    let model: Model<f32> = build_model(&config, 0).map_err(usage)?;
    let shape = args.input.shape();
    let stages = model.stage_traces(shape).map_err(usage)?;
    let out = model.out_shape(shape).map_err(usage)?;
    let summary = TraceSummary {
        variant: config.variant.clone(),
        form: model.form().as_str().to_string(),
        input: [shape.n, shape.c, shape.h, shape.w],
        stages,
        output: [out.n, out.c, out.h, out.w],
    };
    match args.format {
        Format::Json => print_json(&summary),
        _ => {
            println!(
                "variant={} form={} input=({}, {}, {}, {})",
                summary.variant,
                summary.form,
                shape.n,
                shape.c,
                shape.h,
                shape.w
            );
            for stage in &summary.stages {
                println!(
                    "stage {}: ({}, {}, {}) blocks={} form={}",
                    stage.stage, stage.channels, stage.h, stage.w, stage.blocks, summary.form
                );
            }
            println!(
                "output: ({}, {}, {}, {})",
                summary.output[0], summary.output[1], summary.output[2], summary.output[3]
            );
        }
    }
    Ok(0)
}

#[derive(Serialize)]
struct FuseSummary {
    variant: String,
    dtype: String,
    input: [usize; 4],
    params_before: u64,
    params_after: u64,
    macs_before: u64,
    macs_after: u64,
    path: String,
}

fn cmd_fuse(args: FuseArgs) -> Result<u8, CmdError> {
    reject_csv(args.format)?;
    let config = args.source.load()?;
    let shape = args.input.shape();
    let loaded = load_weights(&config, &args.weights).map_err(data)?;
    if loaded.is_fused() {
        return Err(data(Error::AlreadyFused));
    }
    let summary = match loaded {
        LoadedModel::Single(model) => fuse_and_save(&config, &model, shape, &args.out)?,
        LoadedModel::Double(model) => fuse_and_save(&config, &model, shape, &args.out)?,
    };
    match args.format {
        Format::Json => print_json(&summary),
        _ => {
            println!(
                "training: params={} macs={}",
                summary.params_before, summary.macs_before
            );
            println!(
                "fused:    params={} macs={}",
                summary.params_after, summary.macs_after
            );
            println!("wrote {}", summary.path);
        }
    }
    Ok(0)
}

fn fuse_and_save<T: Element>(
    config: &ModelConfig,
    model: &Model<T>,
    shape: Shape,
    out: &Path,
) -> Result<FuseSummary, CmdError> {
    let macs_before = model.macs(shape).map_err(usage)?;
    let fused = fuse_model(model).map_err(data)?;
    let macs_after = fused.macs(shape).map_err(usage)?;
    save_weights(&fused, out).map_err(data)?;
    Ok(FuseSummary {
        variant: config.variant.clone(),
        dtype: T::DTYPE.to_string(),
        input: [shape.n, shape.c, shape.h, shape.w],
        params_before: model.param_counts().total(),
        params_after: fused.param_counts().total(),
        macs_before,
        macs_after,
        path: out.display().to_string(),
    })
}

fn cmd_verify(args: VerifyArgs) -> Result<u8, CmdError> {
    reject_csv(args.format)?;
    if let Some(tol) = args.tol {
        if !tol.is_finite() || tol < 0.0 {
            return Err(CmdError {
                code: EXIT_USAGE,
                message: "--tol must be a finite non-negative number".to_string(),
            });
        }
    }
    let config = args.source.load()?;
    let report = run_full_audit(&config, args.seed, args.trials, args.tol).map_err(usage)?;
    match args.format {
        Format::Json => print!("{}", report.render_json()),
        _ => print!("{}", report.render_text()),
    }
    Ok(if report.pass { 0 } else { EXIT_DATA })
}

#[derive(Serialize)]
struct ReferenceTotals {
    params_m: f64,
    gmacs: f64,
    measured_params_m: f64,
    measured_gmacs: f64,
}

#[derive(Serialize)]
struct CountSummary {
    training: repnext::model::count::CountReport,
    fused: repnext::model::count::CountReport,
    reference: Option<ReferenceTotals>,
}

fn cmd_count(args: CountArgs) -> Result<u8, CmdError> {
    reject_csv(args.format)?;
    let config = args.source.load()?;
    let shape = args.input.shape();
    let model: Model<f64> = build_model(&config, args.seed).map_err(usage)?;
    let training = count_report(&model, shape).map_err(usage)?;
    let fused_model = fuse_model(&model).map_err(data)?;
    let fused = count_report(&fused_model, shape).map_err(usage)?;
    // Published totals are quoted at the 224x224 operating point, so the
    // comparison column is computed there regardless of --input.
    let reference = match ModelConfig::reference_totals(&config.variant) {
        Some((params_m, gmacs)) => {
            let macs_224 = fused_model
                .macs(Shape::new(1, 3, 224, 224))
                .map_err(usage)?;
            Some(ReferenceTotals {
                params_m,
                gmacs,
                measured_params_m: fused_model.param_counts().total() as f64 / 1.0e6,
                measured_gmacs: macs_224 as f64 / 1.0e9,
            })
        }
        None => None,
    };
    let summary = CountSummary {
        training,
        fused,
        reference,
    };
    match args.format {
        Format::Json => print_json(&summary),
        _ => {
            print!("{}", summary.training.render_text());
            println!();
            print!("{}", summary.fused.render_text());
            if let Some(reference) = &summary.reference {
                println!();
                println!(
                    "reference totals for {}: params={}M macs={}G (measured fused at 224x224: params={:.3}M macs={:.3}G)",
                    config.variant,
                    reference.params_m,
                    reference.gmacs,
                    reference.measured_params_m,
                    reference.measured_gmacs
                );
            }
        }
    }
    Ok(0)
}

#[derive(Serialize)]
struct BenchRow {
    form: String,
    params: u64,
    macs: u64,
    median_ms: f64,
    p10_ms: f64,
    p90_ms: f64,
}

fn time_forward<T: Element>(
    model: &Model<T>,
    x: &Tensor<T>,
    warmup: usize,
    repeats: usize,
) -> Result<(Vec<f64>, Tensor<T>), CmdError> {
    let mut last = None;
    for _ in 0..warmup {
        last = Some(model.forward(x).map_err(data)?);
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        last = Some(model.forward(x).map_err(data)?);
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok((samples, last.expect("at least one forward ran")))
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

fn bench_form<T: Element>(
    model: &Model<T>,
    shape: Shape,
    seed: u64,
    warmup: usize,
    repeats: usize,
) -> Result<BenchRow, CmdError> {
    let mut rng = repnext::tensor::SplitMix64::new(seed ^ 0xBE7C);
    let x: Tensor<T> = Tensor::random(shape, &mut rng);
    let macs = model.macs(shape).map_err(usage)?;
    let (mut samples, _) = time_forward(model, &x, warmup, repeats)?;
    samples.sort_by(|a, b| a.partial_cmp(b).expect("timings are finite"));
    Ok(BenchRow {
        form: model.form().as_str().to_string(),
        params: model.param_counts().total(),
        macs,
        median_ms: percentile(&samples, 0.5),
        p10_ms: percentile(&samples, 0.1),
        p90_ms: percentile(&samples, 0.9),
    })
}

fn cmd_bench(args: BenchArgs) -> Result<u8, CmdError> {
    if args.repeats == 0 {
        return Err(CmdError {
            code: EXIT_USAGE,
            message: "--repeats must be >= 1".to_string(),
        });
    }
    let config = args.source.load()?;
    let shape = args.input.shape();
    // Validate the shape before any timing work.
    let probe: Model<f32> = build_model(&config, args.seed).map_err(usage)?;
    probe.out_shape(shape).map_err(usage)?;

    let rows = match &args.weights {
        Some(path) => match load_weights(&config, path).map_err(data)? {
            LoadedModel::Single(model) => bench_pair(&model, shape, &args)?,
            LoadedModel::Double(model) => bench_pair(&model, shape, &args)?,
        },
        None => bench_pair(&probe, shape, &args)?,
    };
    match args.format {
        Format::Json => print_json(&rows),
        _ => {
            println!("form,params,macs,median_ms,p10_ms,p90_ms");
            for row in &rows {
                println!(
                    "{},{},{},{:.3},{:.3},{:.3}",
                    row.form, row.params, row.macs, row.median_ms, row.p10_ms, row.p90_ms
                );
            }
        }
    }
    Ok(0)
}

fn bench_pair<T: Element>(
    model: &Model<T>,
    shape: Shape,
    args: &BenchArgs,
) -> Result<Vec<BenchRow>, CmdError> {
    if model.form() == Form::Fused {
        return Err(data(Error::AlreadyFused));
    }
    let fused = fuse_model(model).map_err(data)?;
    Ok(vec![
        bench_form(model, shape, args.seed, args.warmup, args.repeats)?,
        bench_form(&fused, shape, args.seed, args.warmup, args.repeats)?,
    ])
}

#[derive(Serialize)]
struct TopEntry {
    index: usize,
    value: f64,
}

#[derive(Serialize)]
struct RunSummary {
    form: String,
    input: [usize; 4],
    output: [usize; 4],
    topk: Vec<Vec<TopEntry>>,
    path: String,
}

fn cmd_run(args: RunArgs) -> Result<u8, CmdError> {
    reject_csv(args.format)?;
    let config = args.source.load()?;
    let loaded = load_weights(&config, &args.weights).map_err(data)?;
    let (_, tensor) = load_tensor(&args.input).map_err(data)?;
    // The input file is data, so every mismatch from here on (wrong channel
    // count, indivisible spatial size) is a data error, not a usage error.
    let in_shape = tensor.shape();
    let (logits, form) = match loaded {
        LoadedModel::Single(model) => {
            let x = match tensor {
                LoadedTensor::Single(t) => t,
                LoadedTensor::Double(t) => t.cast(),
            };
            (model.forward(&x).map_err(data)?.cast::<f64>(), model.form())
        }
        LoadedModel::Double(model) => {
            let x = tensor.into_double();
            (model.forward(&x).map_err(data)?, model.form())
        }
    };
    save_tensor(&args.out, "logits", &logits).map_err(data)?;

    let out_shape = logits.shape();
    let k = args.topk.min(out_shape.c);
    let mut topk = Vec::with_capacity(out_shape.n);
    for n in 0..out_shape.n {
        let mut entries: Vec<TopEntry> = (0..out_shape.c)
            .map(|c| TopEntry {
                index: c,
                value: logits.at(n, c, 0, 0),
            })
            .collect();
        entries.sort_by(|a, b| {
            b.value
                .partial_cmp(&a.value)
                .expect("logits are finite")
                .then(a.index.cmp(&b.index))
        });
        entries.truncate(k);
        topk.push(entries);
    }

    let summary = RunSummary {
        form: form.as_str().to_string(),
        input: [in_shape.n, in_shape.c, in_shape.h, in_shape.w],
        output: [out_shape.n, out_shape.c, out_shape.h, out_shape.w],
        topk,
        path: args.out.display().to_string(),
    };
    match args.format {
        Format::Json => print_json(&summary),
        _ => {
            for (n, entries) in summary.topk.iter().enumerate() {
                let rendered: Vec<String> = entries
                    .iter()
                    .map(|e| format!("{} ({:e})", e.index, e.value))
                    .collect();
                println!("top-{} n={}: {}", k, n, rendered.join(", "));
            }
            println!("wrote {}", summary.path);
        }
    }
    Ok(0)
}

fn print_json<T: Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("summary serializes")
    );
}
