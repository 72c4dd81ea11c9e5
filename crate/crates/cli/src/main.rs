use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use scalesearch::calibration::{self, evaluate, sweep, sweep_csv, CalibrationSet, Method, SearchConfig};
use scalesearch::intsim::{forward_quantized, AccumulatorModel, AccumulatorWidth, OverflowPolicy};
use scalesearch::io::{self, ConfigEcho, ScaleFile, ToySpec};
use scalesearch::model::forward_fp32;
use scalesearch::{Bits, Error, ModelGraph, RoundingMode};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_OVERFLOW: u8 = 4;
const EXIT_BUDGET: u8 = 5;

#[derive(Parser)]
#[command(
    name = "scalesearch",
    version,
    about = "Post-training quantization scale search and integer inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Choose quantization scales for a model and write a scale file.
    Calibrate(CalibrateArgs),
    /// Run one input through the FP32 or the simulated integer network.
    Infer(InferArgs),
    /// Mean FP32-vs-quantized cosine similarity per layer.
    Eval(EvalArgs),
    /// Compare methods across bit widths.
    Sweep(SweepArgs),
    /// Write a seeded toy model and synthetic calibration inputs.
    GenToy(GenToyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Eq,
    Kld,
    Maxabs,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Eq => Method::Eq,
            MethodArg::Kld => Method::Kld,
            MethodArg::Maxabs => Method::MaxAbs,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RoundingArg {
    Nearest,
    Ceil,
    Floor,
}

impl From<RoundingArg> for RoundingMode {
    fn from(r: RoundingArg) -> Self {
        match r {
            RoundingArg::Nearest => RoundingMode::Nearest,
            RoundingArg::Ceil => RoundingMode::Ceil,
            RoundingArg::Floor => RoundingMode::Floor,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Engine {
    Fp32,
    Int,
}

#[derive(Clone, Copy, ValueEnum)]
enum OverflowArg {
    Error,
    Saturate,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Cosine,
}

#[derive(clap::Args)]
struct SearchArgs {
    /// Calibration samples drawn from --data.
    #[arg(long, default_value_t = 50)]
    samples: usize,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    beta: f64,
    /// Candidates per search interval.
    #[arg(long, default_value_t = 100)]
    grid: usize,
    #[arg(long, default_value_t = 1)]
    rounds: usize,
    #[arg(long, value_enum, default_value = "nearest")]
    rounding: RoundingArg,
    /// Seed for drawing calibration samples.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Wall-clock limit for the search, in seconds.
    #[arg(long)]
    time_budget: Option<f64>,
}

impl SearchArgs {
    fn config(&self, bits: Bits) -> Result<SearchConfig> {
        let time_budget = match self.time_budget {
            Some(s) if !(s >= 0.0 && s.is_finite()) => {
                return Err(Error::Param(format!("time budget must be non-negative, got {s}")).into())
            }
            Some(s) => Some(Duration::from_secs_f64(s)),
            None => None,
        };
        let cfg = SearchConfig {
            alpha: self.alpha,
            beta: self.beta,
            grid_points: self.grid,
            rounds: self.rounds,
            samples: self.samples,
            rounding: self.rounding.into(),
            time_budget,
            ..SearchConfig::new(bits)
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(clap::Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory of calibration tensor files.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(2..=8))]
    bits: u8,
    #[arg(long, value_enum, default_value = "eq")]
    method: MethodArg,
    #[command(flatten)]
    search: SearchArgs,
    /// Scale file to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-layer CSV report; defaults to the scale file path with a .csv extension.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(clap::Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// Scale file; required for the integer engine.
    #[arg(long)]
    scales: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "int")]
    engine: Engine,
    #[arg(long, default_value_t = 16, value_parser = parse_width)]
    acc_width: u32,
    #[arg(long, value_enum, default_value = "error")]
    overflow: OverflowArg,
    /// Override the 16-bit group size (testing unsafe groupings).
    #[arg(long, hide = true)]
    force_group: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    scales: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 50)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "cosine")]
    metric: Metric,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u8).range(2..=8))]
    bits_from: u8,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u8).range(2..=8))]
    bits_to: u8,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', default_value = "eq,kld,maxabs")]
    methods: Vec<String>,
    #[command(flatten)]
    search: SearchArgs,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct GenToyArgs {
    /// Output directory; receives model.toml, weights and calib/.
    #[arg(long)]
    out: PathBuf,
    /// Layer list, e.g. conv:8:3:1:1,relu,conv:16:3:2:1,relu,conv:10:3:1:0
    #[arg(long)]
    arch: Option<String>,
    /// Input shape as NxCxHxW.
    #[arg(long, default_value = "1x3x12x12")]
    input: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Synthetic calibration inputs to write.
    #[arg(long, default_value_t = 64)]
    samples: usize,
}

/// A run that finished but must report a non-zero status.
#[derive(Debug)]
struct BudgetExceeded;

impl std::fmt::Display for BudgetExceeded {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("time budget exceeded; scales written from the partial search")
    }
}

impl std::error::Error for BudgetExceeded {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<BudgetExceeded>().is_some() {
        return EXIT_BUDGET;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Overflow(_)) => EXIT_OVERFLOW,
        Some(Error::Param(_)) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Calibrate(args) => run_calibrate(args),
        Command::Infer(args) => run_infer(args),
        Command::Eval(args) => run_eval(args),
        Command::Sweep(args) => run_sweep(args),
        Command::GenToy(args) => run_gen_toy(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn load_inputs(model: &Path, data: &Path, samples: usize, seed: u64) -> Result<(ModelGraph, CalibrationSet)> {
    let model = io::load_model(model)?;
    let calib = io::load_calibration(data, samples, seed)?;
    calib.check_model(&model)?;
    Ok((model, calib))
}

fn run_calibrate(args: CalibrateArgs) -> Result<()> {
    let bits = Bits::new(args.bits)?;
    let cfg = args.search.config(bits)?;
    let (model, calib) = load_inputs(&args.model, &args.data, cfg.samples, args.search.seed)?;
    let method = Method::from(args.method);
    let acc = AccumulatorModel::wide(bits);

    let started = Instant::now();
    let result = calibration::calibrate(method, &model, &calib, &cfg, &acc)?;
    let elapsed = started.elapsed();

    let file = ScaleFile {
        method,
        config: ConfigEcho::from_config(&cfg, Some(args.search.seed)),
        scales: result.scales,
    };
    io::save_scales(&args.out, &file, Some(&model))?;

    let baseline = calibration::init_scales_maxabs(&model, &calib, bits, cfg.rounding)?;
    let before = evaluate(&model, &baseline, calib.samples(), &acc)?;
    let after = evaluate(&model, &file.scales, calib.samples(), &acc)?;
    let mut csv = String::from("layer,method,bits,mean_cosine_before,mean_cosine_after,wall_time_s\n");
    for (layer, _) in file.scales.iter() {
        let wall: Duration = if result.log.is_empty() {
            elapsed / file.scales.len() as u32
        } else {
            result
                .log
                .iter()
                .filter(|e| e.layer == layer)
                .map(|e| e.wall_time)
                .sum()
        };
        let _ = writeln!(
            csv,
            "{layer},{method},{bits},{},{},{:.6}",
            before.per_layer[layer],
            after.per_layer[layer],
            wall.as_secs_f64()
        );
    }
    let report = args.report.unwrap_or_else(|| args.out.with_extension("csv"));
    fs::write(&report, csv).with_context(|| format!("writing {}", report.display()))?;
    eprintln!(
        "{method} b={bits}: final-output cosine {:.6} (max-abs {:.6}) in {:.2}s",
        after.final_output,
        before.final_output,
        elapsed.as_secs_f64()
    );
    if result.budget_exhausted {
        return Err(BudgetExceeded.into());
    }
    Ok(())
}

fn run_infer(args: InferArgs) -> Result<()> {
    let model = io::load_model(&args.model)?;
    let input = io::load_f32(&args.input)?;
    let outputs = match args.engine {
        Engine::Fp32 => forward_fp32(&model, &input)?,
        Engine::Int => {
            let Some(scales_path) = &args.scales else {
                Cli::command()
                    .error(
                        clap::error::ErrorKind::MissingRequiredArgument,
                        "--scales is required with --engine int",
                    )
                    .exit();
            };
            let file = io::load_scales(scales_path)?;
            file.check_model(&model)?;
            let bits = file
                .scales
                .iter()
                .next()
                .map(|(_, p)| p.bits)
                .ok_or_else(|| Error::Config("scale file lists no layers".into()))?;
            let policy = match args.overflow {
                OverflowArg::Error => OverflowPolicy::Error,
                OverflowArg::Saturate => OverflowPolicy::Saturate,
            };
            let mut acc = AccumulatorModel::new(bits, AccumulatorWidth::from_bits(args.acc_width)?, policy);
            if let Some(g) = args.force_group {
                acc = acc.with_forced_group(g)?;
            }
            forward_quantized(&model, &file.scales, &input, &acc)?
        }
    };
    let last = outputs.into_iter().last().expect("model has layers");
    io::save_tensor(&args.out, &last.into())?;
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let Metric::Cosine = args.metric;
    let (model, calib) = load_inputs(&args.model, &args.data, args.samples, args.seed)?;
    let file = io::load_scales(&args.scales)?;
    file.check_model(&model)?;
    let bits = file
        .scales
        .iter()
        .next()
        .map(|(_, p)| p.bits)
        .expect("checked non-empty");
    let report = evaluate(&model, &file.scales, calib.samples(), &AccumulatorModel::narrow(bits))?;
    let mut csv = String::from("layer,kind,mean_cosine\n");
    for (l, value) in report.per_layer.iter().enumerate() {
        let _ = writeln!(csv, "{l},{},{value}", model.layers()[l].kind_name());
    }
    let _ = writeln!(csv, "final,output,{}", report.final_output);
    emit(args.out.as_deref(), &csv)
}

fn run_sweep(args: SweepArgs) -> Result<()> {
    let methods: Vec<Method> = args
        .methods
        .iter()
        .map(|m| m.trim())
        .filter(|m| !m.is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    if methods.is_empty() {
        Cli::command()
            .error(clap::error::ErrorKind::ValueValidation, "--methods lists no methods")
            .exit();
    }
    if args.bits_from > args.bits_to {
        Cli::command()
            .error(clap::error::ErrorKind::ValueValidation, "--bits-from exceeds --bits-to")
            .exit();
    }
    let cfg = args.search.config(Bits::new(args.bits_to)?)?;
    let (model, calib) = load_inputs(&args.model, &args.data, cfg.samples, args.search.seed)?;
    let rows = sweep(&model, &calib, args.bits_from..=args.bits_to, &methods, &cfg)?;
    emit(args.out.as_deref(), &sweep_csv(&rows))
}

fn run_gen_toy(args: GenToyArgs) -> Result<()> {
    let shape: Vec<usize> = args
        .input
        .split('x')
        .map(|d| d.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::Param(format!("bad input shape '{}'", args.input)))?;
    let spec = match &args.arch {
        Some(arch) => ToySpec::parse(shape, arch)?,
        None => ToySpec {
            input_shape: shape,
            ..ToySpec::three_conv()
        },
    };
    let model = io::generate_toy_model(&spec, args.seed, Some(&args.out))?;
    io::generate_calibration_data(
        &args.out.join("calib"),
        model.input_shape(),
        args.samples,
        args.seed ^ 0x5eed,
    )?;
    eprintln!(
        "wrote {} ({} layers) and {} calibration inputs",
        args.out.join("model.toml").display(),
        model.layers().len(),
        args.samples
    );
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_width(s: &str) -> Result<u32, String> {
    match s {
        "16" => Ok(16),
        "32" => Ok(32),
        _ => Err(format!("accumulator width must be 16 or 32, got '{s}'")),
    }
}
