//! `pcd`: perception characteristics distance from detection logs.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pcd_core::cli_report::{
    emit_curve_trace, emit_report, emit_surface, run_evaluate, surface_from_cache, EvaluateConfig,
    EvaluationReport, OutputFormat,
};
use pcd_core::synth_oracle::{generate, series_to_precomputed_csv, MeanKind, SynthSpec};
use pcd_core::{
    build_series, parse_detection_log, BoundaryKnots, Centering, ChangePointTest, Error,
    KnotPlacement, PcdDomain, RejectionRule, Schema, SigmaMode, SplineConfig, ThresholdGrid,
};

#[derive(Parser)]
#[command(
    name = "pcd",
    version,
    about = "Perception characteristics distance (PCD / mPCD) evaluation"
)]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline on a detection log and print the report.
    Eval(EvalArgs),
    /// Recompute the PCD grid from a cached JSON report and its input log.
    Surface(SurfaceArgs),
    /// Generate a synthetic precomputed-schema log with planted variance changes.
    Synth(SynthArgs),
    /// Fit a log and print the curve trace (x, f(x), sigma(x), P(y > y_t)).
    Trace(TraceArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemaArg {
    RawBoxes,
    Precomputed,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    CsvSummary,
}

impl From<FormatArg> for OutputFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => OutputFormat::Json,
            FormatArg::CsvSummary => OutputFormat::CsvSummary,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SigmaModeArg {
    SegmentRaw,
    SegmentResidual,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlacementArg {
    Uniform,
    Quantile,
}

#[derive(Clone, Copy, ValueEnum)]
enum BoundaryArg {
    Extended,
    Clamped,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    LikelihoodRatio,
    Literal,
}

#[derive(Clone, Copy, ValueEnum)]
enum CenteringArg {
    PerPoint,
    Literal,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Observed,
    Dense,
}

#[derive(Args)]
struct InputArgs {
    /// Detection log (CSV).
    #[arg(long)]
    input: PathBuf,
    /// Log schema; inferred from the header when omitted.
    #[arg(long, value_enum)]
    schema: Option<SchemaArg>,
}

#[derive(Args)]
struct GridArgs {
    /// Threshold grid LO:STEP:HI, used for both y_t and p_t.
    #[arg(long, default_value = "0.1:0.1:0.9")]
    grid: String,
    /// PCD candidates: observed distances, or a dense grid over the curve.
    #[arg(long, value_enum, default_value = "observed")]
    pcd_domain: DomainArg,
    /// Points of the dense PCD grid.
    #[arg(long, default_value_t = 1000)]
    dense_resolution: usize,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Significance level of each change-point test.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Second-difference penalty weight.
    #[arg(long, default_value_t = 0.6)]
    lambda: f64,
    /// Number of B-spline basis functions.
    #[arg(long, default_value_t = 10)]
    knots: usize,
    /// B-spline degree.
    #[arg(long, default_value_t = 3)]
    degree: usize,
    #[arg(long, value_enum, default_value = "uniform")]
    knot_placement: PlacementArg,
    #[arg(long, value_enum, default_value = "extended")]
    boundary_knots: BoundaryArg,
    /// Quality threshold for the headline PCD.
    #[arg(long, default_value_t = 0.5)]
    yt: f64,
    /// Probability threshold for the headline PCD.
    #[arg(long, default_value_t = 0.5)]
    pt: f64,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, value_enum, default_value = "segment-raw")]
    sigma_mode: SigmaModeArg,
    /// Minimum points on each side of a change point.
    #[arg(long, default_value_t = 5)]
    min_segment: usize,
    #[arg(long, value_enum, default_value = "likelihood-ratio")]
    rejection_rule: RuleArg,
    #[arg(long, value_enum, default_value = "per-point")]
    centering: CenteringArg,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,
    /// Write the report here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Also write a curve trace CSV to this path.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    trace_resolution: usize,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long, default_value_t = 200)]
    resolution: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SurfaceArgs {
    /// JSON report written by `pcd eval`.
    #[arg(long)]
    fit: PathBuf,
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// TOML file describing the series; the flags below are ignored when given.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    n: usize,
    /// Distance range LO:HI in meters.
    #[arg(long, default_value = "0:300")]
    x_range: String,
    /// constant:C, linear:A,B or logistic:TOP,MID,SCALE
    #[arg(long, default_value = "constant:0.5")]
    mean: String,
    /// Comma-separated change positions in meters.
    #[arg(long, value_delimiter = ',')]
    boundaries: Vec<f64>,
    /// Comma-separated per-segment standard deviations.
    #[arg(long, value_delimiter = ',', default_value = "0.1")]
    sigmas: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: Option<PathBuf>,
}

fn grid_and_domain(args: &GridArgs) -> pcd_core::Result<(ThresholdGrid, PcdDomain)> {
    let grid = ThresholdGrid::square(ThresholdGrid::parse_axis(&args.grid)?)?;
    let domain = match args.pcd_domain {
        DomainArg::Observed => PcdDomain::Observed,
        DomainArg::Dense => PcdDomain::Dense {
            resolution: args.dense_resolution,
        },
    };
    Ok((grid, domain))
}

fn schema(arg: Option<SchemaArg>) -> Option<Schema> {
    arg.map(|s| match s {
        SchemaArg::RawBoxes => Schema::RawBoxes,
        SchemaArg::Precomputed => Schema::Precomputed,
    })
}

impl PipelineArgs {
    fn config(&self) -> pcd_core::Result<EvaluateConfig> {
        let (grid, pcd_domain) = grid_and_domain(&self.grid)?;
        Ok(EvaluateConfig {
            input: self.input.input.display().to_string(),
            schema: schema(self.input.schema),
            spline: SplineConfig {
                num_basis: self.knots,
                degree: self.degree,
                lambda: self.lambda,
                knot_placement: match self.knot_placement {
                    PlacementArg::Uniform => KnotPlacement::Uniform,
                    PlacementArg::Quantile => KnotPlacement::Quantile,
                },
                boundary_knots: match self.boundary_knots {
                    BoundaryArg::Extended => BoundaryKnots::Extended,
                    BoundaryArg::Clamped => BoundaryKnots::Clamped,
                },
            },
            change_point: ChangePointTest {
                alpha: self.alpha,
                min_segment: self.min_segment,
                sigma_mode: match self.sigma_mode {
                    SigmaModeArg::SegmentRaw => SigmaMode::SegmentRaw,
                    SigmaModeArg::SegmentResidual => SigmaMode::SegmentResidual,
                },
                centering: match self.centering {
                    CenteringArg::PerPoint => Centering::PerPoint,
                    CenteringArg::Literal => Centering::Literal,
                },
                rule: match self.rejection_rule {
                    RuleArg::LikelihoodRatio => RejectionRule::LikelihoodRatio,
                    RuleArg::Literal => RejectionRule::Literal,
                },
            },
            y_t: self.yt,
            p_t: self.pt,
            grid,
            pcd_domain,
        })
    }
}

fn write_out(path: Option<&PathBuf>, text: &str) -> pcd_core::Result<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn parse_range(spec: &str) -> pcd_core::Result<(f64, f64)> {
    let bad = || Error::InvalidConfig(format!("range `{spec}` is not LO:HI"));
    let (lo, hi) = spec.split_once(':').ok_or_else(bad)?;
    Ok((
        lo.trim().parse().map_err(|_| bad())?,
        hi.trim().parse().map_err(|_| bad())?,
    ))
}

fn run(command: Command) -> pcd_core::Result<()> {
    match command {
        Command::Eval(args) => {
            let config = args.pipeline.config()?;
            let evaluation = run_evaluate(&config)?;
            for w in &evaluation.report.warnings {
                log::warn!("{w}");
            }
            if let Some(path) = &args.trace {
                let trace = emit_curve_trace(&evaluation.model, config.y_t, args.trace_resolution)?;
                fs::write(path, trace)?;
            }
            let text = emit_report(&evaluation.report, args.format.into())?;
            write_out(args.output.as_ref(), &text)
        }
        Command::Trace(args) => {
            let config = args.pipeline.config()?;
            let evaluation = run_evaluate(&config)?;
            let trace = emit_curve_trace(&evaluation.model, config.y_t, args.resolution)?;
            write_out(args.output.as_ref(), &trace)
        }
        Command::Surface(args) => {
            let report: EvaluationReport = serde_json::from_str(&fs::read_to_string(&args.fit)?)?;
            let file = fs::File::open(&args.input.input)?;
            let (_, records) = parse_detection_log(file, schema(args.input.schema))?;
            let series = build_series(&records)?;
            let (grid, domain) = grid_and_domain(&args.grid)?;
            let surface = surface_from_cache(&report, &series, &grid, domain)?;
            write_out(
                args.output.as_ref(),
                &emit_surface(&surface, args.format.into())?,
            )
        }
        Command::Synth(args) => {
            let spec = match &args.config {
                Some(path) => SynthSpec::from_toml(&fs::read_to_string(path)?)?,
                None => SynthSpec {
                    mean: MeanKind::parse(&args.mean)?,
                    boundaries: args.boundaries.clone(),
                    segment_sigmas: args.sigmas.clone(),
                    n: args.n,
                    x_range: parse_range(&args.x_range)?,
                    seed: args.seed,
                },
            };
            let (series, _) = generate(&spec)?;
            write_out(args.output.as_ref(), &series_to_precomputed_csv(&series))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        builder = builder.num_threads(t);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
