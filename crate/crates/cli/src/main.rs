//! `evdown` command line.
//!
//! Exit codes: 0 success, 2 invalid arguments, 3 malformed input, 4 I/O
//! failure.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use evdown::epdf::{accumulate_density, default_gaussian_sigmas, gaussian_prior, EpdfError};
use evdown::evio::{
    read_events, read_prior, write_decision_log, write_events, write_stats, write_stats_file, EvioError, Format,
    StatsDocument,
};
use evdown::metrics::{density_divergence, match_subsequence, retention_from_indices, selectivity, DIVERGENCE_EPSILON};
use evdown::pipeline::{timing_probe, PipelineError};
use evdown::sampler::SamplerError;
use evdown::synth::{generate, EdgeSegment, PolarityModel, SceneSpec, SynthError};
use evdown::{run, Alpha, EventStream, Method, SamplerConfig, SensorGeometry, SigmoidParams};

const EXIT_USAGE: u8 = 2;
const EXIT_INPUT: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Input(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Input(_) => EXIT_INPUT,
            CliError::Io(_) => EXIT_IO,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Input(m) | CliError::Io(m) => m,
        }
    }

    /// Classifies a file-layer error, prefixing it with its origin.
    fn from_evio(context: &str, e: EvioError) -> Self {
        let msg = format!("{context}: {e}");
        if e.is_io() || matches!(e, EvioError::Json(_)) {
            CliError::Io(msg)
        } else {
            CliError::Input(msg)
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "evdown", version, about = "Online downsampling of event-camera streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Downsample an event file.
    Downsample(DownsampleArgs),
    /// Generate a labeled synthetic scene.
    Synth(SynthArgs),
    /// Compare a downsampled file against its original.
    Metrics(MetricsArgs),
    /// Time the samplers on an event file.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Deterministic,
    Uniform,
    Poisson,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Deterministic => Method::Deterministic,
            MethodArg::Uniform => Method::Uniform,
            MethodArg::Poisson => Method::Poisson,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Binary,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Binary => Format::Binary,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PolarityArg {
    Alternating,
    Random,
}

/// Input file options shared by every reader.
#[derive(Args)]
struct InputOpts {
    /// Input format; detected from magic bytes, then extension, when omitted.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Sensor width for CSV input (inferred from the data when omitted).
    #[arg(long, requires = "height")]
    width: Option<u16>,
    /// Sensor height for CSV input.
    #[arg(long, requires = "width")]
    height: Option<u16>,
}

impl InputOpts {
    fn geometry(&self) -> CliResult<Option<SensorGeometry>> {
        match (self.width, self.height) {
            (Some(w), Some(h)) => {
                SensorGeometry::new(w, h).map(Some).map_err(|e| CliError::Usage(format!("--width/--height: {e}")))
            }
            _ => Ok(None),
        }
    }

    fn read(&self, flag: &str, path: &Path) -> CliResult<EventStream> {
        read_events(path, self.format.map(Format::from), self.geometry()?)
            .map_err(|e| CliError::from_evio(&format!("{flag} {}", path.display()), e))
    }
}

/// Sampler options shared by `downsample` and `bench`.
#[derive(Args)]
struct SamplerOpts {
    #[arg(long, value_enum, default_value = "poisson")]
    method: MethodArg,
    /// Target retained fraction, in (0, 1].
    #[arg(long)]
    alpha: f64,
    /// Score-map window length in microseconds.
    #[arg(long, default_value_t = 6000)]
    window_us: u64,
    /// Deterministic cycle length in microseconds.
    #[arg(long, default_value_t = 100)]
    tw_us: u64,
    /// Sigmoid slope.
    #[arg(long, default_value_t = 5.0)]
    theta1: f64,
    /// Sigmoid midpoint.
    #[arg(long, default_value_t = 0.5)]
    theta2: f64,
    /// Prior grid file modulating the score map.
    #[arg(long, conflicts_with = "gaussian_prior")]
    prior: Option<PathBuf>,
    /// Use a centered gaussian prior with sigma a quarter of the sensor size.
    #[arg(long)]
    gaussian_prior: bool,
    #[arg(long, env = "EVDOWN_SEED", default_value_t = 0)]
    seed: u64,
    /// Disable the budget cap.
    #[arg(long)]
    no_cap: bool,
}

impl SamplerOpts {
    fn config(&self, geometry: SensorGeometry) -> CliResult<SamplerConfig> {
        let alpha = Alpha::new(self.alpha).map_err(|e| CliError::Usage(format!("--alpha: {e}")))?;
        let theta = SigmoidParams::new(self.theta1, self.theta2)
            .map_err(|e| CliError::Usage(format!("--theta1/--theta2: {e}")))?;
        let mut cfg = SamplerConfig::new(alpha)
            .with_seed(self.seed)
            .with_window_us(self.window_us)
            .with_tw_us(self.tw_us)
            .with_theta(theta)
            .with_cap(!self.no_cap);
        cfg.validate().map_err(|e| {
            let flag = match e {
                SamplerError::ZeroWindow { .. } => "--window-us/--tw-us",
                _ => "sampler",
            };
            CliError::Usage(format!("{flag}: {e}"))
        })?;
        if let Some(path) = &self.prior {
            let prior = read_prior(path, geometry)
                .map_err(|e| CliError::from_evio(&format!("--prior {}", path.display()), e))?;
            cfg = cfg.with_prior(prior);
        } else if self.gaussian_prior {
            let (sx, sy) = default_gaussian_sigmas(geometry);
            let prior = gaussian_prior(geometry, sx, sy)
                .map_err(|e: EpdfError| CliError::Usage(format!("--gaussian-prior: {e}")))?;
            cfg = cfg.with_prior(prior);
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct DownsampleArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    input_opts: InputOpts,
    #[command(flatten)]
    sampler: SamplerOpts,
    /// Output format; from the output extension when omitted.
    #[arg(long, value_enum)]
    output_format: Option<FormatArg>,
    /// Stats document path, or "-" for stdout.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Per-event decision log (CSV).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene description (JSON).
    #[arg(long, conflicts_with_all = ["reference", "width", "height", "duration_us"])]
    spec: Option<PathBuf>,
    /// The built-in selectivity reference scene.
    #[arg(long)]
    reference: bool,
    #[arg(long)]
    output: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long, env = "EVDOWN_SEED")]
    seed: Option<u64>,
    #[arg(long, requires = "height")]
    width: Option<u16>,
    #[arg(long, requires = "width")]
    height: Option<u16>,
    #[arg(long)]
    duration_us: Option<u64>,
    /// Background events per pixel per second.
    #[arg(long, default_value_t = 0.0)]
    noise_rate: f64,
    /// Edge as x0,y0,x1,y1[,vx,vy] (pixels, pixels per second); repeatable.
    #[arg(long = "edge", value_parser = parse_edge)]
    edges: Vec<[f64; 6]>,
    /// Events per second per edge pixel.
    #[arg(long, default_value_t = 500.0)]
    edge_rate: f64,
    #[arg(long, value_enum, default_value = "alternating")]
    polarity: PolarityArg,
    #[arg(long, value_enum)]
    output_format: Option<FormatArg>,
}

fn parse_edge(s: &str) -> Result<[f64; 6], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad number {p:?}")))
        .collect::<Result<_, _>>()?;
    match v.len() {
        4 => Ok([v[0], v[1], v[2], v[3], 0.0, 0.0]),
        6 => Ok([v[0], v[1], v[2], v[3], v[4], v[5]]),
        n => Err(format!("expected 4 or 6 comma-separated values, got {n}")),
    }
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    downsampled: PathBuf,
    /// Report path, or "-" for stdout.
    #[arg(long, default_value = "-")]
    out: PathBuf,
    /// Window length for the per-window retention series.
    #[arg(long, default_value_t = 6000)]
    window_us: u64,
    #[command(flatten)]
    input_opts: InputOpts,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    input_opts: InputOpts,
    #[command(flatten)]
    sampler: SamplerOpts,
    #[arg(long, default_value_t = 5)]
    repeat: usize,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

fn output_format(path: &Path, cli: Option<FormatArg>) -> Format {
    cli.map(Format::from).unwrap_or_else(|| Format::from_extension(path))
}

fn pipeline_error(e: PipelineError) -> CliError {
    match e {
        PipelineError::Config(e) => CliError::Usage(e.to_string()),
        PipelineError::Prior(e) => CliError::Usage(format!("--prior: {e}")),
        other => CliError::Input(format!("--input: {other}")),
    }
}

fn is_stdout(path: &Path) -> bool {
    path.as_os_str() == "-"
}

fn emit_stats(doc: &StatsDocument, path: &Path, flag: &str) -> CliResult {
    if is_stdout(path) {
        write_stats(doc, io::stdout().lock()).map_err(|e| CliError::from_evio(flag, e))
    } else {
        write_stats_file(doc, path).map_err(|e| CliError::from_evio(&format!("{flag} {}", path.display()), e))
    }
}

fn downsample(args: DownsampleArgs) -> CliResult {
    if !(args.sampler.alpha > 0.0 && args.sampler.alpha <= 1.0) {
        return Err(CliError::Usage(format!("--alpha: {} is outside (0, 1]", args.sampler.alpha)));
    }
    let stream = args.input_opts.read("--input", &args.input)?;
    let cfg = args.sampler.config(stream.geometry())?;
    let out = run(&stream, args.sampler.method.into(), &cfg).map_err(pipeline_error)?;

    let format = output_format(&args.output, args.output_format);
    write_events(&out.stream, &args.output, format)
        .map_err(|e| CliError::from_evio(&format!("--output {}", args.output.display()), e))?;
    if let Some(path) = &args.log {
        let ctx = || format!("--log {}", path.display());
        let file = File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", ctx())))?;
        write_decision_log(&out.log, BufWriter::new(file)).map_err(|e| CliError::Io(format!("{}: {e}", ctx())))?;
    }
    if let Some(path) = &args.stats {
        let sel = if stream.is_labeled() {
            Some(selectivity(&stream, &out.kept, Some(cfg.alpha.get())).map_err(|e| CliError::Input(e.to_string()))?)
        } else {
            None
        };
        emit_stats(&StatsDocument::from_run(&out.stats, sel), path, "--stats")?;
    }
    eprintln!(
        "{}: kept {} of {} events (ratio {:.6}, {} capped)",
        out.stats.method,
        out.stats.retained,
        out.stats.processed,
        out.stats.ratio(),
        out.stats.capped
    );
    Ok(())
}

fn inline_spec(args: &SynthArgs) -> CliResult<SceneSpec> {
    let (Some(width), Some(height), Some(duration_us)) = (args.width, args.height, args.duration_us) else {
        return Err(CliError::Usage("synth needs --spec, --reference, or --width, --height and --duration-us".into()));
    };
    let edges = args
        .edges
        .iter()
        .map(|e| EdgeSegment { start: [e[0], e[1]], end: [e[2], e[3]], velocity: [e[4], e[5]], rate: args.edge_rate })
        .collect();
    let polarity = match args.polarity {
        PolarityArg::Alternating => PolarityModel::Alternating,
        PolarityArg::Random => PolarityModel::Random,
    };
    Ok(SceneSpec { width, height, duration_us, edges, noise_rate: args.noise_rate, polarity, seed: 0 })
}

fn synth(args: SynthArgs) -> CliResult {
    let mut spec = if let Some(path) = &args.spec {
        let ctx = format!("--spec {}", path.display());
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{ctx}: {e}")))?;
        serde_json::from_str::<SceneSpec>(&text).map_err(|e| CliError::Input(format!("{ctx}: {e}")))?
    } else if args.reference {
        SceneSpec::reference(0)
    } else {
        inline_spec(&args)?
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let scene = generate(&spec).map_err(|e: SynthError| CliError::Usage(format!("scene: {e}")))?;
    let format = output_format(&args.output, args.output_format);
    if format == Format::Binary {
        eprintln!("note: binary output carries no labels");
    }
    write_events(&scene.stream, &args.output, format)
        .map_err(|e| CliError::from_evio(&format!("--output {}", args.output.display()), e))?;
    eprintln!("wrote {} events to {}", scene.stream.len(), args.output.display());
    Ok(())
}

fn metrics(args: MetricsArgs) -> CliResult {
    if args.window_us == 0 {
        return Err(CliError::Usage("--window-us: must be positive".into()));
    }
    let original = args.input_opts.read("--original", &args.original)?;
    let geometry = Some(args.input_opts.geometry()?.unwrap_or(original.geometry()));
    let downsampled = read_events(&args.downsampled, args.input_opts.format.map(Format::from), geometry)
        .map_err(|e| CliError::from_evio(&format!("--downsampled {}", args.downsampled.display()), e))?;
    let kept = match_subsequence(original.events(), downsampled.events())
        .map_err(|e| CliError::Input(format!("--downsampled {}: {e}", args.downsampled.display())))?;
    let retention = retention_from_indices(&original, &kept, args.window_us);
    let sel = if original.is_labeled() {
        Some(selectivity(&original, &kept, None).map_err(|e| CliError::Input(e.to_string()))?)
    } else {
        None
    };
    let g = original.geometry();
    let full = accumulate_density(original.events(), g, 0).map_err(|e| CliError::Input(format!("--original: {e}")))?;
    let part =
        accumulate_density(downsampled.events(), g, 0).map_err(|e| CliError::Input(format!("--downsampled: {e}")))?;
    let divergence = density_divergence(&full, &part).ok();

    let mut doc = StatsDocument {
        alpha: None,
        method: None,
        seed: None,
        processed: original.len() as u64,
        retained: kept.len() as u64,
        capped: None,
        ratio: retention.ratio,
        per_window_ratios: retention.per_window_ratios(),
        ms_per_kev_total: 0.0,
        ms_per_kev_pdf: 0.0,
        ms_per_kev_eval: 0.0,
        selectivity: sel,
        extra: serde_json::Map::new(),
    };
    doc.extra.insert("density_divergence".into(), divergence.into());
    doc.extra.insert("divergence_epsilon".into(), DIVERGENCE_EPSILON.into());
    emit_stats(&doc, &args.out, "--out")
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn bench(args: BenchArgs) -> CliResult {
    if args.repeat == 0 {
        return Err(CliError::Usage("--repeat: must be at least 1".into()));
    }
    if !(args.sampler.alpha > 0.0 && args.sampler.alpha <= 1.0) {
        return Err(CliError::Usage(format!("--alpha: {} is outside (0, 1]", args.sampler.alpha)));
    }
    let stream = args.input_opts.read("--input", &args.input)?;
    let cfg = args.sampler.config(stream.geometry())?;
    let method: Method = args.sampler.method.into();
    let (mut total, mut pdf, mut eval) = (Vec::new(), Vec::new(), Vec::new());
    let mut wall = Duration::ZERO;
    for _ in 0..args.repeat {
        let out = run(&stream, method, &cfg).map_err(pipeline_error)?;
        wall += out.stats.timing.total;
        let t = timing_probe(&out.stats);
        total.push(t.total);
        pdf.push(t.pdf);
        eval.push(t.eval);
    }
    let (total, pdf, eval) = (median(total), median(pdf), median(eval));
    let mut stdout = io::stdout().lock();
    let res = if args.json {
        let doc = serde_json::json!({
            "method": method.name(),
            "alpha": cfg.alpha.get(),
            "events": stream.len(),
            "repeat": args.repeat,
            "ms_per_kev_total": total,
            "ms_per_kev_pdf": pdf,
            "ms_per_kev_eval": eval,
        });
        writeln!(stdout, "{}", serde_json::to_string_pretty(&doc).expect("json"))
    } else {
        writeln!(
            stdout,
            "method {}  alpha {}  events {}  repeat {}  wall {:.3} s\nms/Kev (median)  total {total:.4}  pdf {pdf:.4}  eval {eval:.4}",
            method.name(),
            cfg.alpha.get(),
            stream.len(),
            args.repeat,
            wall.as_secs_f64()
        )
    };
    res.map_err(|e| CliError::Io(format!("stdout: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Downsample(a) => downsample(a),
        Command::Synth(a) => synth(a),
        Command::Metrics(a) => metrics(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("evdown: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
