//! `rddeval` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or parse
//! error. Diagnostics and warnings go to standard error only.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dataset::{
    self, dataset_stats, load_annotations, parse_detections, write_scored, write_submission,
    Detection, DetectionFormat, ParseMode, Warning,
};
use crate::fusion::{self, FusionConfig, FusionError, FusionStrategy, ModelDetections};
use crate::metrics::{evaluate, ground_truth_index, GroundTruthIndex, MetricsError};
use crate::report::{emit_curve, metrics_key_values, render_metrics, render_stats, Sections};

/// Environment fallback for `--threads`.
pub const THREADS_ENV: &str = "RDDEVAL_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "rddeval",
    version,
    about = "Score and fuse road-damage detections"
)]
pub struct Cli {
    /// Worker threads for per-image work (falls back to RDDEVAL_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score detections against ground truth (F1 at IoU > threshold).
    Eval(EvalArgs),
    /// Combine per-model detection files into one ensemble prediction.
    Fuse(FuseArgs),
    /// Evaluate F1 over a grid of confidence thresholds.
    Sweep(SweepArgs),
    /// Count images per country and boxes per class.
    Stats(StatsArgs),
    /// Convert between detection formats.
    Convert(ConvertArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Submission,
    Scored,
}

impl From<FormatArg> for DetectionFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Submission => DetectionFormat::Submission,
            FormatArg::Scored => DetectionFormat::Scored,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputArg {
    Text,
    Kv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    UnionNms,
    Consensus,
    WeightedFusion,
}

impl From<StrategyArg> for FusionStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::UnionNms => FusionStrategy::UnionNms,
            StrategyArg::Consensus => FusionStrategy::Consensus,
            StrategyArg::WeightedFusion => FusionStrategy::WeightedFusion,
        }
    }
}

#[derive(Debug, Args)]
pub struct GtArgs {
    /// Annotation directory, single XML file, or list file of XML paths.
    #[arg(long)]
    pub gt: PathBuf,
    /// Fail on damage classes outside D00/D10/D20/D40 instead of dropping them.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub gt: GtArgs,
    #[arg(long)]
    pub det: PathBuf,
    #[arg(long, value_enum, default_value = "scored")]
    pub format: FormatArg,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    #[arg(long, default_value_t = 0.0)]
    pub conf: f64,
    #[arg(long)]
    pub per_class: bool,
    #[arg(long)]
    pub per_country: bool,
    /// `text` table or full-precision `kv` document.
    #[arg(long, value_enum, default_value = "text")]
    pub output: OutputArg,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// One `scored` file per model; the file stem is the model id.
    #[arg(long = "det", required = true)]
    pub dets: Vec<PathBuf>,
    /// key=value config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    #[arg(long)]
    pub iou_cluster: Option<f64>,
    #[arg(long)]
    pub min_votes: Option<usize>,
    /// Comma list aligned with --det (`1,2,0.5`) or `model=weight` pairs.
    #[arg(long)]
    pub weights: Option<String>,
    #[arg(long)]
    pub skip_box_threshold: Option<f64>,
    /// Output path; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub gt: GtArgs,
    #[arg(long)]
    pub det: PathBuf,
    #[arg(long, value_enum, default_value = "scored")]
    pub format: FormatArg,
    /// `start:stop:step` (stop excluded) or a comma list.
    #[arg(long, default_value = "0:1:0.05")]
    pub grid: String,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    #[arg(long)]
    pub curve_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub gt: GtArgs,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub in_format: FormatArg,
    /// Output path; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub out_format: FormatArg,
    #[arg(long, default_value_t = 0.0)]
    pub conf: f64,
    #[arg(long)]
    pub max_per_image: Option<usize>,
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit 1.
    Usage(String),
    /// Unreadable or unparsable input; exit 2.
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) => m,
        }
    }
}

impl From<dataset::DatasetError> for CliError {
    fn from(e: dataset::DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::InvalidIouThreshold(_) => CliError::Usage(e.to_string()),
            MetricsError::MixedImageIds(..) => CliError::Data(e.to_string()),
        }
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::MixedImageIds(..) => CliError::Data(e.to_string()),
            FusionError::Metrics(m) => m.into(),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

/// Parse `start:stop:step` (start included, stop excluded) or `a,b,c`.
pub fn parse_grid(grid: &str) -> Result<Vec<f64>, String> {
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| format!("bad grid number `{}`", s.trim()))
    };
    if let [start, stop, step] = grid.split(':').collect::<Vec<_>>()[..] {
        let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
        if !(step > 0.0 && step.is_finite()) {
            return Err(format!("grid step must be positive, got {step}"));
        }
        let mut grid = Vec::new();
        for i in 0.. {
            // round away accumulated binary error (0.15000000000000002 → 0.15)
            let v = ((start + i as f64 * step) * 1e12).round() / 1e12;
            if v >= stop - 1e-12 {
                break;
            }
            grid.push(v);
        }
        return Ok(grid);
    }
    grid.split(',').map(num).collect()
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_output(
    path: Option<&Path>,
    text: &str,
    stdout: &mut (dyn Write + Send),
) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| CliError::Data(format!("{}: {e}", p.display()))),
        None => stdout
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Data(e.to_string())),
    }
}

fn report_warnings(warnings: &[Warning], stderr: &mut (dyn Write + Send)) {
    for w in warnings {
        let _ = writeln!(stderr, "{w}");
    }
}

fn mode(strict: bool) -> ParseMode {
    if strict {
        ParseMode::Strict
    } else {
        ParseMode::Lenient
    }
}

fn load_gt(args: &GtArgs, stderr: &mut (dyn Write + Send)) -> Result<GroundTruthIndex, CliError> {
    let parsed = load_annotations(&args.gt, mode(args.strict))?;
    report_warnings(&parsed.warnings, stderr);
    Ok(ground_truth_index(&parsed.value))
}

fn load_dets(
    path: &Path,
    format: DetectionFormat,
    strict: bool,
    stderr: &mut (dyn Write + Send),
) -> Result<Vec<Detection>, CliError> {
    let text = read_text(path)?;
    let parsed = parse_detections(&text, format, mode(strict))
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        .from_file(&path.display().to_string());
    report_warnings(&parsed.warnings, stderr);
    Ok(parsed.value)
}

fn check_conf(conf: f64) -> Result<(), CliError> {
    if (0.0..1.0).contains(&conf) {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--conf {conf} outside [0, 1)")))
    }
}

fn cmd_eval(
    a: &EvalArgs,
    stdout: &mut (dyn Write + Send),
    stderr: &mut (dyn Write + Send),
) -> Result<(), CliError> {
    check_conf(a.conf)?;
    let gt = load_gt(&a.gt, stderr)?;
    let dets = load_dets(&a.det, a.format.into(), a.gt.strict, stderr)?;
    let report = evaluate(&gt, &dets, a.conf, a.iou)?;
    let text = match a.output {
        OutputArg::Text => render_metrics(
            &report,
            Sections {
                per_class: a.per_class,
                per_country: a.per_country,
            },
        ),
        OutputArg::Kv => metrics_key_values(&report),
    };
    write_output(None, &text, stdout)
}

fn model_id_for(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn apply_weights(
    cfg: &mut FusionConfig,
    weights: &str,
    model_ids: &[String],
) -> Result<(), CliError> {
    let items: Vec<&str> = weights.split(',').map(str::trim).collect();
    let bad = |s: &str| CliError::Usage(format!("bad weight `{s}`"));
    if items.iter().all(|i| i.contains('=')) {
        for item in items {
            let (id, w) = item.split_once('=').expect("checked above");
            cfg.model_weights.insert(
                id.trim().to_string(),
                w.trim().parse().map_err(|_| bad(item))?,
            );
        }
    } else {
        if items.len() != model_ids.len() {
            return Err(CliError::Usage(format!(
                "--weights lists {} values for {} --det files",
                items.len(),
                model_ids.len()
            )));
        }
        for (id, item) in model_ids.iter().zip(items) {
            cfg.model_weights
                .insert(id.clone(), item.parse().map_err(|_| bad(item))?);
        }
    }
    Ok(())
}

fn cmd_fuse(
    a: &FuseArgs,
    stdout: &mut (dyn Write + Send),
    stderr: &mut (dyn Write + Send),
) -> Result<(), CliError> {
    let mut cfg = match &a.config {
        Some(p) => FusionConfig::parse_kv(&read_text(p)?)?,
        None => FusionConfig::default(),
    };
    if let Some(s) = a.strategy {
        cfg.strategy = s.into();
    }
    if let Some(t) = a.iou_cluster {
        cfg.iou_cluster_threshold = t;
    }
    if let Some(v) = a.min_votes {
        cfg.min_votes = v;
    }
    if let Some(t) = a.skip_box_threshold {
        cfg.skip_box_threshold = t;
    }
    let model_ids: Vec<String> = a.dets.iter().map(|p| model_id_for(p)).collect();
    if let Some(w) = &a.weights {
        apply_weights(&mut cfg, w, &model_ids)?;
    }
    // catch config mistakes before reading any detections
    let mut unique = model_ids.clone();
    unique.sort();
    if let Some(w) = unique.windows(2).find(|w| w[0] == w[1]) {
        return Err(FusionError::DuplicateModel(w[0].clone()).into());
    }
    cfg.validate(model_ids.iter().map(String::as_str))?;

    let mut sets = Vec::with_capacity(a.dets.len());
    for (path, id) in a.dets.iter().zip(&model_ids) {
        let dets = load_dets(path, DetectionFormat::Scored, a.strict, stderr)?;
        sets.push(ModelDetections::new(id.clone(), dets));
    }
    let fused = fusion::fuse(&sets, &cfg)?;
    write_output(a.out.as_deref(), &write_scored(&fused, 0.0, None), stdout)
}

fn cmd_sweep(
    a: &SweepArgs,
    stdout: &mut (dyn Write + Send),
    stderr: &mut (dyn Write + Send),
) -> Result<(), CliError> {
    let grid = parse_grid(&a.grid).map_err(CliError::Usage)?;
    let gt = load_gt(&a.gt, stderr)?;
    let dets = load_dets(&a.det, a.format.into(), a.gt.strict, stderr)?;
    let sweep = fusion::sweep_threshold(&gt, &dets, &grid, a.iou)?;
    if let Some(p) = &a.curve_out {
        write_output(Some(p), &emit_curve(&sweep.curve), stdout)?;
    }
    let best = sweep
        .curve
        .iter()
        .find(|p| p.threshold == sweep.best_threshold)
        .expect("best threshold is a grid point");
    let text = format!(
        "best_threshold {}\nprecision {:.4}\nrecall {:.4}\nf1 {:.4}\n",
        sweep.best_threshold, best.precision, best.recall, best.f1
    );
    write_output(None, &text, stdout)
}

fn cmd_stats(
    a: &StatsArgs,
    stdout: &mut (dyn Write + Send),
    stderr: &mut (dyn Write + Send),
) -> Result<(), CliError> {
    let parsed = load_annotations(&a.gt.gt, mode(a.gt.strict))?;
    report_warnings(&parsed.warnings, stderr);
    write_output(None, &render_stats(&dataset_stats(&parsed.value)), stdout)
}

fn cmd_convert(
    a: &ConvertArgs,
    stdout: &mut (dyn Write + Send),
    stderr: &mut (dyn Write + Send),
) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&a.conf) {
        return Err(CliError::Usage(format!("--conf {} outside [0, 1]", a.conf)));
    }
    let dets = load_dets(&a.input, a.in_format.into(), a.strict, stderr)?;
    let text = match a.out_format {
        FormatArg::Submission => write_submission(&dets, a.conf, a.max_per_image),
        FormatArg::Scored => write_scored(&dets, a.conf, a.max_per_image),
    };
    write_output(a.out.as_deref(), &text, stdout)
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{THREADS_ENV}=`{v}` is not a thread count"))),
        _ => Ok(None),
    }
}

fn dispatch(
    cli: &Cli,
    stdout: &mut (dyn Write + Send),
    stderr: &mut (dyn Write + Send),
) -> Result<(), CliError> {
    match &cli.command {
        Command::Eval(a) => cmd_eval(a, stdout, stderr),
        Command::Fuse(a) => cmd_fuse(a, stdout, stderr),
        Command::Sweep(a) => cmd_sweep(a, stdout, stderr),
        Command::Stats(a) => cmd_stats(a, stdout, stderr),
        Command::Convert(a) => cmd_convert(a, stdout, stderr),
    }
}

/// Run the CLI with `args` (including the program name) and return the
/// process exit code.
pub fn run<I, T>(args: I, stdout: &mut (dyn Write + Send), stderr: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{e}");
                    0
                }
                _ => {
                    let _ = write!(stderr, "{e}");
                    1
                }
            };
        }
    };

    let result = thread_count(cli.threads).and_then(|threads| match threads {
        Some(0) => Err(CliError::Usage("thread count must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(e.to_string()))?
            .install(|| dispatch(&cli, stdout, stderr)),
        None => dispatch(&cli, stdout, stderr),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", e.message());
            e.exit_code()
        }
    }
}
