//! `vgate` command-line front end.
//!
//! Reports go to `--output` or stdout; notices and errors go to stderr. The
//! exit status is zero only when the command succeeds.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use vgate::calibration::{apply_fit, fit_ensemble_temperature, fit_per_member, FitScope};
use vgate::diagnostics::{auroc, collapse_epoch, coverage_risk, DEFAULT_TAU};
use vgate::ept::{read_ept, read_labels, write_ept, write_labels, Kind, LabelVector, PredictionTensor};
use vgate::report::{build_report, format_sig9, measure_scores, to_json, write_csv, Measure, ReportConfig};
use vgate::stats::class_stats;
use vgate::synth::{generate, generate_collapse_series_with_labels, SynthConfig, SynthMode};
use vgate::DEFAULT_EPSILON;

#[derive(Parser)]
#[command(name = "vgate", version, about = "Variance-gated uncertainty measures for classifier ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-sample uncertainty report.
    Report(ReportArgs),
    /// Diversity timeline over training snapshots and the collapse epoch.
    Diversity(DiversityArgs),
    /// Coverage and selective risk of the SNR decision rule across k.
    Coverage(CoverageArgs),
    /// Fit temperature scaling on logits.
    Calibrate(CalibrateArgs),
    /// AUROC of uncertainty scores separating in-domain from OOD samples.
    Ood(OodArgs),
    /// Generate a seeded synthetic ensemble.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct OutputArgs {
    /// Write here instead of stdout.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    input: PathBuf,
    /// Labels CSV; adds a `correct` column.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Gate sensitivities, one gated column group each.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    k: Vec<f64>,
    /// k for the decision column; defaults to the first `--k` value.
    #[arg(long)]
    decision_k: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args)]
struct DiversityArgs {
    /// Snapshots ordered by epoch. Epochs come from each file's manifest,
    /// or from the argument position when no file records one.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args)]
struct CoverageArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Comma list (`0.5,1,2`) or inclusive range `start:stop:step`.
    #[arg(long, default_value = "0.25:4:0.25")]
    k_grid: String,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Logits tensor.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Fit one temperature per member instead of a shared one.
    #[arg(long)]
    per_member: bool,
    /// Also write the calibrated probabilities as an EPT file.
    #[arg(long)]
    output_probs: Option<PathBuf>,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args)]
struct OodArgs {
    /// In-domain tensor (negatives).
    #[arg(long)]
    id: PathBuf,
    /// Out-of-distribution tensor (positives).
    #[arg(long)]
    ood: PathBuf,
    /// Measure name, or `all`.
    #[arg(long, default_value = "all")]
    measure: String,
    #[arg(long, default_value_t = 1.0)]
    k: f64,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Static,
    Collapse,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 5)]
    members: usize,
    #[arg(long, default_value_t = 1.0)]
    s_signal: f64,
    #[arg(long, default_value_t = 0.5)]
    s_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Multiplies every member logit.
    #[arg(long, default_value_t = 1.0)]
    logit_scale: f64,
    #[arg(long, value_enum, default_value = "static")]
    mode: ModeArg,
    /// Number of epochs (collapse mode).
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Noise decay rate per epoch (collapse mode).
    #[arg(long, default_value_t = 0.5)]
    decay: f64,
    /// Output path prefix.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        // downstream closed the pipe (`vgate report ... | head`); nothing left to say
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|cause| {
        let kind = cause
            .downcast_ref::<std::io::Error>()
            .map(std::io::Error::kind)
            .or_else(|| cause.downcast_ref::<serde_json::Error>().and_then(serde_json::Error::io_error_kind));
        kind == Some(std::io::ErrorKind::BrokenPipe)
    })
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Report(a) => cmd_report(a),
        Command::Diversity(a) => cmd_diversity(a),
        Command::Coverage(a) => cmd_coverage(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Ood(a) => cmd_ood(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn load_tensor(path: &Path) -> Result<PredictionTensor> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    read_ept(BufReader::new(file)).with_context(|| format!("cannot read {}", path.display()))
}

/// Loads a tensor, softmaxing logits with a notice.
fn load_probs(path: &Path) -> Result<PredictionTensor> {
    let tensor = load_tensor(path)?;
    Ok(if tensor.kind() == Kind::Logits {
        eprintln!("note: {} holds logits; converting to probabilities", path.display());
        tensor.to_probs()
    } else {
        tensor
    })
}

fn load_labels(path: &Path, tensor: &PredictionTensor) -> Result<LabelVector> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    read_labels(BufReader::new(file), tensor.manifest()).with_context(|| format!("cannot read {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn sink(out: &OutputArgs) -> Result<Box<dyn Write>> {
    Ok(match &out.output {
        Some(path) => Box::new(create(path)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn emit_json(out: &OutputArgs, value: &Value) -> Result<()> {
    let mut w = sink(out)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn emit_csv(out: &OutputArgs, header: &str, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut w = sink(out)?;
    writeln!(w, "{header}")?;
    for line in lines {
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    ensure!(!a.k.is_empty(), "--k needs at least one value");
    let tensor = load_probs(&a.input)?;
    let labels = a.labels.as_deref().map(|p| load_labels(p, &tensor)).transpose()?;
    let cfg = ReportConfig {
        decision_k: a.decision_k.unwrap_or(a.k[0]),
        k: a.k,
        epsilon: a.epsilon,
    };
    let rows = build_report(&tensor, labels.as_ref(), &cfg)?;
    match a.format {
        Format::Csv => {
            let mut w = sink(&a.out)?;
            write_csv(&rows, &cfg.k, &mut w)?;
            w.flush()?;
            Ok(())
        }
        Format::Json => emit_json(&a.out, &to_json(&rows)),
    }
}

fn cmd_diversity(a: DiversityArgs) -> Result<()> {
    let tensors = a.inputs.iter().map(|p| load_probs(p)).collect::<Result<Vec<_>>>()?;
    let recorded = tensors.iter().filter(|t| t.epoch().is_some()).count();
    ensure!(
        recorded == 0 || recorded == tensors.len(),
        "either every snapshot or none must record an epoch"
    );
    let snapshots: Vec<(u64, PredictionTensor)> = tensors
        .into_iter()
        .enumerate()
        .map(|(i, t)| (t.epoch().unwrap_or(i as u64), t))
        .collect();
    let series = collapse_epoch(&snapshots, a.tau)?;
    match series.collapse_epoch {
        Some(e) => eprintln!("collapse epoch: {e}"),
        None => eprintln!("no collapse"),
    }
    match a.format {
        Format::Csv => emit_csv(
            &a.out,
            "epoch,diversity,collapse",
            series.points.iter().map(|p| {
                let flag = u8::from(series.collapse_epoch == Some(p.epoch));
                format!("{},{},{flag}", p.epoch, format_sig9(p.diversity))
            }),
        ),
        Format::Json => emit_json(
            &a.out,
            &json!({
                "tau": series.tau,
                "collapse_epoch": series.collapse_epoch,
                "epochs": series
                    .points
                    .iter()
                    .map(|p| json!({"epoch": p.epoch, "diversity": p.diversity}))
                    .collect::<Vec<_>>(),
            }),
        ),
    }
}

/// Parses `a,b,c` or the inclusive range `start:stop:step`.
fn parse_k_grid(text: &str) -> Result<Vec<f64>> {
    let parse = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .with_context(|| format!("bad number `{s}` in k grid"))
    };
    let grid = if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        ensure!(parts.len() == 3, "k range must be start:stop:step");
        let (start, stop, step) = (parse(parts[0])?, parse(parts[1])?, parse(parts[2])?);
        ensure!(step > 0.0 && stop >= start, "k range needs step > 0 and stop >= start");
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        (0..count).map(|i| start + step * i as f64).collect()
    } else {
        text.split(',').map(parse).collect::<Result<Vec<_>>>()?
    };
    ensure!(!grid.is_empty(), "empty k grid");
    Ok(grid)
}

fn cmd_coverage(a: CoverageArgs) -> Result<()> {
    let grid = parse_k_grid(&a.k_grid)?;
    let tensor = load_probs(&a.input)?;
    let labels = load_labels(&a.labels, &tensor)?;
    let curve = coverage_risk(&class_stats(&tensor)?, &labels, &grid, a.epsilon)?;
    match a.format {
        Format::Csv => emit_csv(
            &a.out,
            "k,decided,coverage,risk",
            curve.points.iter().map(|p| {
                let risk = p.risk.map_or_else(|| "NA".to_string(), format_sig9);
                format!("{},{},{},{risk}", format_sig9(p.k), p.decided, format_sig9(p.coverage))
            }),
        ),
        Format::Json => emit_json(
            &a.out,
            &Value::Array(
                curve
                    .points
                    .iter()
                    .map(|p| json!({"k": p.k, "decided": p.decided, "coverage": p.coverage, "risk": p.risk}))
                    .collect(),
            ),
        ),
    }
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<()> {
    let tensor = load_tensor(&a.input)?;
    if tensor.kind() != Kind::Logits {
        bail!("calibration requires logits, but {} holds {}", a.input.display(), tensor.kind());
    }
    let labels = load_labels(&a.labels, &tensor)?;
    let fit = if a.per_member {
        fit_per_member(&tensor, &labels)?
    } else {
        fit_ensemble_temperature(&tensor, &labels)?
    };
    if let Some(path) = &a.output_probs {
        let probs = apply_fit(&tensor, &fit.temperatures)?;
        let mut w = create(path)?;
        write_ept(&probs, &mut w)?;
        w.flush()?;
    }
    let scope = match fit.scope {
        FitScope::Global => "global",
        FitScope::PerMember => "per_member",
    };
    emit_json(
        &a.out,
        &json!({
            "scope": scope,
            "temperatures": fit.temperatures,
            "nll_before": fit.nll_before,
            "nll_after": fit.nll_after,
        }),
    )
}

fn cmd_ood(a: OodArgs) -> Result<()> {
    let measures: Vec<Measure> = if a.measure == "all" {
        Measure::ALL.to_vec()
    } else {
        a.measure
            .split(',')
            .map(|m| m.trim().parse::<Measure>())
            .collect::<Result<_, _>>()?
    };
    let id = load_probs(&a.id)?;
    let ood = load_probs(&a.ood)?;
    ensure!(
        id.classes() == ood.classes(),
        "class counts differ: {} (id) vs {} (ood)",
        id.classes(),
        ood.classes()
    );
    let mut out = Map::new();
    for m in measures {
        let neg = measure_scores(&id, m, a.k, a.epsilon)?;
        let pos = measure_scores(&ood, m, a.k, a.epsilon)?;
        out.insert(m.name().to_string(), Value::from(auroc(&neg, &pos)?));
    }
    emit_json(&a.out, &Value::Object(out))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn write_tensor(path: &Path, tensor: &PredictionTensor) -> Result<()> {
    let mut w = create(path)?;
    write_ept(tensor, &mut w)?;
    w.flush()?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn write_label_file(path: &Path, labels: &LabelVector) -> Result<()> {
    let mut w = create(path)?;
    write_labels(labels, &mut w)?;
    w.flush()?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mode = match a.mode {
        ModeArg::Static => SynthMode::Static,
        ModeArg::Collapse => SynthMode::Collapse {
            epochs: a.epochs,
            decay: a.decay,
        },
    };
    let cfg = SynthConfig {
        samples: a.samples,
        classes: a.classes,
        members: a.members,
        s_signal: a.s_signal,
        s_noise: a.s_noise,
        seed: a.seed,
        mode,
        logit_scale: a.logit_scale,
    };
    match mode {
        SynthMode::Static => {
            let out = generate(&cfg)?;
            write_tensor(&with_suffix(&a.out, "_probs.ept"), &out.probs)?;
            write_tensor(&with_suffix(&a.out, "_logits.ept"), &out.logits)?;
            write_label_file(&with_suffix(&a.out, "_labels.csv"), &out.labels)
        }
        SynthMode::Collapse { .. } => {
            let (series, labels) = generate_collapse_series_with_labels(&cfg)?;
            for (epoch, tensor) in &series {
                write_tensor(&with_suffix(&a.out, &format!("_epoch{epoch:03}.ept")), tensor)?;
            }
            write_label_file(&with_suffix(&a.out, "_labels.csv"), &labels)
        }
    }
}
