mod report;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use proper_uq::calibration::{self, BinningScheme, CalibrationReport, KdeConvention};
use proper_uq::cka::{self, DisentangleMode, DisentangleReport};
use proper_uq::estimator_risk::{self, HSpec};
use proper_uq::kernel_decomp::{self, EstimatorMode};
use proper_uq::synth::{self, CalibratedBundle};
use proper_uq::{bregman, io, scores, KernelSpec, ScoreKind, Seed, SimplexVector};
use serde::Serialize;

use report::{fmt_num, Run, Sink};

#[derive(Parser)]
#[command(name = "proper-uq", version, about = "Proper-score uncertainty quantification toolkit")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "PROPER_UQ_THREADS")]
    threads: Option<usize>,

    /// Write the report here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Empirical risk of a labeled prediction set.
    Score(ScoreArgs),
    /// Bias-variance decomposition of a classification ensemble.
    Bvd(BvdArgs),
    /// Kernel-score bias-variance(-covariance) decomposition.
    KsDecompose(KsDecomposeArgs),
    /// Per-instance kernel entropy and ensemble variance as CSV.
    KsUncertainty(KsUncertaintyArgs),
    /// Calibration-error estimate.
    Calibrate(CalibrateArgs),
    /// Fit a temperature by risk minimization.
    Recalibrate(RecalibrateArgs),
    /// Reliability-diagram data as CSV.
    Reliability(ReliabilityArgs),
    /// Select a calibration estimator by validation risk.
    OptimizeCe(OptimizeCeArgs),
    /// Pairwise CKA between coordinates as a CSV matrix.
    CkaMatrix(CkaMatrixArgs),
    /// Cluster coordinates by CKA and factorize the kernel cosine.
    Disentangle(DisentangleArgs),
    /// Generate synthetic predictions with known conditionals.
    Synth(SynthArgs),
}

#[derive(Args, Serialize)]
struct ScoreArgs {
    #[arg(long)]
    kind: ScoreKind,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Serialize)]
struct BvdArgs {
    #[arg(long)]
    kind: ScoreKind,
    /// CSV of member predictions (p-columns).
    #[arg(long)]
    members: PathBuf,
    /// Target distribution, comma separated.
    #[arg(long)]
    target: String,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum DecompMode {
    Bvd,
    Bvc,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum EstimatorArg {
    Plugin,
    Unbiased,
}

#[derive(Args, Serialize)]
struct KsDecomposeArgs {
    #[arg(long)]
    kernel: KernelSpec,
    /// Ensemble manifest JSON.
    #[arg(long)]
    ensemble: PathBuf,
    #[arg(long)]
    targets: PathBuf,
    #[arg(long, value_enum)]
    mode: DecompMode,
    #[arg(long, value_enum, default_value = "plugin")]
    estimator: EstimatorArg,
}

#[derive(Args, Serialize)]
struct KsUncertaintyArgs {
    #[arg(long)]
    kernel: KernelSpec,
    /// Instance manifest JSON.
    #[arg(long)]
    instances: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum CeEstimator {
    Tce,
    Cce,
    Proper,
}

#[derive(Args, Serialize)]
struct CalibrateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    estimator: CeEstimator,
    /// Score for the proper estimator.
    #[arg(long)]
    kind: Option<ScoreKind>,
    /// Exponent of the Lp calibration error.
    #[arg(long, default_value_t = 2.0)]
    p: f64,
    /// Binning scheme for tce, e.g. uniform:10 or mass:10.
    #[arg(long, conflicts_with = "bandwidth")]
    bins: Option<BinningScheme>,
    /// Dirichlet KDE bandwidth for cce and proper.
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Exclude each point from its own conditional estimate.
    #[arg(long)]
    leave_one_out: bool,
}

#[derive(Args, Serialize)]
struct RecalibrateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Fit the temperature minimizing the empirical risk.
    #[arg(long, required = true)]
    fit_temperature: bool,
    #[arg(long)]
    kind: ScoreKind,
    /// Also write the rescaled predictions to this CSV.
    #[arg(long)]
    emit: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct ReliabilityArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    bins: BinningScheme,
}

#[derive(Args, Serialize)]
struct OptimizeCeArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// JSON list of candidate estimators.
    #[arg(long)]
    candidates: PathBuf,
}

#[derive(Args, Serialize)]
struct CkaMatrixArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    kernel: KernelSpec,
}

#[derive(Args, Serialize)]
struct DisentangleArgs {
    /// Generated samples.
    #[arg(long)]
    gen: PathBuf,
    /// Reference samples; the clustering is computed on these.
    #[arg(long = "ref")]
    #[serde(rename = "ref")]
    reference: PathBuf,
    #[arg(long)]
    kernel: KernelSpec,
    #[arg(long)]
    tau: f64,
    #[arg(long, default_value = "cosine")]
    mode: DisentangleMode,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ScenarioArg {
    Calibrated,
    Miscalibrated,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long, value_enum)]
    scenario: ScenarioArg,
    #[arg(long)]
    d: usize,
    #[arg(long)]
    n: usize,
    /// Dirichlet concentration of the predictions.
    #[arg(long)]
    alpha: f64,
    #[arg(long)]
    seed: u64,
    /// Temperature of the miscalibrated scenario.
    #[arg(long)]
    ts_alpha: Option<f64>,
    /// Also write a JSON summary with the exact squared CE.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn usage_error(kind: ErrorKind, msg: impl std::fmt::Display) -> ! {
    Cli::command().error(kind, msg).exit()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            usage_error(ErrorKind::ValueValidation, "--threads must be at least 1");
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let sink = Sink::new(cli.out);
    match dispatch(cli.command, &sink) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command, sink: &Sink) -> Result<()> {
    match command {
        Command::Score(a) => score(a, sink),
        Command::Bvd(a) => bvd(a, sink),
        Command::KsDecompose(a) => ks_decompose(a, sink),
        Command::KsUncertainty(a) => ks_uncertainty(a, sink),
        Command::Calibrate(a) => calibrate(a, sink),
        Command::Recalibrate(a) => recalibrate(a, sink),
        Command::Reliability(a) => reliability(a, sink),
        Command::OptimizeCe(a) => optimize_ce(a, sink),
        Command::CkaMatrix(a) => cka_matrix(a, sink),
        Command::Disentangle(a) => disentangle(a, sink),
        Command::Synth(a) => synth(a, sink),
    }
}

#[derive(Serialize)]
struct ScoreReport {
    kind: ScoreKind,
    n: usize,
    risk: f64,
    per_instance: Vec<f64>,
}

fn score(a: ScoreArgs, sink: &Sink) -> Result<()> {
    let mut run = Run::new("score", &a, None)?;
    let data = io::load_predictions(run.input(&a.data)?)?;
    let per_instance = scores::per_instance_scores(a.kind, &data)?;
    if let Some(i) = per_instance.iter().position(|s| !s.is_finite()) {
        anyhow::bail!("{} score diverges at row {} (zero probability on the observed label)", a.kind, i + 1);
    }
    let risk = per_instance.iter().sum::<f64>() / per_instance.len() as f64;
    let report = ScoreReport { kind: a.kind, n: data.len(), risk, per_instance };
    sink.write_json(&run.json_report(&report)?)
}

fn parse_vector(text: &str) -> Result<SimplexVector> {
    let probs = text
        .split(',')
        .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad number '{s}' in --target")))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimplexVector::new(probs)?)
}

fn bvd(a: BvdArgs, sink: &Sink) -> Result<()> {
    if a.kind == ScoreKind::Spherical {
        usage_error(ErrorKind::InvalidValue, "bvd supports --kind brier or log");
    }
    let mut run = Run::new("bvd", &a, None)?;
    let members = io::load_members(run.input(&a.members)?)?;
    let target = parse_vector(&a.target)?;
    let report = bregman::bvd_classification(a.kind, &members, &target)?;
    sink.write_json(&run.json_report(&report)?)
}

fn ks_decompose(a: KsDecomposeArgs, sink: &Sink) -> Result<()> {
    let mut run = Run::new("ks-decompose", &a, None)?;
    let grid = io::load_ensemble(run.input(&a.ensemble)?)?;
    // member files are inputs too
    for name in manifest_members(&a.ensemble)? {
        run.input(&name)?;
    }
    let targets = io::load_sample_set(run.input(&a.targets)?)?;
    let mode = match a.estimator {
        EstimatorArg::Plugin => EstimatorMode::Plugin,
        EstimatorArg::Unbiased => EstimatorMode::Unbiased,
    };
    let report = match a.mode {
        DecompMode::Bvd => kernel_decomp::ks_bvd(&a.kernel, &grid, &targets, mode)?,
        DecompMode::Bvc => kernel_decomp::ks_bvc(&a.kernel, &grid, &targets, mode)?,
    };
    #[derive(Serialize)]
    struct Out<'a> {
        #[serde(flatten)]
        report: &'a kernel_decomp::DecompositionReport,
        residual: f64,
    }
    sink.write_json(&run.json_report(&Out { residual: report.residual(), report: &report })?)
}

fn manifest_members(manifest: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(manifest)?;
    let parsed: io::EnsembleManifest = serde_json::from_str(&text)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    Ok(parsed.members.iter().flatten().map(|m| dir.join(m)).collect())
}

fn ks_uncertainty(a: KsUncertaintyArgs, sink: &Sink) -> Result<()> {
    let instances = io::load_instances(&a.instances)?;
    let named: Vec<_> = instances.into_iter().map(|(id, grid, _)| (id, grid)).collect();
    let rows = kernel_decomp::uncertainty_profile(&a.kernel, &named)?;
    let mut csv = String::from("id,entropy,variance\n");
    for r in rows {
        writeln!(csv, "{},{},{}", r.id, fmt_num(r.entropy), fmt_num(r.variance))?;
    }
    sink.write_text(&csv)
}

#[derive(Serialize)]
struct CalibrateOut {
    #[serde(flatten)]
    report: CalibrationReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    sharpness: Option<f64>,
}

fn calibrate(a: CalibrateArgs, sink: &Sink) -> Result<()> {
    let convention = if a.leave_one_out { KdeConvention::LeaveOneOut } else { KdeConvention::LeaveSelfIn };
    let need_bandwidth = || {
        a.bandwidth
            .unwrap_or_else(|| usage_error(ErrorKind::MissingRequiredArgument, "--bandwidth is required for this estimator"))
    };
    let mut run = Run::new("calibrate", &a, None)?;
    let data = io::load_predictions(run.input(&a.data)?)?;
    let out = match a.estimator {
        CeEstimator::Tce => {
            let bins = a
                .bins
                .unwrap_or_else(|| usage_error(ErrorKind::MissingRequiredArgument, "--bins is required for tce"));
            CalibrateOut { report: calibration::tce_binned(a.p, &data, bins)?, sharpness: None }
        }
        CeEstimator::Cce => {
            let h = need_bandwidth();
            CalibrateOut { report: calibration::cce_kde(a.p, &data, h, convention)?, sharpness: None }
        }
        CeEstimator::Proper => {
            let kind = a
                .kind
                .unwrap_or_else(|| usage_error(ErrorKind::MissingRequiredArgument, "--kind is required for proper"));
            let h = need_bandwidth();
            CalibrateOut {
                report: calibration::proper_ce(kind, &data, h, convention)?,
                sharpness: Some(calibration::sharpness(kind, &data, h, convention)?),
            }
        }
    };
    sink.write_json(&run.json_report(&out)?)
}

fn recalibrate(a: RecalibrateArgs, sink: &Sink) -> Result<()> {
    let mut run = Run::new("recalibrate", &a, None)?;
    let data = io::load_predictions(run.input(&a.data)?)?;
    let fit = calibration::fit_temperature(a.kind, &data)?;
    if let Some(path) = &a.emit {
        let scaled = data.map_predictions(|p| calibration::temperature_scale(p, fit.alpha))?;
        io::save_predictions(&scaled, path)?;
    }
    sink.write_json(&run.json_report(&fit)?)
}

fn reliability(a: ReliabilityArgs, sink: &Sink) -> Result<()> {
    let data = io::load_predictions(&a.data)?;
    let bins = calibration::reliability(&data, a.bins)?;
    let mut csv = String::from("bin_lo,bin_hi,count,acc,conf\n");
    for b in bins {
        writeln!(csv, "{},{},{},{},{}", fmt_num(b.bin_lo), fmt_num(b.bin_hi), b.count, fmt_num(b.acc), fmt_num(b.conf))?;
    }
    sink.write_text(&csv)
}

fn optimize_ce(a: OptimizeCeArgs, sink: &Sink) -> Result<()> {
    let mut run = Run::new("optimize-ce", &a, None)?;
    let train = io::load_predictions(run.input(&a.train)?)?;
    let val = io::load_predictions(run.input(&a.val)?)?;
    let test = io::load_predictions(run.input(&a.test)?)?;
    let text = std::fs::read_to_string(run.input(&a.candidates)?)?;
    let candidates: Vec<HSpec> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", a.candidates.display()))?;
    let report = estimator_risk::pipeline(&candidates, &train, &val, &test)?;
    sink.write_json(&run.json_report(&report)?)
}

fn cka_matrix(a: CkaMatrixArgs, sink: &Sink) -> Result<()> {
    let samples = io::load_sample_set(&a.samples)?;
    let m = cka::cka_matrix(&samples, &a.kernel)?;
    if !m.constant.is_empty() {
        eprintln!("warning: constant coordinates {:?}", m.constant);
    }
    let mut csv = (0..m.dim()).map(|j| format!("x{}", j + 1)).collect::<Vec<_>>().join(",");
    csv.push('\n');
    for row in &m.values {
        csv.push_str(&row.iter().map(|&v| fmt_num(v)).collect::<Vec<_>>().join(","));
        csv.push('\n');
    }
    sink.write_text(&csv)
}

#[derive(Serialize)]
struct DisentangleOut {
    tau: f64,
    partition: Vec<Vec<usize>>,
    #[serde(flatten)]
    report: DisentangleReport,
}

fn disentangle(a: DisentangleArgs, sink: &Sink) -> Result<()> {
    let mut run = Run::new("disentangle", &a, None)?;
    let gen = io::load_sample_set(run.input(&a.gen)?)?;
    let reference = io::load_sample_set(run.input(&a.reference)?)?;
    let matrix = cka::cka_matrix(&reference, &a.kernel)?;
    let partition = cka::cluster_dimensions(&matrix, a.tau)?;
    let report = cka::disentangled_cosine(&a.kernel, &partition, &gen, &reference, a.mode)?;
    let out = DisentangleOut { tau: partition.tau, partition: partition.clusters.clone(), report };
    sink.write_json(&run.json_report(&out)?)
}

#[derive(Serialize)]
struct SynthSummary {
    scenario: synth::Scenario,
    n: usize,
    d: usize,
    squared_ce: f64,
}

fn synth(a: SynthArgs, sink: &Sink) -> Result<()> {
    let run = Run::new("synth", &a, Some(a.seed))?;
    let bundle: CalibratedBundle = match a.scenario {
        ScenarioArg::Calibrated => synth::gen_calibrated(a.d, a.n, a.alpha, Seed(a.seed))?,
        ScenarioArg::Miscalibrated => {
            let ts = a.ts_alpha.unwrap_or_else(|| {
                usage_error(ErrorKind::MissingRequiredArgument, "--ts-alpha is required for the miscalibrated scenario")
            });
            synth::gen_miscalibrated(a.d, a.n, a.alpha, ts, Seed(a.seed))?
        }
    };
    let mut buf = Vec::new();
    io::write_predictions(&bundle.data, &mut buf)?;
    sink.write_text(std::str::from_utf8(&buf)?)?;
    if let Some(path) = &a.report {
        let summary =
            SynthSummary { scenario: bundle.scenario, n: a.n, d: a.d, squared_ce: bundle.squared_ce() };
        Sink::new(Some(path.clone())).write_json(&run.json_report(&summary)?)?;
    }
    Ok(())
}
