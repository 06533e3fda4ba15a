use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use imbanid::data::{load_bundle, save_bundle, DatasetBundle};
use imbanid::error::{Error, ErrorKind, Result};
use imbanid::eval::{default_threshold, estimate_k, MetricsReport};
use imbanid::learner::{load_head, predict};
use imbanid::longtail::{group_assignment, sample_longtail, LongTailSpec};
use imbanid::pipeline::{
    load_results, report, run_baseline_kmeans, run_pipeline, sweep, write_run_report, write_sweep_report,
    PipelineConfig, RunRecord, SavedResults, SweepAxis, RECORD_JSON, REPORT_JSON,
};
use imbanid::rot::{self, PredictionMatrix, Variant};
use imbanid::synthetic::{gaussian_mixture, GmmSpec};
use serde::Serialize;

mod matrix;

#[derive(Parser)]
#[command(name = "imbanid", version, about = "Imbalanced new-class discovery over fixed embeddings")]
struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "imbanid-out")]
    out: PathBuf,
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a long-tailed benchmark bundle from a balanced source.
    SampleLongtail(SampleArgs),
    /// Solve for pseudo-labels given a prediction matrix.
    SolveRot(SolveArgs),
    /// Warm-up plus self-training; saves the head.
    Train(BundleArg),
    /// Score a saved head on the TEST rows.
    Evaluate(EvaluateArgs),
    /// Estimate the number of classes with oversized k-means.
    EstimateK(EstimateArgs),
    /// Train, evaluate and write every report.
    Run(RunArgs),
    /// One run per value of a single parameter.
    Sweep(SweepArgs),
    /// Regenerate tables from a run or sweep directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct BundleArg {
    #[arg(long)]
    bundle: PathBuf,
}

#[derive(Args, Clone)]
struct LongTailArgs {
    #[arg(long, default_value_t = 10.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.75)]
    known_ratio: f64,
    #[arg(long, default_value_t = 0.1)]
    labeled_ratio: f64,
    #[arg(long, default_value_t = 15)]
    test_per_class: usize,
    /// Rows in the largest class; defaults to whatever the source allows.
    #[arg(long)]
    n_max: Option<usize>,
}

impl LongTailArgs {
    fn spec(&self, seed: u64) -> LongTailSpec {
        LongTailSpec {
            gamma: self.gamma,
            known_ratio: self.known_ratio,
            labeled_ratio: self.labeled_ratio,
            seed,
            test_per_class: self.test_per_class,
            n_max: self.n_max,
            ..LongTailSpec::default()
        }
    }
}

#[derive(Args)]
struct SampleArgs {
    /// Balanced, fully labeled source bundle.
    #[arg(long, conflicts_with = "gmm", required_unless_present = "gmm")]
    source: Option<PathBuf>,
    /// Use a synthetic Gaussian mixture as the source.
    #[arg(long)]
    gmm: bool,
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 420)]
    per_class: usize,
    /// Distance between class means in units of the within-class sigma.
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    #[command(flatten)]
    longtail: LongTailArgs,
}

#[derive(Args)]
struct SolveArgs {
    /// Text matrix, one sample per line, comma, tab or space separated.
    #[arg(long)]
    predictions: PathBuf,
    /// Rescale each row to sum to one before solving.
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Head checkpoint directory; without it the k-means baseline is scored.
    #[arg(long)]
    head: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Cluster count to over-partition with.
    #[arg(long)]
    k_prime: usize,
    /// Minimum cluster size that counts; defaults to N / (2 K').
    #[arg(long)]
    threshold: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Also score k-means on the raw TEST embeddings (baseline.json).
    #[arg(long)]
    baseline: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// For gamma and known_ratio, the balanced source bundle.
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    axis: SweepAxis,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[command(flatten)]
    longtail: LongTailArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory written by `run` or `sweep`.
    #[arg(long)]
    results: PathBuf,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.check()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

#[derive(Serialize)]
struct PlanOutput {
    variant: Variant,
    beta: Vec<f64>,
    h: f64,
    labels: Vec<usize>,
    confidence: Vec<f64>,
    q: Vec<Vec<f64>>,
    trace: rot::SolverTrace,
}

fn sample_cmd(cli: &Cli, args: &SampleArgs) -> CliResult {
    let seed = cli.seed.unwrap_or(0);
    let source = match &args.source {
        Some(dir) => load_bundle(dir)?,
        None => gaussian_mixture(&GmmSpec {
            classes: args.classes,
            dim: args.dim,
            per_class: args.per_class,
            separation: args.separation,
            sigma: 1.0,
            seed,
        })?,
    };
    let bundle = sample_longtail(&source, &args.longtail.spec(seed))?;
    save_bundle(&bundle, &cli.out)?;
    Ok(print_json(&bundle.split_counts())?)
}

fn solve_cmd(cli: &Cli, args: &SolveArgs) -> CliResult {
    let mut cfg = load_config(cli)?.rot;
    if let Some(v) = args.variant {
        cfg.variant = v;
    }
    if let Some(l) = args.lambda1 {
        cfg.lambda1 = l;
    }
    if let Some(l) = args.lambda2 {
        cfg.lambda2 = l;
    }
    cfg.check()?;
    let p = matrix::read(&args.predictions)?;
    let p = if args.normalize { PredictionMatrix::from_unnormalized(p)? } else { PredictionMatrix::new(p)? };
    let (plan, trace) = rot::solve(&p, &cfg)?;
    for w in &trace.warnings {
        log::warn!("{w}");
    }
    let pseudo = rot::pseudo_labels_from_plan(&plan);
    let out = PlanOutput {
        variant: cfg.variant,
        beta: plan.beta.to_vec(),
        h: plan.h,
        labels: pseudo.hard.clone(),
        confidence: pseudo.confidence.clone(),
        q: plan.q.rows().into_iter().map(|r| r.to_vec()).collect(),
        trace,
    };
    write_json(&cli.out.join("plan.json"), &out)?;
    log::info!("beta = {:?}", out.beta);
    Ok(())
}

fn pipeline_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = load_config(cli)?;
    cfg.output_dir = Some(cli.out.clone());
    Ok(cfg)
}

/// What went wrong, reduced to what decides the exit code.
struct Failure {
    kind: ErrorKind,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { kind: e.kind(), message: e.to_string() }
    }
}

type CliResult = std::result::Result<(), Failure>;

/// Non-zero exit for a run that stopped inside a round.
fn check_failure(record: &RunRecord) -> CliResult {
    match &record.failure {
        None => Ok(()),
        Some(f) => Err(Failure { kind: f.kind, message: format!("round {} stage {}: {}", f.round, f.stage, f.message) }),
    }
}

fn train_cmd(cli: &Cli, args: &BundleArg) -> CliResult {
    let bundle = load_bundle(&args.bundle)?;
    let mut cfg = pipeline_config(cli)?;
    cfg.eval_each_round = false;
    let record = run_pipeline(&bundle, &cfg)?;
    write_json(&cli.out.join(RECORD_JSON), &record)?;
    check_failure(&record)
}

fn test_metrics(bundle: &DatasetBundle, pred: &[usize], seed: u64, hash: String) -> Result<MetricsReport> {
    let groups = group_assignment(&bundle.train_class_frequencies_for_evaluation());
    MetricsReport::compute(&bundle.test_labels(), pred, &groups, bundle.num_classes(), seed, hash)
}

fn evaluate_cmd(cli: &Cli, args: &EvaluateArgs) -> CliResult {
    let bundle = load_bundle(&args.bundle)?;
    let cfg = load_config(cli)?;
    let report = match &args.head {
        Some(dir) => {
            let head = load_head(dir)?;
            let x = bundle.gather(&bundle.test_rows());
            test_metrics(&bundle, &predict(&head, x.view())?, cfg.seed, cfg.config_hash())?
        }
        None => run_baseline_kmeans(&bundle, bundle.num_classes(), cfg.seed, &cfg.config_hash())?,
    };
    write_json(&cli.out.join(REPORT_JSON), &report)?;
    Ok(print_json(&report)?)
}

#[derive(Serialize)]
struct Estimate {
    k: usize,
    k_prime: usize,
    threshold: usize,
    n: usize,
}

fn estimate_cmd(cli: &Cli, args: &EstimateArgs) -> CliResult {
    let bundle = load_bundle(&args.bundle)?;
    let x = bundle.gather(&bundle.train_rows());
    let threshold = args.threshold.unwrap_or_else(|| default_threshold(x.nrows(), args.k_prime));
    let k = estimate_k(x.view(), args.k_prime, threshold, cli.seed.unwrap_or(0))?;
    Ok(print_json(&Estimate { k, k_prime: args.k_prime, threshold, n: x.nrows() })?)
}

fn run_cmd(cli: &Cli, args: &RunArgs) -> CliResult {
    let bundle = load_bundle(&args.bundle)?;
    let cfg = pipeline_config(cli)?;
    let record = run_pipeline(&bundle, &cfg)?;
    write_run_report(&record, &cli.out)?;
    if args.baseline {
        let base = run_baseline_kmeans(&bundle, bundle.num_classes(), cfg.seed, &cfg.config_hash())?;
        write_json(&cli.out.join("baseline.json"), &base)?;
    }
    if let Some(r) = &record.final_report {
        log::info!("final acc {:.4} nmi {:.4} ari {:.4}", r.acc, r.nmi, r.ari);
    }
    check_failure(&record)
}

fn sweep_cmd(cli: &Cli, args: &SweepArgs) -> CliResult {
    let bundle = load_bundle(&args.bundle)?;
    let cfg = pipeline_config(cli)?;
    let spec = args.longtail.spec(cfg.seed);
    let entries = sweep(&bundle, &cfg, args.axis, &args.values, Some(&spec))?;
    write_sweep_report(&entries, &cli.out)?;
    for e in &entries {
        check_failure(&e.record)?;
    }
    Ok(())
}

fn report_cmd(cli: &Cli, args: &ReportArgs) -> CliResult {
    let results = load_results(&args.results)?;
    report(&results, &cli.out)?;
    match &results {
        SavedResults::Run(r) => {
            if let Some(m) = &r.final_report {
                println!("acc {:.4}  nmi {:.4}  ari {:.4}  rounds {}", m.acc, m.nmi, m.ari, r.rounds.len());
            }
        }
        SavedResults::Sweep(entries) => {
            for e in entries {
                let acc = e.record.final_report.as_ref().map_or(f64::NAN, |m| m.acc);
                println!("{}={}  acc {acc:.4}", e.axis.as_str(), e.value);
            }
        }
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::SampleLongtail(a) => sample_cmd(cli, a),
        Command::SolveRot(a) => solve_cmd(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Evaluate(a) => evaluate_cmd(cli, a),
        Command::EstimateK(a) => estimate_cmd(cli, a),
        Command::Run(a) => run_cmd(cli, a),
        Command::Sweep(a) => sweep_cmd(cli, a),
        Command::Report(a) => report_cmd(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).format_timestamp(None).init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.kind.exit_code() as u8)
        }
    }
}
