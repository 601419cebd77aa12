//! Command-line front end: gradient checks, bias solving, training runs,
//! spatial distribution grids, KL comparisons, temperature sweeps, and
//! report summaries.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage or parse error,
//! 3 numerical divergence.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gol_core::analysis::{kl_divergence, WeightNormReport};
use gol_core::data::{
    joint_grid, membership_grid, occurrence_grid, parse_annotations, make_longtail,
    AnnotationTable, PerGroup, SpatialGrid,
};
use gol_core::gradcheck::{grad_check_loss, max_rel_error, rows_to_csv, DEFAULT_GRID,
    DEFAULT_STEP, REL_ERROR_LIMIT};
use gol_core::init::{initial_total_gradient, solve_bias};
use gol_core::loss::LossKind;
use gol_core::trainer::{retrain_classifier, train, RunReport, TrainConfig, TrainOutcome};
use gol_core::Error;

#[derive(Parser)]
#[command(name = "gol", version, about = "Long-tail classification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare analytic loss gradients against central finite differences.
    GradCheck(GradCheckArgs),
    /// Solve for the classifier bias that zeroes the initial total gradient.
    InitSolve(InitSolveArgs),
    /// Train a model from a JSON config and write its reports.
    Train(TrainArgs),
    /// Compute spatial object-distribution grids from annotations.
    Dist(DistArgs),
    /// KL divergence between two grid CSV files.
    Kl(KlArgs),
    /// Train at several Gumbel temperatures and tabulate accuracy.
    SweepSigma(SweepSigmaArgs),
    /// Summarize a previously written report.json.
    Report(ReportArgs),
}

#[derive(Args)]
struct GradCheckArgs {
    /// Loss to check: sigmoid_bce, softmax_ce, gumbel, gol, eql_gumbel.
    #[arg(long)]
    loss: LossKind,
    /// Optional path for the per-point CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InitSolveArgs {
    /// Number of classes; must be at least 2.
    #[arg(long)]
    classes: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for report.json and metrics.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DistArgs {
    /// Annotation JSON with images, annotations, and categories.
    #[arg(long)]
    annotations: PathBuf,
    /// Grid side length; grids are square `grid x grid`.
    #[arg(long, default_value_t = 32)]
    grid: usize,
    /// Output directory; grids land under `<out>/grids/`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct KlArgs {
    /// Grid CSV holding the reference distribution P.
    #[arg(long)]
    p: PathBuf,
    /// Grid CSV holding the comparison distribution Q.
    #[arg(long)]
    q: PathBuf,
    /// Smoothing constant added to every cell before normalizing.
    #[arg(long, default_value_t = 1e-9)]
    eps: f64,
}

#[derive(Args)]
struct SweepSigmaArgs {
    /// Training config JSON; its sigma field is overridden per run.
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated temperatures, each within [0.8, 1.2].
    #[arg(long, value_delimiter = ',', default_value = "0.8,0.9,1.0,1.1,1.2")]
    values: Vec<f64>,
    /// Output directory for sweep.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Path to a report.json written by the train subcommand.
    #[arg(long)]
    input: PathBuf,
}

/// Process failure with its exit code and message.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

fn core_failure(context: &str, err: Error) -> Failure {
    let code = match err {
        Error::Divergence { .. } => 3,
        _ => 2,
    };
    Failure { code, message: format!("{context}: {err}") }
}

fn read_file(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| Failure::usage(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<TrainConfig, Failure> {
    let text = read_file(path)?;
    let mut cfg: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    if let Ok(seed) = std::env::var("GOL_SEED") {
        cfg.seed = seed
            .parse()
            .map_err(|_| Failure::usage(format!("GOL_SEED must be an integer, got {seed:?}")))?;
    }
    Ok(cfg)
}

fn option_cell(value: Option<f64>) -> String {
    value.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn run_grad_check(args: &GradCheckArgs) -> Result<u8, Failure> {
    let rows = grad_check_loss(args.loss, &DEFAULT_GRID, DEFAULT_STEP)
        .map_err(|e| core_failure("grad-check", e))?;
    let csv = rows_to_csv(&rows);
    match &args.out {
        Some(path) => write_file(path, &csv)?,
        None => print!("{csv}"),
    }
    let worst = max_rel_error(&rows);
    eprintln!("max relative error: {worst:.3e} (limit {REL_ERROR_LIMIT:.0e})");
    Ok(u8::from(worst >= REL_ERROR_LIMIT))
}

fn run_init_solve(args: &InitSolveArgs) -> Result<u8, Failure> {
    let bias = solve_bias(args.classes).map_err(|e| core_failure("init-solve", e))?;
    let residual = initial_total_gradient(args.classes, bias)
        .map_err(|e| core_failure("init-solve", e))?;
    println!("classes = {}", args.classes);
    println!("bias = {bias:.6}");
    println!("residual_gradient = {:.3e}", residual.abs());
    Ok(0)
}

fn metrics_csv(stages: &[(&str, &RunReport)]) -> String {
    let mut csv = String::from("stage,epoch,mean_loss\n");
    for (stage, report) in stages {
        for (epoch, loss) in report.per_epoch_loss.iter().enumerate() {
            let _ = writeln!(csv, "{stage},{epoch},{loss}");
        }
    }
    csv
}

fn print_run_summary(report: &RunReport) {
    println!("loss = {}", report.loss);
    println!("epochs = {}", report.epochs_run);
    if let Some(last) = report.per_epoch_loss.last() {
        println!("final_epoch_loss = {last:.6}");
    }
    println!("overall_accuracy = {:.4}", report.overall_accuracy);
    println!(
        "group_accuracy rare/common/frequent = {} / {} / {}",
        option_cell(report.group_accuracy.rare),
        option_cell(report.group_accuracy.common),
        option_cell(report.group_accuracy.frequent),
    );
    println!("weight_norm_cv = {:.4}", report.weight_norms.cv);
    println!(
        "positive_gradient_db rare/common/frequent = {} / {} / {}",
        option_cell(report.positive_gradients.group_db.rare),
        option_cell(report.positive_gradients.group_db.common),
        option_cell(report.positive_gradients.group_db.frequent),
    );
}

fn run_train(args: &TrainArgs) -> Result<u8, Failure> {
    let cfg = load_config(&args.config)?;
    let data = make_longtail(&cfg.data).map_err(|e| core_failure("train: dataset", e))?;
    let stage1 = train(&data, &cfg).map_err(|e| core_failure("train", e))?;

    let to_json = |report: &RunReport| -> Result<String, Failure> {
        serde_json::to_string_pretty(report)
            .map_err(|e| Failure::usage(format!("serializing report: {e}")))
    };

    let final_outcome: &TrainOutcome;
    let stage2_outcome;
    match &cfg.stage2 {
        Some(stage2_cfg) => {
            stage2_outcome = retrain_classifier(&stage1.model, &data, &cfg, stage2_cfg)
                .map_err(|e| core_failure("train: stage two", e))?;
            final_outcome = &stage2_outcome;
            write_file(&args.out.join("stage1_report.json"), &to_json(&stage1.report)?)?;
            write_file(
                &args.out.join("metrics.csv"),
                &metrics_csv(&[("stage1", &stage1.report), ("stage2", &final_outcome.report)]),
            )?;
        }
        None => {
            final_outcome = &stage1;
            write_file(
                &args.out.join("metrics.csv"),
                &metrics_csv(&[("stage1", &stage1.report)]),
            )?;
        }
    }
    write_file(&args.out.join("report.json"), &to_json(&final_outcome.report)?)?;
    print_run_summary(&final_outcome.report);
    println!("report written to {}", args.out.join("report.json").display());
    Ok(0)
}

fn grid_to_file(dir: &Path, name: &str, grid: &SpatialGrid) -> Result<(), Failure> {
    write_file(&dir.join(name), &grid.to_csv_string())
}

fn run_dist(args: &DistArgs) -> Result<u8, Failure> {
    let text = read_file(&args.annotations)?;
    let table: AnnotationTable = parse_annotations(&text)
        .map_err(|e| core_failure(&format!("dist: {}", args.annotations.display()), e))?;
    let grids_dir = args.out.join("grids");
    let n = args.grid;

    let occurrence = occurrence_grid(&table, n, n).map_err(|e| core_failure("dist", e))?;
    grid_to_file(&grids_dir, "occurrence.csv", &occurrence)?;
    for category in &table.categories {
        let membership = membership_grid(&table, category.id, n, n)
            .map_err(|e| core_failure("dist", e))?;
        grid_to_file(&grids_dir, &format!("membership_{}.csv", category.id), &membership)?;
        let joint =
            joint_grid(&table, category.id, n, n).map_err(|e| core_failure("dist", e))?;
        grid_to_file(&grids_dir, &format!("joint_{}.csv", category.id), &joint)?;
    }
    println!(
        "images = {}, objects = {}, categories = {}",
        table.images.len(),
        table.objects.len(),
        table.categories.len()
    );
    println!("grid = {n}x{n}, occurrence mass = {:.6}", occurrence.total_mass());
    println!("grids written to {}", grids_dir.display());
    Ok(0)
}

fn run_kl(args: &KlArgs) -> Result<u8, Failure> {
    let p = SpatialGrid::from_csv_str(&read_file(&args.p)?)
        .map_err(|e| core_failure(&format!("kl: {}", args.p.display()), e))?;
    let q = SpatialGrid::from_csv_str(&read_file(&args.q)?)
        .map_err(|e| core_failure(&format!("kl: {}", args.q.display()), e))?;
    let kl = kl_divergence(&p, &q, args.eps).map_err(|e| core_failure("kl", e))?;
    println!("kl_divergence = {kl:.12}");
    Ok(0)
}

fn run_sweep_sigma(args: &SweepSigmaArgs) -> Result<u8, Failure> {
    if args.values.is_empty() {
        return Err(Failure::usage("sweep-sigma: at least one temperature required"));
    }
    for &sigma in &args.values {
        if !(0.8..=1.2).contains(&sigma) {
            return Err(Failure::usage(format!(
                "sweep-sigma: temperature {sigma} outside the supported range [0.8, 1.2]"
            )));
        }
    }
    let base = load_config(&args.config)?;
    let data = make_longtail(&base.data).map_err(|e| core_failure("sweep-sigma: dataset", e))?;

    let mut csv = String::from("sigma,overall_accuracy,rare,common,frequent\n");
    println!("sigma  overall  rare    common  frequent");
    for &sigma in &args.values {
        let mut cfg = base.clone();
        cfg.sigma = sigma;
        let outcome = train(&data, &cfg)
            .map_err(|e| core_failure(&format!("sweep-sigma: sigma {sigma}"), e))?;
        let report = outcome.report;
        let row = (
            report.overall_accuracy,
            report.group_accuracy.rare,
            report.group_accuracy.common,
            report.group_accuracy.frequent,
        );
        println!(
            "{sigma:<6} {:<8.4} {:<7} {:<7} {:<7}",
            row.0,
            option_cell(row.1),
            option_cell(row.2),
            option_cell(row.3)
        );
        let _ = writeln!(
            csv,
            "{sigma},{},{},{},{}",
            row.0,
            row.1.map_or(String::new(), |v| v.to_string()),
            row.2.map_or(String::new(), |v| v.to_string()),
            row.3.map_or(String::new(), |v| v.to_string()),
        );
    }
    write_file(&args.out.join("sweep.csv"), &csv)?;
    println!("table written to {}", args.out.join("sweep.csv").display());
    Ok(0)
}

fn weight_norm_line(norms: &WeightNormReport) -> String {
    format!("weight norms: mean {:.4}, std {:.4}, cv {:.4}", norms.mean, norms.std_dev, norms.cv)
}

fn group_line(label: &str, group: &PerGroup<Option<f64>>) -> String {
    format!(
        "{label}: rare {} / common {} / frequent {}",
        option_cell(group.rare),
        option_cell(group.common),
        option_cell(group.frequent)
    )
}

fn run_report(args: &ReportArgs) -> Result<u8, Failure> {
    let text = read_file(&args.input)?;
    let report: RunReport = serde_json::from_str(&text)
        .map_err(|e| Failure::usage(format!("{}: {e}", args.input.display())))?;
    println!("run summary ({})", args.input.display());
    println!("  loss {} over {} epochs", report.loss, report.epochs_run);
    if let (Some(first), Some(last)) =
        (report.per_epoch_loss.first(), report.per_epoch_loss.last())
    {
        println!("  epoch loss {first:.6} -> {last:.6}");
    }
    println!("  overall accuracy {:.4}", report.overall_accuracy);
    println!("  {}", group_line("group accuracy", &report.group_accuracy));
    println!("  {}", weight_norm_line(&report.weight_norms));
    println!("  {}", group_line("positive gradient dB", &report.positive_gradients.group_db));
    println!("  dB convention: {}", report.db_convention);
    println!("  wall time {:.2}s", report.wall_time_s);
    Ok(0)
}

fn main() -> ExitCode {
    // Die silently on a closed pipe (`gol ... | head`) like standard Unix
    // tools instead of panicking on the failed print.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GradCheck(args) => run_grad_check(args),
        Command::InitSolve(args) => run_init_solve(args),
        Command::Train(args) => run_train(args),
        Command::Dist(args) => run_dist(args),
        Command::Kl(args) => run_kl(args),
        Command::SweepSigma(args) => run_sweep_sigma(args),
        Command::Report(args) => run_report(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
