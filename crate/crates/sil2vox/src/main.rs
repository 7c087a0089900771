//! Command-line front end: dataset building, gradient checking, training,
//! evaluation and report assembly, each as a deterministic, re-runnable
//! subcommand.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use sil2vox::evaluation::{
    iou_histogram, records_csv, report_table, run_experiment, ExperimentMode, ExperimentReport,
    ExperimentSetup, NetworkTag,
};
use sil2vox::geometry::{build_dataset, Dataset, DatasetConfig, Mesh, Split};
use sil2vox::network::{check_stack_gradients, load_checkpoint, NetworkSpec, StackedParams};
use sil2vox::tensor::{op_check_suite, GradCheckOptions, Scalar, Subsample};
use sil2vox::training::{train, LossMode, TrainConfig};

#[derive(Parser)]
#[command(
    name = "sil2vox",
    about = "3D shape reconstruction from single binary silhouettes",
    version
)]
struct Cli {
    /// Worker threads for internal parallelism; 0 means all available cores.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a packed dataset (silhouette views + voxel grids) from a
    /// directory of OBJ meshes and assign a seeded train/test split.
    Dataset(DatasetArgs),
    /// Verify analytic gradients against central finite differences, for
    /// individual operators and for the full stacked network.
    CheckGrad(CheckGradArgs),
    /// Train a stacked reconstruction network on a packed dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset under a view protocol and write a
    /// report with per-view records, aggregates and a histogram.
    Eval(EvalArgs),
    /// Assemble evaluation reports into a comparison table, alongside the
    /// published full-scale reference rows.
    Report(ReportArgs),
}

#[derive(Args)]
struct DatasetArgs {
    /// Directory containing input .obj meshes (non-recursive).
    #[arg(long)]
    meshes: PathBuf,
    /// Output directory for the packed dataset.
    #[arg(long)]
    out: PathBuf,
    /// Cubic grid extent; a positive multiple of 16.
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    /// Polar steps of the training view lattice.
    #[arg(long, default_value_t = 10)]
    n_polar: usize,
    /// Azimuthal steps of the training view lattice.
    #[arg(long, default_value_t = 18)]
    n_azimuth: usize,
    /// Views with polar angle within this many degrees of a pole count as hard.
    #[arg(long, default_value_t = 15.0)]
    hard_threshold_deg: f64,
    /// Fraction of models assigned to the training split.
    #[arg(long, default_value_t = 0.78)]
    train_ratio: f64,
    /// Seed for the split assignment.
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct CheckGradArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Resolution of the checked stack.
    #[arg(long, default_value_t = 16)]
    resolution: usize,
    /// Channel width multiplier of the checked stack.
    #[arg(long, default_value_t = 0.0625)]
    width_mult: f64,
    /// Stages in the checked stack.
    #[arg(long, default_value_t = 2)]
    n_stages: usize,
    /// Relative-error tolerance for individual operators.
    #[arg(long, default_value_t = 1e-4)]
    tol_ops: f64,
    /// Relative-error tolerance for the full stack.
    #[arg(long, default_value_t = 1e-3)]
    tol_stack: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Packed dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for the log and checkpoints.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    n_stages: usize,
    /// Channel width multiplier (1.0 reproduces the full net).
    #[arg(long, default_value_t = 0.25)]
    width_mult: f64,
    /// Per-stage loss weights, comma-separated; default is uniform.
    #[arg(long, value_delimiter = ',')]
    lambda: Option<Vec<f64>>,
    /// Per-stage input share of the supervision target, comma-separated;
    /// the ground-truth share is its complement. Default: 0.5 for hidden
    /// stages, 0 for the final stage.
    #[arg(long, value_delimiter = ',')]
    eta: Option<Vec<f64>>,
    /// Smoothing of the root loss.
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 1e-2)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 600)]
    max_steps: usize,
    /// Validate every this many steps (and once at the end).
    #[arg(long, default_value_t = 25)]
    val_every: usize,
    /// Share of samples held out for validation, in (0, 1).
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Validations without improvement before the learning rate decays.
    #[arg(long, default_value_t = 5)]
    plateau_patience: usize,
    /// Multiplier applied to the learning rate on a plateau.
    #[arg(long, default_value_t = 0.1)]
    lr_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Which split of the dataset to train on.
    #[arg(long, value_enum, default_value_t = SubsetArg::Train)]
    subset: SubsetArg,
    /// Numeric precision of training.
    #[arg(long, value_enum, default_value_t = DtypeArg::F32)]
    dtype: DtypeArg,
    /// Use only the final stage's loss instead of the weighted sum.
    #[arg(long)]
    final_loss_only: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Packed dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint file written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for the report files.
    #[arg(long)]
    out: PathBuf,
    /// View protocol: the training lattice (e1) or seeded off-lattice views (e2).
    #[arg(long, value_enum, default_value_t = ModeArg::E1)]
    mode: ModeArg,
    /// Seeds the off-lattice views in e2 mode; unused in e1.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Category label recorded in the report.
    #[arg(long, default_value = "toy")]
    category: String,
    /// Occupancy threshold for binarizing predictions.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Which split of the dataset to score.
    #[arg(long, value_enum, default_value_t = SubsetArg::All)]
    subset: SubsetArg,
    #[arg(long, default_value_t = 20)]
    histogram_bins: usize,
    /// Numeric precision of inference.
    #[arg(long, value_enum, default_value_t = DtypeArg::F32)]
    dtype: DtypeArg,
}

#[derive(Args)]
struct ReportArgs {
    /// Report JSON files written by `eval`; with none given, the table
    /// holds only the published reference rows.
    #[arg(long, num_args = 0..)]
    reports: Vec<PathBuf>,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SubsetArg {
    All,
    Train,
    Test,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    E1,
    E2,
}

impl From<ModeArg> for ExperimentMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::E1 => ExperimentMode::E1,
            ModeArg::E2 => ExperimentMode::E2,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.workers > 0 {
        if let Err(e) =
            rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global()
        {
            return fail(&anyhow::anyhow!(e).context("configuring worker threads"));
        }
    }
    let result = match cli.command {
        Command::Dataset(args) => cmd_dataset(&args),
        Command::CheckGrad(args) => cmd_check_grad(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Report(args) => cmd_report(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

/// Prints a machine-readable error summary to stderr and returns failure.
fn fail(e: &anyhow::Error) -> ExitCode {
    let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
    let summary = serde_json::json!({ "error": chain[0], "chain": chain });
    eprintln!("{summary}");
    ExitCode::FAILURE
}

fn cmd_dataset(args: &DatasetArgs) -> Result<()> {
    if !(args.train_ratio >= 0.0 && args.train_ratio <= 1.0) {
        bail!("train ratio {} is not in [0, 1]", args.train_ratio);
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&args.meshes)
        .with_context(|| format!("reading mesh directory {}", args.meshes.display()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |e| e.eq_ignore_ascii_case("obj")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .obj files in {}", args.meshes.display());
    }

    let mut models = Vec::new();
    let mut n_skipped = 0usize;
    for path in &paths {
        // Model ids become directory names, so they must be safe ones.
        let id = match path.file_stem().and_then(|s| s.to_str()) {
            Some(stem)
                if !stem.is_empty()
                    && !stem.starts_with('.')
                    && stem
                        .chars()
                        .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.') =>
            {
                stem.to_string()
            }
            _ => {
                eprintln!(
                    "warning: skipping {}: file stem is not a safe model id",
                    path.display()
                );
                n_skipped += 1;
                continue;
            }
        };
        match Mesh::load_obj(path) {
            Ok(mesh) => models.push((id, mesh)),
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", path.display());
                n_skipped += 1;
            }
        }
    }
    if models.is_empty() {
        bail!("all {} mesh files were unreadable", paths.len());
    }

    let config = DatasetConfig {
        resolution: args.resolution,
        n_polar: args.n_polar,
        n_azimuth: args.n_azimuth,
        hard_threshold_deg: args.hard_threshold_deg,
    };
    let mut manifest = build_dataset(&models, &config, &args.out)?;

    let n = manifest.models.len();
    let n_train = ((n as f64) * args.train_ratio).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    order.shuffle(&mut rng);
    for (rank, &i) in order.iter().enumerate() {
        manifest.models[i].split = if rank < n_train { Split::Train } else { Split::Test };
    }
    manifest.n_skipped = n_skipped;
    manifest.save(args.out.join("manifest.json"))?;

    println!(
        "packed {} models ({} train / {} test, {} skipped): {} views each at {}^3 into {}",
        n,
        n_train,
        n - n_train,
        n_skipped,
        args.n_polar * args.n_azimuth,
        args.resolution,
        args.out.display()
    );
    Ok(())
}

fn cmd_check_grad(args: &CheckGradArgs) -> Result<()> {
    let mut failures = Vec::new();

    println!("operator gradients vs central differences (tolerance {:.1e}):", args.tol_ops);
    for (name, result) in op_check_suite() {
        match result {
            Ok(report) => {
                let ok = report.passes(args.tol_ops);
                println!(
                    "  {:24} {:5} coords, max rel err {:.3e}  {}",
                    name,
                    report.checked,
                    report.max_rel_err,
                    if ok { "ok" } else { "FAIL" }
                );
                if !ok {
                    failures.push(name.to_string());
                }
            }
            Err(e) => {
                println!("  {name:24} error: {e}");
                failures.push(name.to_string());
            }
        }
    }

    let spec = NetworkSpec {
        resolution: args.resolution,
        width_mult: args.width_mult,
        n_stages: args.n_stages,
    };
    let opts = GradCheckOptions {
        step_scale: 1e-3,
        subsample: Some(Subsample { seed: args.seed ^ 0x77, per_tensor: 2 }),
        refine_above: Some(1e-4),
        denom_floor: 1e-4,
    };
    let report = check_stack_gradients(&spec, args.seed, &opts)?;
    let ok = report.passes(args.tol_stack);
    println!(
        "full {}-stage stack at R={}, width x{} (tolerance {:.1e}):",
        args.n_stages, args.resolution, args.width_mult, args.tol_stack
    );
    println!(
        "  {} coords, max rel err {:.3e}  {}",
        report.checked,
        report.max_rel_err,
        if ok { "ok" } else { "FAIL" }
    );
    if !ok {
        failures.push("stack".to_string());
    }

    if failures.is_empty() {
        Ok(())
    } else {
        bail!("gradient check failed for: {}", failures.join(", "));
    }
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let dataset = Dataset::open(&args.dataset)?;
    let dataset = match args.subset {
        SubsetArg::All => dataset,
        SubsetArg::Train => dataset.restricted_to(Split::Train),
        SubsetArg::Test => dataset.restricted_to(Split::Test),
    };
    if dataset.manifest().models.is_empty() {
        bail!("the selected subset of {} is empty", args.dataset.display());
    }

    let network = NetworkSpec {
        resolution: dataset.manifest().resolution,
        width_mult: args.width_mult,
        n_stages: args.n_stages,
    };
    let mut config = TrainConfig::for_network(network);
    if let Some(lambda) = &args.lambda {
        config.lambdas = lambda.clone();
    }
    if let Some(eta) = &args.eta {
        config.etas = eta.iter().map(|&e1| [e1, 1.0 - e1]).collect();
    }
    config.eps = args.eps;
    config.learning_rate = args.learning_rate;
    config.momentum = args.momentum;
    config.batch_size = args.batch_size;
    config.max_steps = args.max_steps;
    config.val_every = args.val_every;
    config.val_fraction = args.val_fraction;
    config.plateau_patience = args.plateau_patience;
    config.lr_decay = args.lr_decay;
    config.seed = args.seed;
    config.loss_mode =
        if args.final_loss_only { LossMode::FinalStageOnly } else { LossMode::Combined };
    config.validate()?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let config_path = args.out.join("config.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(&config)?)
        .with_context(|| format!("writing {}", config_path.display()))?;

    let summary = match args.dtype {
        DtypeArg::F32 => train::<f32>(&config, &dataset, &args.out)?,
        DtypeArg::F64 => train::<f64>(&config, &dataset, &args.out)?,
    };
    println!(
        "trained {} steps (config hash {:016x}); best validation {:.6} at step {}, final loss {:.6}",
        summary.steps,
        config.hash(),
        summary.best_criterion,
        summary.best_step,
        summary.final_loss
    );
    println!("  log:   {}", summary.log_path.display());
    println!("  best:  {}", summary.best_checkpoint.display());
    println!("  final: {}", summary.final_checkpoint.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    match args.dtype {
        DtypeArg::F32 => run_eval::<f32>(args),
        DtypeArg::F64 => run_eval::<f64>(args),
    }
}

fn run_eval<T: Scalar>(args: &EvalArgs) -> Result<()> {
    let dataset = Dataset::open(&args.dataset)?;
    let dataset = match args.subset {
        SubsetArg::All => dataset,
        SubsetArg::Train => dataset.restricted_to(Split::Train),
        SubsetArg::Test => dataset.restricted_to(Split::Test),
    };
    if dataset.manifest().models.is_empty() {
        bail!("the selected subset of {} is empty", args.dataset.display());
    }

    let (params, meta): (StackedParams<T>, _) = load_checkpoint(&args.checkpoint)?;
    let tag = if params.spec.n_stages == 1 { NetworkTag::Single } else { NetworkTag::Stacked };
    let setup = ExperimentSetup {
        dataset: &dataset,
        mode: args.mode.into(),
        seed: args.seed,
        network: tag,
        category: args.category.clone(),
        config_hash: meta.config_hash,
        threshold: args.threshold,
    };
    let report = run_experiment(&params, &setup)?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mode_name = match args.mode {
        ModeArg::E1 => "e1",
        ModeArg::E2 => "e2",
    };
    let base = format!("{}_{}", tag.short().to_lowercase(), mode_name);

    let report_path = args.out.join(format!("report_{base}.json"));
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", report_path.display()))?;

    let records_path = args.out.join(format!("records_{base}.csv"));
    std::fs::write(&records_path, records_csv(&report.records))
        .with_context(|| format!("writing {}", records_path.display()))?;

    let hist = iou_histogram(&report.records, args.histogram_bins);
    let mut hist_csv = String::from("bin_lo,bin_hi,count\n");
    for (i, count) in hist.iter().enumerate() {
        let lo = i as f64 / args.histogram_bins as f64;
        let hi = (i + 1) as f64 / args.histogram_bins as f64;
        hist_csv.push_str(&format!("{lo:.3},{hi:.3},{count}\n"));
    }
    let hist_path = args.out.join(format!("histogram_{base}.csv"));
    std::fs::write(&hist_path, hist_csv)
        .with_context(|| format!("writing {}", hist_path.display()))?;

    let a = &report.aggregates;
    println!(
        "{} on {} ({} views, {} hard): mean IoU {:.4} +/- {:.4}{}",
        tag.short(),
        mode_name.to_uppercase(),
        a.count,
        a.hard_count,
        a.mean_all,
        a.stderr_all,
        match (a.mean_hard, a.stderr_hard) {
            (Some(m), Some(s)) => format!(", hard mean {m:.4} +/- {s:.4}"),
            _ => String::new(),
        }
    );
    println!("  report: {}", report_path.display());
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let mut reports = Vec::new();
    for path in &args.reports {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let report: ExperimentReport = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))?;
        reports.push(report);
    }
    let refs: Vec<&ExperimentReport> = reports.iter().collect();
    let table = report_table(&refs);
    print!("{table}");
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent().filter(|p| !Path::new("").eq(*p)) {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
        std::fs::write(out, &table).with_context(|| format!("writing {}", out.display()))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}
