use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use acnet::analysis::{
    default_grid, distortion_csv, distortion_eval, magnitude_matrix, sparsity_sweep, sweep_csv, LocationSet,
    MagnitudeMatrix,
};
use acnet::data::{gen_synthetic, load_cifar10_dir, load_dataset, save_dataset, AugmentConfig, Dataset};
use acnet::fusion::{fuse_model_with_summary, verify_equivalence, VerifyOptions};
use acnet::io::{is_fused, load_any, save_model, AnyModel};
use acnet::train::{fit, log_csv, staircase, TrainConfig};
use acnet::{build_plain, expand_to_acnet, Ablation, BlockKind, Exec, Model, ModelSpec, Precision, Real};

/// Train, fuse, verify and inspect networks built from asymmetric
/// convolution blocks.
#[derive(Parser)]
#[command(name = "acnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and save it
    Train(TrainArgs),
    /// Fold batch norms and merge ACB branches into single convs
    Fuse {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check that two models produce the same inference outputs
    Verify {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        fused: PathBuf,
        #[arg(long, default_value_t = 200)]
        inputs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Relative deviation bound; defaults to 1e-4 for f32 and 1e-9 for f64
        #[arg(long)]
        tolerance: Option<f64>,
        /// Print key=value lines instead of the table
        #[arg(long)]
        kv: bool,
    },
    /// Average 3x3 kernel magnitude matrix of a model
    AnalyzeMagnitude {
        #[arg(long)]
        model: PathBuf,
        /// Also write the matrix as CSV
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy after pruning kernel locations at increasing sparsity
    PruneSweep {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Location sets: corner, skeleton, global, border, tl2x2
        #[arg(long, value_delimiter = ',', default_value = "corner,skeleton")]
        sets: Vec<LocationSet>,
        /// Sparsity levels; defaults to 0, 0.05, ... up to each set's cap
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        /// Number of pruning seeds per level
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy under rotations and flips of the eval images
    DistortEval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset file
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
    },
}

#[derive(Args)]
struct DataArgs {
    /// synthetic, cifar10:<dir> or dataset:<path>
    #[arg(long, default_value = "synthetic")]
    data: String,
    /// Training-set size for synthetic data (the eval set is a quarter of it)
    #[arg(long, default_value_t = 4000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AcbMode {
    On,
    Off,
    Shifted,
    /// Keep the block kinds written in the spec file
    Spec,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    /// Model spec file; a small default network is used otherwise
    #[arg(long)]
    spec: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = AcbMode::On)]
    acb: AcbMode,
    #[arg(long, default_value = "f32")]
    precision: Precision,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Base learning rate of the staircase schedule
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    no_horizontal: bool,
    #[arg(long)]
    no_vertical: bool,
    /// One batch norm after the branch sum instead of one per branch
    #[arg(long)]
    bn_after_sum: bool,
    /// Run on one thread
    #[arg(long)]
    sequential: bool,
    /// Per-epoch CSV log
    #[arg(long)]
    log: Option<PathBuf>,
}

/// Exit status 1: bad input, missing file, failed precondition.
struct Failure(String);

impl<E: Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

type CmdResult = Result<ExitCode, Failure>;

const VERIFY_FAILED: u8 = 2;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::Train(args) => train(args),
        Command::Fuse { model, out } => fuse(&model, &out),
        Command::Verify {
            original,
            fused,
            inputs,
            seed,
            tolerance,
            kv,
        } => {
            let opts = VerifyOptions {
                n_inputs: inputs,
                seed,
                tolerance,
            };
            verify(&original, &fused, &opts, kv)
        }
        Command::AnalyzeMagnitude { model, out } => {
            let m = match load_fused(&model)? {
                AnyModel::F32(m) => magnitude_matrix(&m)?,
                AnyModel::F64(m) => magnitude_matrix(&m)?,
            };
            print!("{m}");
            if let Some(out) = out {
                fs::write(out, format!("{}\n{}\n", MagnitudeMatrix::csv_header(), m.csv_row()))?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::PruneSweep {
            model,
            data,
            sets,
            grid,
            seeds,
            out,
        } => {
            let eval = load_data(&data)?.1;
            let seeds: Vec<u64> = (0..seeds).collect();
            let mut rows = Vec::new();
            for set in sets {
                let grid = grid.clone().unwrap_or_else(|| default_grid(set));
                rows.extend(match load_fused(&model)? {
                    AnyModel::F32(m) => sparsity_sweep(&m, &[set], &grid, &seeds, &eval, Exec::default())?,
                    AnyModel::F64(m) => sparsity_sweep(&m, &[set], &grid, &seeds, &eval, Exec::default())?,
                });
            }
            emit(&sweep_csv(&rows), out.as_deref())
        }
        Command::DistortEval { model, data, out } => {
            let eval = load_data(&data)?.1;
            let rows = match load_any(&model)? {
                AnyModel::F32(m) => distortion_eval(&m, &eval)?,
                AnyModel::F64(m) => distortion_eval(&m, &eval)?,
            };
            emit(&distortion_csv(&rows), out.as_deref())
        }
        Command::GenData {
            out,
            n,
            seed,
            size,
            classes,
        } => {
            let ds = gen_synthetic(n, seed, size, classes)?;
            save_dataset(&ds, &out)?;
            eprintln!("wrote {n} samples ({classes} classes, {size}x{size}) to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn emit(text: &str, out: Option<&Path>) -> CmdResult {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

/// `(train, eval)`. A single dataset file serves as both.
fn load_data(args: &DataArgs) -> Result<(Dataset, Dataset), Failure> {
    let src = args.data.as_str();
    if src == "synthetic" {
        let train = gen_synthetic(args.samples, args.data_seed, 16, 4)?;
        let eval = gen_synthetic((args.samples / 4).max(1), args.data_seed.wrapping_add(1), 16, 4)?;
        return Ok((train, eval));
    }
    if let Some(dir) = src.strip_prefix("cifar10:") {
        return Ok(load_cifar10_dir(Path::new(dir), true)?);
    }
    if let Some(path) = src.strip_prefix("dataset:") {
        let ds = load_dataset(Path::new(path))?;
        return Ok((ds.clone(), ds));
    }
    Err(Failure(format!("unknown data source {src:?} (expected synthetic, cifar10:<dir> or dataset:<path>)")))
}

fn default_spec(ds: &Dataset) -> String {
    let (c, h, w) = ds.image_dims();
    format!(
        "input {c} {h} {w}
conv 8 3x3 pad=1
relu
maxpool 2
conv 16 3x3 pad=1
relu
maxpool 2
conv 16 3x3 pad=1
relu
gap
linear {}
",
        ds.class_count
    )
}

fn train(args: TrainArgs) -> CmdResult {
    let (train_set, eval_set) = load_data(&args.data)?;
    let text = match &args.spec {
        Some(p) => fs::read_to_string(p).map_err(|e| Failure(format!("{}: {e}", p.display())))?,
        None => default_spec(&train_set),
    };
    let spec = ModelSpec::parse(&text)?;
    let spec = match args.acb {
        AcbMode::On | AcbMode::Off => spec.with_block(BlockKind::Acb),
        AcbMode::Shifted => spec.with_block(BlockKind::AcbShifted),
        AcbMode::Spec => spec,
    };
    if spec.input != train_set.image_dims() {
        return Err(Failure(format!(
            "spec expects {:?} inputs, data has {:?}",
            spec.input,
            train_set.image_dims()
        )));
    }
    let ablation = Ablation {
        use_horizontal: !args.no_horizontal,
        use_vertical: !args.no_vertical,
        bn_in_branch: !args.bn_after_sum,
    };
    let config = TrainConfig {
        schedule: staircase(args.lr, args.epochs),
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        batch_size: args.batch,
        epochs: args.epochs,
        seed: args.seed,
        augment: (!args.no_augment).then(|| AugmentConfig::standard(train_set.image_dims().1)),
        exec: if args.sequential { Exec::Sequential } else { Exec::default() },
    };
    match args.precision {
        Precision::F32 => train_as::<f32>(&args, &spec, ablation, &config, &train_set, &eval_set),
        Precision::F64 => train_as::<f64>(&args, &spec, ablation, &config, &train_set, &eval_set),
    }
}

fn train_as<T: Real>(
    args: &TrainArgs,
    spec: &ModelSpec,
    ablation: Ablation,
    config: &TrainConfig,
    train_set: &Dataset,
    eval_set: &Dataset,
) -> CmdResult
where
    AnyModel: From<Model<T>>,
{
    let mut model: Model<T> = if args.acb == AcbMode::Off {
        build_plain(spec, args.seed)?
    } else {
        expand_to_acnet(spec, ablation, args.seed)?
    };
    eprintln!(
        "training {} parameters ({} ACB layers) on {} samples for {} epochs",
        model.param_count(),
        model.spec.acb_count(),
        train_set.len(),
        config.epochs
    );
    let logs = fit(&mut model, train_set, Some(eval_set), config)?;
    for l in &logs {
        eprintln!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}  eval acc {:.2}%",
            l.epoch,
            l.lr,
            l.train_loss,
            100.0 * l.eval_acc.unwrap_or(f64::NAN)
        );
    }
    if let Some(p) = &args.log {
        fs::write(p, log_csv(&logs))?;
    }
    save_model(&model, &args.out)?;
    eprintln!("saved {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn fuse(model: &Path, out: &Path) -> CmdResult {
    let summary = match load_any(model)? {
        AnyModel::F32(m) => fuse_and_save(&m, out)?,
        AnyModel::F64(m) => fuse_and_save(&m, out)?,
    };
    print!("{summary}");
    Ok(ExitCode::SUCCESS)
}

fn fuse_and_save<T: Real>(m: &Model<T>, out: &Path) -> Result<String, Failure> {
    let (fused, summary) = fuse_model_with_summary(m)?;
    save_model(&fused, out)?;
    Ok(format!(
        "{summary}parameters {} -> {}\n",
        m.param_count(),
        fused.param_count()
    ))
}

/// The model as stored, or its fused form when it still has ACBs or batch norms.
fn load_fused(path: &Path) -> Result<AnyModel, Failure> {
    let fuse_if_needed = |m: AnyModel| -> Result<AnyModel, Failure> {
        Ok(match m {
            AnyModel::F32(m) if !is_fused(&m) => {
                eprintln!("note: fusing {} before analysis", path.display());
                AnyModel::F32(fuse_model_with_summary(&m)?.0)
            }
            AnyModel::F64(m) if !is_fused(&m) => {
                eprintln!("note: fusing {} before analysis", path.display());
                AnyModel::F64(fuse_model_with_summary(&m)?.0)
            }
            other => other,
        })
    };
    fuse_if_needed(load_any(path)?)
}

fn verify(original: &Path, fused: &Path, opts: &VerifyOptions, kv: bool) -> CmdResult {
    let report = match (load_any(original)?, load_any(fused)?) {
        (AnyModel::F32(a), AnyModel::F32(b)) => verify_equivalence(&a, &b, opts)?,
        (AnyModel::F64(a), AnyModel::F64(b)) => verify_equivalence(&a, &b, opts)?,
        (a, b) => {
            return Err(Failure(format!(
                "precision mismatch: {} vs {}",
                a.precision(),
                b.precision()
            )))
        }
    };
    if kv {
        print!("{}", report.to_kv());
    } else {
        print!("{report}");
    }
    Ok(if report.pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(VERIFY_FAILED)
    })
}
