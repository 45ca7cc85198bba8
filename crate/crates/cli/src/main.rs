//! `msa`: dataset generation, training, evaluation, ablation and gradient checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msa_core::checks::{format_table, gradcheck_suite};
use msa_core::data::{generate_synthetic, SyntheticSpec};
use msa_core::experiment::{ablate, check_compatible, evaluate, run_detailed};
use msa_core::model::SavedModel;
use msa_core::trainer::split_dataset;
use msa_core::{Dataset, Error, ExperimentConfig, MultimodalModel, Result};

/// Environment variable naming the default output directory.
const OUT_DIR_ENV: &str = "MSA_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "msa", version, about = "Multimodal sentiment fusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    Gen(GenArgs),
    /// Train one configuration and write its report.
    Train(TrainArgs),
    /// Evaluate a saved model on a dataset split.
    Eval(EvalArgs),
    /// Run all 16 ablation combinations and write the grid.
    Ablate(RunArgs),
    /// Finite-difference gradient checks of every differentiable operation.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 30)]
    per_class: usize,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory; overrides `dataset` in the config.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    no_bilstm: bool,
    #[arg(long)]
    no_cnn: bool,
    #[arg(long)]
    no_cbam: bool,
    #[arg(long)]
    no_supcon: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Also save the trained weights here.
    #[arg(long)]
    save_model: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Weights written by `train --save-model`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// train, val, test or all.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    instances: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => run_ablation(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn resolve_out(explicit: Option<&Path>, configured: Option<&Path>, default_name: &str) -> PathBuf {
    if let Some(p) = explicit.or(configured) {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir).join(default_name),
        _ => PathBuf::from(default_name),
    }
}

/// Writes through a sibling temporary file so readers never see a partial file.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let io = |e: std::io::Error| Error::Config(format!("cannot write {}: {e}", path.display()));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let name = path.file_name().ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, contents).map_err(io)?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io(e)
    })
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn gen(args: GenArgs) -> Result<()> {
    let config = load_config(&args.common)?;
    let m = &config.model;
    let spec = SyntheticSpec {
        classes: m.classes,
        per_class: args.per_class,
        vocab_size: m.vocab_size,
        n_t_max: m.n_t_max,
        channels: m.channels,
        height: m.height,
        width: m.width,
        seed: config.seed,
        noise: args.noise,
    };
    let dir = resolve_out(args.common.out.as_deref(), None, "dataset");
    let ds = generate_synthetic(&spec)?;
    ds.save(&dir)?;
    println!("wrote {} records ({} classes) to {}", ds.records.len(), spec.classes, dir.display());
    Ok(())
}

/// Config plus flag overrides, and the dataset it names.
fn prepare(args: &RunArgs) -> Result<(ExperimentConfig, Dataset)> {
    let mut config = load_config(&args.common)?;
    if let Some(path) = &args.dataset {
        config.dataset = Some(path.clone());
    }
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    let a = &mut config.ablation;
    a.use_bilstm &= !args.no_bilstm;
    a.use_cnn &= !args.no_cnn;
    a.use_cbam &= !args.no_cbam;
    a.use_supcon &= !args.no_supcon;
    config.validate()?;
    let path = config
        .dataset
        .clone()
        .ok_or_else(|| Error::Config("no dataset given (use --dataset or set `dataset` in the config)".into()))?;
    let dataset = Dataset::load(&path)?;
    check_compatible(&config, &dataset.manifest)?;
    Ok((config, dataset))
}

fn train(args: TrainArgs) -> Result<()> {
    let (config, dataset) = prepare(&args.run)?;
    let out = resolve_out(args.run.common.out.as_deref(), config.output.as_deref(), "report.json");
    let outcome = run_detailed(&config, &dataset)?;
    let report = &outcome.report;
    for e in &report.epochs {
        eprintln!(
            "epoch {:>3}  loss {:.4} (sc {:.4}, supcon {:.4})  train_acc {:.3}  val_acc {:.3}  val_f1 {:.3}",
            e.epoch, e.loss_total, e.loss_sc, e.loss_supcon, e.train_acc, e.val_acc, e.val_macro_f1
        );
    }
    write_atomic(&out, &report.to_json()?)?;
    if let Some(path) = &args.save_model {
        write_atomic(path, &to_json(&outcome.model.save(&config))?)?;
    }
    let f = &report.final_metrics;
    println!(
        "{}: test_acc {:.4} test_macro_f1 {:.4} train_acc {:.4} -> {}",
        report.label,
        f.test_acc,
        f.test_macro_f1,
        f.train_acc,
        out.display()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let text = fs::read_to_string(&args.model).map_err(|e| Error::Config(format!("cannot read {}: {e}", args.model.display())))?;
    let saved: SavedModel =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("malformed model file: {e}")))?;
    let model = MultimodalModel::from_saved(&saved)?;
    let path = args
        .dataset
        .or_else(|| saved.config.dataset.clone())
        .ok_or_else(|| Error::Config("no dataset given".into()))?;
    let dataset = Dataset::load(&path)?;
    check_compatible(&saved.config, &dataset.manifest)?;
    let records = if args.split == "all" {
        dataset.records
    } else {
        let split = split_dataset(&dataset.records, saved.config.seed)?;
        match args.split.as_str() {
            "train" => split.train,
            "val" => split.val,
            "test" => split.test,
            other => return Err(Error::Config(format!("unknown split {other:?}"))),
        }
    };
    let ev = evaluate(&model, &records)?;
    let summary = serde_json::json!({
        "split": args.split,
        "samples": records.len(),
        "accuracy": ev.accuracy,
        "macro_f1": ev.macro_f1,
        "f1_averaging": "macro",
        "confusion": ev.confusion.counts(),
    });
    let body = to_json(&summary)?;
    match args.out {
        Some(out) => write_atomic(&out, &body)?,
        None => print!("{body}"),
    }
    Ok(())
}

fn run_ablation(args: RunArgs) -> Result<()> {
    let (config, dataset) = prepare(&args)?;
    let out = resolve_out(args.common.out.as_deref(), config.output.as_deref(), "ablation.json");
    let grid = ablate(&config, &dataset)?;
    write_atomic(&out, &to_json(&grid)?)?;
    print!("{}", grid.table());
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let rows = gradcheck_suite(args.seed, args.instances)?;
    print!("{}", format_table(&rows));
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", rows.len());
        Ok(())
    } else {
        Err(Error::Domain {
            op: "gradcheck",
            reason: format!("tolerance exceeded for {}", failed.join(", ")),
        })
    }
}
