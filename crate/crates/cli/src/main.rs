//! `light-reskan`: data generation, training, evaluation, ablation,
//! K-shot runs, complexity audit and operator benchmarks.

mod config;
mod run;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use light_reskan::audit::{self, bench, default_sweep, BENCH_CSV_HEADER};
use light_reskan::data::{
    duplicate_hashes, generate_synthetic, kshot_subsample, load_image_folder, recipe_for, write_dataset, Dataset, DatasetKind,
    Split,
};
use light_reskan::network::{apply_ablation, build, AblationRow, NetworkConfig};
use light_reskan::speckle::{preset, NoiseLevel, Parametrization};
use light_reskan::trainer::{
    evaluate, export_features, Checkpoint, EpochMetrics, EvalNoise, TrainSummary, Trainer,
};
use light_reskan::{Error, Result};

use crate::config::Config;
use crate::run::Run;

pub const THREADS_ENV: &str = "LIGHT_RESKAN_THREADS";

#[derive(Parser)]
#[command(name = "light-reskan", version, about = "Light-ResKAN: Gram-polynomial KAN convolutions for SAR classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file, or a run's manifest.json to repeat that run.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set network.degree=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed (overrides run.seed).
    #[arg(long, value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    seed: Option<u64>,
    /// Parent of the per-run directory (overrides run.out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exact run directory instead of a timestamped one.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Emit {
    Csv,
    Table,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write it as class folders.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Dataset root (default: `<run dir>/data`).
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Train a model; writes metrics.csv, checkpoint.ckpt and summary.json.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
        /// Continue from a checkpoint (its network and optimizer settings win).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Speckle preset applied to every test image.
        #[arg(long)]
        noise: Option<NoiseLevel>,
        #[arg(long)]
        gamma_parametrization: Option<Parametrization>,
    },
    /// Accuracy on clean and speckled test images; writes noise.csv.
    NoiseEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Restrict to these presets (default: all three).
        #[arg(long, value_delimiter = ',')]
        level: Vec<NoiseLevel>,
        #[arg(long)]
        gamma_parametrization: Option<Parametrization>,
    },
    /// Train every rung of the component ladder; writes ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Train on K samples per class for each K; writes kshot.csv.
    Kshot {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long = "k", value_delimiter = ',', default_value = "5,10,20")]
        k: Vec<usize>,
    },
    /// Parameter, FLOP and memory-access report.
    Audit {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "table")]
        emit: Emit,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Time the three KAN convolution paths; writes bench.csv.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// Write pooled features of a checkpoint as CSV.
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("light-reskan: {}", e.to_string().replace('\n', " "));
            ExitCode::from(if matches!(e, Error::Usage(_) | Error::Config(_)) { 2 } else { 1 })
        }
    }
}

/// Sizes the worker pool from `LIGHT_RESKAN_THREADS` (unset or 0 = one
/// worker per core). Results never depend on the worker count.
fn init_threads() -> Result<()> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| Error::Usage(format!("{THREADS_ENV} must be a non-negative integer, got `{v}`")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Runtime(format!("cannot start worker pool: {e}")))
}

fn resolve(common: &Common, flags: Option<&TrainFlags>) -> Result<Config> {
    let mut cfg = config::load(common.config.as_deref(), &common.set)?;
    if let Some(s) = common.seed {
        cfg.run.seed = s;
        cfg.train.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.run.out_dir = o.clone();
    }
    if let Some(f) = flags {
        if let Some(e) = f.epochs {
            cfg.train.epochs = e;
        }
        if let Some(b) = f.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(lr) = f.lr {
            cfg.train.lr = lr;
        }
    }
    cfg.validate().map_err(|e| match e {
        Error::Config(m) => Error::Usage(m),
        other => other,
    })?;
    Ok(cfg)
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, dest } => gen_data(&common, dest),
        Command::Train { common, flags, resume } => train(&common, &flags, resume.as_deref()),
        Command::Eval { common, checkpoint, noise, gamma_parametrization } => {
            eval(&common, &checkpoint, noise, gamma_parametrization)
        }
        Command::NoiseEval { common, checkpoint, level, gamma_parametrization } => {
            noise_eval(&common, &checkpoint, &level, gamma_parametrization)
        }
        Command::Ablate { common, flags } => ablate(&common, &flags),
        Command::Kshot { common, flags, k } => kshot(&common, &flags, &k),
        Command::Audit { common, emit, height, width, batch } => audit_cmd(&common, emit, height, width, batch),
        Command::Bench { common, repetitions } => bench_cmd(&common, repetitions),
        Command::ExportFeatures { common, checkpoint, split } => export(&common, &checkpoint, split),
    }
}

fn load_data(cfg: &Config) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    let (train, test) = match (&d.train_dir, &d.test_dir) {
        (Some(tr), Some(te)) => {
            let recipe = recipe_for(d.kind);
            (load_image_folder(tr, &recipe, Split::Train)?, load_image_folder(te, &recipe, Split::Test)?)
        }
        (None, None) if d.kind == DatasetKind::Synthetic => generate_synthetic(&d.synthetic)?,
        (None, None) => {
            return Err(Error::Usage(format!("data.kind = \"{}\" needs data.train_dir and data.test_dir", d.kind)));
        }
        _ => return Err(Error::Usage("set both data.train_dir and data.test_dir, or neither".into())),
    };
    if train.class_names != test.class_names {
        return Err(Error::Data(format!("train classes {:?} differ from test classes {:?}", train.class_names, test.class_names)));
    }
    let dups = duplicate_hashes(&train, &test);
    if let Some((a, b)) = dups.first() {
        eprintln!("warning: {} test images duplicate training images (first: {b} = {a})", dups.len());
    }
    Ok((train, test))
}

fn check_classes(network: &NetworkConfig, data: &Dataset) -> Result<()> {
    if network.num_classes != data.num_classes() {
        return Err(Error::Usage(format!(
            "network.num_classes = {} but the data has {} classes",
            network.num_classes,
            data.num_classes()
        )));
    }
    Ok(())
}

fn progress(label: &str) -> impl FnMut(&EpochMetrics) + '_ {
    move |m| {
        let acc = m.test_acc.map(|a| format!(" test_acc {a:.4}")).unwrap_or_default();
        eprintln!("{label}epoch {} train_loss {:.4}{acc}", m.epoch, m.train_loss);
    }
}

fn summary_line(s: &TrainSummary) -> String {
    let best = match (s.best_test_acc, s.best_epoch) {
        (Some(a), Some(e)) => format!(" best_test_acc {a:.4} (epoch {e})"),
        _ => String::new(),
    };
    format!("epochs {} final_test_acc {:.4}{best}", s.epochs, s.final_test_acc)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|a| a.to_string()).unwrap_or_default()
}

fn gen_data(common: &Common, dest: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(common, None)?;
    let mut run = Run::create("gen-data", cfg, common.run_dir.as_deref())?;
    let spec = &run.config.data.synthetic;
    let (train, test) = generate_synthetic(spec)?;
    let root = dest.unwrap_or_else(|| run.path("data"));
    write_dataset(&root, spec, &train, &test)?;
    emit(&format!("wrote {} train and {} test images to {}\n", train.len(), test.len(), root.display()));
    run.output(&root);
    finish(run)
}

fn train(common: &Common, flags: &TrainFlags, resume: Option<&Path>) -> Result<()> {
    let mut cfg = resolve(common, Some(flags))?;
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = Checkpoint::<f32>::load(p)?;
            cfg.network = ckpt.network.clone();
            let mut t = Trainer::from_checkpoint(&ckpt)?;
            if let Some(e) = flags.epochs {
                t.config.epochs = e;
            }
            cfg.train = t.config.clone();
            t
        }
        None => {
            let seeds = run::Seeds::new(cfg.run.seed);
            Trainer::build(&cfg.network, seeds.model, cfg.train.clone())?
        }
    };
    let (train, test) = load_data(&cfg)?;
    check_classes(&cfg.network, &train)?;
    let mut run = Run::create("train", cfg, common.run_dir.as_deref())?;
    let summary = trainer.fit_with(&train, &test, Some(&run.dir), progress(""))?;
    for f in [light_reskan::trainer::METRICS_FILE, light_reskan::trainer::CHECKPOINT_FILE, light_reskan::trainer::SUMMARY_FILE] {
        run.output(f);
    }
    emit(&format!("{}\n", summary_line(&summary)));
    finish(run)
}

fn eval(common: &Common, ckpt: &Path, noise: Option<NoiseLevel>, param: Option<Parametrization>) -> Result<()> {
    let cfg = resolve(common, None)?;
    let model = Trainer::from_checkpoint(&Checkpoint::<f32>::load(ckpt)?)?.model;
    let (_, test) = load_data(&cfg)?;
    check_classes(&model.config, &test)?;
    let param = param.unwrap_or(cfg.noise.parametrization);
    let mut run = Run::create("eval", cfg, common.run_dir.as_deref())?;
    let noise = noise.map(|l| EvalNoise { spec: preset(l, param), seed: run.seeds.noise });
    let m = evaluate(&model, &test, run.config.train.eval_batch_size, noise.as_ref())?;
    let report = serde_json::json!({
        "checkpoint": ckpt,
        "noise": noise.map(|n| n.spec),
        "accuracy": m.accuracy,
        "confusion": m.confusion,
    });
    run.write("eval.json", &(serde_json::to_string_pretty(&report).map_err(|e| Error::Runtime(e.to_string()))? + "\n"))?;
    emit(&format!("accuracy {:.4}\n", m.accuracy));
    finish(run)
}

pub const NOISE_CSV_HEADER: &str = "condition,alpha,value,parametrization,mean,accuracy";

fn noise_eval(common: &Common, ckpt: &Path, levels: &[NoiseLevel], param: Option<Parametrization>) -> Result<()> {
    let cfg = resolve(common, None)?;
    let model = Trainer::from_checkpoint(&Checkpoint::<f32>::load(ckpt)?)?.model;
    let (_, test) = load_data(&cfg)?;
    check_classes(&model.config, &test)?;
    let param = param.unwrap_or(cfg.noise.parametrization);
    let mut run = Run::create("noise-eval", cfg, common.run_dir.as_deref())?;
    let batch = run.config.train.eval_batch_size;
    let mut csv = format!("{NOISE_CSV_HEADER}\n");
    let clean = evaluate(&model, &test, batch, None)?.accuracy;
    writeln!(csv, "clean,,,,,{clean}").expect("string write");
    for level in NoiseLevel::ALL.into_iter().filter(|l| levels.is_empty() || levels.contains(l)) {
        let spec = preset(level, param);
        let acc = evaluate(&model, &test, batch, Some(&EvalNoise { spec, seed: run.seeds.noise }))?.accuracy;
        writeln!(csv, "{level},{},{},{},{},{acc}", spec.alpha, spec.value, param.name(), spec.mean()).expect("string write");
    }
    run.write("noise.csv", &csv)?;
    emit(&csv);
    finish(run)
}

pub const ABLATION_CSV_HEADER: &str = "row,params,poly_params,final_test_acc,best_test_acc,best_epoch";

fn ablate(common: &Common, flags: &TrainFlags) -> Result<()> {
    let cfg = resolve(common, Some(flags))?;
    let (train, test) = load_data(&cfg)?;
    check_classes(&cfg.network, &train)?;
    let mut run = Run::create("ablate", cfg, common.run_dir.as_deref())?;
    let mut csv = format!("{ABLATION_CSV_HEADER}\n");
    for (i, row) in AblationRow::ALL.into_iter().enumerate() {
        let network = apply_ablation(&run.config.network, row);
        let dir = run.path(&format!("{i}_{}", row.name().trim_start_matches('+')));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut t = Trainer::build(&network, run.seeds.model, run.config.train.clone())?;
        let params = audit::count_params(&t.model)?;
        let poly = audit::count_poly_params(&t.model)?;
        let label = format!("[{}] ", row.name());
        let s = t.fit_with(&train, &test, Some(&dir), progress(&label))?;
        writeln!(
            csv,
            "{},{params},{poly},{},{},{}",
            row.name(),
            s.final_test_acc,
            fmt_opt(s.best_test_acc),
            s.best_epoch.map(|e| e.to_string()).unwrap_or_default()
        )
        .expect("string write");
        run.output(&dir);
    }
    run.write("ablation.csv", &csv)?;
    emit(&csv);
    finish(run)
}

pub const KSHOT_CSV_HEADER: &str = "k,train_samples,test_samples,final_test_acc,best_test_acc";

fn kshot(common: &Common, flags: &TrainFlags, ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Usage("--k needs one or more positive values".into()));
    }
    let cfg = resolve(common, Some(flags))?;
    let (train, test) = load_data(&cfg)?;
    check_classes(&cfg.network, &train)?;
    let mut run = Run::create("kshot", cfg, common.run_dir.as_deref())?;
    let mut csv = format!("{KSHOT_CSV_HEADER}\n");
    for &k in ks {
        let subset = kshot_subsample(&train, k, light_reskan::seed::derive_seed(run.seeds.kshot, "k", k as u64))?;
        let dir = run.path(&format!("k{k}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut t = Trainer::build(&run.config.network, run.seeds.model, run.config.train.clone())?;
        let label = format!("[K={k}] ");
        let s = t.fit_with(&subset, &test, Some(&dir), progress(&label))?;
        writeln!(csv, "{k},{},{},{},{}", subset.len(), test.len(), s.final_test_acc, fmt_opt(s.best_test_acc))
            .expect("string write");
        run.output(&dir);
    }
    run.write("kshot.csv", &csv)?;
    emit(&csv);
    finish(run)
}

fn audit_cmd(common: &Common, format: Emit, h: Option<usize>, w: Option<usize>, n: Option<usize>) -> Result<()> {
    let mut cfg = resolve(common, None)?;
    cfg.audit.height = h.unwrap_or(cfg.audit.height);
    cfg.audit.width = w.unwrap_or(cfg.audit.width);
    cfg.audit.batch = n.unwrap_or(cfg.audit.batch);
    let mut run = Run::create("audit", cfg, common.run_dir.as_deref())?;
    let a = &run.config.audit;
    let model = build::<f32>(&run.config.network, run.seeds.model)?;
    let report = audit::cost_report(&model, a.height, a.width, a.batch, &a.path)?;
    let (name, text) = match format {
        Emit::Csv => ("audit.csv", report.to_csv()),
        Emit::Table => ("audit.txt", report.to_table()),
    };
    run.write(name, &text)?;
    emit(&text);
    finish(run)
}

fn bench_cmd(common: &Common, reps: Option<usize>) -> Result<()> {
    let mut cfg = resolve(common, None)?;
    cfg.audit.bench_repetitions = reps.unwrap_or(cfg.audit.bench_repetitions);
    let mut run = Run::create("bench", cfg, common.run_dir.as_deref())?;
    let mut csv = format!("{BENCH_CSV_HEADER}\n");
    emit(&csv);
    for (i, c) in default_sweep().iter().enumerate() {
        let seed = light_reskan::seed::derive_seed(run.seeds.bench, "config", i as u64);
        for r in bench(c, run.config.audit.bench_repetitions, seed)? {
            let line = r.csv_row();
            emit(&format!("{line}\n"));
            csv.push_str(&line);
            csv.push('\n');
        }
    }
    run.write("bench.csv", &csv)?;
    finish(run)
}

fn export(common: &Common, ckpt: &Path, split: SplitArg) -> Result<()> {
    let cfg = resolve(common, None)?;
    let model = Trainer::from_checkpoint(&Checkpoint::<f32>::load(ckpt)?)?.model;
    let (train, test) = load_data(&cfg)?;
    let data = match split {
        SplitArg::Train => train,
        SplitArg::Test => test,
    };
    check_classes(&model.config, &data)?;
    let mut run = Run::create("export-features", cfg, common.run_dir.as_deref())?;
    let path = run.path("features.csv");
    export_features(&model, &data, &path, run.config.train.eval_batch_size)?;
    run.output(&path);
    emit(&format!("wrote {} feature rows to {}\n", data.len(), path.display()));
    finish(run)
}

/// Writes to stdout, ignoring a closed pipe; every report also lands in a
/// file of the run directory.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn finish(run: Run) -> Result<()> {
    let dir = run.finish()?;
    eprintln!("run directory: {}", dir.display());
    Ok(())
}
