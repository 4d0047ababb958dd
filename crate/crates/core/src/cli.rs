//! The `hireview` command line.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::{load_flat, load_hierarchy, read_model_file, save_flat, save_hierarchy};
use crate::config::RunConfig;
use crate::data::{build_dataset, load_dataset, save_dataset, split_dataset, Dataset};
use crate::error::Error;
use crate::gradsuite::{run_suite, SUITE_SEEDS, SUITE_TOLERANCE};
use crate::hierarchy::{fit, fit_flat, FlatModel, HierarchicalModel, TrainTarget, TrainTrace};
use crate::metrics::{emit_report, load_report, render_report, MetricsReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

pub const LOCK_FILE: &str = ".hireview.lock";
pub const THREADS_VAR: &str = "HR_THREADS";

#[derive(Debug, Parser)]
#[command(name = "hireview", version, about = "Hierarchical visual review scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print a full run config for a preset.
    GenConfig {
        #[arg(long, default_value = "desk")]
        preset: String,
        /// Write to this file instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic dataset pack described by the config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one part of the hierarchy, or the flat model, into a checkpoint directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// higher, lower:<i>, lowers or flat
        #[arg(long)]
        target: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained hierarchy on the validation split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train hierarchical and flat models from scratch and compare them.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    GradCheck {
        /// Seeds to run; defaults to the standard five.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
    },
    /// Pretty-print a report directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Data(String),
    Check(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Data(_) => EXIT_DATA,
            Failure::Check(_) => EXIT_CHECK,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::Check(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_)
            | Error::UnknownKind(_)
            | Error::InvalidCounts(_)
            | Error::InvalidRate(_)
            | Error::InvalidK { .. }
            | Error::WindowLargerThanImage { .. } => Failure::Config(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Held while a command writes into a directory.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> CliResult<DirLock> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Failure::Config(format!(
                "{} is in use by another run (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e).into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Applies `HR_THREADS` to the global worker pool. Call once, before any work.
pub fn configure_threads() -> std::result::Result<(), String> {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = value.trim().parse().map_err(|_| format!("{THREADS_VAR}={value} is not a positive integer"))?;
    if n == 0 {
        return Err(format!("{THREADS_VAR} must be positive"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

/// Parses `argv` (program name first) and runs the command. Returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::GenConfig { preset, out } => gen_config(&preset, out.as_deref()),
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::Train { config, data, target, out } => train(&config, &data, &target, &out),
        Command::Eval { config, data, ckpt_dir, out } => eval(&config, &data, &ckpt_dir, &out),
        Command::Ablate { config, data, out } => ablate(&config, &data, &out),
        Command::GradCheck { seeds } => grad_check(&seeds),
        Command::Report { input } => report(&input),
    }
}

fn load_config(path: &Path) -> CliResult<RunConfig> {
    Ok(RunConfig::load(path)?)
}

fn write_file(path: &Path, body: &str) -> CliResult<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e).into())
}

fn gen_config(preset: &str, out: Option<&Path>) -> CliResult<()> {
    let text = RunConfig::preset(preset)?.to_json()?;
    match out {
        Some(path) => write_file(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gen_data(config: &Path, out: &Path) -> CliResult<()> {
    let config = load_config(config)?;
    let dataset = build_dataset(&config.dataset)?;
    let _lock = DirLock::acquire(out)?;
    let manifest = save_dataset(&dataset, out)?;
    eprintln!(
        "wrote {} samples ({} raw, {} augmented) to {}",
        manifest.samples.len(),
        dataset.raw_count(),
        dataset.augmented_count(),
        out.display()
    );
    Ok(())
}

/// Loads the pack and checks it fits the model before splitting it.
fn load_split(config: &RunConfig, data: &Path) -> CliResult<(Dataset, Dataset)> {
    let dataset = load_dataset(data)?;
    let g = &dataset.config;
    let m = &config.model;
    if g.n_classes != m.n_classes() || g.image_size != m.tiling.image_size || g.channels != m.higher.backbone.in_channels
    {
        return Err(Failure::Config(format!(
            "pack {} ({} classes, {}px, {} channels) does not fit the configured model",
            data.display(),
            g.n_classes,
            g.image_size,
            g.channels
        )));
    }
    Ok(split_dataset(&dataset, config.split, config.seed)?)
}

fn trace_file(target: TrainTarget) -> String {
    format!("trace_{}.csv", target.to_string().replace(':', "_"))
}

fn log_trace(what: &str, trace: &TrainTrace) {
    let acc = |split| trace.last(split).map(|r| format!("{:.4}", r.accuracy)).unwrap_or_else(|| "-".into());
    eprintln!("{what}: {} epochs, train {}, val {}", trace.epochs_run, acc("train"), acc("val"));
}

fn train(config_path: &Path, data: &Path, target: &str, out: &Path) -> CliResult<()> {
    let config = load_config(config_path)?;
    let target: TrainTarget = target.parse()?;
    if let TrainTarget::Lower(i) = target {
        if i >= config.model.n_classes() {
            return Err(Failure::Config(format!("lower:{i} but the model has {} classes", config.model.n_classes())));
        }
    }
    let (train_set, val_set) = load_split(&config, data)?;
    let settings = config.train.for_target(target, config.seed);
    let _lock = DirLock::acquire(out)?;
    let existing = out.join(crate::checkpoint::MODEL_FILE).exists();
    if existing {
        let file = read_model_file(out)?;
        if file.config != config.model {
            return Err(Failure::Config(format!("checkpoint in {} was built for a different model", out.display())));
        }
    }
    let trace = if target == TrainTarget::Flat {
        let mut model = if existing { load_flat(out)? } else { FlatModel::new(config.model.clone(), config.seed)? };
        let trace = fit_flat(&mut model, &train_set.samples, Some(&val_set.samples), &settings)?;
        save_flat(&model, config.seed, out)?;
        trace
    } else {
        let mut model =
            if existing { load_hierarchy(out)? } else { HierarchicalModel::new(config.model.clone(), config.seed)? };
        let trace = fit(&mut model, &train_set.samples, Some(&val_set.samples), &settings)?;
        save_hierarchy(&model, config.seed, out)?;
        trace
    };
    write_file(&out.join(trace_file(target)), &trace.to_csv())?;
    log_trace(&target.to_string(), &trace);
    Ok(())
}

fn eval(config_path: &Path, data: &Path, ckpt_dir: &Path, out: &Path) -> CliResult<()> {
    let config = load_config(config_path)?;
    let (_, val_set) = load_split(&config, data)?;
    let model = load_hierarchy(ckpt_dir)?;
    if model.config != config.model {
        return Err(Failure::Config(format!("checkpoint in {} was built for a different model", ckpt_dir.display())));
    }
    let (routed, stage) = model.evaluate(&val_set.samples)?;
    let report = MetricsReport::build(&routed, &stage, model.n_classes(), config.metrics.gamma)?;
    let _lock = DirLock::acquire(out)?;
    emit_report(&report, out, config.metrics.format)?;
    print!("{}", render_report(&report.rounded()));
    Ok(())
}

fn ablate(config_path: &Path, data: &Path, out: &Path) -> CliResult<()> {
    let config = load_config(config_path)?;
    let (train_set, val_set) = load_split(&config, data)?;
    let _lock = DirLock::acquire(out)?;
    let (train_s, val_s) = (&train_set.samples, Some(val_set.samples.as_slice()));

    let mut hier = HierarchicalModel::new(config.model.clone(), config.seed)?;
    for target in [TrainTarget::Higher, TrainTarget::Lowers] {
        let trace = fit(&mut hier, train_s, val_s, &config.train.for_target(target, config.seed))?;
        write_file(&out.join(trace_file(target)), &trace.to_csv())?;
        log_trace(&target.to_string(), &trace);
    }
    let mut flat = FlatModel::new(config.model.clone(), config.seed)?;
    let trace = fit_flat(&mut flat, train_s, val_s, &config.train.for_target(TrainTarget::Flat, config.seed))?;
    write_file(&out.join(trace_file(TrainTarget::Flat)), &trace.to_csv())?;
    log_trace("flat", &trace);

    save_hierarchy(&hier, config.seed, &out.join("hierarchical"))?;
    save_flat(&flat, config.seed, &out.join("flat"))?;

    let (routed, stage) = hier.evaluate(&val_set.samples)?;
    let flat_records = flat.evaluate(&val_set.samples)?;
    let report = MetricsReport::build(&routed, &stage, hier.n_classes(), config.metrics.gamma)?.with_flat(&flat_records)?;
    emit_report(&report, out, config.metrics.format)?;
    print!("{}", render_report(&report.rounded()));
    Ok(())
}

fn grad_check(seeds: &[u64]) -> CliResult<()> {
    let seeds = if seeds.is_empty() { SUITE_SEEDS.to_vec() } else { seeds.to_vec() };
    let cases = run_suite(&seeds)?;
    let mut failed = 0;
    for c in &cases {
        let status = if c.passed() { "ok" } else { "FAIL" };
        println!("{status:4} seed {:<3} {:<32} max rel err {:.3e} over {} coords", c.seed, c.name, c.max_rel_error, c.coordinates);
        if let (false, Some((tensor, element, analytic, numeric))) = (c.passed(), c.worst) {
            println!("     tensor {tensor} element {element}: analytic {analytic:.6e}, numeric {numeric:.6e}");
        }
        failed += usize::from(!c.passed());
    }
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} of {} cases exceed {SUITE_TOLERANCE:e}", cases.len())));
    }
    println!("all {} cases below {SUITE_TOLERANCE:e}", cases.len());
    Ok(())
}

fn report(input: &Path) -> CliResult<()> {
    let report = load_report(input)?;
    print!("{}", render_report(&report));
    Ok(())
}
