use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ruleedit::evalkit::{CleanSet, Group};
use ruleedit::experiment::{self, ExperimentConfig, MethodFamily, Workspace};
use ruleedit::synthbench::load_dataset;
use ruleedit::{verify, Error};

/// Environment variable that replaces the configured output directory.
const OUTPUT_DIR_ENV: &str = "RULEEDIT_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "ruleedit", version, about = "Rewrite the prediction rules of a convolutional classifier")]
struct Cli {
    /// Cap on worker threads (default: one per core). Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Divide every optimizer step count by this, overriding the config.
    #[arg(long, global = true)]
    steps_divisor: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config file (TOML).
    #[arg(short, long)]
    config: PathBuf,
}

#[derive(Args)]
struct RewriteArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Only this case.
    #[arg(long)]
    case: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the dataset and build the benchmark cases.
    GenData(ConfigArg),
    /// Train the base network.
    Train(ConfigArg),
    /// Select and apply rank-one edits.
    Edit(RewriteArgs),
    /// Select and apply the fine-tuning baselines.
    Finetune(RewriteArgs),
    /// Score every rewritten checkpoint.
    Eval(ConfigArg),
    /// Measure concept sensitivity and flag rules worth rewriting.
    Discover(ConfigArg),
    /// Run the configured ablation sweep.
    Sweep(ConfigArg),
    /// Every stage in order.
    Run(ConfigArg),
    /// Run the numerical self-checks.
    Verify,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::ConfigAt { .. } => 2,
        Error::MissingArtifact { .. } | Error::MissingFile(_) => 3,
        e if e.is_numerical() => 4,
        _ => 1,
    }
}

fn load(arg: &ConfigArg, steps_divisor: Option<usize>) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&arg.config)?;
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
        cfg.output_dir = dir.into();
    }
    if let Some(d) = steps_divisor {
        if d == 0 {
            return Err(Error::Config("--steps-divisor must be at least 1".into()));
        }
        cfg.steps_divisor = d;
    }
    Ok(cfg)
}

fn pct(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |p| format!("{p:.1}%"))
}

fn gen_data(cfg: &ExperimentConfig) -> Result<(), Error> {
    let ds = experiment::gen_data(cfg)?;
    println!("dataset: {} images -> {}", ds.samples.len(), Workspace::new(&cfg.output_dir).data_dir().display());
    for c in &cfg.cases {
        println!("case {}: {} {} for class {}", c.name, c.concept, c.style, c.target_class);
    }
    Ok(())
}

fn train(cfg: &ExperimentConfig) -> Result<(), Error> {
    let ckpt = experiment::train(cfg)?;
    let ws = Workspace::new(&cfg.output_dir);
    let clean = CleanSet::test_split(&load_dataset(&ws.data_dir())?);
    let acc = 100.0 * clean.correct(&ckpt.model)? as f64 / clean.images.len() as f64;
    println!("base model: clean test accuracy {acc:.2}% -> {}", ws.base_checkpoint().display());
    Ok(())
}

fn rewrite(cfg: &ExperimentConfig, family: MethodFamily, case: Option<&str>) -> Result<(), Error> {
    for s in experiment::rewrite(cfg, family, case)? {
        match &s.chosen {
            Some(c) => println!(
                "{} {}: lr {:e}, {} steps, validation {}, clean drop {:.3} points",
                s.case,
                s.method,
                c.point.lr,
                c.point.steps,
                pct(c.validation.and_then(|v| v.percent())),
                c.accuracy_drop
            ),
            None => {
                println!("{} {}: no candidate within {} points, model left unchanged", s.case, s.method, s.threshold)
            }
        }
    }
    Ok(())
}

fn eval(cfg: &ExperimentConfig) -> Result<(), Error> {
    let reports = experiment::evaluate(cfg)?;
    println!(
        "{:<24} {:<22} {:>9} {:>9} {:>9} {:>9} {:>7}",
        "case", "method", "tgt", "tgt-held", "other", "oth-held", "drop"
    );
    for r in &reports {
        let g = |g: Group| pct(r.group(g).correction.percent());
        println!(
            "{:<24} {:<22} {:>9} {:>9} {:>9} {:>9} {:>7.3}",
            r.config_id,
            r.method,
            g(Group::TargetSameStyle),
            g(Group::TargetHeldOutStyle),
            g(Group::NonTargetSameStyle),
            g(Group::NonTargetHeldOutStyle),
            r.accuracy_drop()
        );
    }
    println!("-> {}", Workspace::new(&cfg.output_dir).corrections_csv().display());
    Ok(())
}

fn discover(cfg: &ExperimentConfig) -> Result<(), Error> {
    let report = experiment::discover(cfg)?;
    for q in &report.qualifying {
        println!("rule: {} under {} affects classes {:?}", q.concept, q.style, q.classes);
    }
    for s in &report.skipped {
        println!("skipped {s}: never present in the test split");
    }
    println!("-> {}", Workspace::new(&cfg.output_dir).sensitivity_csv().display());
    Ok(())
}

fn sweep(cfg: &ExperimentConfig) -> Result<(), Error> {
    let report = experiment::sweep(cfg)?;
    let failed = report.cells.iter().filter(|c| c.error.is_some()).count();
    println!(
        "{} cells, {failed} failed -> {}",
        report.cells.len(),
        Workspace::new(&cfg.output_dir).sweep_csv().display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<u8, Error> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot set up {jobs} workers: {e}")))?;
    }
    let div = cli.steps_divisor;
    match &cli.command {
        Command::GenData(a) => gen_data(&load(a, div)?)?,
        Command::Train(a) => train(&load(a, div)?)?,
        Command::Edit(a) => rewrite(&load(&a.config, div)?, MethodFamily::Edit, a.case.as_deref())?,
        Command::Finetune(a) => rewrite(&load(&a.config, div)?, MethodFamily::Finetune, a.case.as_deref())?,
        Command::Eval(a) => eval(&load(a, div)?)?,
        Command::Discover(a) => discover(&load(a, div)?)?,
        Command::Sweep(a) => sweep(&load(a, div)?)?,
        Command::Run(a) => {
            let cfg = load(a, div)?;
            gen_data(&cfg)?;
            train(&cfg)?;
            rewrite(&cfg, MethodFamily::Edit, None)?;
            rewrite(&cfg, MethodFamily::Finetune, None)?;
            eval(&cfg)?;
            discover(&cfg)?;
            if cfg.sweep.is_some() {
                sweep(&cfg)?;
            }
        }
        Command::Verify => {
            let checks = verify::run_suite();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().any(|c| !c.passed) {
                return Ok(4);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
