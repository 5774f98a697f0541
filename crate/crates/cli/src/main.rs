use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use hccm::ablate::{run_ablation, AblationPlan, GRID};
use hccm::data::{
    generate_dataset, read_dataset, read_gen_config, split_records, write_dataset, write_gen_config, DataError,
    GenConfig, SceneRecord, Split,
};
use hccm::encoders::Vocab;
use hccm::eval::{evaluate, EvalError};
use hccm::train::{fit, load_params, TrainConfig, TrainError, CONFIG_FILE, LAST_DIR};
use hccm::verify::{run_suite, Suite};

#[derive(Parser)]
#[command(name = "hccm", version, about = "Hierarchical cross-granularity contrastive matching on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and report test retrieval for its best checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Run directory; defaults to the --resume directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Build everything, run two steps, and exit.
        #[arg(long)]
        dry_run: bool,
        /// Component switch such as `rg_itc=off`; repeatable.
        #[arg(long = "toggle", value_name = "NAME=on|off")]
        toggles: Vec<String>,
        /// Continue the interrupted run in this directory.
        #[arg(long, value_name = "RUNDIR")]
        resume: Option<PathBuf>,
        /// Stop after this many optimizer steps in total.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Re-rank this many top candidates per query with the match head.
        #[arg(long, default_value_t = 0)]
        rerank: usize,
        /// Where to write the JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the component grid over several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Base training config; the toggles and seed are overridden per cell.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated grid rows (1 to 8); all rows by default.
        #[arg(long, value_delimiter = ',')]
        rows: Vec<usize>,
        /// Cells trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the built-in property suites.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
    },
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Data(DataError::Config(_)) => Failure::Invalid(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => Failure::Invalid(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> CmdResult {
    let text = serde_json::to_string_pretty(value).expect("reports serialise");
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn log_config(config: &TrainConfig) {
    eprintln!("resolved config: {}", serde_json::to_string(config).expect("configs serialise"));
}

fn cmd_gen(config: Option<&Path>, out: &Path) -> CmdResult {
    let cfg: GenConfig = read_json(config)?;
    cfg.validate()?;
    let records = generate_dataset(&cfg)?;
    write_dataset(&records, out)?;
    write_gen_config(&cfg, out)?;
    for split in Split::ALL {
        println!("{split}: {}", split_records(&records, split).len());
    }
    Ok(())
}

fn report_split(records: &[SceneRecord], dir: &Path, run: &Path, split: Split) -> CmdResult {
    let subset = split_records(records, split);
    if subset.is_empty() {
        return Ok(());
    }
    let (params, config) = load_params::<f32>(dir)?;
    let report = evaluate(&subset, &params, &config.model, &Vocab::builtin(), 0)?;
    println!("{split} retrieval\n{report}");
    write_json(&run.join(format!("report_{split}.json")), &report)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    out: Option<&Path>,
    dry_run: bool,
    toggles: &[String],
    resume: Option<&Path>,
    max_steps: Option<u64>,
) -> CmdResult {
    let run = match (out, resume) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(r)) => r.to_path_buf(),
        (None, None) if dry_run => std::env::temp_dir().join(format!("hccm-dry-run-{}", std::process::id())),
        (None, None) => return Err(Failure::Invalid("--out is required unless --resume is given".into())),
    };
    let mut cfg: TrainConfig = match (config, resume) {
        (None, Some(r)) => read_json(Some(&r.join(CONFIG_FILE)))?,
        (c, _) => read_json(c)?,
    };
    for t in toggles {
        cfg.apply_toggle(t)?;
    }
    if let Some(m) = max_steps {
        cfg.max_steps = Some(m);
    }
    if dry_run {
        cfg.max_steps = Some(2);
    }
    cfg.validate()?;
    log_config(&cfg);
    let records = read_dataset(data)?;
    let summary = fit(cfg, &records, &run, resume.is_some())?;
    eprintln!("trained {} steps; best validation mR {:?}", summary.steps, summary.best_mr);
    if dry_run {
        if out.is_none() {
            let _ = std::fs::remove_dir_all(&run);
        }
        return Ok(());
    }
    if summary.finished {
        report_split(&records, &summary.best_dir, &run, Split::Test)?;
        report_split(&records, &summary.best_dir, &run, Split::Heldout)?;
    } else {
        eprintln!("stopped early; continue with --resume {}", run.display());
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, split: &str, rerank: usize, out: Option<&Path>) -> CmdResult {
    let split = Split::parse(split).ok_or_else(|| Failure::Invalid(format!("unknown split '{split}'")))?;
    let dir = if checkpoint.join(LAST_DIR).is_dir() && !checkpoint.join(hccm::train::INDEX).exists() {
        checkpoint.join(hccm::train::BEST_DIR)
    } else {
        checkpoint.to_path_buf()
    };
    let (params, config) = load_params::<f32>(&dir)?;
    let records = read_dataset(data)?;
    let subset = split_records(&records, split);
    let report = evaluate(&subset, &params, &config.model, &Vocab::builtin(), rerank)?;
    println!("{split} retrieval\n{report}");
    println!("{}", serde_json::to_string(&report).expect("reports serialise"));
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    Ok(())
}

fn cmd_ablate(data: &Path, out: &Path, seeds: usize, config: Option<&Path>, rows: &[usize], jobs: usize) -> CmdResult {
    let base: TrainConfig = read_json(config)?;
    base.validate()?;
    log_config(&base);
    let records = read_dataset(data)?;
    let dataset = read_gen_config(data)?;
    let rows = if rows.is_empty() { (1..=GRID.len()).collect() } else { rows.to_vec() };
    let plan = AblationPlan { rows, seeds, jobs };
    let report = run_ablation(&records, dataset, &base, &plan, out)?;
    println!("{report}");
    if report.failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{} grid cells failed", report.failures.len())))
    }
}

fn cmd_verify(suite: &str) -> CmdResult {
    let suite = Suite::from_str(suite).map_err(Failure::Invalid)?;
    let results = run_suite(suite);
    let mut failed = 0;
    for r in &results {
        println!("{r}");
        failed += usize::from(!r.passed);
    }
    if failed == 0 {
        println!("{} checks passed", results.len());
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{failed} of {} checks failed", results.len())))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Gen { config, out } => cmd_gen(config.as_deref(), out),
        Command::Train { config, data, out, dry_run, toggles, resume, max_steps } => cmd_train(
            config.as_deref(),
            data,
            out.as_deref(),
            *dry_run,
            toggles,
            resume.as_deref(),
            *max_steps,
        ),
        Command::Eval { checkpoint, data, split, rerank, out } => {
            cmd_eval(checkpoint, data, split, *rerank, out.as_deref())
        }
        Command::Ablate { data, out, seeds, config, rows, jobs } => {
            cmd_ablate(data, out, *seeds, config.as_deref(), rows, *jobs)
        }
        Command::Verify { suite } => cmd_verify(suite),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
