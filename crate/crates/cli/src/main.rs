//! `transferlab`: train base networks, transplant layers, split classes, run
//! treatment grids and summarize their results.
//!
//! Every command writes `resolved.conf` into the output directory before doing
//! any work. Failures print one line, `transferlab: <category>: <message>`,
//! and exit with 2 (usage), 3 (data or dependency) or 4 (numeric).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use transferlab::analysis::{emit_report, AnalysisError};
use transferlab::config::{parse_range, ConfigError, KvConfig};
use transferlab::datasplit::{
    reduce_per_class, split_random, ClassSplit, DatasetSource, Side, SplitError,
};
use transferlab::experiment::{
    read_results, run_grid, run_treatment, write_results, ExperimentError, GridError, GridOptions,
    GridPlan, PlanError, ResultsError, Treatment, TreatmentResult,
};
use transferlab::hierarchy::{assign_leftovers, semantic_split, ClassDag, HierarchyError};
use transferlab::optim::TrainError;
use transferlab::surgery::{self, Checkpoint, CheckpointError, Provenance, SurgeryError, TransplantMode};
use transferlab::write_atomic;

const SNAPSHOT: &str = "resolved.conf";

#[derive(Parser, Debug)]
#[command(name = "transferlab", version, about = "Layer-transfer experiments on small convolutional networks")]
struct Cli {
    /// Output root.
    #[arg(long, global = true, env = "TRANSFERLAB_OUT", default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

/// Plan file plus `key=value` overrides.
#[derive(Args, Debug)]
struct PlanArgs {
    /// Plan file; desk-scale defaults when absent.
    #[arg(long, alias = "plan")]
    config: Option<PathBuf>,
    /// Override one plan key, e.g. `--set train.iterations=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a base network on one side of the plan's first split.
    Train {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long, default_value = "A")]
        side: Side,
        /// Repetition seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep at most this many training examples per class.
        #[arg(long)]
        cap: Option<usize>,
    },
    /// Copy the first `n` weight layers of a checkpoint into a fresh network.
    Transplant {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum, default_value = "frozen")]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Classifier width of the new network; defaults to the base's.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Split classes into sides A and B, or cap examples per class.
    Split {
        #[arg(long, value_enum)]
        mode: SplitMode,
        /// Class DAG (semantic mode, or the class list for random mode).
        #[arg(long)]
        dag: Option<PathBuf>,
        /// Two subtree roots, `a,b`.
        #[arg(long)]
        roots: Option<String>,
        /// `class_id,side` manifest assigning the classes under neither root.
        #[arg(long)]
        manual: Option<PathBuf>,
        /// Class count for random mode when no DAG is given.
        #[arg(long)]
        classes: Option<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Examples per class in reduce mode.
        #[arg(long)]
        cap: Option<usize>,
        #[command(flatten)]
        plan: PlanArgs,
    },
    /// Run every cell of a plan, then write the report files.
    Grid {
        #[command(flatten)]
        plan: PlanArgs,
        /// Keep results already recorded under the output directory.
        #[arg(long)]
        resume: bool,
        /// Worker threads; overrides the plan.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Summarize results files into report CSVs.
    Analyze {
        #[arg(long, required = true, num_args = 1..)]
        results: Vec<PathBuf>,
        /// Boost ranges, e.g. `1-7,3-7,5-7`.
        #[arg(long)]
        ranges: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Frozen,
    Finetune,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitMode {
    Random,
    Semantic,
    Reduce,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Dependency(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) | Failure::Dependency(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (category, message) = match self {
            Failure::Usage(m) => ("usage", m),
            Failure::Data(m) => ("data", m),
            Failure::Dependency(m) => ("dependency", m),
            Failure::Numeric(m) => ("numeric", m),
        };
        let one_line = message.split_whitespace().collect::<Vec<_>>().join(" ");
        write!(f, "{category}: {one_line}")
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<PlanError> for Failure {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::Config(_) | PlanError::Invalid(_) => Failure::Usage(e.to_string()),
            PlanError::Hierarchy(h) => h.into(),
            PlanError::Io { .. } | PlanError::Split(_) => Failure::Data(e.to_string()),
        }
    }
}

impl From<HierarchyError> for Failure {
    fn from(e: HierarchyError) -> Self {
        match e {
            HierarchyError::UnknownNode(_) | HierarchyError::SameRoot(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<SplitError> for Failure {
    fn from(e: SplitError) -> Self {
        match e {
            SplitError::Param(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Train(TrainError::NonFinite { .. }) => Failure::Numeric(e.to_string()),
            ExperimentError::Treatment(_) => Failure::Usage(e.to_string()),
            ExperimentError::Dependency(_) => Failure::Dependency(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<GridError> for Failure {
    fn from(e: GridError) -> Self {
        match e {
            GridError::Plan(p) => p.into(),
            GridError::Cell(c) => c.into(),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<SurgeryError> for Failure {
    fn from(e: SurgeryError) -> Self {
        match e {
            SurgeryError::LayerCount { .. } => Failure::Usage(e.to_string()),
            SurgeryError::Fingerprint { .. } => Failure::Dependency(e.to_string()),
        }
    }
}

impl From<ResultsError> for Failure {
    fn from(e: ResultsError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<AnalysisError> for Failure {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Abscissa(_) | AnalysisError::TooFewPoints(_) | AnalysisError::Range(_) => {
                Failure::Numeric(e.to_string())
            }
            _ => Failure::Data(e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    write_atomic(path, text.as_bytes()).map_err(|e| io_failure(path, e))
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| io_failure(path, e))
}

/// Plan file merged with overrides. Relative paths in the plan resolve
/// against the plan's directory.
fn plan_config(args: &PlanArgs) -> Result<(KvConfig, PathBuf), Failure> {
    let (mut cfg, dir) = match &args.config {
        Some(path) => (
            KvConfig::parse(&read(path)?)?,
            path.parent().map(Path::to_path_buf).unwrap_or_default(),
        ),
        None => (KvConfig::default(), PathBuf::from(".")),
    };
    for o in &args.overrides {
        cfg.set_pair(o)?;
    }
    Ok((cfg, dir))
}

/// Snapshot of the plan keys plus the command's own settings.
fn snapshot(out: &Path, command: &str, plan: Option<&KvConfig>, settings: &[(&str, String)]) -> Result<(), Failure> {
    let mut cfg = plan.cloned().unwrap_or_default();
    cfg.set("cli.command", command);
    for (k, v) in settings {
        cfg.set(&format!("cli.{k}"), v.clone());
    }
    write(&out.join(SNAPSHOT), &cfg.to_text())
}

fn display(path: &Option<PathBuf>) -> String {
    path.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn cmd_train(out: &Path, plan_args: &PlanArgs, side: Side, seed: u64, cap: Option<usize>) -> Result<(), Failure> {
    let (cfg, dir) = plan_config(plan_args)?;
    snapshot(
        out,
        "train",
        Some(&cfg),
        &[
            ("config", display(&plan_args.config)),
            ("side", side.to_string()),
            ("seed", seed.to_string()),
            ("cap", cap.map(|c| c.to_string()).unwrap_or_default()),
        ],
    )?;
    let plan = GridPlan::from_config(&cfg, &dir)?;
    let (config, splits) = plan.prepare()?;
    let split = &splits[0];
    let treatment = match cap {
        Some(cap) => Treatment::ReducedBase { side, cap },
        None => Treatment::Base { side },
    };
    let cell = run_treatment(&treatment, seed, split, None, &config)?;
    let stem = match cap {
        Some(cap) => format!("reduced-{side}-c{cap}-s{seed}"),
        None => format!("base-{side}-s{seed}"),
    };
    surgery::save(&cell.checkpoint, &out.join(format!("{stem}.tflb")))?;
    write(&out.join(format!("{stem}.trace.csv")), &cell.trace.to_csv())?;
    write_results(&out.join(format!("{stem}.result.csv")), std::slice::from_ref(&cell.result))?;
    write(&out.join(format!("split-{}.csv", split.id)), &split.split.to_manifest())?;
    println!("{treatment} seed={seed} top1_accuracy={}", cell.result.top1_accuracy);
    Ok(())
}

fn cmd_transplant(
    out: &Path,
    base_path: &Path,
    n: usize,
    mode: Mode,
    seed: u64,
    classes: Option<usize>,
) -> Result<(), Failure> {
    snapshot(
        out,
        "transplant",
        None,
        &[
            ("base", base_path.display().to_string()),
            ("n", n.to_string()),
            ("mode", format!("{mode:?}").to_lowercase()),
            ("seed", seed.to_string()),
            ("classes", classes.map(|c| c.to_string()).unwrap_or_default()),
        ],
    )?;
    let base = surgery::load(base_path)?;
    let spec = match classes {
        Some(c) => base
            .spec()
            .with_num_classes(c)
            .map_err(|e| Failure::Usage(format!("--classes {c}: {e}")))?,
        None => base.spec().clone(),
    };
    let mode = match mode {
        Mode::Frozen => TransplantMode::Frozen,
        Mode::Finetune => TransplantMode::FineTune,
    };
    let model = surgery::transplant(&base, &spec, n, mode, seed)?;
    let ckpt = Checkpoint::from_model(
        &model,
        Provenance {
            dataset_id: base.provenance.dataset_id.clone(),
            seed,
            iterations: 0,
        },
    );
    let path = out.join(format!("transplant-n{n}-s{seed}.tflb"));
    surgery::save(&ckpt, &path)?;
    let frozen = model.layers().iter().filter(|l| l.frozen).count();
    println!(
        "copied {n} of {} weight layers ({frozen} frozen) -> {}",
        spec.num_weight_layers(),
        path.display()
    );
    Ok(())
}

struct SplitArgs<'a> {
    mode: SplitMode,
    dag: &'a Option<PathBuf>,
    roots: &'a Option<String>,
    manual: &'a Option<PathBuf>,
    classes: Option<u32>,
    seed: u64,
    cap: Option<usize>,
    plan: &'a PlanArgs,
}

fn cmd_split(out: &Path, args: SplitArgs) -> Result<(), Failure> {
    let (cfg, dir) = plan_config(args.plan)?;
    snapshot(
        out,
        "split",
        matches!(args.mode, SplitMode::Reduce).then_some(&cfg),
        &[
            ("mode", format!("{:?}", args.mode).to_lowercase()),
            ("dag", display(args.dag)),
            ("roots", args.roots.clone().unwrap_or_default()),
            ("manual", display(args.manual)),
            ("classes", args.classes.map(|c| c.to_string()).unwrap_or_default()),
            ("seed", args.seed.to_string()),
            ("cap", args.cap.map(|c| c.to_string()).unwrap_or_default()),
        ],
    )?;
    match args.mode {
        SplitMode::Random => {
            let classes: Vec<u32> = match (args.dag, args.classes) {
                (Some(dag), _) => ClassDag::parse(&read(dag)?)?.classes().to_vec(),
                (None, Some(n)) => (0..n).collect(),
                (None, None) => return Err(Failure::Usage("random mode needs --dag or --classes".into())),
            };
            let split = split_random(&classes, args.seed)?;
            finish_split(out, &split)
        }
        SplitMode::Semantic => {
            let (Some(dag), Some(roots)) = (args.dag, args.roots) else {
                return Err(Failure::Usage("semantic mode needs --dag and --roots".into()));
            };
            let Some((a, b)) = roots.split_once(',') else {
                return Err(Failure::Usage(format!("--roots `{roots}` is not `a,b`")));
            };
            let dag = ClassDag::parse(&read(dag)?)?;
            let sem = semantic_split(&dag, a.trim(), b.trim())?;
            println!(
                "subtree {a}: {} classes, subtree {b}: {} classes, leftovers: {}",
                sem.a.len(),
                sem.b.len(),
                sem.leftovers.len()
            );
            let manual = match args.manual {
                Some(p) => ClassSplit::from_manifest(&read(p)?)?.assignment,
                None if sem.leftovers.is_empty() => BTreeMap::new(),
                None => {
                    let list: String = sem.leftovers.iter().map(|c| format!("{c}\n")).collect();
                    write(&out.join("leftovers.csv"), &format!("class_id\n{list}"))?;
                    return Err(Failure::Data(format!(
                        "{} classes lie under neither root; assign them with --manual (listed in {})",
                        sem.leftovers.len(),
                        out.join("leftovers.csv").display()
                    )));
                }
            };
            finish_split(out, &assign_leftovers(&sem, &manual)?)
        }
        SplitMode::Reduce => {
            let cap = args
                .cap
                .ok_or_else(|| Failure::Usage("reduce mode needs --cap".into()))?;
            let plan = GridPlan::from_config(&cfg, &dir)?;
            let data = plan.toy.load()?;
            let reduced = reduce_per_class(&data.train, cap, args.seed)?;
            let mut text = String::from("example_id,class_id\n");
            for ex in &reduced.examples {
                text.push_str(&format!("{},{}\n", ex.id, reduced.class_of(ex)));
            }
            write(&out.join("reduced.csv"), &text)?;
            println!(
                "kept {} of {} training examples ({} classes, cap {cap})",
                reduced.examples.len(),
                data.train.examples.len(),
                reduced.classes.len()
            );
            Ok(())
        }
    }
}

fn finish_split(out: &Path, split: &ClassSplit) -> Result<(), Failure> {
    let path = out.join("split.csv");
    write(&path, &split.to_manifest())?;
    let (a, b) = split.sizes();
    println!("{} split: A {a}, B {b} -> {}", split.method, path.display());
    Ok(())
}

fn cmd_grid(out: &Path, plan_args: &PlanArgs, resume: bool, workers: Option<usize>) -> Result<(), Failure> {
    let (mut cfg, dir) = plan_config(plan_args)?;
    if let Some(w) = workers {
        cfg.set("workers", w.to_string());
    }
    snapshot(
        out,
        "grid",
        Some(&cfg),
        &[("config", display(&plan_args.config)), ("resume", resume.to_string())],
    )?;
    let plan = GridPlan::from_config(&cfg, &dir)?;
    let options = GridOptions {
        resume,
        workers: plan.workers,
    };
    let summary = run_grid(&plan, out, &options)?;
    emit_report(&summary.results, out, None)?;
    println!(
        "{} cells executed, {} skipped, {} failed",
        summary.executed,
        summary.skipped,
        summary.failures.len()
    );
    for (cell, err) in &summary.failures {
        eprintln!("failed {cell}: {err}");
    }
    match summary.failures.first() {
        None => Ok(()),
        Some((cell, err)) => Err(Failure::Data(format!(
            "{} cells failed, first {cell}: {err}",
            summary.failures.len()
        ))),
    }
}

fn cmd_analyze(out: &Path, results: &[PathBuf], ranges: &Option<String>) -> Result<(), Failure> {
    let inputs: Vec<String> = results.iter().map(|p| p.display().to_string()).collect();
    snapshot(
        out,
        "analyze",
        None,
        &[("results", inputs.join(",")), ("ranges", ranges.clone().unwrap_or_default())],
    )?;
    let parsed: Option<Vec<(usize, usize)>> = ranges
        .as_deref()
        .map(|text| {
            text.split(',')
                .map(|r| parse_range(r).map_err(|e| Failure::Usage(format!("--ranges: {e}"))))
                .collect()
        })
        .transpose()?;
    let mut table: Vec<TreatmentResult> = Vec::new();
    for path in results {
        table.extend(read_results(path)?);
    }
    let written = emit_report(&table, out, parsed.as_deref())?;
    let boosts = out.join("table1_boosts.csv");
    print!("{}", read(&boosts)?);
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let out = cli.out.as_path();
    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    match &cli.command {
        Command::Train { plan, side, seed, cap } => cmd_train(out, plan, *side, *seed, *cap),
        Command::Transplant {
            base,
            n,
            mode,
            seed,
            classes,
        } => cmd_transplant(out, base, *n, *mode, *seed, *classes),
        Command::Split {
            mode,
            dag,
            roots,
            manual,
            classes,
            seed,
            cap,
            plan,
        } => cmd_split(
            out,
            SplitArgs {
                mode: *mode,
                dag,
                roots,
                manual,
                classes: *classes,
                seed: *seed,
                cap: *cap,
                plan,
            },
        ),
        Command::Grid { plan, resume, workers } => cmd_grid(out, plan, *resume, *workers),
        Command::Analyze { results, ranges } => cmd_analyze(out, results, ranges),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("transferlab: {}", Failure::Usage(first.to_string()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("transferlab: {f}");
            ExitCode::from(f.code())
        }
    }
}
