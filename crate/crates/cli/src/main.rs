//! `hrm`: data generation, training, the three evaluation protocols,
//! architecture comparison and the gradient self-check.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 unparsable command line or
//! config file, 3 invalid config or argument values.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hrm_core::act::{segment_loss_gradcheck, HaltStrategy};
use hrm_core::harness::{
    self, capture_trajectories, compare_architectures, config_from_str, derive_seed, eval_adaptive,
    eval_fixed_steps, few_step_snapshots, load_config, load_dataset, parse_threshold_grid, write_sweep_csv,
    write_trajectories_csv, ConfigError, HarnessError, RunConfig, Selection, SCHEMA_VERSION,
};
use hrm_core::model::{load_checkpoint, HrmModel};
use hrm_core::sudoku::{generate_dataset, parse_dataset_file, write_dataset_file, EncodedExample};
use hrm_core::tensor::gradcheck::kernel_suite;

/// Default output directory when neither `--out-dir` nor the config's
/// `output_dir` is given.
const OUTPUT_DIR_ENV: &str = "HRM_OUTPUT_DIR";
const FALLBACK_OUTPUT_DIR: &str = "runs";
const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "hrm", version, about = "Desk-scale Hierarchical Reasoning Model laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run config (must set `schema_version`); defaults apply otherwise.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Dotted `key=value` override, e.g. `--set model.t=4`; repeatable.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Artifact directory; falls back to the config's `output_dir`, then
    /// `$HRM_OUTPUT_DIR`, then `./runs`.
    #[arg(long, short)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Puzzle CSV to evaluate; defaults to the run's training set.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectArg {
    Best,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a puzzle CSV.
    GenData {
        #[arg(long, default_value_t = 4)]
        side: usize,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 6)]
        blanks: usize,
        /// Run seed; puzzles match those a run with this seed generates.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out_dir: Option<PathBuf>,
    },
    /// Train with deep supervision and ACT halting.
    Train(RunArgs),
    /// Run every example for exactly s segments, for each s in the grid.
    EvalFixed {
        #[command(flatten)]
        eval: EvalArgs,
        /// Comma-separated segment counts; defaults to 1..=m_max.
        #[arg(long)]
        steps: Option<String>,
        /// Permit segment counts above the trained m_max.
        #[arg(long)]
        allow_extrapolation: bool,
    },
    /// Per-example halting from the Q head, for each threshold in the grid.
    EvalAdaptive {
        #[command(flatten)]
        eval: EvalArgs,
        /// `q_halt` (σ(q_halt) > t) or `q_diff` (σ(q_halt − q_continue) > t).
        #[arg(long, default_value = "q_diff")]
        strategy: String,
        /// `start:stop:step` (stop excluded) or a comma-separated list.
        #[arg(long, default_value = "0.1:1.0:0.1")]
        thresholds: String,
    },
    /// Per-segment metrics for selected examples, plus few-step snapshots.
    Trajectories {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_enum, default_value = "best")]
        select: SelectArg,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Snapshot examples solved within this many segments.
        #[arg(long, default_value_t = 4)]
        snapshot_steps: usize,
    },
    /// Train two architectures on the same data and seed.
    Compare {
        /// Config for run A; defaults give the 4+4 HRM preset.
        #[command(flatten)]
        run: RunArgs,
        /// Config for run B; defaults to run A's settings with an 8-layer
        /// L-only network.
        #[arg(long)]
        config_b: Option<PathBuf>,
    },
    /// Finite-difference check of every kernel and the full segment loss.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

enum Failure {
    Parse(String),
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Parse(_) => 2,
            Failure::Validation(_) => 3,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Parse(_) => Failure::Parse(e.to_string()),
            ConfigError::Validation(_) => Failure::Validation(e.to_string()),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(c) => c.into(),
            HarnessError::InvalidArgument(_) => Failure::Validation(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

impl RunArgs {
    fn load(&self) -> CliResult<RunConfig> {
        Ok(match &self.config {
            Some(path) => load_config(path, &self.overrides)?,
            None => config_from_str(&format!("schema_version = {SCHEMA_VERSION}"), &self.overrides)?,
        })
    }

    fn output_dir(&self, run: Option<&RunConfig>) -> PathBuf {
        resolve_output_dir(self.out_dir.as_deref(), run)
    }
}

fn resolve_output_dir(flag: Option<&Path>, run: Option<&RunConfig>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| run.and_then(|r| r.output_dir.clone()))
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(FALLBACK_OUTPUT_DIR))
}

fn echo(run: &RunConfig, dir: &Path) -> CliResult<()> {
    run.echo(dir)
        .map(|_| ())
        .map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

/// The evaluation set, the checkpointed model and the effective run.
fn eval_inputs(args: &EvalArgs) -> CliResult<(RunConfig, HrmModel<f32>, Vec<EncodedExample>, PathBuf)> {
    let run = args.run.load()?;
    let model = load_checkpoint(&args.checkpoint)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", args.checkpoint.display())))?;
    let puzzles = match &args.data {
        Some(path) => parse_dataset_file(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?,
        None => load_dataset(&run)?,
    };
    let examples = puzzles.iter().map(|p| p.encode()).collect();
    let dir = args.run.output_dir(Some(&run));
    echo(&run, &dir)?;
    Ok((run, model, examples, dir))
}

fn parse_steps(spec: Option<&str>, m_max: usize) -> CliResult<Vec<usize>> {
    match spec {
        None => Ok((1..=m_max).collect()),
        Some(s) => s
            .split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|_| Failure::Validation(format!("step grid {s:?}: {v:?} is not a count")))
            })
            .collect(),
    }
}

fn run(command: Command) -> CliResult<String> {
    match command {
        Command::GenData {
            side,
            count,
            blanks,
            seed,
            out_dir,
        } => {
            let mut run = RunConfig {
                seed,
                ..RunConfig::default()
            };
            run.data.side = side;
            run.data.count = count;
            run.data.blanks = blanks;
            run.model.vocab_size = side + 1;
            run.model.seq_len = side * side;
            let puzzles = generate_dataset(count, side, blanks, derive_seed(seed, "data"))
                .map_err(|e| Failure::Validation(e.to_string()))?;
            let dir = resolve_output_dir(out_dir.as_deref(), None);
            std::fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
            let path = dir.join("puzzles.csv");
            write_dataset_file(&path, &puzzles).map_err(runtime)?;
            echo(&run, &dir)?;
            Ok(format!("wrote {} puzzles ({side}×{side}, {blanks} blanks) to {}", puzzles.len(), path.display()))
        }
        Command::Train(args) => {
            let run = args.load()?;
            let dir = args.output_dir(Some(&run));
            let outcome = harness::train(&run, &dir)?;
            let last = outcome.evals.last();
            Ok(format!(
                "trained {} steps in {:.1}s; train exact {:.4}, token {:.4}; solved at {}; checkpoint {}",
                outcome.steps,
                outcome.wall_seconds,
                last.map_or(f64::NAN, |e| e.exact_acc),
                last.map_or(f64::NAN, |e| e.token_acc),
                outcome.solved_at.map_or("-".into(), |s| s.to_string()),
                outcome.checkpoint.as_deref().unwrap_or(&dir).display()
            ))
        }
        Command::EvalFixed {
            eval,
            steps,
            allow_extrapolation,
        } => {
            let (run, model, examples, dir) = eval_inputs(&eval)?;
            let grid = parse_steps(steps.as_deref(), model.config().m_max)?;
            let report = eval_fixed_steps(&model, &examples, &grid, allow_extrapolation, run.data.eval_batch_size)?;
            let path = dir.join("fixed_steps.csv");
            write_sweep_csv(&report, &path)?;
            let last = report.rows.last().expect("grid is non-empty");
            Ok(format!(
                "{} rows; exact {:.4} at {} steps; report {}",
                report.rows.len(),
                last.exact_accuracy,
                last.control,
                path.display()
            ))
        }
        Command::EvalAdaptive {
            eval,
            strategy,
            thresholds,
        } => {
            let strategy: HaltStrategy = strategy.parse().map_err(|e| Failure::Validation(format!("{e}")))?;
            let grid = parse_threshold_grid(&thresholds)?;
            let (run, model, examples, dir) = eval_inputs(&eval)?;
            let report = eval_adaptive(&model, &examples, strategy, &grid, run.data.eval_batch_size)?;
            let path = dir.join(format!("adaptive_{strategy}.csv"));
            write_sweep_csv(&report, &path)?;
            Ok(format!("{} rows; report {}", report.rows.len(), path.display()))
        }
        Command::Trajectories {
            eval,
            select,
            k,
            snapshot_steps,
        } => {
            let (run, model, examples, dir) = eval_inputs(&eval)?;
            let selection = match select {
                SelectArg::Best => Selection::BestK(k),
                SelectArg::Random => Selection::RandomK {
                    k,
                    seed: derive_seed(run.seed, "trajectories"),
                },
            };
            let records = capture_trajectories(&model, &examples, selection, run.data.eval_batch_size)?;
            let path = dir.join("trajectories.csv");
            write_trajectories_csv(&records, &path)?;
            let snapshots = few_step_snapshots(&records, run.data.side, snapshot_steps);
            let snap_path = dir.join("snapshots.txt");
            std::fs::write(&snap_path, &snapshots).map_err(runtime)?;
            let solved = snapshots.lines().filter(|l| l.starts_with("example ")).count();
            Ok(format!(
                "{} trajectories; {solved} solved within {snapshot_steps} segments; report {}",
                records.len(),
                path.display()
            ))
        }
        Command::Compare { run: args, config_b } => {
            let base = args.load()?;
            let (a, b) = match &config_b {
                Some(path) => (base, load_config(path, &args.overrides)?),
                None => (base.clone().preset_hrm(), base.preset_l_only(8)),
            };
            a.validate()?;
            b.validate()?;
            let dir = args.output_dir(Some(&a));
            let report = compare_architectures(&a, &b, Some(&dir))?;
            let per = |o: &harness::TrainOutcome| o.wall_seconds / o.steps.max(1) as f64;
            Ok(format!(
                "a: {} steps, {:.4}s/step; b: {} steps, {:.4}s/step; report {}",
                report.a.steps,
                per(&report.a),
                report.b.steps,
                per(&report.b),
                dir.join("comparison.csv").display()
            ))
        }
        Command::GradCheck { seeds } => {
            let mut worst = 0.0f64;
            for check in kernel_suite(0..seeds, GRAD_TOLERANCE).map_err(runtime)? {
                println!("{:<16} {:.3e} ({} seeds)", check.kernel, check.max_relative_error, check.cases);
                worst = worst.max(check.max_relative_error);
            }
            let mut segment = 0.0f64;
            for seed in 0..seeds {
                segment = segment.max(segment_loss_gradcheck(seed, GRAD_TOLERANCE).map_err(runtime)?);
            }
            println!("{:<16} {segment:.3e} ({seeds} seeds)", "segment_loss");
            worst = worst.max(segment);
            if worst <= GRAD_TOLERANCE {
                Ok(format!("gradient check passed: max relative error {worst:.3e} ≤ {GRAD_TOLERANCE:e}"))
            } else {
                Err(Failure::Runtime(format!(
                    "gradient check failed: max relative error {worst:.3e} > {GRAD_TOLERANCE:e}"
                )))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(failure) => {
            let (Failure::Parse(msg) | Failure::Validation(msg) | Failure::Runtime(msg)) = &failure;
            eprintln!("error: {msg}");
            ExitCode::from(failure.code())
        }
    }
}
