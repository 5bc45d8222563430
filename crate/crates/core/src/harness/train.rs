use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, RunConfig};
use super::eval::eval_fixed_steps;
use super::{io_err, load_dataset, HarnessError, Result};
use crate::act::{train_step_deep_supervision, ActError};
use crate::model::{save_checkpoint, Batch, HrmModel, ModelError};
use crate::optim::AdamW;
use crate::sudoku::{augment, Augmentation, EncodedExample, PuzzleInstance};
use crate::tensor::TensorError;

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub token_acc: f64,
    pub exact_acc: f64,
    pub avg_segments: f64,
    pub lr: f64,
}

/// One line of `eval.jsonl`: the whole training set run for `m_max`
/// segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub token_acc: f64,
    pub exact_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: HrmModel<f32>,
    pub metrics: Vec<MetricsRecord>,
    pub evals: Vec<EvalRecord>,
    /// Optimizer steps taken.
    pub steps: usize,
    /// First evaluated step at which every training puzzle was solved.
    pub solved_at: Option<usize>,
    pub wall_seconds: f64,
    /// Final checkpoint, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Serialize)]
struct Summary<'a> {
    steps: usize,
    solved_at: Option<usize>,
    wall_seconds: f64,
    seconds_per_step: f64,
    final_eval: Option<&'a EvalRecord>,
    parameters: usize,
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    step: usize,
    loss: f64,
    inputs: Vec<&'a [usize]>,
    targets: Vec<&'a [usize]>,
}

struct Logs {
    dir: PathBuf,
    metrics: BufWriter<File>,
    evals: BufWriter<File>,
}

impl Logs {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(io_err(dir.display().to_string()))?;
        let open = |name: &str| {
            let path = dir.join(name);
            File::create(&path)
                .map(BufWriter::new)
                .map_err(io_err(path.display().to_string()))
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: open("metrics.jsonl")?,
            evals: open("eval.jsonl")?,
        })
    }

    fn line(w: &mut BufWriter<File>, record: &impl Serialize) -> Result<()> {
        let text = serde_json::to_string(record).expect("records serialize");
        writeln!(w, "{text}").map_err(io_err("metrics log"))
    }
}

fn batch_for(
    puzzles: &[PuzzleInstance],
    rows: &[usize],
    augment_rng: Option<&mut ChaCha8Rng>,
) -> Result<Batch> {
    let examples: Vec<EncodedExample> = match augment_rng {
        Some(rng) => rows
            .iter()
            .map(|&i| {
                let a = Augmentation::random(puzzles[i].side, rng)?;
                Ok(augment(&puzzles[i], &a)?.encode())
            })
            .collect::<Result<_>>()?,
        None => rows.iter().map(|&i| puzzles[i].encode()).collect(),
    };
    Ok(Batch::from_examples(&examples))
}

/// Trains on `puzzles`; with `out_dir`, also writes the effective config,
/// `metrics.jsonl`, `eval.jsonl`, periodic checkpoints, `model.ckpt` and
/// `summary.json` there.
pub fn train_in_memory(run: &RunConfig, puzzles: &[PuzzleInstance], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    run.validate()?;
    if puzzles.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    let started = Instant::now();
    let mut logs = out_dir.map(Logs::create).transpose()?;
    if let Some(dir) = out_dir {
        run.echo(dir).map_err(io_err("effective config"))?;
    }
    let mut model = HrmModel::<f32>::new(run.model.clone(), derive_seed(run.seed, "init"))?;
    let mut optimizer = AdamW::new(run.optimizer.clone());
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(run.seed, "batches"));
    let mut act_rng = ChaCha8Rng::seed_from_u64(derive_seed(run.seed, "act"));
    let mut augment_rng = ChaCha8Rng::seed_from_u64(derive_seed(run.seed, "augment"));
    let examples: Vec<EncodedExample> = puzzles.iter().map(PuzzleInstance::encode).collect();

    let mut outcome_metrics = Vec::new();
    let mut evals = Vec::new();
    let mut solved_at = None;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut step = 0;
    let total = run.optimizer.total_steps;
    while step < total {
        if cursor >= order.len() {
            order = (0..puzzles.len()).collect();
            order.shuffle(&mut batch_rng);
            cursor = 0;
        }
        let end = (cursor + run.data.batch_size).min(order.len());
        let rows = &order[cursor..end];
        cursor = end;
        let batch = batch_for(puzzles, rows, run.data.augment.then_some(&mut augment_rng))?;
        step += 1;
        let lr = optimizer.config.rate_at(step);
        let stats = match train_step_deep_supervision(&mut model, &mut optimizer, &batch, &run.act, &mut act_rng) {
            Ok(stats) => Some(stats),
            Err(ActError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))) => None,
            Err(e) => return Err(e.into()),
        };
        let loss = stats.as_ref().map_or(f64::NAN, |s| s.loss);
        let Some(stats) = stats.filter(|_| loss.is_finite()) else {
            let dump_dir = out_dir.map_or_else(std::env::temp_dir, Path::to_path_buf);
            let dump = dump_dir.join(format!("nonfinite_step_{step}.json"));
            let record = NonFiniteDump {
                step,
                loss,
                inputs: (0..batch.size).map(|r| batch.input_row(r)).collect(),
                targets: (0..batch.size).map(|r| batch.target_row(r)).collect(),
            };
            fs::write(&dump, serde_json::to_string_pretty(&record).expect("dump serializes"))
                .map_err(io_err(dump.display().to_string()))?;
            return Err(HarnessError::NonFinite { step, dump });
        };
        let record = MetricsRecord {
            step,
            loss: stats.loss,
            token_acc: stats.mean_token_accuracy(),
            exact_acc: stats.exact_accuracy(),
            avg_segments: stats.mean_segments(),
            lr,
        };
        if let Some(l) = logs.as_mut() {
            Logs::line(&mut l.metrics, &record)?;
        }
        outcome_metrics.push(record);

        let every = run.train.checkpoint_every;
        if every > 0 && step % every == 0 {
            if let Some(l) = &logs {
                let dir = l.dir.join("checkpoints");
                fs::create_dir_all(&dir).map_err(io_err(dir.display().to_string()))?;
                save_checkpoint(&model, dir.join(format!("step_{step:06}.ckpt")))?;
            }
        }
        let last = step == total;
        let eval_due = run.train.eval_every > 0 && step % run.train.eval_every == 0;
        if eval_due || last {
            let report = eval_fixed_steps(&model, &examples, &[run.model.m_max], false, run.data.eval_batch_size)?;
            let row = &report.rows[0];
            let e = EvalRecord {
                step,
                token_acc: row.token_accuracy,
                exact_acc: row.exact_accuracy,
            };
            if let Some(l) = logs.as_mut() {
                Logs::line(&mut l.evals, &e)?;
            }
            let solved = e.exact_acc == 1.0;
            evals.push(e);
            if solved && solved_at.is_none() {
                solved_at = Some(step);
                if run.train.stop_when_solved {
                    break;
                }
            }
        }
    }

    let mut checkpoint = None;
    if let Some(mut l) = logs {
        l.metrics.flush().map_err(io_err("metrics.jsonl"))?;
        l.evals.flush().map_err(io_err("eval.jsonl"))?;
        let path = l.dir.join("model.ckpt");
        save_checkpoint(&model, &path)?;
        checkpoint = Some(path);
    }
    let wall_seconds = started.elapsed().as_secs_f64();
    if let Some(dir) = out_dir {
        let summary = Summary {
            steps: step,
            solved_at,
            wall_seconds,
            seconds_per_step: wall_seconds / step.max(1) as f64,
            final_eval: evals.last(),
            parameters: model.params.num_values(),
        };
        let path = dir.join("summary.json");
        fs::write(&path, serde_json::to_string_pretty(&summary).expect("summary serializes"))
            .map_err(io_err(path.display().to_string()))?;
    }
    Ok(TrainOutcome {
        model,
        metrics: outcome_metrics,
        evals,
        steps: step,
        solved_at,
        wall_seconds,
        checkpoint,
    })
}

/// Loads or generates the configured dataset and trains on it.
pub fn train(run: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    run.validate()?;
    let puzzles = load_dataset(run)?;
    train_in_memory(run, &puzzles, Some(out_dir))
}
