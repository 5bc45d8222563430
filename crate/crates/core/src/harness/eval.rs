use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{HarnessError, Result};
use crate::act::{infer_halt_decision, HaltPolicy, HaltStrategy};
use crate::model::{predictions, Batch, HrmModel};
use crate::sudoku::{format_grid, EncodedExample};
use crate::tensor::{Scalar, Tensor};

/// One sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// Step count or threshold.
    pub control: f64,
    pub token_accuracy: f64,
    pub exact_accuracy: f64,
    pub avg_halting_steps: f64,
    /// The step count exceeds the trained `m_max`.
    pub extrapolated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    /// Column name of the control value: `steps` or `threshold`.
    pub control: &'static str,
    pub rows: Vec<SweepRow>,
}

/// Per-segment observations of one example.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRecord {
    pub token_accuracy: f64,
    pub exact_accuracy: f64,
    pub output_norm: f64,
    pub q_halt: f64,
    pub q_continue: f64,
    pub prediction: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub example_id: usize,
    pub segments: Vec<SegmentRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// Highest final token accuracy, ties broken by lower example id.
    BestK(usize),
    /// A seeded uniform sample without replacement, listed by id.
    RandomK { k: usize, seed: u64 },
}

/// Per-example results of one adaptive evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveOutcome {
    pub halt_steps: Vec<usize>,
    /// Prediction frozen at each example's halt segment.
    pub predictions: Vec<Vec<usize>>,
    pub token_accuracy: Vec<f64>,
    pub exact: Vec<bool>,
}

fn row_scores(pred: &[usize], target: &[usize]) -> (f64, bool) {
    let hits = pred.iter().zip(target).filter(|(a, b)| a == b).count();
    (hits as f64 / target.len() as f64, hits == target.len())
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len();
    v.sum::<f64>() / n as f64
}

/// Mean over positions of the L2 norm of each position's logit vector, per
/// batch row of a `[batch, seq, vocab]` tensor.
pub fn output_norm<T: Scalar>(logits: &Tensor<T>) -> Vec<f64> {
    let s = logits.shape();
    let (seq, vocab) = (s[1], s[2]);
    logits
        .data()
        .chunks(seq * vocab)
        .map(|row| {
            let total: f64 = row
                .chunks(vocab)
                .map(|cell| cell.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())
                .sum();
            total / seq as f64
        })
        .collect()
}

/// Runs every example for `segments` segments and records each one.
fn rollout<T: Scalar>(
    model: &HrmModel<T>,
    examples: &[EncodedExample],
    segments: usize,
    batch_size: usize,
) -> Result<Vec<TrajectoryRecord>> {
    if examples.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    let mut out = Vec::with_capacity(examples.len());
    for (chunk_index, chunk) in examples.chunks(batch_size.max(1)).enumerate() {
        let batch = Batch::from_examples(chunk);
        let mut records: Vec<TrajectoryRecord> = (0..chunk.len())
            .map(|i| TrajectoryRecord {
                example_id: chunk_index * batch_size.max(1) + i,
                segments: Vec::with_capacity(segments),
            })
            .collect();
        let mut state = model.init_state(batch.size);
        for _ in 0..segments {
            let v = model.forward_no_grad(&state, &batch)?;
            let preds = v.predictions();
            let norms = output_norm(&v.logits);
            for (i, (pred, norm)) in preds.into_iter().zip(norms).enumerate() {
                let (tok, exact) = row_scores(&pred, batch.target_row(i));
                records[i].segments.push(SegmentRecord {
                    token_accuracy: tok,
                    exact_accuracy: if exact { 1.0 } else { 0.0 },
                    output_norm: norm,
                    q_halt: v.q_halt(i),
                    q_continue: v.q_continue(i),
                    prediction: pred,
                });
            }
            state = v.next_state;
        }
        out.extend(records);
    }
    Ok(out)
}

/// Every example runs exactly `s` segments for each `s` in `step_grid`; Q
/// heads are ignored. Steps beyond `m_max` need `allow_extrapolation` and
/// are flagged in the report.
pub fn eval_fixed_steps<T: Scalar>(
    model: &HrmModel<T>,
    examples: &[EncodedExample],
    step_grid: &[usize],
    allow_extrapolation: bool,
    batch_size: usize,
) -> Result<SweepReport> {
    if examples.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    let m_max = model.config().m_max;
    if let Some(&s) = step_grid.iter().find(|&&s| s == 0 || (s > m_max && !allow_extrapolation)) {
        return Err(HarnessError::InvalidArgument(format!(
            "step count {s} outside [1, m_max = {m_max}]; enable extrapolation to exceed m_max"
        )));
    }
    let longest = step_grid.iter().copied().max().unwrap_or(0);
    let trajectories = if longest == 0 {
        Vec::new()
    } else {
        rollout(model, examples, longest, batch_size)?
    };
    let rows = step_grid
        .iter()
        .map(|&s| {
            let at = trajectories.iter().map(|t| &t.segments[s - 1]);
            SweepRow {
                control: s as f64,
                token_accuracy: mean(at.clone().map(|r| r.token_accuracy)),
                exact_accuracy: mean(at.map(|r| r.exact_accuracy)),
                avg_halting_steps: s as f64,
                extrapolated: s > m_max,
            }
        })
        .collect();
    Ok(SweepReport { control: "steps", rows })
}

/// Per-sample halting under `policy`: each batch runs until all of its rows
/// have halted; a halted row drops out and keeps its halt-time prediction.
pub fn eval_adaptive_detailed<T: Scalar>(
    model: &HrmModel<T>,
    examples: &[EncodedExample],
    policy: &HaltPolicy,
    batch_size: usize,
) -> Result<AdaptiveOutcome> {
    if examples.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    let n = examples.len();
    let mut out = AdaptiveOutcome {
        halt_steps: vec![0; n],
        predictions: vec![Vec::new(); n],
        token_accuracy: vec![0.0; n],
        exact: vec![false; n],
    };
    let size = batch_size.max(1);
    for (chunk_index, chunk) in examples.chunks(size).enumerate() {
        let offset = chunk_index * size;
        let batch = Batch::from_examples(chunk);
        let mut state = model.init_state(batch.size);
        let mut active: Vec<usize> = (0..batch.size).collect();
        let mut m = 0;
        while !active.is_empty() {
            m += 1;
            let sub = batch.select(&active);
            let v = model.forward_no_grad(&state.select(&active), &sub)?;
            let preds = predictions(&v.logits);
            let mut still = Vec::with_capacity(active.len());
            for (i, &row) in active.iter().enumerate() {
                if infer_halt_decision(v.q_halt(i), v.q_continue(i), policy, m) {
                    let (tok, exact) = row_scores(&preds[i], sub.target_row(i));
                    let id = offset + row;
                    out.halt_steps[id] = m;
                    out.predictions[id] = preds[i].clone();
                    out.token_accuracy[id] = tok;
                    out.exact[id] = exact;
                } else {
                    still.push(row);
                }
            }
            state.scatter(&active, &v.next_state);
            active = still;
        }
    }
    Ok(out)
}

/// One row per threshold of an adaptive sweep.
pub fn eval_adaptive<T: Scalar>(
    model: &HrmModel<T>,
    examples: &[EncodedExample],
    strategy: HaltStrategy,
    threshold_grid: &[f64],
    batch_size: usize,
) -> Result<SweepReport> {
    if strategy == HaltStrategy::FixedSteps {
        return Err(HarnessError::InvalidArgument(
            "adaptive evaluation needs q_halt_threshold or q_diff_threshold".into(),
        ));
    }
    if let Some(t) = threshold_grid.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(HarnessError::InvalidArgument(format!("threshold {t} outside (0, 1)")));
    }
    let m_max = model.config().m_max;
    let rows = threshold_grid
        .iter()
        .map(|&t| {
            let o = eval_adaptive_detailed(model, examples, &HaltPolicy::threshold(strategy, t, m_max), batch_size)?;
            Ok(SweepRow {
                control: t,
                token_accuracy: mean(o.token_accuracy.iter().copied()),
                exact_accuracy: mean(o.exact.iter().map(|&e| if e { 1.0 } else { 0.0 })),
                avg_halting_steps: mean(o.halt_steps.iter().map(|&s| s as f64)),
                extrapolated: false,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepReport {
        control: "threshold",
        rows,
    })
}

/// Runs every example for `m_max` segments and returns the selected
/// trajectories.
pub fn capture_trajectories<T: Scalar>(
    model: &HrmModel<T>,
    examples: &[EncodedExample],
    selection: Selection,
    batch_size: usize,
) -> Result<Vec<TrajectoryRecord>> {
    let k = match selection {
        Selection::BestK(k) | Selection::RandomK { k, .. } => k,
    };
    if k > examples.len() {
        return Err(HarnessError::InvalidArgument(format!(
            "k = {k} exceeds the {} available examples",
            examples.len()
        )));
    }
    let mut all = rollout(model, examples, model.config().m_max, batch_size)?;
    match selection {
        Selection::BestK(k) => {
            let last = |t: &TrajectoryRecord| t.segments.last().map_or(0.0, |s| s.token_accuracy);
            all.sort_by(|a, b| last(b).total_cmp(&last(a)).then(a.example_id.cmp(&b.example_id)));
            all.truncate(k);
        }
        Selection::RandomK { k, seed } => {
            let mut ids = sample(&mut ChaCha8Rng::seed_from_u64(seed), all.len(), k).into_vec();
            ids.sort_unstable();
            all = ids.into_iter().map(|i| all[i].clone()).collect();
        }
    }
    Ok(all)
}

/// Plain-text grids for every trajectory solved within `max_steps`
/// segments: the prediction at each segment up to the first exact one.
pub fn few_step_snapshots(records: &[TrajectoryRecord], side: usize, max_steps: usize) -> String {
    let mut out = String::new();
    for r in records {
        let Some(solved) = r.segments.iter().position(|s| s.exact_accuracy == 1.0) else {
            continue;
        };
        if solved + 1 > max_steps {
            continue;
        }
        let _ = writeln!(out, "example {} solved at segment {}", r.example_id, solved + 1);
        for (m, s) in r.segments[..=solved].iter().enumerate() {
            let grid: Vec<u8> = s.prediction.iter().map(|&t| t as u8).collect();
            let _ = writeln!(
                out,
                "segment {} (token accuracy {:.4})\n{}",
                m + 1,
                s.token_accuracy,
                format_grid(&grid, side)
            );
        }
        out.push('\n');
    }
    out
}

/// `start:stop:step` with exclusive stop, or a comma-separated list.
pub fn parse_threshold_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = |why: &str| HarnessError::InvalidArgument(format!("threshold grid {spec:?}: {why}"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad("not a number"));
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        [start, stop, step] => {
            let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
            if !(step > 0.0) || !start.is_finite() || !stop.is_finite() {
                return Err(bad("step must be positive and bounds finite"));
            }
            let count = ((stop - start) / step - 1e-9).ceil().max(0.0) as usize;
            Ok((0..count)
                .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
                .collect())
        }
        [list] => list.split(',').map(num).collect(),
        _ => Err(bad("expected start:stop:step or a comma-separated list")),
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(super::io_err(parent.display().to_string()))?;
    }
    Ok(csv::Writer::from_path(path)?)
}

/// Header: `<control>,token_accuracy,exact_accuracy,avg_halting_steps,extrapolated`.
pub fn write_sweep_csv(report: &SweepReport, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([report.control, "token_accuracy", "exact_accuracy", "avg_halting_steps", "extrapolated"])?;
    for r in &report.rows {
        w.write_record([
            r.control.to_string(),
            r.token_accuracy.to_string(),
            r.exact_accuracy.to_string(),
            r.avg_halting_steps.to_string(),
            r.extrapolated.to_string(),
        ])?;
    }
    w.flush().map_err(super::io_err(path.display().to_string()))?;
    Ok(())
}

/// Header: `example_id,segment,token_accuracy,exact_accuracy,output_norm,q_halt,q_continue,prediction`;
/// `prediction` is the predicted grid as a digit string.
pub fn write_trajectories_csv(records: &[TrajectoryRecord], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "example_id",
        "segment",
        "token_accuracy",
        "exact_accuracy",
        "output_norm",
        "q_halt",
        "q_continue",
        "prediction",
    ])?;
    for r in records {
        for (m, s) in r.segments.iter().enumerate() {
            let grid: String = s.prediction.iter().map(|t| t.to_string()).collect();
            w.write_record([
                r.example_id.to_string(),
                (m + 1).to_string(),
                s.token_accuracy.to_string(),
                s.exact_accuracy.to_string(),
                s.output_norm.to_string(),
                s.q_halt.to_string(),
                s.q_continue.to_string(),
                grid,
            ])?;
        }
    }
    w.flush().map_err(super::io_err(path.display().to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_grid_stop_is_exclusive() {
        let g = parse_threshold_grid("0.1:0.9:0.1").unwrap();
        assert_eq!(g, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
        assert_eq!(parse_threshold_grid("0.1:1.0:0.1").unwrap().len(), 9);
        assert_eq!(parse_threshold_grid("0.5,0.9").unwrap(), vec![0.5, 0.9]);
        assert!(parse_threshold_grid("0.1:0.9:0").is_err());
        assert!(parse_threshold_grid("a:b").is_err());
    }

    #[test]
    fn output_norm_of_zero_logits_is_zero() {
        assert_eq!(output_norm(&Tensor::<f32>::zeros([2, 3, 4])), vec![0.0, 0.0]);
        let t = Tensor::<f64>::from_f64([1, 2, 2], &[3.0, 4.0, 0.0, 1.0]).unwrap();
        assert_eq!(output_norm(&t), vec![3.0]);
    }

    #[test]
    fn snapshots_only_list_quickly_solved_examples() {
        let seg = |exact: f64| SegmentRecord {
            token_accuracy: exact,
            exact_accuracy: exact,
            output_norm: 1.0,
            q_halt: 0.0,
            q_continue: 0.0,
            prediction: vec![1, 2, 3, 4, 3, 4, 1, 2, 2, 1, 4, 3, 4, 3, 2, 1],
        };
        let fast = TrajectoryRecord {
            example_id: 3,
            segments: vec![seg(0.0), seg(1.0), seg(1.0)],
        };
        let slow = TrajectoryRecord {
            example_id: 4,
            segments: vec![seg(0.0), seg(0.0), seg(1.0)],
        };
        let text = few_step_snapshots(&[fast, slow], 4, 2);
        assert!(text.contains("example 3 solved at segment 2"));
        assert!(!text.contains("example 4"));
    }
}
