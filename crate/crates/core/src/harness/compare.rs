use std::collections::BTreeMap;
use std::path::Path;

use super::config::RunConfig;
use super::train::{train_in_memory, TrainOutcome};
use super::{io_err, load_dataset, HarnessError, Result};

#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub a: TrainOutcome,
    pub b: TrainOutcome,
}

impl ComparisonReport {
    pub fn seconds_per_step(outcome: &TrainOutcome) -> f64 {
        outcome.wall_seconds / outcome.steps.max(1) as f64
    }
}

/// Trains both runs on the same puzzles; the runs must agree on seed and
/// data. With `out_dir`, each run writes into `a/` and `b/` and the paired
/// curves go to `comparison.csv` and `wall_clock.csv`.
pub fn compare_architectures(run_a: &RunConfig, run_b: &RunConfig, out_dir: Option<&Path>) -> Result<ComparisonReport> {
    if run_a.data != run_b.data || run_a.seed != run_b.seed {
        return Err(HarnessError::InvalidArgument(
            "compared runs must share the dataset and the seed".into(),
        ));
    }
    let puzzles = load_dataset(run_a)?;
    let a = train_in_memory(run_a, &puzzles, out_dir.map(|d| d.join("a")).as_deref())?;
    let b = train_in_memory(run_b, &puzzles, out_dir.map(|d| d.join("b")).as_deref())?;
    let report = ComparisonReport { a, b };
    if let Some(dir) = out_dir {
        write_comparison_csv(&report, dir)?;
    }
    Ok(report)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `comparison.csv`: one row per step with both runs' training metrics and
/// full-set evaluation (blank where a run has no value). `wall_clock.csv`:
/// one row per run.
pub fn write_comparison_csv(report: &ComparisonReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir.display().to_string()))?;
    type Row = [Option<f64>; 5];
    let mut rows: BTreeMap<usize, [Row; 2]> = BTreeMap::new();
    for (side, run) in [&report.a, &report.b].into_iter().enumerate() {
        for m in &run.metrics {
            let r = &mut rows.entry(m.step).or_default()[side];
            r[0] = Some(m.loss);
            r[1] = Some(m.token_acc);
            r[2] = Some(m.exact_acc);
        }
        for e in &run.evals {
            let r = &mut rows.entry(e.step).or_default()[side];
            r[3] = Some(e.token_acc);
            r[4] = Some(e.exact_acc);
        }
    }
    let mut w = csv::Writer::from_path(dir.join("comparison.csv"))?;
    let names = ["loss", "token_acc", "exact_acc", "eval_token_acc", "eval_exact_acc"];
    let header: Vec<String> = std::iter::once("step".to_string())
        .chain(["a", "b"].iter().flat_map(|p| names.iter().map(move |n| format!("{p}_{n}"))))
        .collect();
    w.write_record(&header)?;
    for (step, sides) in rows {
        let mut record = vec![step.to_string()];
        record.extend(sides.iter().flat_map(|r| r.iter().map(|v| cell(*v))));
        w.write_record(&record)?;
    }
    w.flush().map_err(io_err("comparison.csv"))?;

    let mut w = csv::Writer::from_path(dir.join("wall_clock.csv"))?;
    w.write_record(["run", "architecture", "steps", "wall_seconds", "seconds_per_step", "solved_at"])?;
    for (name, run) in [("a", &report.a), ("b", &report.b)] {
        let c = run.model.config();
        w.write_record([
            name.to_string(),
            format!("l{}_h{}_t{}_cycles{}", c.l_layers, c.h_layers, c.t, c.cycles),
            run.steps.to_string(),
            run.wall_seconds.to_string(),
            ComparisonReport::seconds_per_step(run).to_string(),
            run.solved_at.map(|s| s.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(io_err("wall_clock.csv"))?;
    Ok(())
}
