//! Cross-run comparison: per-run accuracy curves, single- vs multi-task bars
//! and a summary table.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::commands::{best_stage_end, default_run_name, read_metrics, read_run_info};
use crate::config::{Mode, PlanKind};
use crate::error::{io, CliError};
use crate::svg;

/// One summary row. Metrics are those of the best stage-end record, the
/// same checkpoint `evaluate` picks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: String,
    pub path: PathBuf,
    pub mode: Mode,
    pub plan: PlanKind,
    pub seed: u64,
    pub epochs: usize,
    pub best_stage: String,
    pub top1: f64,
    pub top5: f64,
    pub rate_ratio: Option<f64>,
    pub pos_err_m: f64,
    pub final_top1: f64,
    /// `100 * (single - multi) / single` against the single-task run with
    /// the same plan and seed; multi-task rows only.
    pub rate_drop_pct: Option<f64>,
    pub paired_with: Option<String>,
}

pub fn rate_drop_pct(single: f64, multi: f64) -> f64 {
    100.0 * (single - multi) / single
}

fn run_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn summarize(
    runs: &[PathBuf],
) -> Result<(Vec<SummaryRow>, Vec<Vec<beamvision::finetune::EpochMetrics>>), CliError> {
    let mut rows = Vec::new();
    let mut logs = Vec::new();
    for run in runs {
        let info = read_run_info(run)?;
        let log = read_metrics(run)?;
        let best = best_stage_end(&log).ok_or_else(|| CliError::NotARun {
            path: run.clone(),
            message: "empty metrics log".into(),
        })?;
        let b = &log[best];
        rows.push(SummaryRow {
            run: run_name(run),
            path: run.clone(),
            mode: info.mode,
            plan: info.plan,
            seed: info.seed,
            epochs: log.len(),
            best_stage: b.stage.clone(),
            top1: b.top1,
            top5: b.top5,
            rate_ratio: b.rate_ratio,
            pos_err_m: b.pos_err_m,
            final_top1: log.last().expect("nonempty").top1,
            rate_drop_pct: None,
            paired_with: None,
        });
        logs.push(log);
    }
    let snapshot = rows.clone();
    for row in rows.iter_mut().filter(|r| r.mode == Mode::MultiTask) {
        let single = snapshot
            .iter()
            .find(|s| s.mode == Mode::SingleTask && s.plan == row.plan && s.seed == row.seed);
        if let Some(s) = single {
            if let (Some(rs), Some(rm)) = (s.rate_ratio, row.rate_ratio) {
                row.rate_drop_pct = Some(rate_drop_pct(rs, rm));
                row.paired_with = Some(s.run.clone());
            }
        }
    }
    Ok((rows, logs))
}

fn stage_boundaries(log: &[beamvision::finetune::EpochMetrics]) -> Vec<usize> {
    (1..log.len())
        .filter(|&i| log[i].stage_index != log[i - 1].stage_index)
        .collect()
}

fn write(path: PathBuf, text: String) -> Result<(), CliError> {
    fs::write(&path, text).map_err(|e| io(path, e))
}

pub fn report(runs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let (rows, logs) = summarize(runs)?;
    fs::create_dir_all(out).map_err(|e| io(out, e))?;

    for (k, (row, log)) in rows.iter().zip(&logs).enumerate() {
        let top1: Vec<f64> = log.iter().map(|m| m.top1).collect();
        let top5: Vec<f64> = log.iter().map(|m| m.top5).collect();
        let chart = svg::line_chart(
            &format!("{}: validation accuracy", row.run),
            "accuracy",
            &[("top-1", top1), ("top-5", top5)],
            &stage_boundaries(log),
        );
        write(out.join(format!("curve_{:02}_{}.svg", k, row.run)), chart)?;
    }

    // one bar group per (plan, seed); single- and multi-task side by side
    let mut keys: Vec<(PlanKind, u64)> = Vec::new();
    for r in &rows {
        if !keys.contains(&(r.plan, r.seed)) {
            keys.push((r.plan, r.seed));
        }
    }
    let pick = |plan: PlanKind, seed: u64, mode: Mode| {
        rows.iter().find(|r| r.plan == plan && r.seed == seed && r.mode == mode)
    };
    let label = |plan: PlanKind, seed: u64| {
        default_run_name(Mode::MultiTask, plan, seed)
            .trim_start_matches("multi_task_")
            .to_string()
    };
    let rate_groups: Vec<(String, Vec<Option<f64>>)> = keys
        .iter()
        .map(|&(p, s)| {
            let v = [Mode::SingleTask, Mode::MultiTask].map(|m| pick(p, s, m).and_then(|r| r.rate_ratio));
            (label(p, s), v.to_vec())
        })
        .collect();
    let pos_groups: Vec<(String, Vec<Option<f64>>)> = keys
        .iter()
        .map(|&(p, s)| {
            let v = [Mode::SingleTask, Mode::MultiTask].map(|m| pick(p, s, m).map(|r| r.pos_err_m));
            (label(p, s), v.to_vec())
        })
        .collect();
    let series = ["single_task", "multi_task"];
    let rate_svg = svg::bar_chart("Rate ratio vs oracle", "rate ratio", &series, &rate_groups);
    let pos_svg = svg::bar_chart("Mean positioning error", "error (m)", &series, &pos_groups);
    // both panels stacked into one file
    let bars = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"800\">\n<g>{}</g>\n<g transform=\"translate(0 400)\">{}</g>\n</svg>\n",
        rate_svg, pos_svg
    );
    write(out.join("bars.svg"), bars)?;

    let mut json = serde_json::to_string_pretty(&rows).expect("serializable");
    json.push('\n');
    write(out.join("summary.json"), json)?;

    let mut csv = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        csv.serialize(CsvRow::from(r))
            .map_err(|e| io(out.join("summary.csv"), e.into()))?;
    }
    let bytes = csv.into_inner().expect("in-memory writer");
    write(out.join("summary.csv"), String::from_utf8(bytes).expect("utf-8"))?;

    println!(
        "{:<40} {:>7} {:>7} {:>10} {:>9} {:>10}",
        "run", "top1", "top5", "rate_ratio", "pos_err", "drop_%"
    );
    for r in &rows {
        let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        println!(
            "{:<40} {:>7.4} {:>7.4} {:>10} {:>9.2} {:>10}",
            r.run,
            r.top1,
            r.top5,
            opt(r.rate_ratio, 6),
            r.pos_err_m,
            opt(r.rate_drop_pct, 4)
        );
    }
    Ok(())
}

/// Flat view of a row for the CSV file.
#[derive(Serialize)]
struct CsvRow<'a> {
    run: &'a str,
    mode: Mode,
    plan: PlanKind,
    seed: u64,
    epochs: usize,
    best_stage: &'a str,
    top1: f64,
    top5: f64,
    rate_ratio: Option<f64>,
    pos_err_m: f64,
    final_top1: f64,
    rate_drop_pct: Option<f64>,
    paired_with: Option<&'a str>,
}

impl<'a> From<&'a SummaryRow> for CsvRow<'a> {
    fn from(r: &'a SummaryRow) -> Self {
        Self {
            run: &r.run,
            mode: r.mode,
            plan: r.plan,
            seed: r.seed,
            epochs: r.epochs,
            best_stage: &r.best_stage,
            top1: r.top1,
            top5: r.top5,
            rate_ratio: r.rate_ratio,
            pos_err_m: r.pos_err_m,
            final_top1: r.final_top1,
            rate_drop_pct: r.rate_drop_pct,
            paired_with: r.paired_with.as_deref(),
        }
    }
}
