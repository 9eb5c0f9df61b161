//! Summary tables and plots.

use std::path::Path;

use anyhow::Result;
use lvq_core::ensemble::{average_sets, select_all, EnsembleSelection};
use lvq_core::evaluate::{score_task, GroundTruth, PredictionSet, TaskScore};
use lvq_core::indices::{Task, INDEX_COUNT, INDEX_NAMES};
use plotters::prelude::*;

pub const AVERAGE_ROW: &str = "Ensemble Average";
pub const OPTIMAL_ROW: &str = "Ensemble Optimal";

/// One table row: a method and its score per task, if it covers the task.
#[derive(Clone, Debug)]
pub struct Row {
    pub method: String,
    pub config_id: String,
    pub scores: Vec<(Task, TaskScore)>,
}

fn covers(set: &PredictionSet, task: Task) -> bool {
    if task == Task::Phase {
        set.has_phase()
    } else {
        set.has_regression()
    }
}

pub fn score_row(method: &str, set: &PredictionSet, gt: &GroundTruth) -> Result<Row> {
    let mut scores = Vec::new();
    for task in Task::ALL {
        if covers(set, task) {
            scores.push((task, score_task(set, gt, task)?));
        }
    }
    Ok(Row { method: method.into(), config_id: set.config_id.clone(), scores })
}

/// Mean of every configuration that covers the task.
pub fn average_row(sets: &[&PredictionSet], gt: &GroundTruth) -> Result<(Row, Vec<(Task, PredictionSet)>)> {
    let mut row = Row { method: AVERAGE_ROW.into(), config_id: "ensemble-average".into(), scores: Vec::new() };
    let mut preds = Vec::new();
    for task in Task::ALL {
        let pool: Vec<&PredictionSet> = sets.iter().copied().filter(|s| covers(s, task)).collect();
        if pool.is_empty() {
            continue;
        }
        let avg = average_sets(&pool, &row.config_id)?;
        row.scores.push((task, score_task(&avg, gt, task)?));
        preds.push((task, avg));
    }
    Ok((row, preds))
}

/// Per-task optimal subsets and the scores of their means.
pub fn optimal_row(sets: &[&PredictionSet], gt: &GroundTruth, top_k: usize) -> Result<(Row, Vec<EnsembleSelection>, Vec<(Task, PredictionSet)>)> {
    let selections = select_all(sets, gt, top_k)?;
    let mut row = Row { method: OPTIMAL_ROW.into(), config_id: "ensemble-optimal".into(), scores: Vec::new() };
    let mut preds = Vec::new();
    for sel in &selections {
        let members: Vec<&PredictionSet> = sets.iter().copied().filter(|s| sel.members.contains(&s.config_id)).collect();
        let avg = average_sets(&members, &row.config_id)?;
        row.scores.push((sel.task, score_task(&avg, gt, sel.task)?));
        preds.push((sel.task, avg));
    }
    Ok((row, selections, preds))
}

pub fn table_header() -> Vec<String> {
    let mut h = vec!["method".to_string(), "config_id".to_string()];
    for task in Task::REGRESSION {
        for col in ["mae", "std", "pcc"] {
            h.push(format!("{}_{col}", task.name()));
        }
    }
    h.push("phase_er".into());
    h
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn table_record(row: &Row) -> Vec<String> {
    let find = |t: Task| row.scores.iter().find(|(task, _)| *task == t).map(|(_, s)| s);
    let mut rec = vec![row.method.clone(), row.config_id.clone()];
    for task in Task::REGRESSION {
        let s = find(task);
        rec.push(fmt(s.map(|s| s.mae)));
        rec.push(fmt(s.map(|s| s.mae_std)));
        rec.push(fmt(s.and_then(|s| s.pcc)));
    }
    rec.push(fmt(find(Task::Phase).map(|s| s.mae)));
    rec
}

pub fn write_table(path: &Path, rows: &[Row]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(table_header())?;
    for r in rows {
        w.write_record(table_record(r))?;
    }
    w.flush()?;
    Ok(())
}

/// (prediction, truth) pairs of one index over the rows with ground truth.
pub fn index_pairs(set: &PredictionSet, gt: &GroundTruth, index: usize) -> Vec<(f64, f64)> {
    set.rows
        .iter()
        .filter_map(|r| {
            let v = r.values?;
            let (iv, _) = gt.get(&r.patient_id, r.frame)?;
            Some((v[index], iv.to_array()[index]))
        })
        .collect()
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(v), b.max(v)));
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

fn plot_err(e: impl std::fmt::Display) -> anyhow::Error {
    anyhow::anyhow!("plot rendering: {e}")
}

/// Difference against mean with the bias line and 95% limits of agreement.
pub fn bland_altman(path: &Path, title: &str, pairs: &[(f64, f64)]) -> Result<()> {
    if pairs.is_empty() {
        return Ok(());
    }
    let pts: Vec<(f64, f64)> = pairs.iter().map(|(p, g)| ((p + g) / 2.0, p - g)).collect();
    let n = pts.len() as f64;
    let bias = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sd = (pts.iter().map(|p| (p.1 - bias).powi(2)).sum::<f64>() / n).sqrt();
    let (x0, x1) = bounds(pts.iter().map(|p| p.0));
    let (y0, y1) = bounds(pts.iter().map(|p| p.1).chain([bias - 2.0 * sd, bias + 2.0 * sd]));

    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(55)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("mean of prediction and truth").y_desc("prediction - truth").draw().map_err(plot_err)?;
    chart.draw_series(pts.iter().map(|&p| Circle::new(p, 2, BLUE.filled()))).map_err(plot_err)?;
    for (y, color) in [(bias, BLACK), (bias - 1.96 * sd, RED), (bias + 1.96 * sd, RED)] {
        chart.draw_series(LineSeries::new([(x0, y), (x1, y)], color)).map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Prediction against truth with the identity line.
pub fn scatter(path: &Path, title: &str, pairs: &[(f64, f64)]) -> Result<()> {
    if pairs.is_empty() {
        return Ok(());
    }
    let (lo, hi) = bounds(pairs.iter().flat_map(|&(p, g)| [p, g]));
    let root = SVGBackend::new(path, (520, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(55)
        .build_cartesian_2d(lo..hi, lo..hi)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("truth").y_desc("prediction").draw().map_err(plot_err)?;
    chart.draw_series(pairs.iter().map(|&(p, g)| Circle::new((g, p), 2, BLUE.filled()))).map_err(plot_err)?;
    chart.draw_series(LineSeries::new([(lo, lo), (hi, hi)], BLACK)).map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Both plot kinds for every index, each index taken from the prediction
/// set chosen for its task.
pub fn write_plots(dir: &Path, per_task: &[(Task, PredictionSet)], gt: &GroundTruth) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for index in 0..INDEX_COUNT {
        let Some((_, set)) = per_task.iter().find(|(t, _)| t.range().contains(&index)) else { continue };
        let pairs = index_pairs(set, gt, index);
        let name = INDEX_NAMES[index];
        bland_altman(&dir.join(format!("bland_altman_{name}.svg")), &format!("{name}: Bland-Altman"), &pairs)?;
        scatter(&dir.join(format!("scatter_{name}.svg")), &format!("{name}: prediction vs truth"), &pairs)?;
    }
    Ok(())
}
