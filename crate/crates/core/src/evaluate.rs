//! Multi-crop and cyclic-window inference, prediction tables, metrics and
//! the Wilcoxon signed-rank test.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{cyclic_window, make_3ch, InputMode};
use crate::data::{Study, TargetScaler};
use crate::error::{Error, Result};
use crate::image::Grid;
use crate::indices::{IndexVector, Phase, Task, INDEX_COUNT, INDEX_NAMES};
use crate::model::{Model, RawPrediction};
use lvq_nn::Tensor;

/// Anything that maps `[N, 3, D, H, W]` to per-(sample, position) outputs in scaled space.
pub trait Predictor {
    fn predict(&self, x: &Tensor) -> Result<RawPrediction>;
}

impl Predictor for Model {
    fn predict(&self, x: &Tensor) -> Result<RawPrediction> {
        Model::predict(self, x)
    }
}

/// Top-left corners of the four corner-anchored crops.
pub fn corner_offsets(size: (usize, usize), crop: usize) -> [(usize, usize); 4] {
    let (r, c) = (size.0 - crop, size.1 - crop);
    [(0, 0), (0, c), (r, 0), (r, c)]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FramePrediction {
    /// Physical units once unscaled.
    pub regression: Option<[f64; INDEX_COUNT]>,
    /// `[p_systole, p_diastole]`
    pub phase: Option<[f64; 2]>,
}

fn crop_into(dst: &mut [f64], g: &Grid<f32>, offset: (usize, usize), crop: usize) {
    for r in 0..crop {
        let src = &g.data[(offset.0 + r) * g.width + offset.1..][..crop];
        for (d, &v) in dst[r * crop..(r + 1) * crop].iter_mut().zip(src) {
            *d = v as f64;
        }
    }
}

/// Sums of outputs per frame, turned into means by `finish`.
struct Accumulator {
    regression: Vec<[f64; INDEX_COUNT]>,
    phase: Vec<[f64; 2]>,
    count: Vec<usize>,
}

impl Accumulator {
    fn new(frames: usize) -> Self {
        Self { regression: vec![[0.0; INDEX_COUNT]; frames], phase: vec![[0.0; 2]; frames], count: vec![0; frames] }
    }

    fn add(&mut self, frame: usize, raw: &RawPrediction, row: usize) {
        if let Some(r) = &raw.regression {
            for (a, v) in self.regression[frame].iter_mut().zip(&r[row]) {
                *a += v;
            }
        }
        if let Some(p) = &raw.phase {
            self.phase[frame][0] += p[row][0];
            self.phase[frame][1] += p[row][1];
        }
        self.count[frame] += 1;
    }

    fn finish(self, raw_kind: (bool, bool), scaler: Option<&TargetScaler>) -> Vec<FramePrediction> {
        let (has_reg, has_phase) = raw_kind;
        self.regression
            .iter()
            .zip(&self.phase)
            .zip(&self.count)
            .map(|((r, p), &n)| {
                let n = n as f64;
                let regression = has_reg.then(|| {
                    let mean: [f64; INDEX_COUNT] = std::array::from_fn(|i| r[i] / n);
                    scaler.map_or(mean, |s| s.invert(&mean))
                });
                let phase = has_phase.then(|| [p[0] / n, p[1] / n]);
                FramePrediction { regression, phase }
            })
            .collect()
    }
}

fn kinds(raw: &RawPrediction) -> (bool, bool) {
    (raw.regression.is_some(), raw.phase.is_some())
}

/// Four corner crops per frame, averaged, then unscaled.
pub fn predict_2d(
    model: &dyn Predictor,
    scaler: Option<&TargetScaler>,
    study: &Study,
    mode: InputMode,
    crop: usize,
) -> Result<Vec<FramePrediction>> {
    let (h, w) = study.shape();
    if crop > h || crop > w {
        return Err(Error::ShapeMismatch(format!("crop {crop} larger than slice {h}x{w}")));
    }
    let offsets = corner_offsets((h, w), crop);
    let frames = study.frame_count();
    let plane = crop * crop;
    let per_pass = 5;
    let mut acc = Accumulator::new(frames);
    let mut kind = (false, false);
    for first in (0..frames).step_by(per_pass) {
        let batch: Vec<usize> = (first..frames.min(first + per_pass)).collect();
        let n = batch.len() * offsets.len();
        let mut data = vec![0.0; n * 3 * plane];
        for (i, &t) in batch.iter().enumerate() {
            let chans = make_3ch(&study.frames, t, mode);
            for (j, &off) in offsets.iter().enumerate() {
                let sample = i * offsets.len() + j;
                for (c, g) in chans.iter().enumerate() {
                    crop_into(&mut data[(sample * 3 + c) * plane..][..plane], g, off, crop);
                }
            }
        }
        let raw = model.predict(&Tensor::new(&[n, 3, 1, crop, crop], data)?)?;
        kind = kinds(&raw);
        for (i, &t) in batch.iter().enumerate() {
            for j in 0..offsets.len() {
                acc.add(t, &raw, i * offsets.len() + j);
            }
        }
    }
    Ok(acc.finish(kind, scaler))
}

/// Every cyclic window of `ns` frames, each with the four-crop scheme; a
/// frame's prediction is the mean over all window positions covering it.
pub fn predict_3d(
    model: &dyn Predictor,
    scaler: Option<&TargetScaler>,
    study: &Study,
    ns: usize,
    crop: usize,
) -> Result<Vec<FramePrediction>> {
    let (h, w) = study.shape();
    if crop > h || crop > w {
        return Err(Error::ShapeMismatch(format!("crop {crop} larger than slice {h}x{w}")));
    }
    let frames = study.frame_count();
    if ns == 0 || ns > frames {
        return Err(Error::Invalid(format!("window length {ns} for {frames} frames")));
    }
    let offsets = corner_offsets((h, w), crop);
    let plane = crop * crop;
    let mut acc = Accumulator::new(frames);
    let mut kind = (false, false);
    for start in 0..frames {
        let window = cyclic_window(start, ns, frames);
        let n = offsets.len();
        let mut data = vec![0.0; n * 3 * ns * plane];
        for (j, &off) in offsets.iter().enumerate() {
            for (z, &t) in window.iter().enumerate() {
                for c in 0..3 {
                    crop_into(&mut data[((j * 3 + c) * ns + z) * plane..][..plane], &study.frames[t], off, crop);
                }
            }
        }
        let raw = model.predict(&Tensor::new(&[n, 3, ns, crop, crop], data)?)?;
        kind = kinds(&raw);
        for j in 0..n {
            for (z, &t) in window.iter().enumerate() {
                acc.add(t, &raw, j * ns + z);
            }
        }
    }
    Ok(acc.finish(kind, scaler))
}

/// Windows (by start frame) that contain frame `t`.
pub fn covering_windows(t: usize, ns: usize, frames: usize) -> Vec<usize> {
    (0..frames).filter(|&s| cyclic_window(s, ns, frames).contains(&t)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub patient_id: String,
    pub frame: usize,
    pub values: Option<[f64; INDEX_COUNT]>,
    pub phase: Option<[f64; 2]>,
    /// Fold whose model produced the row.
    pub fold: usize,
}

/// Per-frame predictions of one configuration, concatenated over folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub config_id: String,
    pub rows: Vec<PredictionRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| Error::Invalid(format!("bad number {s:?} in prediction table")))
    }
}

impl PredictionSet {
    pub fn new(config_id: &str) -> Self {
        Self { config_id: config_id.to_string(), rows: Vec::new() }
    }

    pub fn push_study(&mut self, patient_id: &str, fold: usize, preds: &[FramePrediction]) {
        for (frame, p) in preds.iter().enumerate() {
            self.rows.push(PredictionRow {
                patient_id: patient_id.to_string(),
                frame,
                values: p.regression,
                phase: p.phase,
                fold,
            });
        }
    }

    /// Rows ordered by (patient, frame).
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| (&a.patient_id, a.frame).cmp(&(&b.patient_id, b.frame)));
    }

    pub fn has_regression(&self) -> bool {
        self.rows.first().is_some_and(|r| r.values.is_some())
    }

    pub fn has_phase(&self) -> bool {
        self.rows.first().is_some_and(|r| r.phase.is_some())
    }

    pub fn get(&self, patient_id: &str, frame: usize) -> Option<&PredictionRow> {
        self.rows.iter().find(|r| r.patient_id == patient_id && r.frame == frame)
    }

    /// Checks the table invariants: one row per (patient, frame), finite
    /// regression values, phase pairs summing to 1, consistent columns.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        let (reg, ph) = (self.has_regression(), self.has_phase());
        for r in &self.rows {
            let key = (r.patient_id.as_str(), r.frame);
            if !seen.insert(key) {
                return Err(Error::Invalid(format!("{}: duplicate row for {} frame {}", self.config_id, key.0, key.1)));
            }
            if r.values.is_some() != reg || r.phase.is_some() != ph {
                return Err(Error::Invalid(format!("{}: inconsistent output columns at {} frame {}", self.config_id, key.0, key.1)));
            }
            if r.values.is_some_and(|v| v.iter().any(|x| !x.is_finite())) {
                return Err(Error::Invalid(format!("{}: non-finite value at {} frame {}", self.config_id, key.0, key.1)));
            }
            if r.phase.is_some_and(|p| (p[0] + p[1] - 1.0).abs() > 1e-6 || p.iter().any(|x| !(0.0..=1.0).contains(x))) {
                return Err(Error::Invalid(format!("{}: phase pair not a distribution at {} frame {}", self.config_id, key.0, key.1)));
            }
        }
        Ok(())
    }

    pub fn header() -> Vec<String> {
        let mut h = vec!["config_id".to_string(), "patient_id".into(), "frame".into()];
        h.extend(INDEX_NAMES.iter().map(|s| s.to_string()));
        h.extend(["p_systole".into(), "p_diastole".into(), "fold".into()]);
        h
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(Self::header())?;
        for r in &self.rows {
            let mut rec = vec![self.config_id.clone(), r.patient_id.clone(), r.frame.to_string()];
            for i in 0..INDEX_COUNT {
                rec.push(fmt_opt(r.values.map(|v| v[i])));
            }
            rec.push(fmt_opt(r.phase.map(|p| p[0])));
            rec.push(fmt_opt(r.phase.map(|p| p[1])));
            rec.push(r.fold.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(Error::io(path))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let header: Vec<String> = rd.headers()?.iter().map(String::from).collect();
        if header != Self::header() {
            return Err(Error::Invalid(format!("{}: unexpected prediction table header", path.display())));
        }
        let mut set: Option<PredictionSet> = None;
        for rec in rd.records() {
            let rec = rec?;
            let config = &rec[0];
            let set = set.get_or_insert_with(|| PredictionSet::new(config));
            if set.config_id != config {
                return Err(Error::Invalid(format!("{}: mixed config ids", path.display())));
            }
            let nums: Vec<Option<f64>> = (3..3 + INDEX_COUNT + 2).map(|i| parse_opt(&rec[i])).collect::<Result<_>>()?;
            let values = if nums[..INDEX_COUNT].iter().all(Option::is_some) {
                Some(std::array::from_fn(|i| nums[i].unwrap_or_default()))
            } else {
                None
            };
            let phase = match (nums[INDEX_COUNT], nums[INDEX_COUNT + 1]) {
                (Some(a), Some(b)) => Some([a, b]),
                _ => None,
            };
            let parse_usize = |s: &str| s.parse::<usize>().map_err(|_| Error::Invalid(format!("bad integer {s:?}")));
            set.rows.push(PredictionRow {
                patient_id: rec[1].to_string(),
                frame: parse_usize(&rec[2])?,
                values,
                phase,
                fold: parse_usize(&rec[3 + INDEX_COUNT + 2])?,
            });
        }
        set.ok_or_else(|| Error::Invalid(format!("{}: empty prediction table", path.display())))
    }
}

/// Reference targets keyed by (patient, frame).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub frames: BTreeMap<(String, usize), (IndexVector, Phase)>,
}

impl GroundTruth {
    pub fn from_studies<'a>(studies: impl IntoIterator<Item = &'a Study>) -> Self {
        let mut frames = BTreeMap::new();
        for s in studies {
            for (t, (iv, ph)) in s.indices.iter().zip(&s.phase).enumerate() {
                frames.insert((s.patient_id.clone(), t), (*iv, *ph));
            }
        }
        Self { frames }
    }

    pub fn get(&self, patient_id: &str, frame: usize) -> Option<&(IndexVector, Phase)> {
        self.frames.get(&(patient_id.to_string(), frame))
    }

    /// Restriction to a patient subset.
    pub fn subset(&self, ids: &[String]) -> Self {
        let frames =
            self.frames.iter().filter(|((p, _), _)| ids.contains(p)).map(|(k, v)| (k.clone(), *v)).collect();
        Self { frames }
    }
}

/// Mean and population standard deviation of `|pred - gt|`.
pub fn mae(pred: &[f64], gt: &[f64]) -> (f64, f64) {
    assert_eq!(pred.len(), gt.len(), "aligned vectors");
    let errs: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).collect();
    mean_std(&errs)
}

pub fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn pcc(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!("need two aligned samples, got {} and {}", pred.len(), gt.len())));
    }
    let n = pred.len() as f64;
    let (mp, mg) = (pred.iter().sum::<f64>() / n, gt.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        let (dp, dg) = (p - mp, g - mg);
        sxy += dp * dg;
        sxx += dp * dp;
        syy += dg * dg;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn error_rate(pred: &[Phase], gt: &[Phase]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "aligned vectors");
    if pred.is_empty() {
        return f64::NAN;
    }
    pred.iter().zip(gt).filter(|(a, b)| a != b).count() as f64 / pred.len() as f64
}

/// Scores of one task group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: Task,
    /// MAE mean and std for regression groups; error rate (std 0) for phase.
    pub mae: f64,
    pub mae_std: f64,
    /// Mean of per-index PCCs; `None` for phase or when undefined.
    pub pcc: Option<f64>,
}

/// Per-index (pred, gt) columns over the rows that have ground truth.
fn columns(set: &PredictionSet, gt: &GroundTruth, task: Task) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut cols: Vec<(Vec<f64>, Vec<f64>)> = task.range().map(|_| (Vec::new(), Vec::new())).collect();
    for r in &set.rows {
        let Some((iv, _)) = gt.get(&r.patient_id, r.frame) else { continue };
        let values = r.values.ok_or_else(|| Error::Invalid(format!("config {} has no regression output", set.config_id)))?;
        let g = iv.to_array();
        for (k, i) in task.range().enumerate() {
            cols[k].0.push(values[i]);
            cols[k].1.push(g[i]);
        }
    }
    Ok(cols)
}

pub fn score_task(set: &PredictionSet, gt: &GroundTruth, task: Task) -> Result<TaskScore> {
    if task == Task::Phase {
        let mut p = Vec::new();
        let mut g = Vec::new();
        for r in &set.rows {
            let Some((_, ph)) = gt.get(&r.patient_id, r.frame) else { continue };
            let probs = r.phase.ok_or_else(|| Error::Invalid(format!("config {} has no phase output", set.config_id)))?;
            p.push(Phase::from_probs(probs));
            g.push(*ph);
        }
        return Ok(TaskScore { task, mae: error_rate(&p, &g), mae_std: 0.0, pcc: None });
    }
    let cols = columns(set, gt, task)?;
    let all_p: Vec<f64> = cols.iter().flat_map(|c| c.0.iter().copied()).collect();
    let all_g: Vec<f64> = cols.iter().flat_map(|c| c.1.iter().copied()).collect();
    let (m, s) = mae(&all_p, &all_g);
    let pccs: Vec<f64> = cols.iter().filter_map(|(p, g)| pcc(p, g).ok()).collect();
    let pcc = (pccs.len() == cols.len()).then(|| pccs.iter().sum::<f64>() / pccs.len() as f64);
    Ok(TaskScore { task, mae: m, mae_std: s, pcc })
}

/// Scores for every task the set covers.
pub fn score_all(set: &PredictionSet, gt: &GroundTruth) -> Result<Vec<TaskScore>> {
    let mut out = Vec::new();
    if set.has_regression() {
        for t in Task::REGRESSION {
            out.push(score_task(set, gt, t)?);
        }
    }
    if set.has_phase() {
        out.push(score_task(set, gt, Task::Phase)?);
    }
    Ok(out)
}

/// Per-entry absolute errors of one task, in (patient, frame, index) order.
pub fn absolute_errors(set: &PredictionSet, gt: &GroundTruth, task: Task) -> Result<Vec<f64>> {
    let mut rows: Vec<&PredictionRow> = set.rows.iter().collect();
    rows.sort_by(|a, b| (&a.patient_id, a.frame).cmp(&(&b.patient_id, b.frame)));
    let mut out = Vec::new();
    for r in rows {
        let Some((iv, ph)) = gt.get(&r.patient_id, r.frame) else { continue };
        if task == Task::Phase {
            let p = r.phase.ok_or_else(|| Error::Invalid("no phase output".into()))?;
            out.push(f64::from(u8::from(Phase::from_probs(p) != *ph)));
        } else {
            let v = r.values.ok_or_else(|| Error::Invalid("no regression output".into()))?;
            let g = iv.to_array();
            out.extend(task.range().map(|i| (v[i] - g[i]).abs()));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// min(W+, W-)
    pub statistic: f64,
    pub w_plus: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub p_value: f64,
    pub exact: bool,
    pub significant: bool,
}

pub const WILCOXON_ALPHA: f64 = 0.05;
const EXACT_LIMIT: usize = 25;

/// Mid-ranks of `values` (1-based), ties sharing their average rank.
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided paired test on `a - b`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!("paired samples of lengths {} and {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n < 6 {
        return Err(Error::TooFewPairs(n));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = mid_ranks(&abs);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let statistic = w_plus.min(total - w_plus);
    let (p_value, exact) = if n <= EXACT_LIMIT {
        (exact_p_value(&ranks, w_plus), true)
    } else {
        (normal_p_value(&abs, &ranks, w_plus), false)
    };
    Ok(WilcoxonResult { statistic, w_plus, n, p_value, exact, significant: p_value <= WILCOXON_ALPHA })
}

/// Exact null distribution over all sign assignments, on doubled ranks so
/// that mid-ranks stay integral.
fn exact_p_value(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let w = (2.0 * w_plus).round() as usize;
    let total = 2f64.powi(ranks.len() as i32);
    let lower: f64 = counts[..=w].iter().sum();
    let upper: f64 = counts[w..].iter().sum();
    (2.0 * lower.min(upper) / total).min(1.0)
}

fn normal_p_value(abs: &[f64], ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = abs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|v| **v == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let diff = (w_plus - mean).abs() - 0.5;
    let z = diff.max(0.0) / var.sqrt();
    libm::erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Returns the mean pixel of each input plane as every output.
    struct MeanStub {
        phase: bool,
    }

    impl Predictor for MeanStub {
        fn predict(&self, x: &Tensor) -> Result<RawPrediction> {
            let s = x.shape();
            let (n, d, plane) = (s[0], s[2], s[3] * s[4]);
            let mut reg = Vec::new();
            let mut ph = Vec::new();
            for i in 0..n {
                for z in 0..d {
                    let base = (i * 3 * d + z) * plane;
                    let m = x.data()[base..base + plane].iter().sum::<f64>() / plane as f64;
                    reg.push([m; INDEX_COUNT]);
                    ph.push([m, 1.0 - m]);
                }
            }
            Ok(RawPrediction { regression: Some(reg), phase: self.phase.then_some(ph) })
        }
    }

    /// Reports the first window position's frame value at every position.
    struct StartStub;

    impl Predictor for StartStub {
        fn predict(&self, x: &Tensor) -> Result<RawPrediction> {
            let s = x.shape();
            let (n, d, plane) = (s[0], s[2], s[3] * s[4]);
            let rows = (0..n * d).map(|r| [x.data()[(r / d) * 3 * d * plane]; INDEX_COUNT]).collect();
            Ok(RawPrediction { regression: Some(rows), phase: None })
        }
    }

    fn constant_study(size: usize) -> Study {
        Study {
            patient_id: "P000".into(),
            spacing: 1.0,
            frames: (0..20).map(|t| Grid::from_vec(size, size, vec![t as f32; size * size])).collect(),
            masks: (0..20).map(|_| Grid::new(size, size)).collect(),
            indices: vec![IndexVector::from_array(&[1.0; 11]); 20],
            phase: vec![Phase::Diastole; 20],
        }
    }

    #[test]
    fn corner_offsets_for_canonical_slices() {
        assert_eq!(corner_offsets((300, 300), 224), [(0, 0), (0, 76), (76, 0), (76, 76)]);
    }

    #[test]
    fn four_crops_are_averaged_then_unscaled() {
        // left half 0, right half 1: corner crops see different means
        let size = 40;
        let mut s = constant_study(size);
        for f in &mut s.frames {
            for r in 0..size {
                for c in 0..size {
                    f.set(r, c, if c >= size / 2 { 1.0 } else { 0.0 });
                }
            }
        }
        let crop = 32;
        let mean_of = |c0: usize| (c0..c0 + crop).filter(|&c| c >= size / 2).count() as f64 / crop as f64;
        let expected = (mean_of(0) * 2.0 + mean_of(8) * 2.0) / 4.0;
        let scaler = TargetScaler { min: [10.0; 11], max: [20.0; 11] };
        let p = predict_2d(&MeanStub { phase: true }, Some(&scaler), &s, InputMode::Replicate, crop).unwrap();
        assert_eq!(p.len(), 20);
        let v = p[3].regression.unwrap();
        assert!((v[0] - (10.0 + 10.0 * expected)).abs() < 1e-12);
        let ph = p[3].phase.unwrap();
        assert!((ph[0] + ph[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn window_average_matches_enumeration() {
        let s = constant_study(8);
        for ns in [3, 5, 7, 10] {
            let p = predict_3d(&MeanStub { phase: false }, None, &s, ns, 8).unwrap();
            let q = predict_3d(&StartStub, None, &s, ns, 8).unwrap();
            for t in 0..20 {
                let starts = covering_windows(t, ns, 20);
                assert_eq!(starts.len(), ns);
                assert_eq!(p[t].regression.unwrap()[0], t as f64);
                let brute = starts.iter().map(|&k| k as f64).sum::<f64>() / ns as f64;
                assert_eq!(q[t].regression.unwrap()[0], brute);
            }
        }
        assert_eq!(covering_windows(0, 5, 20), vec![0, 16, 17, 18, 19]);
    }

    #[test]
    fn metric_examples() {
        let gt = [1.0, 2.0, 4.0, 8.0];
        assert_eq!(mae(&gt, &gt), (0.0, 0.0));
        assert_eq!(pcc(&gt, &gt).unwrap(), 1.0);
        let shifted: Vec<f64> = gt.iter().map(|v| v + 5.0).collect();
        assert_eq!(mae(&shifted, &gt).0, 5.0);
        assert!((pcc(&shifted, &gt).unwrap() - 1.0).abs() < 1e-12);
        let centered = [-1.5, -0.5, 0.5, 1.5];
        let neg: Vec<f64> = centered.iter().map(|v| -v).collect();
        assert!((pcc(&neg, &centered).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(pcc(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::UndefinedCorrelation(_))));
        let p = [Phase::Systole, Phase::Diastole];
        assert_eq!(error_rate(&p, &p), 0.0);
        assert_eq!(error_rate(&p, &[Phase::Systole, Phase::Systole]), 0.5);
    }

    #[test]
    fn wilcoxon_examples() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        assert!(matches!(wilcoxon_signed_rank(&a, &a), Err(Error::TooFewPairs(0))));
        let b: Vec<f64> = (0..10).map(|i| i as f64 * 0.37).collect();
        let a: Vec<f64> = b.iter().map(|v| v + 1.0).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!(r.exact && r.significant);
        assert!((r.p_value - 2.0 / 1024.0).abs() < 1e-15);
    }

    #[test]
    fn wilcoxon_is_calibrated_on_null_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rejections = 0;
        for _ in 0..1000 {
            let a: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0)).collect();
            rejections += usize::from(wilcoxon_signed_rank(&a, &b).unwrap().significant);
        }
        assert!(rejections <= 100, "{rejections}");
    }

    #[test]
    fn normal_branch_agrees_with_exact_near_the_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let d: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.5)).collect();
            let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
            let ranks = mid_ranks(&abs);
            let w: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
            let exact = exact_p_value(&ranks, w);
            let approx = normal_p_value(&abs, &ranks, w);
            assert!((exact - approx).abs() < 0.02, "{exact} vs {approx}");
        }
    }

    #[test]
    fn prediction_table_round_trip() {
        let mut set = PredictionSet::new("abc");
        set.push_study("P001", 2, &[FramePrediction { regression: Some([0.1; 11]), phase: Some([0.25, 0.75]) }]);
        set.push_study("P000", 0, &[FramePrediction { regression: Some([1.0 / 3.0; 11]), phase: None }]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        set.write_csv(&path).unwrap();
        assert_eq!(PredictionSet::read_csv(&path).unwrap(), set);
    }

    #[test]
    fn table_validation() {
        let mut set = PredictionSet::new("v");
        set.push_study("P000", 0, &[FramePrediction { regression: Some([1.0; 11]), phase: Some([0.4, 0.6]) }; 3]);
        assert!(set.validate().is_ok());
        let mut dup = set.clone();
        dup.rows.push(dup.rows[0].clone());
        assert!(dup.validate().is_err());
        let mut bad = set.clone();
        bad.rows[1].phase = Some([0.4, 0.5]);
        assert!(bad.validate().is_err());
        bad.rows[1].phase = Some([0.4, 0.6]);
        bad.rows[2].values.as_mut().unwrap()[3] = f64::NAN;
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn metrics_are_permutation_invariant(v in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 3..40), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let (p, g): (Vec<f64>, Vec<f64>) = v.iter().cloned().unzip();
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let p2: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
            let g2: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
            let (a, b) = (mae(&p, &g), mae(&p2, &g2));
            prop_assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9 && a.0 >= 0.0);
            if let (Ok(x), Ok(y)) = (pcc(&p, &g), pcc(&p2, &g2)) {
                prop_assert!((x - y).abs() < 1e-9 && (-1.0..=1.0).contains(&x));
            }
        }
    }
}
