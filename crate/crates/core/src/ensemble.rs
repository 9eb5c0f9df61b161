//! Per-task optimal-subset ensembles and the nested half-split protocol.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{FoldPlan, Half, Study};
use crate::error::{Error, Result};
use crate::evaluate::{GroundTruth, PredictionRow, PredictionSet};
use crate::indices::{Phase, Task, INDEX_COUNT};
use crate::train::{predict_studies, Configuration, JobStore};

pub const MAX_CANDIDATES: usize = 20;
pub const DEFAULT_TOP_K: usize = 20;

/// Result of one per-task subset search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSelection {
    pub task: Task,
    /// Selected config ids, sorted.
    pub members: Vec<String>,
    pub selection_error: f64,
    /// Error on the held-back half, nested protocol only.
    pub evaluation_error: Option<f64>,
    pub pool_hash: String,
    pub candidates: Vec<String>,
    pub selection_patients: Vec<String>,
    pub evaluation_patients: Vec<String>,
}

impl EnsembleSelection {
    /// True when no patient was used for both selection and evaluation.
    pub fn audit_disjoint(&self) -> bool {
        let sel: BTreeSet<&String> = self.selection_patients.iter().collect();
        !self.evaluation_patients.iter().any(|p| sel.contains(p))
    }
}

pub fn pool_hash(ids: &[String]) -> String {
    let mut sorted: Vec<&str> = ids.iter().map(String::as_str).collect();
    sorted.sort_unstable();
    hex::encode(&Sha256::digest(sorted.join("\n").as_bytes())[..8])
}

fn supports(set: &PredictionSet, task: Task) -> bool {
    if task == Task::Phase {
        set.has_phase()
    } else {
        set.has_regression()
    }
}

/// Candidate predictions laid out as flat vectors over a fixed key order.
struct TaskMatrix {
    task: Task,
    ids: Vec<String>,
    /// one row per candidate; regression: task columns per frame, phase: (p_sys, p_dia) per frame
    rows: Vec<Vec<f64>>,
    truth: Vec<f64>,
    phases: Vec<Phase>,
}

impl TaskMatrix {
    fn build(sets: &[&PredictionSet], gt: &GroundTruth, task: Task, patients: &BTreeSet<String>) -> Result<Self> {
        let keys: Vec<&(String, usize)> = gt.frames.keys().filter(|(p, _)| patients.contains(p)).collect();
        if keys.is_empty() {
            return Err(Error::Invalid(format!("no ground truth for the {} task", task.name())));
        }
        let mut truth = Vec::new();
        let mut phases = Vec::new();
        for key in &keys {
            let (iv, ph) = &gt.frames[*key];
            let a = iv.to_array();
            truth.extend(task.range().map(|i| a[i]));
            phases.push(*ph);
        }
        let mut rows = Vec::with_capacity(sets.len());
        for set in sets {
            let index: BTreeMap<(&str, usize), &PredictionRow> =
                set.rows.iter().map(|r| ((r.patient_id.as_str(), r.frame), r)).collect();
            let mut row = Vec::with_capacity(truth.len().max(2 * keys.len()));
            for (p, f) in &keys {
                let r = index.get(&(p.as_str(), *f)).ok_or_else(|| {
                    Error::Invalid(format!("config {} has no prediction for {p} frame {f}", set.config_id))
                })?;
                if task == Task::Phase {
                    let pr = r.phase.ok_or_else(|| Error::Invalid(format!("config {} has no phase output", set.config_id)))?;
                    row.extend_from_slice(&pr);
                } else {
                    let v = r.values.ok_or_else(|| Error::Invalid(format!("config {} has no regression output", set.config_id)))?;
                    row.extend(task.range().map(|i| v[i]));
                }
            }
            rows.push(row);
        }
        Ok(Self { task, ids: sets.iter().map(|s| s.config_id.clone()).collect(), rows, truth, phases })
    }

    /// Error of the mean of `n` summed member rows.
    fn error_from_sum(&self, sum: &[f64], n: usize) -> f64 {
        let k = n as f64;
        if self.task == Task::Phase {
            let wrong = sum
                .chunks_exact(2)
                .zip(&self.phases)
                .filter(|(p, g)| Phase::from_probs([p[0] / k, p[1] / k]) != **g)
                .count();
            wrong as f64 / self.phases.len() as f64
        } else {
            let total: f64 = sum.iter().zip(&self.truth).map(|(s, g)| (s / k - g).abs()).sum();
            total / self.truth.len() as f64
        }
    }

    /// Reference evaluation: members summed in ascending candidate order.
    fn subset_error(&self, members: &[usize]) -> f64 {
        let mut sum = vec![0.0; self.rows[0].len()];
        let mut sorted = members.to_vec();
        sorted.sort_unstable();
        for &m in &sorted {
            for (s, v) in sum.iter_mut().zip(&self.rows[m]) {
                *s += v;
            }
        }
        self.error_from_sum(&sum, sorted.len())
    }

    fn member_ids(&self, members: &[usize]) -> Vec<String> {
        let mut ids: Vec<String> = members.iter().map(|&m| self.ids[m].clone()).collect();
        ids.sort();
        ids
    }
}

/// Total order used to pick among equal-error subsets.
fn better(err: f64, ids: &[String], best_err: f64, best_ids: &[String]) -> bool {
    match err.partial_cmp(&best_err) {
        Some(std::cmp::Ordering::Less) => true,
        Some(std::cmp::Ordering::Equal) => (ids.len(), ids) < (best_ids.len(), best_ids),
        _ => best_err.is_nan() && !err.is_nan(),
    }
}

/// Depth-first enumeration of all non-empty subsets. Each node's running
/// sum is its parent's plus one member, so every subset is summed in
/// ascending candidate order, exactly as `subset_error` does.
fn exhaustive(m: &TaskMatrix) -> (Vec<usize>, f64) {
    let n = m.rows.len();
    let width = m.rows[0].len();
    let mut best: (Vec<usize>, Vec<String>, f64) = (Vec::new(), Vec::new(), f64::NAN);
    let mut stack: Vec<Vec<f64>> = vec![vec![0.0; width]; n + 1];
    let mut members = Vec::with_capacity(n);

    fn visit(
        m: &TaskMatrix,
        next: usize,
        depth: usize,
        stack: &mut Vec<Vec<f64>>,
        members: &mut Vec<usize>,
        best: &mut (Vec<usize>, Vec<String>, f64),
    ) {
        for c in next..m.rows.len() {
            let (lo, hi) = stack.split_at_mut(depth + 1);
            for ((dst, base), v) in hi[0].iter_mut().zip(&lo[depth]).zip(&m.rows[c]) {
                *dst = base + v;
            }
            members.push(c);
            let err = m.error_from_sum(&stack[depth + 1], members.len());
            if best.0.is_empty() || err <= best.2 || best.2.is_nan() {
                let ids = m.member_ids(members);
                if best.0.is_empty() || better(err, &ids, best.2, &best.1) {
                    *best = (members.clone(), ids, err);
                }
            }
            visit(m, c + 1, depth + 1, stack, members, best);
            members.pop();
        }
    }

    visit(m, 0, 0, &mut stack, &mut members, &mut best);
    (best.0, best.2)
}

/// Per task, config ids ordered by individual error (ties by id), top `k`.
pub fn rank_candidates(sets: &[&PredictionSet], gt: &GroundTruth, k: usize) -> Result<BTreeMap<Task, Vec<String>>> {
    if sets.is_empty() {
        return Err(Error::Invalid("no prediction sets to rank".into()));
    }
    let patients: BTreeSet<String> = gt.frames.keys().map(|(p, _)| p.clone()).collect();
    let mut out = BTreeMap::new();
    for task in Task::ALL {
        let usable: Vec<&PredictionSet> = sets.iter().copied().filter(|s| supports(s, task)).collect();
        if usable.is_empty() {
            continue;
        }
        let m = TaskMatrix::build(&usable, gt, task, &patients)?;
        let mut scored: Vec<(f64, &String)> = (0..usable.len()).map(|i| (m.subset_error(&[i]), &m.ids[i])).collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
        out.insert(task, scored.into_iter().take(k).map(|(_, id)| id.clone()).collect());
    }
    Ok(out)
}

fn search_on(sets: &[&PredictionSet], gt: &GroundTruth, task: Task, patients: &BTreeSet<String>) -> Result<(TaskMatrix, Vec<usize>, f64)> {
    if sets.is_empty() {
        return Err(Error::Invalid(format!("no candidates for the {} task", task.name())));
    }
    if sets.len() > MAX_CANDIDATES {
        return Err(Error::CandidateOverflow(sets.len()));
    }
    let m = TaskMatrix::build(sets, gt, task, patients)?;
    let (members, err) = exhaustive(&m);
    Ok((m, members, err))
}

/// Exhaustive search for the subset whose mean prediction has the lowest
/// task error on every patient in `gt`.
pub fn search_optimal_subset(candidates: &[&PredictionSet], gt: &GroundTruth, task: Task) -> Result<EnsembleSelection> {
    let patients: BTreeSet<String> = gt.frames.keys().map(|(p, _)| p.clone()).collect();
    let (m, members, err) = search_on(candidates, gt, task, &patients)?;
    Ok(EnsembleSelection {
        task,
        members: m.member_ids(&members),
        selection_error: err,
        evaluation_error: None,
        pool_hash: pool_hash(&m.ids),
        candidates: m.ids.clone(),
        selection_patients: patients.into_iter().collect(),
        evaluation_patients: Vec::new(),
    })
}

/// Error of the mean of `members` on the patients in `gt`, evaluated the
/// same way the search does.
pub fn subset_error(sets: &[&PredictionSet], members: &[String], gt: &GroundTruth, task: Task) -> Result<f64> {
    let patients: BTreeSet<String> = gt.frames.keys().map(|(p, _)| p.clone()).collect();
    let chosen: Vec<&PredictionSet> = sets.iter().copied().filter(|s| members.contains(&s.config_id)).collect();
    if chosen.len() != members.len() || chosen.is_empty() {
        return Err(Error::Invalid(format!("subset {members:?} not found among candidates")));
    }
    let m = TaskMatrix::build(&chosen, gt, task, &patients)?;
    Ok(m.subset_error(&(0..chosen.len()).collect::<Vec<_>>()))
}

fn ranked<'a>(sets: &[&'a PredictionSet], gt: &GroundTruth, task: Task, k: usize) -> Result<Vec<&'a PredictionSet>> {
    let usable: Vec<&PredictionSet> = sets.iter().copied().filter(|s| supports(s, task)).collect();
    if usable.is_empty() {
        return Ok(Vec::new());
    }
    let ranking = rank_candidates(&usable, gt, k)?;
    let ids = ranking.get(&task).cloned().unwrap_or_default();
    Ok(ids.iter().filter_map(|id| usable.iter().copied().find(|s| &s.config_id == id)).collect())
}

/// Ranking plus search on all patients, for every task some config supports.
pub fn select_all(sets: &[&PredictionSet], gt: &GroundTruth, k: usize) -> Result<Vec<EnsembleSelection>> {
    let mut out = Vec::new();
    for task in Task::ALL {
        let pool = ranked(sets, gt, task, k)?;
        if !pool.is_empty() {
            out.push(search_optimal_subset(&pool, gt, task)?);
        }
    }
    Ok(out)
}

/// Ranks and selects on the half-A patients of every fold, then scores the
/// chosen subset on the half-B patients only.
pub fn nested_protocol(sets: &[&PredictionSet], gt: &GroundTruth, plan: &FoldPlan, k: usize) -> Result<Vec<EnsembleSelection>> {
    let sel_ids = plan.half_union(Half::A);
    let eval_ids = plan.half_union(Half::B);
    let sel_gt = gt.subset(&sel_ids);
    let eval_gt = gt.subset(&eval_ids);
    let mut out = Vec::new();
    for task in Task::ALL {
        let pool = ranked(sets, &sel_gt, task, k)?;
        if pool.is_empty() {
            continue;
        }
        let mut selection = search_optimal_subset(&pool, &sel_gt, task)?;
        selection.evaluation_error = Some(subset_error(&pool, &selection.members, &eval_gt, task)?);
        selection.evaluation_patients = eval_gt.frames.keys().map(|(p, _)| p.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        if !selection.audit_disjoint() {
            return Err(Error::Invalid("selection and evaluation patients overlap".into()));
        }
        out.push(selection);
    }
    Ok(out)
}

/// Row-wise mean of prediction sets over the same (patient, frame) keys.
/// Phase pairs are averaged in probability space. The fold column is taken
/// from the first set.
pub fn average_sets(sets: &[&PredictionSet], config_id: &str) -> Result<PredictionSet> {
    let first = sets.first().ok_or_else(|| Error::Invalid("nothing to average".into()))?;
    let n = sets.len() as f64;
    let mut out = PredictionSet::new(config_id);
    let lookups: Vec<BTreeMap<(&str, usize), &PredictionRow>> = sets
        .iter()
        .map(|s| s.rows.iter().map(|r| ((r.patient_id.as_str(), r.frame), r)).collect())
        .collect();
    for row in &first.rows {
        let mut values = row.values.map(|_| [0.0; INDEX_COUNT]);
        let mut phase = row.phase.map(|_| [0.0; 2]);
        for (set, lookup) in sets.iter().zip(&lookups) {
            let r = lookup.get(&(row.patient_id.as_str(), row.frame)).ok_or_else(|| {
                Error::Invalid(format!("config {} lacks {} frame {}", set.config_id, row.patient_id, row.frame))
            })?;
            match (&mut values, r.values) {
                (Some(acc), Some(v)) => acc.iter_mut().zip(v).for_each(|(a, x)| *a += x),
                (None, _) => {}
                (Some(_), None) => values = None,
            }
            match (&mut phase, r.phase) {
                (Some(acc), Some(p)) => acc.iter_mut().zip(p).for_each(|(a, x)| *a += x),
                (None, _) => {}
                (Some(_), None) => phase = None,
            }
        }
        out.rows.push(PredictionRow {
            patient_id: row.patient_id.clone(),
            frame: row.frame,
            values: values.map(|a| a.map(|x| x / n)),
            phase: phase.map(|a| a.map(|x| x / n)),
            fold: row.fold,
        });
    }
    out.sort();
    Ok(out)
}

/// One configuration's prediction on unseen studies: the mean over its
/// fold models. The fold column holds the number of fold models.
pub fn fold_averaged(config: &Configuration, store: &JobStore, folds: usize, studies: &[&Study], crop: usize) -> Result<PredictionSet> {
    let id = config.id();
    let mut per_fold = Vec::with_capacity(folds);
    for fold in 0..folds {
        if !store.checkpoint_dir(&id, fold).join("manifest.json").is_file() {
            return Err(Error::MissingCheckpoint(format!("{id} fold {fold}")));
        }
        let (model, scaler) = store.load_fold_model(&id, fold)?;
        per_fold.push(predict_studies(config, &model, &scaler, studies, folds, crop)?);
    }
    let refs: Vec<&PredictionSet> = per_fold.iter().collect();
    average_sets(&refs, &id)
}

/// Prediction of an ensemble on unseen studies: each member averages its
/// fold models, then members are averaged.
pub fn ensemble_predict(
    members: &[Configuration],
    store: &JobStore,
    folds: usize,
    studies: &[&Study],
    crop: usize,
    config_id: &str,
) -> Result<PredictionSet> {
    if members.is_empty() {
        return Err(Error::Invalid("empty ensemble".into()));
    }
    let per_config = members.iter().map(|c| fold_averaged(c, store, folds, studies, crop)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PredictionSet> = per_config.iter().collect();
    average_sets(&refs, config_id)
}
