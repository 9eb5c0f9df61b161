//! Study storage, canonical preprocessing, target scaling and fold plans.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{sample_bilinear, sample_nearest, Border, Grid};
use crate::indices::{IndexVector, Phase, INDEX_COUNT, INDEX_NAMES};

/// Side of the canonical slice, px at 1 mm/px.
pub const CANONICAL_SIZE: usize = 300;
pub const FOLDS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Study {
    pub patient_id: String,
    /// mm/px
    pub spacing: f64,
    pub frames: Vec<Grid<f32>>,
    pub masks: Vec<Grid<u8>>,
    pub indices: Vec<IndexVector>,
    pub phase: Vec<Phase>,
}

impl Study {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.frames.first().map(|f| f.shape()).unwrap_or((0, 0))
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    id: String,
    spacing: f64,
    /// [T, H, W]
    shape: [usize; 3],
    dtype: String,
    mask_dtype: String,
}

#[derive(Serialize, Deserialize)]
struct FrameTargets {
    frame: usize,
    values: [f64; INDEX_COUNT],
    phase: Phase,
}

#[derive(Serialize, Deserialize)]
struct IndicesFile {
    names: Vec<String>,
    frames: Vec<FrameTargets>,
}

pub fn write_study(dir: &Path, study: &Study) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let (h, w) = study.shape();
    let t = study.frame_count();
    let meta = Meta {
        id: study.patient_id.clone(),
        spacing: study.spacing,
        shape: [t, h, w],
        dtype: "float32".into(),
        mask_dtype: "uint8".into(),
    };
    write_json(&dir.join("meta.json"), &meta)?;

    let mut frames = Vec::with_capacity(t * h * w * 4);
    for f in &study.frames {
        for v in &f.data {
            frames.extend_from_slice(&v.to_le_bytes());
        }
    }
    let path = dir.join("frames.bin");
    fs::write(&path, frames).map_err(Error::io(&path))?;

    let masks: Vec<u8> = study.masks.iter().flat_map(|m| m.data.iter().copied()).collect();
    let path = dir.join("masks.bin");
    fs::write(&path, masks).map_err(Error::io(&path))?;

    let indices = IndicesFile {
        names: INDEX_NAMES.iter().map(|s| s.to_string()).collect(),
        frames: study
            .indices
            .iter()
            .zip(&study.phase)
            .enumerate()
            .map(|(frame, (iv, &phase))| FrameTargets { frame, values: iv.to_array(), phase })
            .collect(),
    };
    write_json(&dir.join("indices.json"), &indices)
}

pub fn read_study(dir: &Path) -> Result<Study> {
    let meta: Meta = read_json(&dir.join("meta.json"))?;
    let [t, h, w] = meta.shape;
    let path = dir.join("frames.bin");
    let raw = fs::read(&path).map_err(Error::io(&path))?;
    if raw.len() != t * h * w * 4 {
        return Err(Error::Invalid(format!("{}: expected {} bytes, found {}", path.display(), t * h * w * 4, raw.len())));
    }
    let values: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let frames = values.chunks(h * w).map(|c| Grid::from_vec(h, w, c.to_vec())).collect();

    let path = dir.join("masks.bin");
    let raw = fs::read(&path).map_err(Error::io(&path))?;
    if raw.len() != t * h * w {
        return Err(Error::Invalid(format!("{}: expected {} bytes, found {}", path.display(), t * h * w, raw.len())));
    }
    let masks = raw.chunks(h * w).map(|c| Grid::from_vec(h, w, c.to_vec())).collect();

    let targets: IndicesFile = read_json(&dir.join("indices.json"))?;
    if targets.frames.len() != t {
        return Err(Error::Invalid(format!("{}: {} target rows for {t} frames", dir.display(), targets.frames.len())));
    }
    Ok(Study {
        patient_id: meta.id,
        spacing: meta.spacing,
        frames,
        masks,
        indices: targets.frames.iter().map(|f| IndexVector::from_array(&f.values)).collect(),
        phase: targets.frames.iter().map(|f| f.phase).collect(),
    })
}

/// Study directories directly under `dir`, in id order.
pub fn study_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        if path.join("meta.json").is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Study>> {
    study_dirs(dir)?.iter().map(|d| read_study(d)).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(Error::io(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Resamples to 1 mm/px and center-crops or pads to 300x300 in one pass.
fn to_canonical<T, F>(n_rows: usize, n_cols: usize, spacing: f64, sample: F) -> Grid<T>
where
    T: Copy + Default,
    F: Fn(f64, f64) -> T,
{
    let resampled = |n: usize| (n as f64 * spacing).round() as isize;
    let (mh, mw) = (resampled(n_rows), resampled(n_cols));
    let off_r = (mh - CANONICAL_SIZE as isize).div_euclid(2);
    let off_c = (mw - CANONICAL_SIZE as isize).div_euclid(2);
    let mut out = Grid::new(CANONICAL_SIZE, CANONICAL_SIZE);
    for r in 0..CANONICAL_SIZE {
        let rr = r as isize + off_r;
        if rr < 0 || rr >= mh {
            continue;
        }
        let y = (rr as f64 + 0.5) / spacing - 0.5;
        for c in 0..CANONICAL_SIZE {
            let cc = c as isize + off_c;
            if cc < 0 || cc >= mw {
                continue;
            }
            let x = (cc as f64 + 0.5) / spacing - 0.5;
            out.set(r, c, sample(y, x));
        }
    }
    out
}

/// Side length after resampling an `n`-pixel axis to 1 mm/px.
pub fn resampled_size(n: usize, spacing: f64) -> usize {
    (n as f64 * spacing).round() as usize
}

/// Percentile clip, standardization and min-max map to [0, 1] of one slice.
pub fn normalize_slice(slice: &mut Grid<f32>) {
    let n = slice.data.len();
    if n == 0 {
        return;
    }
    let mut sorted: Vec<f32> = slice.data.clone();
    sorted.sort_by(f32::total_cmp);
    // lower/higher nearest rank keep a second pass idempotent
    let lo = sorted[((0.01 * (n - 1) as f64).floor()) as usize] as f64;
    let hi = sorted[((0.99 * (n - 1) as f64).ceil()) as usize] as f64;
    let clipped: Vec<f64> = slice.data.iter().map(|&v| (v as f64).clamp(lo, hi)).collect();
    let mean = clipped.iter().sum::<f64>() / n as f64;
    let std = (clipped.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    if !(std > 0.0) {
        log::warn!("EmptySlice: constant slice mapped to zeros");
        slice.fill_default();
        return;
    }
    let z: Vec<f64> = clipped.iter().map(|v| (v - mean) / std).collect();
    let (zmin, zmax) = z.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    for (dst, v) in slice.data.iter_mut().zip(z) {
        *dst = ((v - zmin) / (zmax - zmin)) as f32;
    }
}

/// Canonical space: 1 mm/px, 300x300, per-slice intensities in [0, 1].
pub fn preprocess_study(study: &Study) -> Study {
    let sp = study.spacing;
    let frames = study
        .frames
        .iter()
        .map(|f| {
            let mut g = to_canonical(f.height, f.width, sp, |y, x| sample_bilinear(f, y, x, Border::Clamp) as f32);
            normalize_slice(&mut g);
            g
        })
        .collect();
    let masks = study
        .masks
        .iter()
        .map(|m| to_canonical(m.height, m.width, sp, |y, x| sample_nearest(m, y, x)))
        .collect();
    Study {
        patient_id: study.patient_id.clone(),
        spacing: 1.0,
        frames,
        masks,
        // targets are already in mm / mm^2
        indices: study.indices.clone(),
        phase: study.phase.clone(),
    }
}

/// Per-index min-max scaling of the regression targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub min: [f64; INDEX_COUNT],
    pub max: [f64; INDEX_COUNT],
}

impl TargetScaler {
    pub fn fit<'a>(targets: impl IntoIterator<Item = &'a IndexVector>) -> Result<Self> {
        let mut min = [f64::INFINITY; INDEX_COUNT];
        let mut max = [f64::NEG_INFINITY; INDEX_COUNT];
        let mut count = 0;
        for iv in targets {
            for (i, v) in iv.to_array().into_iter().enumerate() {
                min[i] = min[i].min(v);
                max[i] = max[i].max(v);
            }
            count += 1;
        }
        if count < 2 {
            return Err(Error::Invalid(format!("target scaler needs at least 2 samples, got {count}")));
        }
        if let Some(index) = (0..INDEX_COUNT).find(|&i| !(max[i] > min[i])) {
            return Err(Error::DegenerateScaler { index });
        }
        Ok(Self { min, max })
    }

    pub fn fit_studies(studies: &[&Study]) -> Result<Self> {
        Self::fit(studies.iter().flat_map(|s| s.indices.iter()))
    }

    pub fn apply(&self, x: &[f64; INDEX_COUNT]) -> [f64; INDEX_COUNT] {
        std::array::from_fn(|i| (x[i] - self.min[i]) / (self.max[i] - self.min[i]))
    }

    pub fn invert(&self, y: &[f64; INDEX_COUNT]) -> [f64; INDEX_COUNT] {
        std::array::from_fn(|i| y[i] * (self.max[i] - self.min[i]) + self.min[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Half {
    /// ensemble selection
    A,
    /// ensemble evaluation
    B,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub id: String,
    pub fold: usize,
    pub half: Half,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub folds: usize,
    /// In shuffled order; the fold of position `i` is `i % folds`.
    pub assignments: Vec<FoldAssignment>,
}

pub fn make_fold_plan(patient_ids: &[String], seed: u64) -> Result<FoldPlan> {
    make_fold_plan_k(patient_ids, FOLDS, seed)
}

pub fn make_fold_plan_k(patient_ids: &[String], folds: usize, seed: u64) -> Result<FoldPlan> {
    if folds < 2 || patient_ids.len() < 2 * folds {
        return Err(Error::Invalid(format!(
            "{} patients cannot be split into {folds} folds of two halves",
            patient_ids.len()
        )));
    }
    let mut ids: Vec<String> = patient_ids.to_vec();
    ids.sort();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Invalid("duplicate patient id".into()));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignments: Vec<FoldAssignment> =
        ids.into_iter().enumerate().map(|(i, id)| FoldAssignment { id, fold: i % folds, half: Half::A }).collect();
    for k in 0..folds {
        let members: Vec<usize> = (0..assignments.len()).filter(|&i| assignments[i].fold == k).collect();
        let first = members.len().div_ceil(2);
        for &i in &members[first..] {
            assignments[i].half = Half::B;
        }
    }
    Ok(FoldPlan { seed, folds, assignments })
}

impl FoldPlan {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignments.iter().find(|a| a.id == id).map(|a| a.fold)
    }

    pub fn half_of(&self, id: &str) -> Option<Half> {
        self.assignments.iter().find(|a| a.id == id).map(|a| a.half)
    }

    /// Held-out patients of fold `k`.
    pub fn fold_members(&self, k: usize) -> Vec<String> {
        self.assignments.iter().filter(|a| a.fold == k).map(|a| a.id.clone()).collect()
    }

    /// Patients trained on when fold `k` is held out.
    pub fn training_ids(&self, k: usize) -> Vec<String> {
        self.assignments.iter().filter(|a| a.fold != k).map(|a| a.id.clone()).collect()
    }

    pub fn half_members(&self, k: usize, half: Half) -> Vec<String> {
        self.assignments.iter().filter(|a| a.fold == k && a.half == half).map(|a| a.id.clone()).collect()
    }

    /// Union over folds of one half.
    pub fn half_union(&self, half: Half) -> Vec<String> {
        self.assignments.iter().filter(|a| a.half == half).map(|a| a.id.clone()).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        (0..self.folds).map(|k| self.assignments.iter().filter(|a| a.fold == k).count()).collect()
    }
}

impl<T: Copy + Default> Grid<T> {
    pub fn fill_default(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::default());
    }
}
