//! The eleven left-ventricle indices and per-frame cardiac phase.
//!
//! Geometry conventions shared with the phantom generator:
//! angles are measured counter-clockwise from the +column axis with "up"
//! being the -row direction; dimension `k` is the cavity chord through the
//! cavity centroid along `60k` degrees; wall sector `k` spans
//! `[60k - 30, 60k + 30)` degrees.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{label, Grid};

pub const INDEX_COUNT: usize = 11;

pub const INDEX_NAMES: [&str; INDEX_COUNT] = [
    "cavity_area",
    "myo_area",
    "dim1",
    "dim2",
    "dim3",
    "rwt1",
    "rwt2",
    "rwt3",
    "rwt4",
    "rwt5",
    "rwt6",
];

/// Angular step of the boundary ray march, degrees.
pub const RAY_STEP_DEG: usize = 1;
const MARCH_STEP_PX: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexVector {
    /// mm^2
    pub cavity_area: f64,
    /// mm^2
    pub myo_area: f64,
    /// mm, along 0, 60 and 120 degrees
    pub dims: [f64; 3],
    /// mm, six 60-degree sectors counter-clockwise from 0 degrees
    pub rwt: [f64; 6],
}

impl IndexVector {
    pub fn to_array(&self) -> [f64; INDEX_COUNT] {
        let mut a = [0.0; INDEX_COUNT];
        a[0] = self.cavity_area;
        a[1] = self.myo_area;
        a[2..5].copy_from_slice(&self.dims);
        a[5..].copy_from_slice(&self.rwt);
        a
    }

    pub fn from_array(a: &[f64; INDEX_COUNT]) -> Self {
        let mut dims = [0.0; 3];
        let mut rwt = [0.0; 6];
        dims.copy_from_slice(&a[2..5]);
        rwt.copy_from_slice(&a[5..]);
        Self { cavity_area: a[0], myo_area: a[1], dims, rwt }
    }

    /// Targets after resizing the anatomy by `s`: areas scale by `s^2`, lengths by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let mut a = self.to_array();
        for (i, v) in a.iter_mut().enumerate() {
            *v *= if Task::Areas.range().contains(&i) { s * s } else { s };
        }
        Self::from_array(&a)
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite() && *v > 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Systole,
    Diastole,
}

impl Phase {
    /// Class index used by the phase head: systole 0, diastole 1.
    pub fn class(self) -> usize {
        match self {
            Phase::Systole => 0,
            Phase::Diastole => 1,
        }
    }

    pub fn from_class(c: usize) -> Self {
        if c == 0 {
            Phase::Systole
        } else {
            Phase::Diastole
        }
    }

    /// Decision from a probability pair `[p_systole, p_diastole]`.
    pub fn from_probs(p: [f64; 2]) -> Self {
        if p[0] > p[1] {
            Phase::Systole
        } else {
            Phase::Diastole
        }
    }
}

/// Task groups that are scored and ensembled separately.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Areas,
    Dimensions,
    Rwt,
    Phase,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Areas, Task::Dimensions, Task::Rwt, Task::Phase];
    pub const REGRESSION: [Task; 3] = [Task::Areas, Task::Dimensions, Task::Rwt];

    /// Positions in the flat index order; empty for the phase task.
    pub fn range(self) -> std::ops::Range<usize> {
        match self {
            Task::Areas => 0..2,
            Task::Dimensions => 2..5,
            Task::Rwt => 5..11,
            Task::Phase => 0..0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Areas => "areas",
            Task::Dimensions => "dimensions",
            Task::Rwt => "rwt",
            Task::Phase => "phase",
        }
    }
}

/// Direction of a ray at `deg` in (row, column) index units.
#[inline]
pub fn ray_direction(deg: f64) -> (f64, f64) {
    let t = deg.to_radians();
    (-t.sin(), t.cos())
}

/// Wall sector containing the angle `deg`.
#[inline]
pub fn sector_of(deg: f64) -> usize {
    let shifted = (deg + 30.0).rem_euclid(360.0);
    ((shifted / 60.0) as usize).min(5)
}

/// Endocardial and epicardial radii (pixels) along one ray.
#[derive(Clone, Copy, Debug)]
struct RayHit {
    endo: f64,
    epi: f64,
}

/// Bilinear interpolation of an indicator over pixel centers.
#[inline]
fn indicator(mask: &Grid<u8>, y: f64, x: f64, pred: impl Fn(u8) -> bool) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= mask.height as isize || c >= mask.width as isize {
            0.0
        } else if pred(mask.data[r as usize * mask.width + c as usize]) {
            1.0
        } else {
            0.0
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
    let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn march(mask: &Grid<u8>, cy: f64, cx: f64, deg: f64) -> Result<RayHit> {
    let (dy, dx) = ray_direction(deg);
    let max_r = ((mask.height * mask.height + mask.width * mask.width) as f64).sqrt() + 2.0;
    let inside_cavity = |s: f64| indicator(mask, cy + s * dy, cx + s * dx, |l| l == label::CAVITY);
    let inside_wall = |s: f64| indicator(mask, cy + s * dy, cx + s * dx, |l| l != label::BACKGROUND);
    let is_myo = |s: f64| {
        let r = (cy + s * dy + 0.5).floor();
        let c = (cx + s * dx + 0.5).floor();
        r >= 0.0
            && c >= 0.0
            && (r as usize) < mask.height
            && (c as usize) < mask.width
            && mask.get(r as usize, c as usize) == label::MYOCARDIUM
    };

    let crossing = |f: &dyn Fn(f64) -> f64, from: f64| -> Option<f64> {
        let mut prev_s = from;
        let mut prev = f(from);
        let mut s = from;
        while s < max_r {
            s += MARCH_STEP_PX;
            let v = f(s);
            if v < 0.5 {
                // linear interpolation of the 0.5 level between samples
                let t = if prev > v { (prev - 0.5) / (prev - v) } else { 0.0 };
                return Some(prev_s + t * (s - prev_s));
            }
            prev = v;
            prev_s = s;
        }
        None
    };

    if inside_cavity(0.0) < 0.5 {
        return Err(Error::DegenerateMask(format!(
            "cavity centroid ({cy:.1}, {cx:.1}) lies outside the cavity"
        )));
    }
    let endo = crossing(&inside_cavity, 0.0)
        .ok_or_else(|| Error::DegenerateMask(format!("no endocardial crossing at {deg} deg")))?;
    let epi = crossing(&inside_wall, endo)
        .ok_or_else(|| Error::DegenerateMask(format!("no epicardial crossing at {deg} deg")))?;
    let mut saw_myo = false;
    let mut s = (endo - 1.0).max(0.0);
    while s <= epi + 1.0 {
        if is_myo(s) {
            saw_myo = true;
            break;
        }
        s += MARCH_STEP_PX;
    }
    if !saw_myo || epi - endo < MARCH_STEP_PX {
        return Err(Error::DegenerateMask(format!("myocardial annulus broken at {deg} deg")));
    }
    Ok(RayHit { endo, epi })
}

/// Indices measured from a label mask with isotropic `spacing` mm/px.
pub fn indices_from_mask(mask: &Grid<u8>, spacing: f64) -> Result<IndexVector> {
    let (mut n_cav, mut n_myo) = (0usize, 0usize);
    let (mut sy, mut sx) = (0.0, 0.0);
    for r in 0..mask.height {
        for c in 0..mask.width {
            match mask.get(r, c) {
                label::CAVITY => {
                    n_cav += 1;
                    sy += r as f64;
                    sx += c as f64;
                }
                label::MYOCARDIUM => n_myo += 1,
                _ => {}
            }
        }
    }
    if n_cav == 0 {
        return Err(Error::DegenerateMask("empty cavity".into()));
    }
    if n_myo == 0 {
        return Err(Error::DegenerateMask("empty myocardium".into()));
    }
    let (cy, cx) = (sy / n_cav as f64, sx / n_cav as f64);
    let rays: Vec<RayHit> = (0..360)
        .step_by(RAY_STEP_DEG)
        .map(|deg| march(mask, cy, cx, deg as f64))
        .collect::<Result<_>>()?;
    let rays_per_degree = 1.0 / RAY_STEP_DEG as f64;
    let endo_at = |deg: usize| rays[(deg % 360) / RAY_STEP_DEG].endo;

    let mut dims = [0.0; 3];
    for (k, d) in dims.iter_mut().enumerate() {
        *d = (endo_at(60 * k) + endo_at(60 * k + 180)) * spacing;
    }
    let mut sums = [0.0; 6];
    let mut counts = [0usize; 6];
    for (i, hit) in rays.iter().enumerate() {
        let deg = i as f64 / rays_per_degree;
        let k = sector_of(deg);
        sums[k] += hit.epi - hit.endo;
        counts[k] += 1;
    }
    let mut rwt = [0.0; 6];
    for k in 0..6 {
        rwt[k] = sums[k] / counts[k] as f64 * spacing;
    }
    let area = spacing * spacing;
    Ok(IndexVector { cavity_area: n_cav as f64 * area, myo_area: n_myo as f64 * area, dims, rwt })
}

fn unique_extremum(curve: &[f64], better: impl Fn(f64, f64) -> bool) -> (usize, bool) {
    let mut best = 0;
    let mut unique = true;
    for (i, &v) in curve.iter().enumerate().skip(1) {
        if better(v, curve[best]) {
            best = i;
            unique = true;
        } else if v == curve[best] {
            unique = false;
        }
    }
    (best, unique)
}

/// Systole spans the frames after the area maximum up to and including the
/// area minimum, walking forward cyclically; every other frame is diastole.
pub fn phase_labels(cavity_area_curve: &[f64]) -> Result<Vec<Phase>> {
    let (argmax, max_unique) = unique_extremum(cavity_area_curve, |a, b| a > b);
    let (argmin, min_unique) = unique_extremum(cavity_area_curve, |a, b| a < b);
    if !max_unique || !min_unique || argmax == argmin {
        return Err(Error::AmbiguousPhase { argmax, argmin });
    }
    Ok(assign_phases(cavity_area_curve.len(), argmax, argmin))
}

/// Like [`phase_labels`] but resolves ties at the earliest frame with a
/// warning; only a flat curve is still an error.
pub fn phase_labels_lenient(cavity_area_curve: &[f64]) -> Result<Vec<Phase>> {
    match phase_labels(cavity_area_curve) {
        Err(Error::AmbiguousPhase { argmax, argmin }) if argmax != argmin => {
            log::warn!("phase extremum tie; using earliest frames max={argmax} min={argmin}");
            Ok(assign_phases(cavity_area_curve.len(), argmax, argmin))
        }
        other => other,
    }
}

fn assign_phases(n: usize, argmax: usize, argmin: usize) -> Vec<Phase> {
    let mut out = vec![Phase::Diastole; n];
    let mut t = argmax;
    loop {
        t = (t + 1) % n;
        out[t] = Phase::Systole;
        if t == argmin {
            break;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Disk cavity of `r_cav` px and uniform wall `wall` px, centered.
    pub(crate) fn ring_mask(size: usize, r_cav: f64, wall: f64) -> Grid<u8> {
        let c = (size as f64 - 1.0) / 2.0;
        let mut m = Grid::new(size, size);
        for r in 0..size {
            for col in 0..size {
                let d = ((r as f64 - c).powi(2) + (col as f64 - c).powi(2)).sqrt();
                let v = if d < r_cav {
                    label::CAVITY
                } else if d < r_cav + wall {
                    label::MYOCARDIUM
                } else {
                    label::BACKGROUND
                };
                m.set(r, col, v);
            }
        }
        m
    }

    #[test]
    fn disk_with_uniform_wall() {
        let m = ring_mask(80, 20.0, 8.0);
        let iv = indices_from_mask(&m, 1.0).unwrap();
        let exact = std::f64::consts::PI * 400.0;
        assert!((iv.cavity_area - exact).abs() / exact < 0.02, "{}", iv.cavity_area);
        for d in iv.dims {
            assert!((d - 40.0).abs() <= 1.0, "{d}");
        }
        for w in iv.rwt {
            assert!((w - 8.0).abs() <= 1.0, "{w}");
        }
        let annulus = std::f64::consts::PI * (28.0f64.powi(2) - 400.0);
        assert!((iv.myo_area - annulus).abs() / annulus < 0.02);
    }

    #[test]
    fn spacing_scales_areas_and_lengths() {
        let m = ring_mask(80, 20.0, 8.0);
        let a = indices_from_mask(&m, 1.0).unwrap().to_array();
        let b = indices_from_mask(&m, 0.5).unwrap().to_array();
        for i in 0..INDEX_COUNT {
            let factor = if i < 2 { 0.25 } else { 0.5 };
            assert!((b[i] - a[i] * factor).abs() < 1e-9 * a[i].abs().max(1.0));
        }
    }

    #[test]
    fn circular_dims_agree() {
        let m = ring_mask(101, 23.3, 6.1);
        let iv = indices_from_mask(&m, 1.0).unwrap();
        let (lo, hi) = iv.dims.iter().fold((f64::MAX, f64::MIN), |(l, h), &d| (l.min(d), h.max(d)));
        assert!(hi - lo <= 1.0, "{:?}", iv.dims);
    }

    #[test]
    fn degenerate_masks_are_rejected() {
        let empty = Grid::<u8>::new(20, 20);
        assert!(matches!(indices_from_mask(&empty, 1.0), Err(Error::DegenerateMask(_))));
        // cavity touching background on the right: annulus broken
        let mut m = ring_mask(60, 12.0, 5.0);
        for r in 25..35 {
            for c in 30..60 {
                if m.get(r, c) == label::MYOCARDIUM {
                    m.set(r, c, label::BACKGROUND);
                }
            }
        }
        assert!(matches!(indices_from_mask(&m, 1.0), Err(Error::DegenerateMask(_))));
    }

    #[test]
    fn sectors_are_half_open() {
        assert_eq!(sector_of(0.0), 0);
        assert_eq!(sector_of(29.999), 0);
        assert_eq!(sector_of(30.0), 1);
        assert_eq!(sector_of(330.0), 0);
        assert_eq!(sector_of(329.0), 5);
        assert_eq!(sector_of(-10.0), 0);
    }

    #[test]
    fn phase_rule_example() {
        // decreasing 0 -> 8, increasing 8 -> 19
        let curve: Vec<f64> = (0..20)
            .map(|t| if t <= 8 { 100.0 - 5.0 * t as f64 } else { 60.0 + 3.0 * (t - 8) as f64 })
            .collect();
        let labels = phase_labels(&curve).unwrap();
        for (t, l) in labels.iter().enumerate() {
            let expected = if (1..=8).contains(&t) { Phase::Systole } else { Phase::Diastole };
            assert_eq!(*l, expected, "frame {t}");
        }
    }

    #[test]
    fn phase_wraps_cyclically() {
        let mut curve = vec![50.0; 20];
        for (t, v) in curve.iter_mut().enumerate() {
            *v = 50.0 + t as f64;
        }
        curve[17] = 100.0; // max
        curve[2] = 10.0; // min
        let labels = phase_labels(&curve).unwrap();
        let systole: Vec<usize> =
            labels.iter().enumerate().filter(|(_, l)| **l == Phase::Systole).map(|(t, _)| t).collect();
        assert_eq!(systole, vec![0, 1, 2, 18, 19]);
    }

    #[test]
    fn constant_curve_is_ambiguous() {
        let curve = vec![5.0; 20];
        assert!(matches!(
            phase_labels(&curve),
            Err(Error::AmbiguousPhase { argmax: 0, argmin: 0 })
        ));
        assert!(phase_labels_lenient(&curve).is_err());
        let mut tie = vec![5.0; 20];
        tie[3] = 9.0;
        tie[7] = 9.0;
        tie[10] = 1.0;
        assert!(phase_labels(&tie).is_err());
        let labels = phase_labels_lenient(&tie).unwrap();
        assert_eq!(labels[4], Phase::Systole);
        assert_eq!(labels[3], Phase::Diastole);
    }

    #[test]
    fn scaled_targets() {
        let iv = IndexVector { cavity_area: 1000.0, myo_area: 500.0, dims: [40.0; 3], rwt: [8.0; 6] };
        let s = iv.scaled(1.2);
        assert!((s.cavity_area - 1440.0).abs() < 1e-9);
        assert!((s.dims[0] - 48.0).abs() < 1e-9);
        assert!((s.rwt[5] - 9.6).abs() < 1e-9);
    }
}
