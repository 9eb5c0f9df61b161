//! Synthetic short-axis cine studies with exactly known geometry.
//!
//! The left ventricle is an elliptical cavity surrounded by a myocardial
//! wall whose thickness is piecewise constant over six 60-degree sectors.
//! The cavity contracts along a smooth cyclic waveform with end-diastole at
//! frame 0, and the wall thickens so that myocardial area is approximately
//! conserved.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{write_study, Study};
use crate::error::{Error, Result};
use crate::image::{label, Grid};
use crate::indices::{phase_labels, sector_of, IndexVector};

pub const FRAMES: usize = 20;

/// Pixel spacing range of the source scans, mm/px.
pub const SPACING_RANGE: (f64, f64) = (0.6836, 1.7188);
pub const RESOLUTIONS: [usize; 2] = [256, 512];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub patient_seed: u64,
    /// LV center in mm relative to the image center, (x right, y up).
    pub center: [f64; 2],
    /// Endocardial semi-major axis at end-diastole, mm.
    pub base_endo_radius: f64,
    /// Wall thickness at end-diastole before sector modulation, mm.
    pub base_wall_thickness: f64,
    pub contraction_amplitude: f64,
    pub systole_fraction: f64,
    pub angular_wall_variation: [f64; 6],
    /// Minor/major axis ratio of the cavity.
    pub eccentricity: f64,
    /// Major-axis orientation, degrees counter-clockwise from +x.
    pub orientation_deg: f64,
    /// (background, myocardium, blood pool)
    pub intensity_levels: [f64; 3],
    pub noise_sigma: f64,
    pub bias_field_amplitude: f64,
    pub pixel_spacing: f64,
    pub resolution: usize,
}

impl PhantomParams {
    /// A centered, noise-free circular phantom; handy as a test fixture.
    pub fn circular(endo_radius: f64, wall: f64) -> Self {
        Self {
            patient_seed: 0,
            center: [0.0, 0.0],
            base_endo_radius: endo_radius,
            base_wall_thickness: wall,
            contraction_amplitude: 0.0,
            systole_fraction: 0.4,
            angular_wall_variation: [1.0; 6],
            eccentricity: 1.0,
            orientation_deg: 0.0,
            intensity_levels: [0.2, 0.4, 0.9],
            noise_sigma: 0.0,
            bias_field_amplitude: 0.0,
            pixel_spacing: 1.0,
            resolution: 256,
        }
    }

    pub fn field_of_view(&self) -> f64 {
        self.resolution as f64 * self.pixel_spacing
    }

    /// Frame of peak contraction (end-systole).
    pub fn end_systole_frame(&self) -> usize {
        ((self.systole_fraction * FRAMES as f64).round() as usize).clamp(1, FRAMES - 1)
    }

    /// Contraction waveform in [0, 1]: 0 only at frame 0, 1 only at end-systole.
    pub fn contraction(&self, t: usize) -> f64 {
        let es = self.end_systole_frame() as f64;
        let t = t as f64;
        if t <= es {
            0.5 * (1.0 - (std::f64::consts::PI * t / es).cos())
        } else {
            0.5 * (1.0 + (std::f64::consts::PI * (t - es) / (FRAMES as f64 - es)).cos())
        }
    }

    /// Endocardial semi-axes (a, b) and unmodulated wall thickness at frame `t`.
    pub fn shape_at(&self, t: usize) -> FrameShape {
        let s = 1.0 - self.contraction_amplitude * self.contraction(t);
        let a0 = self.base_endo_radius;
        let b0 = self.base_endo_radius * self.eccentricity;
        let (a, b) = (a0 * s, b0 * s);
        // keep pi*((r + w)^2 - r^2) constant with r the equivalent radius
        let r0 = (a0 * b0).sqrt();
        let w0 = self.base_wall_thickness;
        let r = (a * b).sqrt();
        let wall = (r * r + w0 * w0 + 2.0 * r0 * w0).sqrt() - r;
        FrameShape {
            a,
            b,
            wall,
            orientation: self.orientation_deg.to_radians(),
            multipliers: self.angular_wall_variation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("phantom parameters: {m}")));
        if !(self.base_endo_radius > 0.0 && self.base_wall_thickness > 0.0) {
            return bad("radius and wall thickness must be positive");
        }
        if !(0.0..1.0).contains(&self.contraction_amplitude) {
            return bad("contraction amplitude must lie in [0, 1)");
        }
        if !(self.eccentricity > 0.0 && self.eccentricity <= 1.0) {
            return bad("eccentricity must lie in (0, 1]");
        }
        if self.angular_wall_variation.iter().any(|m| *m <= 0.0) {
            return bad("wall multipliers must be positive");
        }
        if !(self.pixel_spacing > 0.0 && self.resolution > 0) {
            return bad("spacing and resolution must be positive");
        }
        let half_fov = self.field_of_view() / 2.0;
        let offset = self.center[0].hypot(self.center[1]);
        let max_mult = self.angular_wall_variation.iter().cloned().fold(0.0, f64::max);
        for t in 0..FRAMES {
            let f = self.shape_at(t);
            let reach = offset + f.a + f.wall * max_mult;
            if reach >= half_fov - self.pixel_spacing {
                return Err(Error::GeometryOverflow(format!(
                    "frame {t}: epicardium reaches {reach:.1} mm, half field of view {half_fov:.1} mm"
                )));
            }
        }
        Ok(())
    }
}

/// Parametric LV cross-section at one frame.
#[derive(Clone, Copy, Debug)]
pub struct FrameShape {
    pub a: f64,
    pub b: f64,
    pub wall: f64,
    pub orientation: f64,
    pub multipliers: [f64; 6],
}

impl FrameShape {
    /// Endocardial radius along polar angle `phi` (radians) from the center.
    #[inline]
    pub fn endo_radius(&self, phi: f64) -> f64 {
        let t = phi - self.orientation;
        let (c, s) = (t.cos(), t.sin());
        self.a * self.b / ((self.b * c).powi(2) + (self.a * s).powi(2)).sqrt()
    }

    #[inline]
    pub fn wall_at(&self, phi: f64) -> f64 {
        self.wall * self.multipliers[sector_of(phi.to_degrees())]
    }
}

/// Deterministic parameter draw for one patient.
pub fn sample_params(seed: u64) -> PhantomParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let resolution = RESOLUTIONS[rng.random_range(0..2)];
    // field of view kept between ~300 and 440 mm
    let pixel_spacing = if resolution == 512 {
        rng.random_range(SPACING_RANGE.0..=0.8594)
    } else {
        rng.random_range(1.1719..=SPACING_RANGE.1)
    };
    let mut angular_wall_variation = [0.0; 6];
    for m in &mut angular_wall_variation {
        *m = rng.random_range(0.7..=1.3);
    }
    let background = rng.random_range(0.12..0.25);
    let myocardium = rng.random_range(0.3..0.45);
    let blood = rng.random_range(0.7..0.95);
    PhantomParams {
        patient_seed: seed,
        center: [rng.random_range(-12.0..12.0), rng.random_range(-12.0..12.0)],
        base_endo_radius: rng.random_range(20.0..30.0),
        base_wall_thickness: rng.random_range(6.0..11.0),
        contraction_amplitude: rng.random_range(0.15..0.35),
        systole_fraction: rng.random_range(0.3..=0.5),
        angular_wall_variation,
        eccentricity: rng.random_range(0.85..=1.0),
        orientation_deg: rng.random_range(0.0..180.0),
        intensity_levels: [background, myocardium, blood],
        noise_sigma: rng.random_range(0.02..0.05),
        bias_field_amplitude: rng.random_range(0.0..0.08),
        pixel_spacing,
        resolution,
    }
}

/// Closed-form indices of frame `t`.
pub fn analytic_indices(params: &PhantomParams, t: usize) -> IndexVector {
    let f = params.shape_at(t);
    let cavity_area = std::f64::consts::PI * f.a * f.b;
    let sector = std::f64::consts::PI / 3.0;
    let mut myo_area = 0.0;
    let mut rwt = [0.0; 6];
    for k in 0..6 {
        let m = f.multipliers[k];
        let w = f.wall * m;
        rwt[k] = w;
        let lo = (60.0 * k as f64 - 30.0).to_radians();
        // annular sector: integral of ((r + w)^2 - r^2) / 2 over the sector
        let endo_integral = simpson(|phi| f.endo_radius(phi), lo, lo + sector, 512);
        myo_area += w * endo_integral + 0.5 * w * w * sector;
    }
    let mut dims = [0.0; 3];
    for (k, d) in dims.iter_mut().enumerate() {
        *d = 2.0 * f.endo_radius((60.0 * k as f64).to_radians());
    }
    IndexVector { cavity_area, myo_area, dims, rwt }
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Renders all frames, masks, analytic indices and phase labels.
pub fn render_study(params: &PhantomParams, patient_id: &str) -> Result<Study> {
    params.validate()?;
    let n = params.resolution;
    let sp = params.pixel_spacing;
    let half = n as f64 / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(params.patient_seed ^ 0x9e37_79b9_7f4a_7c15);
    let noise = Normal::new(0.0, params.noise_sigma.max(0.0))
        .map_err(|e| Error::Invalid(format!("noise sigma: {e}")))?;
    let bias: [f64; 5] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let body_radius = 0.45 * params.field_of_view();
    let [background, myocardium, blood] = params.intensity_levels;

    let mut frames = Vec::with_capacity(FRAMES);
    let mut masks = Vec::with_capacity(FRAMES);
    let mut indices = Vec::with_capacity(FRAMES);
    for t in 0..FRAMES {
        let shape = params.shape_at(t);
        let mut mask = Grid::new(n, n);
        let mut img = Grid::new(n, n);
        for r in 0..n {
            let y_img = -((r as f64 + 0.5) - half) * sp;
            for c in 0..n {
                let x_img = ((c as f64 + 0.5) - half) * sp;
                let (dx, dy) = (x_img - params.center[0], y_img - params.center[1]);
                let rho = dx.hypot(dy);
                let phi = dy.atan2(dx);
                let endo = shape.endo_radius(phi);
                let lbl = if rho < endo {
                    label::CAVITY
                } else if rho < endo + shape.wall_at(phi) {
                    label::MYOCARDIUM
                } else {
                    label::BACKGROUND
                };
                let base = match lbl {
                    label::CAVITY => blood,
                    label::MYOCARDIUM => myocardium,
                    _ if x_img.hypot(y_img) < body_radius => background,
                    _ => 0.02,
                };
                let (u, v) = (x_img / (half * sp), y_img / (half * sp));
                let field = params.bias_field_amplitude
                    * (bias[0] * u + bias[1] * v + bias[2] * u * v + bias[3] * u * u + bias[4] * v * v);
                let value = base + field + noise.sample(&mut rng);
                mask.set(r, c, lbl);
                img.set(r, c, value as f32);
            }
        }
        frames.push(img);
        masks.push(mask);
        indices.push(analytic_indices(params, t));
    }
    let curve: Vec<f64> = indices.iter().map(|iv| iv.cavity_area).collect();
    let phase = if params.contraction_amplitude > 0.0 {
        phase_labels(&curve)?
    } else {
        // a motionless heart has no phases; label by the waveform instead
        let waveform: Vec<f64> = (0..FRAMES).map(|t| -params.contraction(t)).collect();
        phase_labels(&waveform)?
    };
    Ok(Study {
        patient_id: patient_id.to_string(),
        spacing: sp,
        frames,
        masks,
        indices,
        phase,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub seed: u64,
    pub spacing: f64,
    pub resolution: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub patients: Vec<DatasetRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn patient_id(i: usize) -> String {
    format!("P{i:03}")
}

/// Per-patient seeds derived from the dataset seed.
pub fn patient_seeds(n_patients: usize, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_patients).map(|_| rng.random()).collect()
}

/// Writes `n_patients` study directories plus a manifest under `out_dir`.
pub fn generate_dataset(n_patients: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    let write_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| Error::DatasetWrite { path, source }
    };
    fs::create_dir_all(out_dir).map_err(write_err(out_dir))?;
    let mut patients = Vec::with_capacity(n_patients);
    for (i, pseed) in patient_seeds(n_patients, seed).into_iter().enumerate() {
        let params = sample_params(pseed);
        let id = patient_id(i);
        let study = render_study(&params, &id)?;
        let dir = out_dir.join(&id);
        write_study(&dir, &study).map_err(|e| match e {
            Error::Io { path, source } => Error::DatasetWrite { path, source },
            other => other,
        })?;
        patients.push(DatasetRecord { id, seed: pseed, spacing: params.pixel_spacing, resolution: params.resolution });
    }
    let manifest = DatasetManifest { seed, patients };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(write_err(&path))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::indices::indices_from_mask;

    #[test]
    fn sampled_params_stay_in_range() {
        let (mut lo, mut hi) = (f64::MAX, f64::MIN);
        for seed in 0..1000 {
            let p = sample_params(seed);
            lo = lo.min(p.pixel_spacing);
            hi = hi.max(p.pixel_spacing);
            assert!(RESOLUTIONS.contains(&p.resolution));
            assert!(p.validate().is_ok(), "seed {seed}");
            assert!(p.angular_wall_variation.iter().all(|m| (0.7..=1.3).contains(m)));
            assert!((0.85..=1.0).contains(&p.eccentricity));
            assert!((0.3..=0.5).contains(&p.systole_fraction));
        }
        assert!(lo >= SPACING_RANGE.0 && hi <= SPACING_RANGE.1, "{lo} {hi}");
        assert_eq!(sample_params(0), sample_params(0));
    }

    #[test]
    fn circle_formulas() {
        let p = PhantomParams::circular(20.0, 8.0);
        let iv = analytic_indices(&p, 0);
        assert!((iv.cavity_area - std::f64::consts::PI * 400.0).abs() < 1e-9);
        assert!((iv.cavity_area - 1256.64).abs() < 0.01);
        for d in iv.dims {
            assert!((d - 40.0).abs() < 1e-9);
        }
        for w in iv.rwt {
            assert!((w - 8.0).abs() < 1e-9);
        }
        let annulus = std::f64::consts::PI * (28.0f64.powi(2) - 400.0);
        assert!((iv.myo_area - annulus).abs() < 1e-6);
    }

    #[test]
    fn ellipse_formulas() {
        let mut p = PhantomParams::circular(22.0, 8.0);
        p.eccentricity = 18.0 / 22.0;
        let iv = analytic_indices(&p, 0);
        assert!((iv.dims[0] - 44.0).abs() < 1e-9);
        assert!((iv.cavity_area - std::f64::consts::PI * 22.0 * 18.0).abs() < 1e-9);
        assert!((iv.cavity_area - 1244.07).abs() < 0.01);
    }

    #[test]
    fn motionless_phantom_has_identical_frames() {
        let mut p = PhantomParams::circular(20.0, 8.0);
        p.noise_sigma = 0.0;
        let s = render_study(&p, "P000").unwrap();
        assert_eq!(s.frames.len(), FRAMES);
        for t in 1..FRAMES {
            assert_eq!(s.frames[t], s.frames[0]);
            assert_eq!(s.indices[t], s.indices[0]);
        }
    }

    #[test]
    fn single_end_systolic_minimum() {
        for seed in 0..50 {
            let p = sample_params(seed);
            let areas: Vec<f64> = (0..FRAMES).map(|t| analytic_indices(&p, t).cavity_area).collect();
            let min = areas.iter().cloned().fold(f64::MAX, f64::min);
            assert_eq!(areas.iter().filter(|&&a| a == min).count(), 1);
            let max = areas.iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(areas[0], max);
            // cycle closure: frame 19 is within one inter-frame step of frame 0
            let step = areas.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
            assert!((areas[19] - areas[0]).abs() < step);
        }
    }

    #[test]
    fn rasterized_cavity_matches_ellipse_area() {
        let mut p = sample_params(3);
        p.noise_sigma = 0.0;
        let s = render_study(&p, "P000").unwrap();
        let pixels = s.masks[0].count(label::CAVITY) as f64 * p.pixel_spacing.powi(2);
        let f = p.shape_at(0);
        let exact = std::f64::consts::PI * f.a * f.b;
        assert!((pixels - exact).abs() / exact < 0.02, "{pixels} vs {exact}");
    }

    #[test]
    fn overflow_is_reported() {
        let mut p = PhantomParams::circular(20.0, 8.0);
        p.resolution = 50;
        assert!(matches!(render_study(&p, "x"), Err(Error::GeometryOverflow(_))));
    }

    #[test]
    fn mask_oracle_agrees_on_a_frame() {
        let p = sample_params(11);
        let s = render_study(&p, "P000").unwrap();
        for t in [0, p.end_systole_frame()] {
            let measured = indices_from_mask(&s.masks[t], p.pixel_spacing).unwrap().to_array();
            let exact = s.indices[t].to_array();
            for i in 0..11 {
                let tol = (0.02 * exact[i]).max(p.pixel_spacing);
                assert!((measured[i] - exact[i]).abs() <= tol, "t={t} i={i}: {} vs {}", measured[i], exact[i]);
            }
        }
    }
}
