//! Rotation/scaling augmentation with target adjustment, random crops and
//! batch assembly.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Study;
use crate::error::{Error, Result};
use crate::image::{warp_bilinear, warp_nearest, Border, Grid};
use crate::indices::{IndexVector, Phase};
use lvq_nn::Tensor;

pub const SCALE_RANGE: (f64, f64) = (0.8, 1.2);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    Replicate,
    Neighbors,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    Planar(InputMode),
    /// Window of `ns` consecutive frames.
    Volumetric { ns: usize },
}

impl BatchMode {
    pub fn depth(self) -> usize {
        match self {
            BatchMode::Planar(_) => 1,
            BatchMode::Volumetric { ns } => ns,
        }
    }
}

/// Everything needed to regenerate a sample from its source study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub theta_deg: f64,
    pub scale: f64,
    /// (row, col) of the crop's top-left corner
    pub offset: (usize, usize),
    pub crop: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    pub patient_id: String,
    /// Source frame of every temporal position.
    pub frames: Vec<usize>,
    /// Three input channels per temporal position.
    pub planes: Vec<[Grid<f32>; 3]>,
    pub masks: Vec<Grid<u8>>,
    pub targets: Vec<IndexVector>,
    pub phase: Vec<Phase>,
    pub transform: Transform,
}

/// Inverse map of rotation by `theta` (counter-clockwise on screen) then
/// resize by `scale`, both about the center of an `h` x `w` slice.
fn inverse_map(h: usize, w: usize, theta_deg: f64, scale: f64, offset: (usize, usize)) -> impl Fn(f64, f64) -> (f64, f64) {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = theta_deg.to_radians().sin_cos();
    let (oy, ox) = (offset.0 as f64, offset.1 as f64);
    move |r, c| {
        // work in (x right, y up) so the rotation reads counter-clockwise
        let x = (c + ox - cx) / scale;
        let y = -(r + oy - cy) / scale;
        let xs = cos * x + sin * y;
        let ys = -sin * x + cos * y;
        (cy - ys, cx + xs)
    }
}

fn warp_pair(
    image: &Grid<f32>,
    mask: &Grid<u8>,
    theta_deg: f64,
    scale: f64,
) -> (Grid<f32>, Grid<u8>) {
    let (h, w) = image.shape();
    let map = inverse_map(h, w, theta_deg, scale, (0, 0));
    (warp_bilinear(image, h, w, Border::Zero, &map), warp_nearest(mask, h, w, &map))
}

/// Rotation about the slice center; targets are left unchanged by design.
pub fn random_rotate(image: &Grid<f32>, mask: &Grid<u8>, theta_deg: f64) -> (Grid<f32>, Grid<u8>) {
    warp_pair(image, mask, theta_deg, 1.0)
}

/// Resize about the slice center, cropping or zero padding back to the input size.
pub fn random_scale(
    image: &Grid<f32>,
    mask: &Grid<u8>,
    targets: &IndexVector,
    scale: f64,
) -> (Grid<f32>, Grid<u8>, IndexVector) {
    let (img, msk) = warp_pair(image, mask, 0.0, scale);
    (img, msk, targets.scaled(scale))
}

/// Rotate, scale and crop in a single resampling pass.
pub fn warp_crop(image: &Grid<f32>, t: &Transform) -> Grid<f32> {
    let (h, w) = image.shape();
    warp_bilinear(image, t.crop, t.crop, Border::Zero, inverse_map(h, w, t.theta_deg, t.scale, t.offset))
}

pub fn warp_crop_mask(mask: &Grid<u8>, t: &Transform) -> Grid<u8> {
    let (h, w) = mask.shape();
    warp_nearest(mask, t.crop, t.crop, inverse_map(h, w, t.theta_deg, t.scale, t.offset))
}

/// Frames `start, start + 1, ..` wrapping at the end of the cycle.
pub fn cyclic_window(start: usize, len: usize, frames: usize) -> Vec<usize> {
    (0..len).map(|i| (start + i) % frames).collect()
}

/// Three-channel input for frame `t`.
pub fn make_3ch<'a>(frames: &'a [Grid<f32>], t: usize, mode: InputMode) -> [&'a Grid<f32>; 3] {
    let n = frames.len();
    match mode {
        InputMode::Replicate => [&frames[t], &frames[t], &frames[t]],
        InputMode::Neighbors => [&frames[(t + n - 1) % n], &frames[t], &frames[(t + 1) % n]],
    }
}

pub fn random_transform(rng: &mut impl Rng, size: (usize, usize), crop: usize) -> Transform {
    let theta_deg = rng.random_range(0.0..360.0);
    let scale = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
    let offset = (rng.random_range(0..=size.0 - crop), rng.random_range(0..=size.1 - crop));
    Transform { theta_deg, scale, offset, crop }
}

/// Renders one sample of `study` for the given frames and transform.
pub fn render_sample(study: &Study, frames: Vec<usize>, mode: BatchMode, transform: Transform) -> AugmentedSample {
    let warp = |g: &Grid<f32>| warp_crop(g, &transform);
    let planes = frames
        .iter()
        .map(|&t| match mode {
            BatchMode::Planar(InputMode::Neighbors) => make_3ch(&study.frames, t, InputMode::Neighbors).map(warp),
            BatchMode::Planar(InputMode::Replicate) | BatchMode::Volumetric { .. } => {
                let g = warp(&study.frames[t]);
                [g.clone(), g.clone(), g]
            }
        })
        .collect();
    AugmentedSample {
        patient_id: study.patient_id.clone(),
        masks: frames.iter().map(|&t| warp_crop_mask(&study.masks[t], &transform)).collect(),
        targets: frames.iter().map(|&t| study.indices[t].scaled(transform.scale)).collect(),
        phase: frames.iter().map(|&t| study.phase[t]).collect(),
        frames,
        planes,
        transform,
    }
}

/// `b` samples from `b` distinct patients.
pub fn build_batch(
    studies: &[&Study],
    mode: BatchMode,
    b: usize,
    crop: usize,
    rng: &mut impl Rng,
) -> Result<Vec<AugmentedSample>> {
    if studies.len() < b {
        return Err(Error::InsufficientPatients { needed: b, available: studies.len() });
    }
    let picks = sample(rng, studies.len(), b).into_vec();
    let mut batch = Vec::with_capacity(b);
    for i in picks {
        let study = studies[i];
        let n = study.frame_count();
        let (h, w) = study.shape();
        if crop > h || crop > w {
            return Err(Error::ShapeMismatch(format!("crop {crop} larger than slice {h}x{w}")));
        }
        let frames = match mode {
            BatchMode::Planar(_) => vec![rng.random_range(0..n)],
            BatchMode::Volumetric { ns } => cyclic_window(rng.random_range(0..n), ns, n),
        };
        let transform = random_transform(rng, (h, w), crop);
        batch.push(render_sample(study, frames, mode, transform));
    }
    Ok(batch)
}

/// Optimizer steps per epoch; the last partial batch is dropped.
pub fn steps_per_epoch(n_patients: usize, crops_per_patient: usize, b: usize) -> usize {
    n_patients * crops_per_patient / b
}

/// Stacks samples into a `[N, 3, D, crop, crop]` tensor.
pub fn input_tensor(samples: &[AugmentedSample]) -> Tensor {
    let d = samples.first().map_or(0, |s| s.planes.len());
    let crop = samples.first().map_or(0, |s| s.transform.crop);
    let plane = crop * crop;
    let mut data = vec![0.0; samples.len() * 3 * d * plane];
    for (n, s) in samples.iter().enumerate() {
        for (z, chans) in s.planes.iter().enumerate() {
            for (c, g) in chans.iter().enumerate() {
                let base = ((n * 3 + c) * d + z) * plane;
                for (dst, &v) in data[base..base + plane].iter_mut().zip(&g.data) {
                    *dst = v as f64;
                }
            }
        }
    }
    Tensor::new(&[samples.len(), 3, d, crop, crop], data).expect("consistent sample shapes")
}

/// Segmentation labels in `[N, D, H, W]` order.
pub fn mask_labels(samples: &[AugmentedSample]) -> Vec<usize> {
    samples.iter().flat_map(|s| s.masks.iter().flat_map(|m| m.data.iter().map(|&v| v as usize))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::preprocess_study;
    use crate::image::label;
    use crate::indices::indices_from_mask;
    use crate::phantom::{render_study, sample_params};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn canonical(seed: u64) -> Study {
        preprocess_study(&render_study(&sample_params(seed), &format!("P{seed:03}")).unwrap())
    }

    #[test]
    fn identity_transforms() {
        let s = canonical(1);
        let (img, msk) = random_rotate(&s.frames[0], &s.masks[0], 0.0);
        assert_eq!(msk, s.masks[0]);
        let d = img.data.iter().zip(&s.frames[0].data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(d < 1e-6);
        let (img, msk, tg) = random_scale(&s.frames[0], &s.masks[0], &s.indices[0], 1.0);
        assert_eq!(msk, s.masks[0]);
        assert_eq!(tg, s.indices[0]);
        assert!(img.data.iter().zip(&s.frames[0].data).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn half_turn_twice_restores() {
        let s = canonical(2);
        let (a, _) = random_rotate(&s.frames[3], &s.masks[3], 180.0);
        let (b, _) = random_rotate(&a, &s.masks[3], 180.0);
        let mean = b.data.iter().zip(&s.frames[3].data).map(|(x, y)| (x - y).abs() as f64).sum::<f64>()
            / b.data.len() as f64;
        assert!(mean < 1e-3, "{mean}");
    }

    #[test]
    fn quarter_turn_keeps_cavity_size() {
        let s = canonical(3);
        let (_, m) = random_rotate(&s.frames[0], &s.masks[0], 90.0);
        let (a, b) = (s.masks[0].count(label::CAVITY) as f64, m.count(label::CAVITY) as f64);
        assert!((a - b).abs() / a < 0.02);
    }

    #[test]
    fn quadratic_area_rule() {
        let mut iv = IndexVector::from_array(&[1.0; 11]);
        iv.cavity_area = 1000.0;
        let (_, _, t) = random_scale(&Grid::new(4, 4), &Grid::new(4, 4), &iv, 1.2);
        assert!((t.cavity_area - 1440.0).abs() < 1e-9);
        assert!((t.dims[0] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn shrunk_mask_matches_adjusted_targets() {
        let s = canonical(4);
        let base = indices_from_mask(&s.masks[0], 1.0).unwrap();
        let (_, m, t) = random_scale(&s.frames[0], &s.masks[0], &base, 0.8);
        let got = indices_from_mask(&m, 1.0).unwrap().to_array();
        for (i, (g, e)) in got.iter().zip(t.to_array()).enumerate() {
            assert!((g - e).abs() <= (0.02 * e).max(1.0), "index {i}: {g} vs {e}");
        }
    }

    #[test]
    fn neighbor_channels_wrap() {
        let frames: Vec<Grid<f32>> = (0..20).map(|t| Grid::from_vec(1, 1, vec![t as f32])).collect();
        let v = |t, m| make_3ch(&frames, t, m).map(|g| g.data[0]);
        assert_eq!(v(0, InputMode::Neighbors), [19.0, 0.0, 1.0]);
        assert_eq!(v(10, InputMode::Neighbors), [9.0, 10.0, 11.0]);
        assert_eq!(v(4, InputMode::Replicate), [4.0; 3]);
        assert_eq!(cyclic_window(18, 5, 20), vec![18, 19, 0, 1, 2]);
    }

    #[test]
    fn batches_are_distinct_and_reproducible() {
        let studies: Vec<Study> = (0..9).map(canonical).collect();
        let refs: Vec<&Study> = studies.iter().collect();
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let b1 = build_batch(&refs, BatchMode::Volumetric { ns: 5 }, 8, 224, &mut r1).unwrap();
        let b2 = build_batch(&refs, BatchMode::Volumetric { ns: 5 }, 8, 224, &mut r2).unwrap();
        assert_eq!(b1, b2);
        let mut ids: Vec<&str> = b1.iter().map(|s| s.patient_id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 8);
        for s in &b1 {
            assert_eq!(s.frames.len(), 5);
            assert!(s.transform.offset.0 <= 76 && s.transform.offset.1 <= 76);
            assert_eq!(s.masks[0].shape(), (224, 224));
        }
        let x = input_tensor(&b1);
        assert_eq!(x.shape(), &[8, 3, 5, 224, 224]);
        assert!(matches!(
            build_batch(&refs[..7], BatchMode::Planar(InputMode::Replicate), 8, 224, &mut r1),
            Err(Error::InsufficientPatients { needed: 8, available: 7 })
        ));
    }

    #[test]
    fn crop_offsets_cover_the_valid_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut lo, mut hi) = (usize::MAX, 0);
        for _ in 0..5000 {
            let t = random_transform(&mut rng, (300, 300), 224);
            lo = lo.min(t.offset.0);
            hi = hi.max(t.offset.0);
            assert!((0.8..=1.2).contains(&t.scale) && (0.0..360.0).contains(&t.theta_deg));
        }
        assert_eq!((lo, hi), (0, 76));
    }

    #[test]
    fn epoch_length() {
        assert_eq!(steps_per_epoch(44, 10, 8), 55);
        assert_eq!(steps_per_epoch(45, 10, 8), 56);
    }
}
