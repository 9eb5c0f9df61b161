//! Shape-classification pretraining that stands in for large-corpus
//! pretraining of the backbone body.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{build_2d, BackboneSpec, HeadSpec, Init, Mode, Model};
use crate::error::{Error, Result};
use lvq_nn::{Adam, AdamConfig, Graph, Tensor};

/// Disk or annulus, times five outer-radius bins.
pub const PRETEXT_CLASSES: usize = 10;
const SIZE_BINS: usize = 5;
const RADIUS_RANGE: (f64, f64) = (6.0, 26.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretextConfig {
    pub image_size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretextConfig {
    fn default() -> Self {
        Self { image_size: 64, train_per_class: 120, val_per_class: 50, epochs: 6, batch: 16, lr: 2e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretextReport {
    pub epoch_losses: Vec<f64>,
    pub val_accuracy: f64,
    pub val_count: usize,
    /// Chance plus three binomial standard deviations.
    pub significance_threshold: f64,
}

/// One textured single-channel shape image and its class.
fn render_shape(size: usize, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let annulus = class >= SIZE_BINS;
    let bin = class % SIZE_BINS;
    let width = (RADIUS_RANGE.1 - RADIUS_RANGE.0) / SIZE_BINS as f64;
    let radius = RADIUS_RANGE.0 + width * (bin as f64 + rng.random_range(0.1..0.9));
    let margin = radius + 1.0;
    let half = size as f64 / 2.0;
    let (cy, cx) = if margin < half {
        (rng.random_range(margin..size as f64 - margin), rng.random_range(margin..size as f64 - margin))
    } else {
        (half, half)
    };
    let inner = radius * rng.random_range(0.45..0.65);
    let background = rng.random_range(0.0..0.3);
    let foreground = rng.random_range(0.55..1.0);
    let (freq, angle) = (rng.random_range(0.2..0.8), rng.random_range(0.0..std::f64::consts::PI));
    let stripes = rng.random_range(0.0..0.15);
    let noise = Normal::new(0.0, 0.05).expect("positive std");
    let mut img = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
            let d = x.hypot(y);
            let inside = d < radius && !(annulus && d < inner);
            let texture = stripes * (freq * (x * angle.cos() + y * angle.sin())).sin();
            let base = if inside { foreground + texture } else { background };
            img[r * size + c] = base + noise.sample(rng);
        }
    }
    img
}

/// Balanced labelled images, `per_class` of each class, in shuffled order.
pub fn pretext_dataset(size: usize, per_class: usize, seed: u64) -> Vec<(Vec<f64>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items: Vec<(Vec<f64>, usize)> = (0..PRETEXT_CLASSES)
        .flat_map(|k| std::iter::repeat_n(k, per_class))
        .map(|k| (render_shape(size, k, &mut rng), k))
        .collect();
    items.shuffle(&mut rng);
    items
}

fn to_tensor(items: &[&(Vec<f64>, usize)], size: usize) -> Tensor {
    let plane = size * size;
    let mut data = Vec::with_capacity(items.len() * 3 * plane);
    for (img, _) in items {
        for _ in 0..3 {
            data.extend_from_slice(img);
        }
    }
    Tensor::new(&[items.len(), 3, 1, size, size], data).expect("consistent pretext shapes")
}

/// Trains `spec` on the shape task; returns the model (pretext head
/// attached) and a report with held-out accuracy.
pub fn pretext_pretrain(spec: &BackboneSpec, config: &PretextConfig) -> Result<(Model, PretextReport)> {
    if config.batch < 2 || config.image_size % 32 != 0 {
        return Err(Error::Invalid("pretext batch must be >= 2 and image size divisible by 32".into()));
    }
    let head = HeadSpec::Pretext { classes: PRETEXT_CLASSES };
    let mut model = build_2d(spec, head, Init::Random, config.seed)?;
    let train = pretext_dataset(config.image_size, config.train_per_class, config.seed.wrapping_add(1));
    let val = pretext_dataset(config.image_size, config.val_per_class, config.seed.wrapping_add(2));
    let mut adam = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() }, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(3));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let steps = order.len() / config.batch;
        for step in 0..steps {
            let items: Vec<&(Vec<f64>, usize)> =
                order[step * config.batch..(step + 1) * config.batch].iter().map(|&i| &train[i]).collect();
            let labels: Vec<usize> = items.iter().map(|(_, k)| *k).collect();
            let mut g = Graph::new();
            let x = g.constant(to_tensor(&items, config.image_size));
            let out = model.forward(&mut g, x, Mode::Train, false)?;
            let loss = g.softmax_cross_entropy(out.class_logits.expect("pretext head"), &labels)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            total += value;
            let grads = g.backward(loss)?;
            model.store.zero_grads();
            model.store.accumulate(&grads);
            adam.step(&mut model.store);
            model.update_running_stats(&out.observed);
        }
        epoch_losses.push(total / steps.max(1) as f64);
        log::info!("pretext epoch {epoch}: loss {:.4}", epoch_losses[epoch]);
    }

    let mut correct = 0;
    for chunk in val.chunks(64) {
        let items: Vec<&(Vec<f64>, usize)> = chunk.iter().collect();
        let mut g = Graph::new();
        let x = g.constant(to_tensor(&items, config.image_size));
        let out = model.forward(&mut g, x, Mode::Eval, false)?;
        let logits = g.value(out.class_logits.expect("pretext head"));
        for (row, (_, label)) in logits.data().chunks(PRETEXT_CLASSES).zip(chunk) {
            let argmax = (0..PRETEXT_CLASSES).fold(0, |best, k| if row[k] > row[best] { k } else { best });
            correct += usize::from(argmax == *label);
        }
    }
    let n = val.len();
    let chance = 1.0 / PRETEXT_CLASSES as f64;
    let report = PretextReport {
        epoch_losses,
        val_accuracy: correct as f64 / n as f64,
        val_count: n,
        significance_threshold: chance + 3.0 * (chance * (1.0 - chance) / n as f64).sqrt(),
    };
    model.lineage.push(format!("pretext shapes, {PRETEXT_CLASSES} classes, accuracy {:.3}", report.val_accuracy));
    Ok((model, report))
}

impl Model {
    /// The same model with the head parameters removed.
    pub fn without_head(&self) -> Model {
        let mut store = lvq_nn::ParamStore::new();
        for (_, p) in self.store.iter().filter(|(_, p)| !p.name.starts_with("head.")) {
            store.insert(&p.name, p.kind, p.value.clone()).expect("names stay unique");
        }
        Model { store, ..self.clone_meta() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_balanced_and_deterministic() {
        let a = pretext_dataset(64, 3, 1);
        assert_eq!(a.len(), 30);
        for k in 0..PRETEXT_CLASSES {
            assert_eq!(a.iter().filter(|(_, c)| *c == k).count(), 3);
        }
        assert_eq!(a, pretext_dataset(64, 3, 1));
    }

    #[test]
    fn pretraining_beats_chance() {
        let spec = BackboneSpec::from_name("mini").unwrap();
        let cfg = PretextConfig { train_per_class: 60, val_per_class: 30, epochs: 4, ..Default::default() };
        let (model, report) = pretext_pretrain(&spec, &cfg).unwrap();
        assert!(report.val_accuracy > report.significance_threshold, "{report:?}");
        assert!(model.without_head().store.id("head.weight").is_none());
    }
}
