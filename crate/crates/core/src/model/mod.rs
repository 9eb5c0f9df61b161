//! Residual backbones, output heads, depth inflation and the segmentation
//! decoder.
//!
//! One parameter layout serves planar and volumetric networks: every conv
//! weight is `[O, C, kd, k, k]` and the temporal padding is derived from
//! `kd`, so a planar model is just the `kd = 1` case.

mod checkpoint;
mod pretext;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, ParamEntry};
pub use pretext::{pretext_dataset, pretext_pretrain, PretextConfig, PretextReport, PRETEXT_CLASSES};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::indices::INDEX_COUNT;
use lvq_nn::{softmax_axis1, ConvGeom, Graph, NormStats, ObservedStats, ParamKind, ParamStore, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;
pub const SEG_CLASSES: usize = 3;
pub const PHASE_CLASSES: usize = 2;
const DECODER_STAGES: usize = 5;
const TOTAL_DOWNSAMPLING: usize = 5;

/// A member of the residual backbone family.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub stem_channels: usize,
    /// Output channels of each stage; the first block of a stage has stride 2.
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    /// Channels of the map that is globally pooled.
    pub feature_channels: usize,
    pub input_channels: usize,
    pub input_size: usize,
}

impl BackboneSpec {
    pub fn from_name(name: &str) -> Result<Self> {
        let (stem, stages, blocks, features): (usize, &[usize], &[usize], usize) = match name {
            "mini" => (8, &[32, 64], &[1, 1], 128),
            "small" => (16, &[16, 32, 64], &[1, 1, 1], 128),
            "base" => (32, &[32, 64, 128, 256], &[2, 2, 2, 2], 512),
            other => return Err(Error::Invalid(format!("unknown architecture {other:?} (mini, small, base)"))),
        };
        Ok(Self {
            name: name.to_string(),
            stem_channels: stem,
            stage_channels: stages.to_vec(),
            blocks_per_stage: blocks.to_vec(),
            feature_channels: features,
            input_channels: 3,
            input_size: 224,
        })
    }

    pub fn names() -> [&'static str; 3] {
        ["mini", "small", "base"]
    }

    /// Stride-2 average pools after the stem, so that the total downsampling is 2^5.
    pub fn stem_pools(&self) -> usize {
        TOTAL_DOWNSAMPLING - 1 - self.stage_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stage_channels.len();
        if n == 0 || n > TOTAL_DOWNSAMPLING - 1 || self.blocks_per_stage.len() != n {
            return Err(Error::Invalid(format!("backbone {}: need 1..=4 stages with block counts", self.name)));
        }
        if self.blocks_per_stage.contains(&0) || self.stage_channels.contains(&0) || self.stem_channels == 0 {
            return Err(Error::Invalid(format!("backbone {}: empty stage", self.name)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadSpec {
    /// 11 index outputs.
    Regression,
    /// 2 phase logits.
    Classification,
    /// 11 index outputs followed by 2 phase logits.
    Joint,
    /// Shape classification used only for pretraining.
    Pretext { classes: usize },
}

impl HeadSpec {
    pub fn outputs(self) -> usize {
        match self {
            HeadSpec::Regression => INDEX_COUNT,
            HeadSpec::Classification => PHASE_CLASSES,
            HeadSpec::Joint => INDEX_COUNT + PHASE_CLASSES,
            HeadSpec::Pretext { classes } => classes,
        }
    }

    pub fn has_regression(self) -> bool {
        matches!(self, HeadSpec::Regression | HeadSpec::Joint)
    }

    pub fn has_phase(self) -> bool {
        matches!(self, HeadSpec::Classification | HeadSpec::Joint)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; observed statistics are returned for the running averages.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug)]
pub enum Init {
    Random,
    /// Body copied from a pretrained model with the same spec.
    Pretrained(Box<Model>),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: BackboneSpec,
    pub head: HeadSpec,
    /// Temporal kernel depth rule once inflated; `None` for planar models.
    pub inflation: Option<Inflation>,
    pub decoder: bool,
    pub store: ParamStore,
    /// How the weights came to be, oldest first.
    pub lineage: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Inflation {
    /// Depth equal to each layer's spatial kernel size.
    KernelSize,
    /// Fixed depth for every spatial (k > 1) kernel.
    Fixed(usize),
}

/// Graph nodes produced by one forward pass.
pub struct Outputs {
    /// `[N * D, 11]` in scaled target space
    pub regression: Option<Var>,
    /// `[N * D, 2]`
    pub phase_logits: Option<Var>,
    /// `[N * D, classes]` for pretext heads
    pub class_logits: Option<Var>,
    /// `[N, 3, D, H, W]`
    pub seg_logits: Option<Var>,
    /// Pooled features `[N * D, F]` feeding the head.
    pub features: Var,
    pub observed: Vec<(String, ObservedStats)>,
}

/// Plain-number predictions, one row per (sample, temporal position).
#[derive(Clone, Debug, PartialEq)]
pub struct RawPrediction {
    pub regression: Option<Vec<[f64; INDEX_COUNT]>>,
    /// `[p_systole, p_diastole]`
    pub phase: Option<Vec<[f64; 2]>>,
}

fn is_body(name: &str) -> bool {
    !(name.starts_with("head.") || name.starts_with("decoder."))
}

struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    fn conv(&mut self, store: &mut ParamStore, name: &str, o: usize, c: usize, k: usize, bias: bool) -> Result<()> {
        let fan_in = (c * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let data = (0..o * c * k * k).map(|_| normal.sample(&mut self.rng)).collect();
        store.insert(&format!("{name}.weight"), ParamKind::Trainable, Tensor::new(&[o, c, 1, k, k], data)?)?;
        if bias {
            let bound = 1.0 / fan_in.sqrt();
            let data = (0..o).map(|_| self.rng.random_range(-bound..bound)).collect();
            store.insert(&format!("{name}.bias"), ParamKind::Trainable, Tensor::new(&[o], data)?)?;
        }
        Ok(())
    }

    fn norm(&mut self, store: &mut ParamStore, name: &str, c: usize) -> Result<()> {
        store.insert(&format!("{name}.gamma"), ParamKind::Trainable, Tensor::full(&[c], 1.0))?;
        store.insert(&format!("{name}.beta"), ParamKind::Trainable, Tensor::zeros(&[c]))?;
        store.insert(&format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[c]))?;
        store.insert(&format!("{name}.running_var"), ParamKind::Buffer, Tensor::full(&[c], 1.0))?;
        Ok(())
    }

    fn block(&mut self, store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<()> {
        self.conv(store, &format!("{name}.conv1"), c_out, c_in, 3, false)?;
        self.norm(store, &format!("{name}.bn1"), c_out)?;
        self.conv(store, &format!("{name}.conv2"), c_out, c_out, 3, false)?;
        self.norm(store, &format!("{name}.bn2"), c_out)?;
        if stride != 1 || c_in != c_out {
            self.conv(store, &format!("{name}.down"), c_out, c_in, 1, false)?;
            self.norm(store, &format!("{name}.down_bn"), c_out)?;
        }
        Ok(())
    }

    fn head(&mut self, store: &mut ParamStore, outputs: usize, features: usize) -> Result<()> {
        let bound = 1.0 / (features as f64).sqrt();
        let w = (0..outputs * features).map(|_| self.rng.random_range(-bound..bound)).collect();
        let b = (0..outputs).map(|_| self.rng.random_range(-bound..bound)).collect();
        store.insert("head.weight", ParamKind::Trainable, Tensor::new(&[outputs, features], w)?)?;
        store.insert("head.bias", ParamKind::Trainable, Tensor::new(&[outputs], b)?)?;
        Ok(())
    }
}

fn body_params(spec: &BackboneSpec, init: &mut Initializer, store: &mut ParamStore) -> Result<()> {
    init.conv(store, "stem.conv", spec.stem_channels, spec.input_channels, 3, false)?;
    init.norm(store, "stem.bn", spec.stem_channels)?;
    let mut c = spec.stem_channels;
    for (s, (&width, &blocks)) in spec.stage_channels.iter().zip(&spec.blocks_per_stage).enumerate() {
        for b in 0..blocks {
            let stride = if b == 0 { 2 } else { 1 };
            init.block(store, &format!("stage{s}.block{b}"), c, width, stride)?;
            c = width;
        }
    }
    init.conv(store, "features.conv", spec.feature_channels, c, 1, false)?;
    init.norm(store, "features.bn", spec.feature_channels)?;
    Ok(())
}

/// Planar model with a fresh head; the body is random or copied from `init`.
pub fn build_2d(spec: &BackboneSpec, head: HeadSpec, init: Init, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = Initializer { rng: ChaCha8Rng::seed_from_u64(seed) };
    let mut store = ParamStore::new();
    body_params(spec, &mut rng, &mut store)?;
    rng.head(&mut store, head.outputs(), spec.feature_channels)?;
    let mut lineage = vec![format!("random init, seed {seed}")];
    if let Init::Pretrained(source) = init {
        if source.spec != *spec {
            return Err(Error::ShapeMismatch(format!(
                "pretrained backbone {:?} does not match requested {:?}",
                source.spec.name, spec.name
            )));
        }
        if source.inflation.is_some() {
            return Err(Error::ShapeMismatch("pretrained source is volumetric".into()));
        }
        for (_, p) in source.store.iter().filter(|(_, p)| is_body(&p.name)) {
            let id = store
                .id(&p.name)
                .ok_or_else(|| Error::ShapeMismatch(format!("pretrained parameter {} not in backbone", p.name)))?;
            store.set(id, p.value.clone()).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        }
        lineage = source.lineage.clone();
        lineage.push(format!("body copied, fresh {:?} head, seed {seed}", head));
    }
    Ok(Model { spec: spec.clone(), head, inflation: None, decoder: false, store, lineage })
}

/// Replicates a `[O, C, 1, k, k]` kernel `d_c` times along depth, scaled by `1 / d_c`.
///
/// The last copy absorbs the rounding residue of the others so that the
/// in-order depth sum reproduces the source kernel bit for bit.
pub fn inflate_kernel(w: &Tensor, d_c: usize) -> Result<Tensor> {
    let s = w.shape();
    if s.len() != 5 || s[2] != 1 {
        return Err(Error::UnsupportedLayer(format!("kernel {s:?} is not planar")));
    }
    if d_c == 0 || d_c % 2 == 0 {
        return Err(Error::Invalid(format!("temporal depth {d_c} must be odd")));
    }
    let (o, c, plane) = (s[0], s[1], s[3] * s[4]);
    let mut out = vec![0.0; o * c * d_c * plane];
    for oc in 0..o * c {
        let src = &w.data()[oc * plane..(oc + 1) * plane];
        for (j, &v) in src.iter().enumerate() {
            let q = v / d_c as f64;
            let mut acc = 0.0;
            for d in 0..d_c {
                let slice = if d + 1 == d_c { v - acc } else { q };
                out[(oc * d_c + d) * plane + j] = slice;
                acc += slice;
            }
        }
    }
    Ok(Tensor::new(&[o, c, d_c, s[3], s[4]], out)?)
}

/// Volumetric counterpart of a planar model. Norm layers and the head are
/// copied unchanged; the head then acts as a kernel-1 temporal convolution.
pub fn inflate_to_3d(model: &Model, rule: Inflation) -> Result<Model> {
    if model.inflation.is_some() {
        return Err(Error::UnsupportedLayer("model is already volumetric".into()));
    }
    if let Inflation::Fixed(d) = rule {
        if d == 0 || d % 2 == 0 {
            return Err(Error::Invalid(format!("temporal depth {d} must be odd")));
        }
    }
    let mut store = ParamStore::new();
    for (_, p) in model.store.iter() {
        let value = if p.name.ends_with(".weight") && !p.name.starts_with("head.") && !p.name.starts_with("decoder.") {
            let s = p.value.shape();
            if s.len() != 5 {
                return Err(Error::UnsupportedLayer(format!("{} has shape {s:?}", p.name)));
            }
            let k = s[3];
            let depth = match rule {
                Inflation::KernelSize => k,
                Inflation::Fixed(d) if k > 1 => d,
                Inflation::Fixed(_) => 1,
            };
            inflate_kernel(&p.value, depth)?
        } else {
            p.value.clone()
        };
        store.insert(&p.name, p.kind, value)?;
    }
    let mut lineage = model.lineage.clone();
    lineage.push(format!("inflated to 3d ({rule:?})"));
    Ok(Model { inflation: Some(rule), store, lineage, ..model.clone_meta() })
}

/// Adds the five-stage upsampling decoder on the pre-pooling feature map.
pub fn attach_sr_decoder(model: &Model, seed: u64) -> Result<Model> {
    if model.decoder {
        return Ok(model.clone());
    }
    let widths = decoder_widths(model.spec.feature_channels)?;
    let mut out = model.clone();
    let mut init = Initializer { rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_dec0) };
    let mut c = model.spec.feature_channels;
    for (i, &w) in widths.iter().enumerate() {
        init.conv(&mut out.store, &format!("decoder.{i}.reduce"), w, c, 1, true)?;
        init.block(&mut out.store, &format!("decoder.{i}.block"), w, w, 1)?;
        c = w;
    }
    init.conv(&mut out.store, "decoder.project", SEG_CLASSES, c, 1, true)?;
    out.decoder = true;
    out.lineage.push(format!("segmentation decoder attached, seed {seed}"));
    Ok(out)
}

/// Channel widths of the decoder stages, halving from `features`.
pub fn decoder_widths(features: usize) -> Result<Vec<usize>> {
    let mut widths = Vec::with_capacity(DECODER_STAGES);
    let mut c = features;
    for _ in 0..DECODER_STAGES {
        c /= 2;
        if c < SEG_CLASSES {
            return Err(Error::ChannelUnderflow(format!(
                "{features} feature channels halve below {SEG_CLASSES} within {DECODER_STAGES} stages"
            )));
        }
        widths.push(c);
    }
    Ok(widths)
}

struct Forward<'a> {
    model: &'a Model,
    g: &'a mut Graph,
    mode: Mode,
    observed: Vec<(String, ObservedStats)>,
}

impl Forward<'_> {
    fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.model.store.id(name).ok_or_else(|| Error::ShapeMismatch(format!("missing parameter {name}")))?;
        Ok(self.g.param(&self.model.store, id))
    }

    fn conv(&mut self, name: &str, x: Var, stride: usize, bias: bool) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let ws = self.g.value(w).shape().to_vec();
        let geom = ConvGeom::volumetric(stride, ws[3] / 2, ws[2] / 2);
        let b = if bias { Some(self.param(&format!("{name}.bias"))?) } else { None };
        Ok(self.g.conv(x, w, b, geom)?)
    }

    fn norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        let (y, obs) = match self.mode {
            Mode::Train => self.g.norm(x, gamma, beta, NORM_EPS, NormStats::Batch)?,
            Mode::Eval => {
                let store = &self.model.store;
                let get = |s: &str| {
                    store
                        .id(&format!("{name}.{s}"))
                        .map(|id| store.value(id).data())
                        .ok_or_else(|| Error::ShapeMismatch(format!("missing {name}.{s}")))
                };
                let stats = NormStats::Running { mean: get("running_mean")?, var: get("running_var")? };
                self.g.norm(x, gamma, beta, NORM_EPS, stats)?
            }
        };
        if let Some(obs) = obs {
            self.observed.push((name.to_string(), obs));
        }
        Ok(y)
    }

    fn conv_norm(&mut self, conv: &str, norm: &str, x: Var, stride: usize, relu: bool) -> Result<Var> {
        let y = self.conv(conv, x, stride, false)?;
        let y = self.norm(norm, y)?;
        Ok(if relu { self.g.relu(y) } else { y })
    }

    fn block(&mut self, name: &str, x: Var, stride: usize) -> Result<Var> {
        let y = self.conv_norm(&format!("{name}.conv1"), &format!("{name}.bn1"), x, stride, true)?;
        let y = self.conv_norm(&format!("{name}.conv2"), &format!("{name}.bn2"), y, 1, false)?;
        let shortcut = if self.model.store.id(&format!("{name}.down.weight")).is_some() {
            self.conv_norm(&format!("{name}.down"), &format!("{name}.down_bn"), x, stride, false)?
        } else {
            x
        };
        let sum = self.g.add(y, shortcut)?;
        Ok(self.g.relu(sum))
    }
}

impl Model {
    fn clone_meta(&self) -> Model {
        Model {
            spec: self.spec.clone(),
            head: self.head,
            inflation: self.inflation,
            decoder: self.decoder,
            store: ParamStore::new(),
            lineage: self.lineage.clone(),
        }
    }

    pub fn is_volumetric(&self) -> bool {
        self.inflation.is_some()
    }

    /// Forward pass over `[N, 3, D, H, W]`; planar models require `D = 1`.
    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode, with_decoder: bool) -> Result<Outputs> {
        let xs = g.value(x).shape().to_vec();
        if xs.len() != 5 || xs[1] != self.spec.input_channels {
            return Err(Error::ShapeMismatch(format!("model input must be [N, 3, D, H, W], got {xs:?}")));
        }
        if !self.is_volumetric() && xs[2] != 1 {
            return Err(Error::ShapeMismatch(format!("planar model got depth {}", xs[2])));
        }
        let with_decoder = with_decoder && self.decoder;
        if with_decoder && (xs[3] % 32 != 0 || xs[4] % 32 != 0) {
            return Err(Error::ShapeMismatch(format!("decoder needs sides divisible by 32, got {}x{}", xs[3], xs[4])));
        }
        let (n, depth) = (xs[0], xs[2]);
        let mut f = Forward { model: self, g, mode, observed: Vec::new() };

        let mut h = f.conv_norm("stem.conv", "stem.bn", x, 2, true)?;
        for _ in 0..self.spec.stem_pools() {
            h = f.g.avg_pool2(h)?;
        }
        for (s, &blocks) in self.spec.blocks_per_stage.iter().enumerate() {
            for b in 0..blocks {
                h = f.block(&format!("stage{s}.block{b}"), h, if b == 0 { 2 } else { 1 })?;
            }
        }
        let fmap = f.conv_norm("features.conv", "features.bn", h, 1, true)?;

        let pooled = f.g.spatial_mean(fmap)?; // [N, F, D]
        let pooled = f.g.swap_last2(pooled)?;
        let features = f.g.reshape(pooled, &[n * depth, self.spec.feature_channels])?;
        let w = f.param("head.weight")?;
        let b = f.param("head.bias")?;
        let logits = f.g.linear(features, w, Some(b))?;
        let (mut regression, mut phase_logits, mut class_logits) = (None, None, None);
        match self.head {
            HeadSpec::Regression => regression = Some(logits),
            HeadSpec::Classification => phase_logits = Some(logits),
            HeadSpec::Joint => {
                regression = Some(f.g.narrow(logits, 0, INDEX_COUNT)?);
                phase_logits = Some(f.g.narrow(logits, INDEX_COUNT, PHASE_CLASSES)?);
            }
            HeadSpec::Pretext { .. } => class_logits = Some(logits),
        }

        let seg_logits = if with_decoder {
            let mut d = fmap;
            for i in 0..DECODER_STAGES {
                d = f.conv(&format!("decoder.{i}.reduce"), d, 1, true)?;
                d = f.g.upsample2(d)?;
                d = f.block(&format!("decoder.{i}.block"), d, 1)?;
            }
            Some(f.conv("decoder.project", d, 1, true)?)
        } else {
            None
        };
        let observed = f.observed;
        Ok(Outputs { regression, phase_logits, class_logits, seg_logits, features, observed })
    }

    /// Folds observed batch statistics into the running averages.
    pub fn update_running_stats(&mut self, observed: &[(String, ObservedStats)]) {
        self.blend_running_stats(observed, NORM_MOMENTUM);
    }

    /// `running = (1 - weight) * running + weight * observed` for every
    /// normalization layer in `observed`.
    pub fn blend_running_stats(&mut self, observed: &[(String, ObservedStats)], weight: f64) {
        for (name, obs) in observed {
            for (suffix, values) in [("running_mean", &obs.mean), ("running_var", &obs.var)] {
                if let Some(id) = self.store.id(&format!("{name}.{suffix}")) {
                    for (r, v) in self.store.value_mut(id).data_mut().iter_mut().zip(values) {
                        *r = (1.0 - weight) * *r + weight * v;
                    }
                }
            }
        }
    }

    /// Inference without the decoder; phase logits are softmaxed.
    pub fn predict(&self, x: &Tensor) -> Result<RawPrediction> {
        let mut g = Graph::new();
        let input = g.constant(x.clone());
        let out = self.forward(&mut g, input, Mode::Eval, false)?;
        let regression = out.regression.map(|v| {
            g.value(v).data().chunks(INDEX_COUNT).map(|c| std::array::from_fn(|i| c[i])).collect()
        });
        let phase = out.phase_logits.map(|v| {
            let t = g.value(v);
            let rows = t.dim(0);
            let p = softmax_axis1(t.data(), rows, PHASE_CLASSES, 1);
            p.chunks(PHASE_CLASSES).map(|c| [c[0], c[1]]).collect()
        });
        Ok(RawPrediction { regression, phase })
    }

    /// Names of the backbone parameters (everything but head and decoder).
    pub fn body_names(&self) -> Vec<String> {
        self.store.iter().map(|(_, p)| p.name.clone()).filter(|n| is_body(n)).collect()
    }

    /// Drops the head and installs a fresh one for `head`.
    pub fn with_new_head(&self, head: HeadSpec, seed: u64) -> Result<Model> {
        let mut store = ParamStore::new();
        for (_, p) in self.store.iter().filter(|(_, p)| !p.name.starts_with("head.")) {
            store.insert(&p.name, p.kind, p.value.clone())?;
        }
        let mut init = Initializer { rng: ChaCha8Rng::seed_from_u64(seed) };
        init.head(&mut store, head.outputs(), self.spec.feature_channels)?;
        let mut lineage = self.lineage.clone();
        lineage.push(format!("fresh {head:?} head, seed {seed}"));
        Ok(Model { head, store, lineage, ..self.clone_meta() })
    }
}
