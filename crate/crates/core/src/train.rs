//! Configuration space, composite loss, per-fold training and the job store.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{build_batch, input_tensor, mask_labels, steps_per_epoch, AugmentedSample, BatchMode, InputMode};
use crate::data::{write_json, FoldPlan, Study, TargetScaler};
use crate::error::{Error, Result};
use crate::evaluate::{predict_2d, predict_3d, PredictionSet};
use crate::indices::INDEX_COUNT;
use crate::model::{
    attach_sr_decoder, build_2d, inflate_to_3d, load_checkpoint, save_checkpoint, BackboneSpec, HeadSpec, Inflation,
    Init, Mode, Model, Outputs,
};
use lvq_nn::{Adam, AdamConfig, Graph, Tensor, Var};

pub const ALLOWED_NS: [usize; 4] = [3, 5, 7, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dimensionality {
    #[serde(rename = "2d")]
    Planar,
    #[serde(rename = "3d")]
    Volumetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Random,
    Pretrained,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Targets {
    Regression,
    Classification,
    Joint,
}

/// One training setup; together with the settings it fully determines a run.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Configuration {
    pub architecture: String,
    pub dimensionality: Dimensionality,
    /// Window length, volumetric only.
    #[serde(default)]
    pub ns: Option<usize>,
    /// Channel construction, planar only.
    #[serde(default)]
    pub input_mode: Option<InputMode>,
    pub init: InitKind,
    pub sr: bool,
    pub targets: Targets,
    pub seed: u64,
}

impl Configuration {
    pub fn validate(&self) -> Result<()> {
        BackboneSpec::from_name(&self.architecture)?;
        match self.dimensionality {
            Dimensionality::Volumetric => match self.ns {
                Some(ns) if ALLOWED_NS.contains(&ns) => {}
                other => return Err(Error::Config(format!("3d configuration needs ns in {ALLOWED_NS:?}, got {other:?}"))),
            },
            Dimensionality::Planar => {
                if self.input_mode.is_none() {
                    return Err(Error::Config("2d configuration needs input_mode".into()));
                }
                if self.ns.is_some() {
                    return Err(Error::Config("ns applies to 3d configurations only".into()));
                }
            }
        }
        if self.dimensionality == Dimensionality::Volumetric && self.input_mode.is_some() {
            return Err(Error::Config("input_mode applies to 2d configurations only".into()));
        }
        Ok(())
    }

    /// Short content hash of the canonical JSON form.
    pub fn id(&self) -> String {
        let json = serde_json::to_string(self).expect("configuration serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..6])
    }

    pub fn head(&self) -> HeadSpec {
        match self.targets {
            Targets::Regression => HeadSpec::Regression,
            Targets::Classification => HeadSpec::Classification,
            Targets::Joint => HeadSpec::Joint,
        }
    }

    pub fn batch_mode(&self) -> BatchMode {
        match self.dimensionality {
            Dimensionality::Planar => BatchMode::Planar(self.input_mode.unwrap_or(InputMode::Replicate)),
            Dimensionality::Volumetric => BatchMode::Volumetric { ns: self.ns.unwrap_or(ALLOWED_NS[1]) },
        }
    }

    /// Compact human-readable label.
    pub fn label(&self) -> String {
        let dim = match self.dimensionality {
            Dimensionality::Planar => format!("2d-{:?}", self.input_mode.unwrap_or(InputMode::Replicate)).to_lowercase(),
            Dimensionality::Volumetric => format!("3d-ns{}", self.ns.unwrap_or(0)),
        };
        let sr = if self.sr { "+sr" } else { "" };
        format!("{}-{dim}-{:?}-{:?}{sr}", self.architecture, self.init, self.targets).to_lowercase()
    }
}

/// Training hyperparameters shared by every configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub crops_per_patient: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda_p: f64,
    pub lambda_s: f64,
    pub crop: usize,
    pub folds: usize,
    /// Batches used after training to re-estimate normalization statistics
    /// with the final weights; 0 keeps the momentum estimates.
    #[serde(default)]
    pub recalibration_batches: usize,
    #[serde(default)]
    pub schedule: LrSchedule,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to zero over all steps.
    Cosine,
}

impl LrSchedule {
    pub fn lr_at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => 0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 150,
            crops_per_patient: 10,
            batch: 8,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda_p: 0.05,
            lambda_s: 0.1,
            crop: 224,
            folds: 5,
            recalibration_batches: 0,
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainSettings {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda_p: self.lambda_p, lambda_s: self.lambda_s }
    }
}

/// Partial settings applied on top of the defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingsOverride {
    pub epochs: Option<usize>,
    pub crops_per_patient: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub lambda_p: Option<f64>,
    pub lambda_s: Option<f64>,
    pub crop: Option<usize>,
    pub folds: Option<usize>,
    pub recalibration_batches: Option<usize>,
    pub schedule: Option<LrSchedule>,
}

impl SettingsOverride {
    pub fn apply(&self, base: &TrainSettings) -> TrainSettings {
        TrainSettings {
            epochs: self.epochs.unwrap_or(base.epochs),
            crops_per_patient: self.crops_per_patient.unwrap_or(base.crops_per_patient),
            batch: self.batch.unwrap_or(base.batch),
            lr: self.lr.unwrap_or(base.lr),
            beta1: self.beta1.unwrap_or(base.beta1),
            beta2: self.beta2.unwrap_or(base.beta2),
            eps: self.eps.unwrap_or(base.eps),
            lambda_p: self.lambda_p.unwrap_or(base.lambda_p),
            lambda_s: self.lambda_s.unwrap_or(base.lambda_s),
            crop: self.crop.unwrap_or(base.crop),
            folds: self.folds.unwrap_or(base.folds),
            recalibration_batches: self.recalibration_batches.unwrap_or(base.recalibration_batches),
            schedule: self.schedule.unwrap_or(base.schedule),
        }
    }
}

/// Experiment file: `[defaults]`, optional `[desk_scale]` overrides and
/// `[[config]]` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    #[serde(default)]
    pub defaults: TrainSettings,
    #[serde(default)]
    pub desk_scale: SettingsOverride,
    #[serde(default, rename = "config")]
    pub configs: Vec<Configuration>,
}

impl Experiment {
    pub fn parse(text: &str) -> Result<Self> {
        let exp: Experiment = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for c in &exp.configs {
            c.validate()?;
        }
        Ok(exp)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(Error::io(path))?)
    }

    pub fn settings(&self, desk_scale: bool) -> TrainSettings {
        if desk_scale {
            self.desk_scale.apply(&self.defaults)
        } else {
            self.defaults.clone()
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_p: 0.05, lambda_s: 0.1 }
    }
}

/// Logged loss values; disabled terms are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub mse: Option<f64>,
    pub ce_phase: Option<f64>,
    pub ce_seg: Option<f64>,
}

impl LossComponents {
    /// Recombines the enabled terms.
    pub fn combine(mse: Option<f64>, ce_phase: Option<f64>, ce_seg: Option<f64>, w: LossWeights) -> Self {
        let total = mse.unwrap_or(0.0) + w.lambda_p * ce_phase.unwrap_or(0.0) + w.lambda_s * ce_seg.unwrap_or(0.0);
        Self { total, mse, ce_phase, ce_seg }
    }
}

/// Targets of a batch, aligned with the model's `[N * D, ..]` rows.
pub struct BatchTargets {
    /// `[N * D, 11]` in scaled space
    pub regression: Tensor,
    pub phase: Vec<usize>,
    /// `[N, D, H, W]`
    pub seg: Vec<usize>,
}

impl BatchTargets {
    pub fn from_samples(samples: &[AugmentedSample], scaler: &TargetScaler) -> Result<Self> {
        let mut reg = Vec::new();
        let mut phase = Vec::new();
        for s in samples {
            for (t, p) in s.targets.iter().zip(&s.phase) {
                reg.extend_from_slice(&scaler.apply(&t.to_array()));
                phase.push(p.class());
            }
        }
        let rows = phase.len();
        Ok(Self { regression: Tensor::new(&[rows, INDEX_COUNT], reg)?, phase, seg: mask_labels(samples) })
    }
}

pub struct Loss {
    pub total: Var,
    pub components: LossComponents,
}

/// MSE on scaled indices + lambda_p CE(phase) + lambda_s CE(segmentation),
/// each term present only when the corresponding output exists.
pub fn composite_loss(g: &mut Graph, out: &Outputs, targets: &BatchTargets, w: LossWeights) -> Result<Loss> {
    let mut terms = Vec::new();
    let mut mse = None;
    let mut ce_phase = None;
    let mut ce_seg = None;
    if let Some(r) = out.regression {
        let v = g.mse(r, &targets.regression)?;
        mse = Some(g.value(v).item());
        terms.push((v, 1.0));
    }
    if let Some(p) = out.phase_logits {
        let v = g.softmax_cross_entropy(p, &targets.phase)?;
        ce_phase = Some(g.value(v).item());
        terms.push((v, w.lambda_p));
    }
    if let Some(s) = out.seg_logits {
        let v = g.softmax_cross_entropy(s, &targets.seg)?;
        ce_seg = Some(g.value(v).item());
        terms.push((v, w.lambda_s));
    }
    if terms.is_empty() {
        return Err(Error::ShapeMismatch("model produced no trainable output".into()));
    }
    let total = g.weighted_sum(&terms)?;
    let mut components = LossComponents::combine(mse, ce_phase, ce_seg, w);
    components.total = g.value(total).item();
    Ok(Loss { total, components })
}

/// Per-epoch mean losses of one (configuration, fold) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub config_id: String,
    pub fold: usize,
    pub epochs: Vec<LossComponents>,
    pub steps_per_epoch: usize,
    pub train_ids: Vec<String>,
}

impl TrainRecord {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "total", "mse", "ce_phase", "ce_seg"])?;
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (i, e) in self.epochs.iter().enumerate() {
            w.write_record([i.to_string(), e.total.to_string(), f(e.mse), f(e.ce_phase), f(e.ce_seg)])?;
        }
        w.flush().map_err(Error::io(path))?;
        Ok(())
    }

    pub fn read_csv(path: &Path, config_id: &str, fold: usize) -> Result<Vec<LossComponents>> {
        let mut rd = csv::Reader::from_path(path)?;
        let mut out = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<Option<f64>> {
                let s = &rec[i];
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| Error::Invalid(format!("{config_id}/{fold}: bad loss {s:?}")))
                }
            };
            out.push(LossComponents { total: num(1)?.unwrap_or(f64::NAN), mse: num(2)?, ce_phase: num(3)?, ce_seg: num(4)? });
        }
        Ok(out)
    }

    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.total)
    }
}

/// Builds the untrained network of a configuration.
pub fn initial_model(config: &Configuration, pretrained: Option<&Model>) -> Result<Model> {
    let spec = BackboneSpec::from_name(&config.architecture)?;
    let init = match config.init {
        InitKind::Random => Init::Random,
        InitKind::Pretrained => {
            let source = pretrained.ok_or_else(|| {
                Error::MissingCheckpoint(format!("configuration {} needs a pretrained {} body", config.id(), spec.name))
            })?;
            Init::Pretrained(Box::new(source.clone()))
        }
    };
    let mut model = build_2d(&spec, config.head(), init, config.seed)?;
    if config.sr {
        model = attach_sr_decoder(&model, config.seed)?;
    }
    if config.dimensionality == Dimensionality::Volumetric {
        model = inflate_to_3d(&model, Inflation::KernelSize)?;
    }
    Ok(model)
}

pub struct TrainOutcome {
    pub record: TrainRecord,
    pub model: Model,
    pub scaler: TargetScaler,
}

fn run_seed(config: &Configuration, fold: usize) -> u64 {
    config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(fold as u64 + 1)
}

/// Trains on every fold except `fold`. Weights are rounded to f32 at the
/// end so the in-memory model equals its checkpoint.
pub fn train_one(
    config: &Configuration,
    fold: usize,
    studies: &[Study],
    plan: &FoldPlan,
    settings: &TrainSettings,
    pretrained: Option<&Model>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_ids = plan.training_ids(fold);
    let train: Vec<&Study> = studies.iter().filter(|s| train_ids.contains(&s.patient_id)).collect();
    if train.len() != train_ids.len() {
        return Err(Error::Invalid(format!("fold {fold}: {} of {} training studies found", train.len(), train_ids.len())));
    }
    let scaler = TargetScaler::fit_studies(&train)?;
    let mut model = initial_model(config, pretrained)?;
    let mut adam = Adam::new(settings.adam(), &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed(config, fold));
    let steps = steps_per_epoch(train.len(), settings.crops_per_patient, settings.batch);
    let mode = config.batch_mode();
    let weights = settings.weights();
    let mut epochs = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        let mut sum = LossComponents::default();
        for step in 0..steps {
            adam.set_lr(settings.schedule.lr_at(settings.lr, epoch * steps + step, settings.epochs * steps));
            let batch = build_batch(&train, mode, settings.batch, settings.crop, &mut rng)?;
            let targets = BatchTargets::from_samples(&batch, &scaler)?;
            let mut g = Graph::new();
            let x = g.constant(input_tensor(&batch));
            let out = model.forward(&mut g, x, Mode::Train, config.sr)?;
            let loss = composite_loss(&mut g, &out, &targets, weights)?;
            if !loss.components.total.is_finite() {
                for s in &batch {
                    log::error!("non-finite loss: patient {} frames {:?} transform {:?}", s.patient_id, s.frames, s.transform);
                }
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            let grads = g.backward(loss.total)?;
            model.store.zero_grads();
            model.store.accumulate(&grads);
            adam.step(&mut model.store);
            model.update_running_stats(&out.observed);
            accumulate(&mut sum, &loss.components);
        }
        let mean = scale(&sum, 1.0 / steps.max(1) as f64);
        log::info!("{} fold {fold} epoch {epoch}: loss {:.5}", config.id(), mean.total);
        epochs.push(mean);
    }
    for k in 0..settings.recalibration_batches {
        let batch = build_batch(&train, mode, settings.batch, settings.crop, &mut rng)?;
        let mut g = Graph::new();
        let x = g.constant(input_tensor(&batch));
        let out = model.forward(&mut g, x, Mode::Train, false)?;
        model.blend_running_stats(&out.observed, 1.0 / (k + 1) as f64);
    }
    model.store.round_to_f32();
    model.lineage.push(format!("trained {} epochs on fold split {fold}", settings.epochs));
    let record = TrainRecord { config_id: config.id(), fold, epochs, steps_per_epoch: steps, train_ids };
    Ok(TrainOutcome { record, model, scaler })
}

fn accumulate(sum: &mut LossComponents, c: &LossComponents) {
    let add = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (None, None) => None,
        (a, b) => Some(a.unwrap_or(0.0) + b.unwrap_or(0.0)),
    };
    sum.total += c.total;
    sum.mse = add(sum.mse, c.mse);
    sum.ce_phase = add(sum.ce_phase, c.ce_phase);
    sum.ce_seg = add(sum.ce_seg, c.ce_seg);
}

fn scale(c: &LossComponents, k: f64) -> LossComponents {
    LossComponents {
        total: c.total * k,
        mse: c.mse.map(|v| v * k),
        ce_phase: c.ce_phase.map(|v| v * k),
        ce_seg: c.ce_seg.map(|v| v * k),
    }
}

/// Per-frame predictions of `model` on `studies`, tagged with `fold`.
pub fn predict_studies(
    config: &Configuration,
    model: &Model,
    scaler: &TargetScaler,
    studies: &[&Study],
    fold: usize,
    crop: usize,
) -> Result<PredictionSet> {
    let mut set = PredictionSet::new(&config.id());
    for s in studies {
        let preds = match config.batch_mode() {
            BatchMode::Planar(mode) => predict_2d(model, Some(scaler), s, mode, crop)?,
            BatchMode::Volumetric { ns } => predict_3d(model, Some(scaler), s, ns, crop)?,
        };
        set.push_study(&s.patient_id, fold, &preds);
    }
    Ok(set)
}

/// Layout: `<root>/<config-id>/<fold>/{checkpoint/, record.csv, predictions.csv}`.
#[derive(Clone, Debug)]
pub struct JobStore {
    pub root: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Trained,
    Skipped,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobOutcome {
    pub config_id: String,
    pub fold: usize,
    pub status: JobStatus,
}

pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const RECORD_FILE: &str = "record.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

impl JobStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config_dir(&self, config_id: &str) -> PathBuf {
        self.root.join(config_id)
    }

    pub fn fold_dir(&self, config_id: &str, fold: usize) -> PathBuf {
        self.config_dir(config_id).join(fold.to_string())
    }

    pub fn checkpoint_dir(&self, config_id: &str, fold: usize) -> PathBuf {
        self.fold_dir(config_id, fold).join(CHECKPOINT_DIR)
    }

    pub fn is_complete(&self, config_id: &str, fold: usize) -> bool {
        let d = self.fold_dir(config_id, fold);
        d.join(PREDICTIONS_FILE).is_file() && d.join(RECORD_FILE).is_file() && d.join(CHECKPOINT_DIR).join("manifest.json").is_file()
    }

    /// Configurations present in the store, by id.
    pub fn configs(&self) -> Result<BTreeMap<String, Configuration>> {
        let mut out = BTreeMap::new();
        if !self.root.is_dir() {
            return Ok(out);
        }
        for entry in fs::read_dir(&self.root).map_err(Error::io(&self.root))? {
            let path = entry.map_err(Error::io(&self.root))?.path().join(CONFIG_FILE);
            if path.is_file() {
                let c: Configuration = crate::data::read_json(&path)?;
                out.insert(c.id(), c);
            }
        }
        Ok(out)
    }

    /// Concatenated cross-validation predictions of a configuration.
    pub fn predictions(&self, config_id: &str) -> Result<PredictionSet> {
        PredictionSet::read_csv(&self.config_dir(config_id).join(PREDICTIONS_FILE))
    }

    pub fn load_fold_model(&self, config_id: &str, fold: usize) -> Result<(Model, TargetScaler)> {
        let (model, scaler, _) = load_checkpoint(&self.checkpoint_dir(config_id, fold))?;
        let scaler = scaler.ok_or_else(|| Error::MissingCheckpoint(format!("{config_id}/{fold}: no target scaler")))?;
        Ok((model, scaler))
    }
}

fn run_job(
    store: &JobStore,
    config: &Configuration,
    fold: usize,
    studies: &[Study],
    plan: &FoldPlan,
    settings: &TrainSettings,
    pretrained: Option<&Model>,
) -> Result<JobStatus> {
    let id = config.id();
    if store.is_complete(&id, fold) {
        return Ok(JobStatus::Skipped);
    }
    let dir = store.fold_dir(&id, fold);
    fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    let started = Instant::now();
    let outcome = train_one(config, fold, studies, plan, settings, pretrained)?;
    let ckpt = store.checkpoint_dir(&id, fold);
    let meta = BTreeMap::from([("config_id".to_string(), id.clone()), ("fold".to_string(), fold.to_string())]);
    save_checkpoint(&ckpt, &outcome.model, Some(&outcome.scaler), meta)?;
    outcome.record.write_csv(&dir.join(RECORD_FILE))?;

    // predict with the reloaded checkpoint so the table matches what is on disk
    let (model, scaler) = store.load_fold_model(&id, fold)?;
    let held_out = plan.fold_members(fold);
    if outcome.record.train_ids.iter().any(|p| held_out.contains(p)) {
        return Err(Error::Invalid(format!("{id}/{fold}: held-out patient in training stream")));
    }
    let test: Vec<&Study> = studies.iter().filter(|s| held_out.contains(&s.patient_id)).collect();
    let mut preds = predict_studies(config, &model, &scaler, &test, fold, settings.crop)?;
    preds.sort();
    preds.write_csv(&dir.join(PREDICTIONS_FILE))?;
    let timing = BTreeMap::from([("wall_time_s".to_string(), started.elapsed().as_secs_f64())]);
    write_json(&dir.join("timing.json"), &timing)?;
    Ok(JobStatus::Trained)
}

/// Trains every (configuration, fold) pair not already in the store, then
/// writes each configuration's concatenated predictions. Failures are
/// recorded and the remaining jobs proceed.
pub fn run_space(
    configs: &[Configuration],
    studies: &[Study],
    plan: &FoldPlan,
    settings: &TrainSettings,
    store: &JobStore,
    pretrained: Option<&Model>,
) -> Result<Vec<JobOutcome>> {
    if plan.folds != settings.folds {
        return Err(Error::Config(format!("fold plan has {} folds, settings ask for {}", plan.folds, settings.folds)));
    }
    let mut outcomes = Vec::new();
    for config in configs {
        config.validate()?;
        let id = config.id();
        let cdir = store.config_dir(&id);
        fs::create_dir_all(&cdir).map_err(Error::io(&cdir))?;
        write_json(&cdir.join(CONFIG_FILE), config)?;
        let mut complete = true;
        for fold in 0..plan.folds {
            let status = match run_job(store, config, fold, studies, plan, settings, pretrained) {
                Ok(s) => s,
                Err(e) => {
                    log::error!("{id} fold {fold}: {}: {e}", e.class());
                    complete = false;
                    JobStatus::Failed(format!("{}: {e}", e.class()))
                }
            };
            outcomes.push(JobOutcome { config_id: id.clone(), fold, status });
        }
        if complete {
            let mut all = PredictionSet::new(&id);
            for fold in 0..plan.folds {
                let part = PredictionSet::read_csv(&store.fold_dir(&id, fold).join(PREDICTIONS_FILE))?;
                all.rows.extend(part.rows);
            }
            all.sort();
            all.write_csv(&cdir.join(PREDICTIONS_FILE))?;
        }
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_fold_plan_k, preprocess_study};
    use crate::phantom::{patient_id, render_study, sample_params};

    fn planar(targets: Targets, sr: bool) -> Configuration {
        Configuration {
            architecture: "mini".into(),
            dimensionality: Dimensionality::Planar,
            ns: None,
            input_mode: Some(InputMode::Replicate),
            init: InitKind::Random,
            sr,
            targets,
            seed: 1,
        }
    }

    #[test]
    fn loss_weights_example() {
        let c = LossComponents::combine(Some(0.04), Some(0.6), Some(1.0), LossWeights::default());
        assert!((c.total - 0.17).abs() < 1e-12);
        let c = LossComponents::combine(None, Some(0.6), None, LossWeights::default());
        assert!((c.total - 0.03).abs() < 1e-12);
    }

    #[test]
    fn perfect_regression_has_zero_loss() {
        let mut g = Graph::new();
        let pred = g.input(Tensor::full(&[2, INDEX_COUNT], 0.3));
        let x = g.input(Tensor::scalar(0.0));
        let out = Outputs { regression: Some(pred), phase_logits: None, class_logits: None, seg_logits: None, features: x, observed: vec![] };
        let targets = BatchTargets { regression: Tensor::full(&[2, INDEX_COUNT], 0.3), phase: vec![0, 1], seg: vec![] };
        let loss = composite_loss(&mut g, &out, &targets, LossWeights::default()).unwrap();
        assert_eq!(loss.components.total, 0.0);
        assert_eq!(loss.components.ce_phase, None);
    }

    #[test]
    fn configuration_validation_and_ids() {
        let c = planar(Targets::Joint, true);
        assert!(c.validate().is_ok());
        assert_eq!(c.id(), c.clone().id());
        let mut d = c.clone();
        d.seed = 2;
        assert_ne!(c.id(), d.id());
        let mut v = c.clone();
        v.dimensionality = Dimensionality::Volumetric;
        assert!(v.validate().is_err());
        v.input_mode = None;
        v.ns = Some(4);
        assert!(v.validate().is_err());
        v.ns = Some(5);
        assert!(v.validate().is_ok());
    }

    #[test]
    fn experiment_file_parses_with_overrides() {
        let text = r#"
[defaults]
epochs = 150
crops_per_patient = 10
batch = 8
lr = 1e-4
beta1 = 0.9
beta2 = 0.999
eps = 1e-8
lambda_p = 0.05
lambda_s = 0.1
crop = 224
folds = 5

[desk_scale]
epochs = 3

[[config]]
architecture = "mini"
dimensionality = "3d"
ns = 5
init = "random"
sr = true
targets = "joint"
seed = 4
"#;
        let e = Experiment::parse(text).unwrap();
        assert_eq!(e.settings(false).epochs, 150);
        assert_eq!(e.settings(true).epochs, 3);
        assert_eq!(e.settings(true).lr, 1e-4);
        assert_eq!(e.configs[0].ns, Some(5));
        assert_eq!(Experiment::parse(&e.to_toml().unwrap()).unwrap(), e);
        assert!(Experiment::parse("[[config]]\narchitecture = \"mini\"\n").is_err());
    }

    fn small_dataset(n: usize) -> Vec<Study> {
        (0..n).map(|i| preprocess_study(&render_study(&sample_params(100 + i as u64), &patient_id(i)).unwrap())).collect()
    }

    #[test]
    fn short_training_reduces_loss_and_is_deterministic() {
        let studies = small_dataset(8);
        let ids: Vec<String> = studies.iter().map(|s| s.patient_id.clone()).collect();
        let plan = make_fold_plan_k(&ids, 2, 0).unwrap();
        let settings = TrainSettings { epochs: 5, crops_per_patient: 8, batch: 4, lr: 2e-3, crop: 96, folds: 2, ..Default::default() };
        let config = planar(Targets::Joint, true);
        let a = train_one(&config, 0, &studies, &plan, &settings, None).unwrap();
        let first = a.record.epochs[0];
        let last = *a.record.epochs.last().unwrap();
        assert!(last.total < first.total, "{:?}", a.record.epochs);
        for e in &a.record.epochs {
            let again = LossComponents::combine(e.mse, e.ce_phase, e.ce_seg, settings.weights());
            assert!((again.total - e.total).abs() < 1e-6);
            assert!(e.ce_seg.unwrap() > 0.0);
        }
        let short = TrainSettings { epochs: 1, ..settings.clone() };
        let b = train_one(&config, 0, &studies, &plan, &short, None).unwrap();
        assert_eq!(b.record.epochs[0], first);
    }

    #[test]
    fn job_store_skips_finished_runs() {
        let studies = small_dataset(8);
        let ids: Vec<String> = studies.iter().map(|s| s.patient_id.clone()).collect();
        let plan = make_fold_plan_k(&ids, 2, 1).unwrap();
        let settings = TrainSettings { epochs: 1, crops_per_patient: 2, batch: 4, crop: 64, folds: 2, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let store = JobStore::new(dir.path());
        let configs = [planar(Targets::Regression, false), planar(Targets::Classification, false)];
        let out = run_space(&configs, &studies, &plan, &settings, &store, None).unwrap();
        assert!(out.iter().all(|o| o.status == JobStatus::Trained));
        for c in &configs {
            let set = store.predictions(&c.id()).unwrap();
            assert_eq!(set.rows.len(), 8 * 20);
            for r in &set.rows {
                assert_eq!(plan.fold_of(&r.patient_id), Some(r.fold));
            }
        }
        let again = run_space(&configs, &studies, &plan, &settings, &store, None).unwrap();
        assert!(again.iter().all(|o| o.status == JobStatus::Skipped));
        let mut pre = planar(Targets::Regression, false);
        pre.init = InitKind::Pretrained;
        let failed = run_space(&[pre], &studies, &plan, &settings, &store, None).unwrap();
        assert!(matches!(failed[0].status, JobStatus::Failed(_)));
    }
}
