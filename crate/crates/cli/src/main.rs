mod manifest;
mod report;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use lvq_core::data::{
    load_dataset, make_fold_plan_k, preprocess_study, read_json, write_json, write_study, FoldPlan, Study, CANONICAL_SIZE,
};
use lvq_core::ensemble::{ensemble_predict, fold_averaged, nested_protocol, select_all, EnsembleSelection, DEFAULT_TOP_K};
use lvq_core::evaluate::{absolute_errors, score_all, wilcoxon_signed_rank, GroundTruth, PredictionSet};
use lvq_core::indices::Task;
use lvq_core::model::{load_checkpoint, pretext_pretrain, save_checkpoint, BackboneSpec, PretextConfig};
use lvq_core::phantom::generate_dataset;
use lvq_core::train::{run_space, Dimensionality, Experiment, InitKind, JobStatus, JobStore, TrainSettings, PREDICTIONS_FILE};
use serde_json::json;

use manifest::{plan, staged};

const FOLD_PLAN_FILE: &str = "fold_plan.json";
const SETTINGS_FILE: &str = "settings.json";
const SELECTIONS_FILE: &str = "selections.json";

#[derive(Parser)]
#[command(name = "lvq", version, about = "Left-ventricle index regression pipeline on phantom data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cardiac dataset.
    PhantomGen {
        #[arg(long, default_value_t = 56)]
        patients: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resample, crop and normalize a dataset into canonical space.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a 2D backbone on the shape-classification surrogate.
    Pretext {
        #[arg(long, default_value = "mini")]
        arch: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        /// Training images per class.
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every configuration of an experiment under cross-validation.
    Train {
        #[arg(long)]
        experiment: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        runs: PathBuf,
        /// Apply the experiment's desk-scale overrides.
        #[arg(long)]
        desk_scale: bool,
        /// Checkpoint from `pretext`, required by pretrained configurations.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        plan_seed: u64,
        /// Phase loss weight.
        #[arg(long)]
        lambda_p: Option<f64>,
        /// Segmentation loss weight.
        #[arg(long)]
        lambda_s: Option<f64>,
        /// Window length of every volumetric configuration.
        #[arg(long)]
        ns: Option<usize>,
    },
    /// Predict studies with fold-averaged models and selected ensembles.
    Predict {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to these configuration ids.
        #[arg(long = "config")]
        configs: Vec<String>,
        /// Ensemble selections from `ensemble-search`.
        #[arg(long)]
        selections: Option<PathBuf>,
    },
    /// Select per-task optimal ensembles from cross-validation predictions.
    EnsembleSearch {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Select on one half of every fold and score on the other.
        #[arg(long)]
        nested: bool,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        top_k: usize,
    },
    /// Score prediction tables and test pairwise differences.
    Evaluate {
        /// A prediction table or a directory of them.
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summary table of every configuration and both ensemble rows.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also render Bland-Altman and scatter plots.
        #[arg(long)]
        plots: bool,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        top_k: usize,
    },
}

/// A failure with an explicit class, for errors raised by the CLI itself.
#[derive(Debug)]
struct Classified {
    class: String,
    message: String,
}

impl fmt::Display for Classified {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Classified {}

fn error_class(err: &anyhow::Error) -> String {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<lvq_core::Error>() {
            return e.class().into();
        }
        if let Some(e) = cause.downcast_ref::<Classified>() {
            return e.class.clone();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "IoError".into();
        }
        if cause.downcast_ref::<csv::Error>().is_some() {
            return "CsvError".into();
        }
    }
    "Error".into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {}: {message}", error_class(&e));
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::PhantomGen { patients, seed, out } => phantom_gen(patients, seed, &out),
        Command::Preprocess { data, out } => preprocess(&data, &out),
        Command::Pretext { arch, seed, epochs, per_class, out } => pretext(&arch, seed, epochs, per_class, &out),
        Command::Train { experiment, data, runs, desk_scale, pretrained, plan_seed, lambda_p, lambda_s, ns } => {
            let args = TrainArgs { desk_scale, plan_seed, lambda_p, lambda_s, ns };
            train(&experiment, &data, &runs, pretrained.as_deref(), &args)
        }
        Command::Predict { runs, data, out, configs, selections } => predict(&runs, &data, &out, &configs, selections.as_deref()),
        Command::EnsembleSearch { runs, data, out, nested, top_k } => ensemble_search(&runs, &data, &out, nested, top_k),
        Command::Evaluate { predictions, data, out } => evaluate(&predictions, &data, &out),
        Command::Report { runs, data, out, plots, top_k } => report_cmd(&runs, &data, &out, plots, top_k),
    }
}

fn is_canonical(s: &Study) -> bool {
    s.spacing == 1.0 && s.shape() == (CANONICAL_SIZE, CANONICAL_SIZE)
}

/// Loads a dataset, preprocessing in memory if it is not canonical yet.
fn load_canonical(dir: &Path) -> Result<Vec<Study>> {
    let studies = load_dataset(dir).with_context(|| format!("loading {}", dir.display()))?;
    if studies.is_empty() {
        bail!(lvq_core::Error::Invalid(format!("no studies under {}", dir.display())));
    }
    Ok(studies.into_iter().map(|s| if is_canonical(&s) { s } else { preprocess_study(&s) }).collect())
}

fn ground_truth(dir: &Path) -> Result<GroundTruth> {
    let studies = load_dataset(dir).with_context(|| format!("loading {}", dir.display()))?;
    Ok(GroundTruth::from_studies(&studies))
}

fn phantom_gen(patients: usize, seed: u64, out: &Path) -> Result<()> {
    if patients == 0 {
        bail!(lvq_core::Error::Invalid("--patients must be positive".into()));
    }
    let m = plan("phantom-gen", json!({ "patients": patients }), &[], Some(seed))?;
    staged(out, m, |dir| {
        generate_dataset(patients, seed, dir)?;
        Ok(())
    })?;
    Ok(())
}

fn preprocess(data: &Path, out: &Path) -> Result<()> {
    let m = plan("preprocess", json!({ "size": CANONICAL_SIZE, "spacing_mm": 1.0 }), &[("data", data)], None)?;
    staged(out, m, |dir| {
        for s in load_dataset(data)? {
            write_study(&dir.join(&s.patient_id), &preprocess_study(&s))?;
        }
        Ok(())
    })?;
    Ok(())
}

fn pretext(arch: &str, seed: u64, epochs: Option<usize>, per_class: Option<usize>, out: &Path) -> Result<()> {
    let spec = BackboneSpec::from_name(arch)?;
    let mut config = PretextConfig { seed, ..PretextConfig::default() };
    if let Some(e) = epochs {
        config.epochs = e;
    }
    if let Some(n) = per_class {
        config.train_per_class = n;
    }
    let m = plan("pretext", json!({ "arch": arch, "pretext": config }), &[], Some(seed))?;
    staged(out, m, |dir| {
        let (model, rep) = pretext_pretrain(&spec, &config)?;
        if rep.val_accuracy <= rep.significance_threshold {
            log::warn!("pretext accuracy {:.3} is not above {:.3}", rep.val_accuracy, rep.significance_threshold);
        }
        let meta = BTreeMap::from([
            ("val_accuracy".to_string(), rep.val_accuracy.to_string()),
            ("significance_threshold".to_string(), rep.significance_threshold.to_string()),
        ]);
        save_checkpoint(dir, &model.without_head(), None, meta)?;
        write_json(&dir.join("pretext_report.json"), &rep)?;
        Ok(())
    })?;
    Ok(())
}

struct TrainArgs {
    desk_scale: bool,
    plan_seed: u64,
    lambda_p: Option<f64>,
    lambda_s: Option<f64>,
    ns: Option<usize>,
}

fn resolve_experiment(path: &Path, args: &TrainArgs) -> Result<(Experiment, TrainSettings)> {
    let mut exp = Experiment::load(path)?;
    if exp.configs.is_empty() {
        bail!(lvq_core::Error::Config("experiment has no [[config]] entries".into()));
    }
    let mut settings = exp.settings(args.desk_scale);
    if let Some(v) = args.lambda_p {
        settings.lambda_p = v;
    }
    if let Some(v) = args.lambda_s {
        settings.lambda_s = v;
    }
    if let Some(ns) = args.ns {
        for c in exp.configs.iter_mut().filter(|c| c.dimensionality == Dimensionality::Volumetric) {
            c.ns = Some(ns);
        }
    }
    for c in &exp.configs {
        c.validate()?;
    }
    Ok((exp, settings))
}

/// The job store is resumable, so training works in place: finished jobs
/// are kept, failed fold directories are moved to `<fold>.partial`.
fn train(experiment: &Path, data: &Path, runs: &Path, pretrained: Option<&Path>, args: &TrainArgs) -> Result<()> {
    let (exp, settings) = resolve_experiment(experiment, args)?;
    let resolved = json!({
        "configs": exp.configs,
        "settings": settings,
        "desk_scale": args.desk_scale,
        "plan_seed": args.plan_seed,
    });
    let mut inputs = vec![("data", data)];
    if let Some(p) = pretrained {
        inputs.push(("pretrained", p));
    }
    let mut m = plan("train", resolved, &inputs, Some(args.plan_seed))?;
    if manifest::up_to_date(runs, &m) {
        log::info!("train: {} is up to date", runs.display());
        return Ok(());
    }
    if runs.exists()
        && !runs.join(SETTINGS_FILE).is_file()
        && manifest::read_manifest(runs).is_none()
        && fs::read_dir(runs)?.next().is_some()
    {
        bail!(lvq_core::Error::Invalid(format!("{} is not empty and is not a run root", runs.display())));
    }
    if runs.join(SETTINGS_FILE).is_file() {
        let old: TrainSettings = read_json(&runs.join(SETTINGS_FILE))?;
        if old != settings {
            bail!(lvq_core::Error::Config(format!("{} holds runs trained with different settings", runs.display())));
        }
    }

    let needs_pretrained = exp.configs.iter().any(|c| c.init == InitKind::Pretrained);
    let pretrained_model = match pretrained {
        Some(p) => Some(load_checkpoint(p)?.0),
        None if needs_pretrained => {
            bail!(lvq_core::Error::MissingCheckpoint("pretrained configurations need --pretrained".into()))
        }
        None => None,
    };
    let studies = load_canonical(data)?;
    let ids: Vec<String> = studies.iter().map(|s| s.patient_id.clone()).collect();
    let fold_plan = make_fold_plan_k(&ids, settings.folds, args.plan_seed)?;
    fs::create_dir_all(runs)?;
    let plan_path = runs.join(FOLD_PLAN_FILE);
    if plan_path.is_file() && read_json::<FoldPlan>(&plan_path)? != fold_plan {
        bail!(lvq_core::Error::Config(format!("{} holds runs with a different fold plan", runs.display())));
    }
    write_json(&plan_path, &fold_plan)?;
    write_json(&runs.join(SETTINGS_FILE), &settings)?;

    let store = JobStore::new(runs);
    let outcomes = run_space(&exp.configs, &studies, &fold_plan, &settings, &store, pretrained_model.as_ref())?;
    let mut failures = Vec::new();
    for o in &outcomes {
        match &o.status {
            JobStatus::Failed(msg) => {
                let dir = store.fold_dir(&o.config_id, o.fold);
                let quarantine = manifest::partial_path(&dir);
                if quarantine.exists() {
                    fs::remove_dir_all(&quarantine)?;
                }
                if dir.exists() {
                    fs::rename(&dir, &quarantine)?;
                }
                failures.push((o, msg));
            }
            status => log::info!("{} fold {}: {status:?}", o.config_id, o.fold),
        }
    }
    if let Some((first, msg)) = failures.first() {
        let (class, detail) = msg.split_once(": ").unwrap_or(("TrainingFailed", msg));
        bail!(Classified {
            class: class.into(),
            message: format!(
                "{} of {} jobs failed; first {} fold {}: {detail}",
                failures.len(),
                outcomes.len(),
                first.config_id,
                first.fold
            ),
        });
    }
    m.outputs = manifest::list_outputs(runs)?;
    manifest::write_manifest(runs, &m)?;
    Ok(())
}

fn run_settings(runs: &Path) -> Result<TrainSettings> {
    let path = runs.join(SETTINGS_FILE);
    if !path.is_file() {
        bail!(lvq_core::Error::Invalid(format!("{} is not a run root (no {SETTINGS_FILE})", runs.display())));
    }
    Ok(read_json(&path)?)
}

/// Configurations whose cross-validation predictions are complete.
fn finished_sets(store: &JobStore) -> Result<Vec<PredictionSet>> {
    let mut sets = Vec::new();
    for id in store.configs()?.keys() {
        if store.config_dir(id).join(PREDICTIONS_FILE).is_file() {
            let set = store.predictions(id)?;
            set.validate()?;
            sets.push(set);
        } else {
            log::warn!("{id}: incomplete, left out");
        }
    }
    if sets.is_empty() {
        bail!(lvq_core::Error::Invalid(format!("no finished configurations under {}", store.root.display())));
    }
    Ok(sets)
}

fn predict(runs: &Path, data: &Path, out: &Path, only: &[String], selections: Option<&Path>) -> Result<()> {
    let settings = run_settings(runs)?;
    let mut inputs = vec![("runs", runs), ("data", data)];
    if let Some(s) = selections {
        inputs.push(("selections", s));
    }
    let m = plan("predict", json!({ "configs": only, "folds": settings.folds, "crop": settings.crop }), &inputs, None)?;
    staged(out, m, |dir| {
        let store = JobStore::new(runs);
        let configs = store.configs()?;
        for id in only {
            if !configs.contains_key(id) {
                bail!(lvq_core::Error::Invalid(format!("unknown configuration {id}")));
            }
        }
        let studies = load_canonical(data)?;
        let refs: Vec<&Study> = studies.iter().collect();
        for (id, config) in configs.iter().filter(|(id, _)| only.is_empty() || only.contains(id)) {
            let set = fold_averaged(config, &store, settings.folds, &refs, settings.crop)?;
            set.validate()?;
            set.write_csv(&dir.join(format!("{id}.csv")))?;
        }
        if let Some(path) = selections {
            let sels: Vec<EnsembleSelection> = read_json(path)?;
            for sel in sels {
                let members = sel
                    .members
                    .iter()
                    .map(|id| configs.get(id).cloned().ok_or_else(|| lvq_core::Error::MissingCheckpoint(id.clone())))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                let name = format!("ensemble-{}", sel.task.name());
                let set = ensemble_predict(&members, &store, settings.folds, &refs, settings.crop, &name)?;
                set.validate()?;
                set.write_csv(&dir.join(format!("{name}.csv")))?;
            }
        }
        Ok(())
    })?;
    Ok(())
}

fn ensemble_search(runs: &Path, data: &Path, out: &Path, nested: bool, top_k: usize) -> Result<()> {
    let m = plan("ensemble-search", json!({ "nested": nested, "top_k": top_k }), &[("runs", runs), ("data", data)], None)?;
    staged(out, m, |dir| {
        let sets = finished_sets(&JobStore::new(runs))?;
        let refs: Vec<&PredictionSet> = sets.iter().collect();
        let gt = ground_truth(data)?;
        let selections = if nested {
            let fold_plan: FoldPlan = read_json(&runs.join(FOLD_PLAN_FILE))?;
            nested_protocol(&refs, &gt, &fold_plan, top_k)?
        } else {
            select_all(&refs, &gt, top_k)?
        };
        for s in &selections {
            log::info!("{}: {:?} error {}", s.task.name(), s.members, s.selection_error);
        }
        write_json(&dir.join(SELECTIONS_FILE), &selections)?;
        Ok(())
    })?;
    Ok(())
}

fn prediction_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!(lvq_core::Error::Invalid(format!("no prediction tables in {}", path.display())));
    }
    Ok(files)
}

fn evaluate(predictions: &Path, data: &Path, out: &Path) -> Result<()> {
    let m = plan("evaluate", json!({}), &[("predictions", predictions), ("data", data)], None)?;
    staged(out, m, |dir| {
        let gt = ground_truth(data)?;
        let mut sets = Vec::new();
        for f in prediction_files(predictions)? {
            let set = PredictionSet::read_csv(&f)?;
            set.validate()?;
            sets.push(set);
        }
        let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
        w.write_record(["config_id", "task", "mae", "mae_std", "pcc", "rows"])?;
        for set in &sets {
            let rows = set.rows.iter().filter(|r| gt.get(&r.patient_id, r.frame).is_some()).count();
            if rows == 0 {
                bail!(lvq_core::Error::Invalid(format!("{} has no rows with ground truth", set.config_id)));
            }
            for s in score_all(set, &gt)? {
                let pcc = s.pcc.map(|v| v.to_string()).unwrap_or_default();
                w.write_record([set.config_id.clone(), s.task.name().into(), s.mae.to_string(), s.mae_std.to_string(), pcc, rows.to_string()])?;
            }
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("wilcoxon.csv"))?;
        w.write_record(["config_a", "config_b", "task", "n", "statistic", "p_value", "exact", "significant"])?;
        for (i, a) in sets.iter().enumerate() {
            for b in &sets[i + 1..] {
                if !(a.has_regression() && b.has_regression()) {
                    continue;
                }
                for task in Task::REGRESSION {
                    let (ea, eb) = (absolute_errors(a, &gt, task)?, absolute_errors(b, &gt, task)?);
                    match wilcoxon_signed_rank(&ea, &eb) {
                        Ok(r) => w.write_record([
                            a.config_id.clone(),
                            b.config_id.clone(),
                            task.name().into(),
                            r.n.to_string(),
                            r.statistic.to_string(),
                            r.p_value.to_string(),
                            r.exact.to_string(),
                            r.significant.to_string(),
                        ])?,
                        Err(lvq_core::Error::TooFewPairs(n)) => {
                            log::warn!("{} vs {} {}: only {n} non-zero pairs", a.config_id, b.config_id, task.name())
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    })?;
    Ok(())
}

fn report_cmd(runs: &Path, data: &Path, out: &Path, plots: bool, top_k: usize) -> Result<()> {
    let m = plan("report", json!({ "plots": plots, "top_k": top_k }), &[("runs", runs), ("data", data)], None)?;
    staged(out, m, |dir| {
        let store = JobStore::new(runs);
        let configs = store.configs()?;
        let sets = finished_sets(&store)?;
        let refs: Vec<&PredictionSet> = sets.iter().collect();
        let gt = ground_truth(data)?;
        let mut rows = Vec::new();
        for set in &sets {
            let label = configs.get(&set.config_id).map(|c| c.label()).unwrap_or_else(|| set.config_id.clone());
            rows.push(report::score_row(&label, set, &gt)?);
        }
        let (avg, _) = report::average_row(&refs, &gt)?;
        let (opt, selections, per_task) = report::optimal_row(&refs, &gt, top_k)?;
        rows.push(avg);
        rows.push(opt);
        report::write_table(&dir.join("table.csv"), &rows)?;
        write_json(&dir.join(SELECTIONS_FILE), &selections)?;
        if plots {
            report::write_plots(&dir.join("plots"), &per_task, &gt)?;
        }
        Ok(())
    })?;
    Ok(())
}
