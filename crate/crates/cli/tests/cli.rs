use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const EXPERIMENT: &str = r#"
[defaults]
epochs = 1
crops_per_patient = 1
batch = 2
lr = 1e-3
beta1 = 0.9
beta2 = 0.999
eps = 1e-8
lambda_p = 0.05
lambda_s = 0.1
crop = 64
folds = 5

[[config]]
architecture = "mini"
dimensionality = "2d"
input_mode = "replicate"
init = "random"
sr = false
targets = "regression"
seed = 1

[[config]]
architecture = "mini"
dimensionality = "2d"
input_mode = "neighbors"
init = "random"
sr = false
targets = "joint"
seed = 2
"#;

fn lvq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lvq")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = lvq(args);
    assert!(out.status.success(), "lvq {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// The single `error:` line of a failed run.
fn error_line(out: &Output) -> String {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().filter(|l| l.starts_with("error: ")).collect();
    assert_eq!(lines.len(), 1, "stderr: {stderr}");
    lines[0].to_string()
}

struct Pipeline {
    root: PathBuf,
}

impl Pipeline {
    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn run(root: &Path) -> Self {
        let pl = Pipeline { root: root.to_path_buf() };
        fs::create_dir_all(root).unwrap();
        let exp = pl.dir("exp.toml");
        fs::write(&exp, EXPERIMENT).unwrap();
        ok(&["phantom-gen", "--patients", "10", "--seed", "3", "--out", p(&pl.dir("raw"))]);
        ok(&["preprocess", "--data", p(&pl.dir("raw")), "--out", p(&pl.dir("data"))]);
        ok(&["train", "--experiment", p(&exp), "--data", p(&pl.dir("data")), "--runs", p(&pl.dir("runs")), "--plan-seed", "5"]);
        ok(&["ensemble-search", "--runs", p(&pl.dir("runs")), "--data", p(&pl.dir("data")), "--out", p(&pl.dir("sel"))]);
        ok(&["ensemble-search", "--runs", p(&pl.dir("runs")), "--data", p(&pl.dir("data")), "--out", p(&pl.dir("nested")), "--nested"]);
        ok(&["report", "--runs", p(&pl.dir("runs")), "--data", p(&pl.dir("data")), "--out", p(&pl.dir("report")), "--plots"]);
        pl
    }
}

fn read(path: PathBuf) -> Vec<u8> {
    fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn pipeline_runs_end_to_end_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = Pipeline::run(&tmp.path().join("a"));

    // report rows: one per configuration plus both ensembles
    let table = fs::read_to_string(a.dir("report/table.csv")).unwrap();
    let methods: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods.len(), 4, "{table}");
    assert_eq!(&methods[2..], ["Ensemble Average", "Ensemble Optimal"]);
    assert!(a.dir("report/plots/bland_altman_cavity_area.svg").is_file());
    assert!(a.dir("report/plots/scatter_rwt6.svg").is_file());

    let nested: serde_json::Value = serde_json::from_slice(&read(a.dir("nested/selections.json"))).unwrap();
    for sel in nested.as_array().unwrap() {
        let s: Vec<&str> = sel["selection_patients"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
        assert!(sel["evaluation_patients"].as_array().unwrap().iter().all(|v| !s.contains(&v.as_str().unwrap())));
        assert!(sel["evaluation_error"].is_number());
    }

    // unseen-data prediction with the selected ensembles, then metrics
    ok(&[
        "predict",
        "--runs",
        p(&a.dir("runs")),
        "--data",
        p(&a.dir("raw")),
        "--out",
        p(&a.dir("pred")),
        "--selections",
        p(&a.dir("sel/selections.json")),
    ]);
    let tables: Vec<String> = fs::read_dir(a.dir("pred"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    assert!(tables.iter().any(|n| n == "ensemble-areas.csv"), "{tables:?}");
    assert!(tables.iter().any(|n| n == "ensemble-phase.csv"), "{tables:?}");
    ok(&["evaluate", "--predictions", p(&a.dir("pred")), "--data", p(&a.dir("data")), "--out", p(&a.dir("eval"))]);
    let metrics = fs::read_to_string(a.dir("eval/metrics.csv")).unwrap();
    assert!(metrics.lines().count() > 4);
    assert!(a.dir("eval/wilcoxon.csv").is_file());

    // identical rerun is a no-op
    let manifest = a.dir("runs/run_manifest.json");
    let before = fs::metadata(&manifest).unwrap().modified().unwrap();
    let exp = a.dir("exp.toml");
    ok(&["train", "--experiment", p(&exp), "--data", p(&a.dir("data")), "--runs", p(&a.dir("runs")), "--plan-seed", "5"]);
    assert_eq!(fs::metadata(&manifest).unwrap().modified().unwrap(), before);

    // a second run in another directory is byte-identical
    let b = Pipeline::run(&tmp.path().join("b"));
    for rel in [
        "raw/run_manifest.json",
        "raw/manifest.json",
        "data/run_manifest.json",
        "runs/run_manifest.json",
        "runs/fold_plan.json",
        "sel/selections.json",
        "sel/run_manifest.json",
        "nested/selections.json",
        "report/table.csv",
        "report/run_manifest.json",
    ] {
        assert_eq!(read(a.dir(rel)), read(b.dir(rel)), "{rel} differs");
    }
    let ids: Vec<String> = fs::read_dir(a.dir("runs"))
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(ids.len(), 2);
    for id in ids {
        assert_eq!(read(a.dir("runs").join(&id).join("predictions.csv")), read(b.dir("runs").join(&id).join("predictions.csv")));
    }
}

#[test]
fn evaluate_reports_zero_error_for_exact_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    ok(&["phantom-gen", "--patients", "2", "--seed", "9", "--out", p(&raw)]);
    let mut rows = vec!["config_id,patient_id,frame,cavity_area,myo_area,dim1,dim2,dim3,rwt1,rwt2,rwt3,rwt4,rwt5,rwt6,p_systole,p_diastole,fold".to_string()];
    for pid in ["P000", "P001"] {
        let idx: serde_json::Value = serde_json::from_slice(&read(raw.join(pid).join("indices.json"))).unwrap();
        for f in idx["frames"].as_array().unwrap() {
            let vals: Vec<String> = f["values"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap().to_string()).collect();
            let (sys, dia) = if f["phase"] == "systole" { ("1", "0") } else { ("0", "1") };
            rows.push(format!("exact,{pid},{},{},{sys},{dia},0", f["frame"], vals.join(",")));
        }
    }
    let pred = tmp.path().join("exact.csv");
    fs::write(&pred, rows.join("\n") + "\n").unwrap();
    ok(&["evaluate", "--predictions", p(&pred), "--data", p(&raw), "--out", p(&tmp.path().join("eval"))]);
    let metrics = fs::read_to_string(tmp.path().join("eval/metrics.csv")).unwrap();
    let data_rows: Vec<&str> = metrics.lines().skip(1).collect();
    assert_eq!(data_rows.len(), 4);
    for line in data_rows {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[2], "0", "{line}");
    }
}

#[test]
fn failures_exit_nonzero_with_one_classified_line() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();

    let bad = t.join("bad.toml");
    fs::write(&bad, "[[config]]\narchitecture = \"mini\"\n").unwrap();
    let line = error_line(&lvq(&["train", "--experiment", p(&bad), "--data", p(t), "--runs", p(&t.join("runs"))]));
    assert!(line.starts_with("error: ConfigError: "), "{line}");

    let pre = t.join("pre.toml");
    fs::write(&pre, EXPERIMENT.replace("init = \"random\"", "init = \"pretrained\"")).unwrap();
    let line = error_line(&lvq(&["train", "--experiment", p(&pre), "--data", p(t), "--runs", p(&t.join("runs"))]));
    assert!(line.starts_with("error: MissingCheckpoint: "), "{line}");

    let foreign = t.join("foreign");
    fs::create_dir_all(&foreign).unwrap();
    fs::write(foreign.join("keep.txt"), "user data").unwrap();
    let line = error_line(&lvq(&["phantom-gen", "--patients", "1", "--out", p(&foreign)]));
    assert!(line.starts_with("error: InvalidInput: "), "{line}");
    assert_eq!(fs::read_to_string(foreign.join("keep.txt")).unwrap(), "user data");

    let line = error_line(&lvq(&["report", "--runs", p(&t.join("nowhere")), "--data", p(t), "--out", p(&t.join("r"))]));
    assert!(line.starts_with("error: InvalidInput: "), "{line}");
    assert!(!t.join("r").exists());
}
