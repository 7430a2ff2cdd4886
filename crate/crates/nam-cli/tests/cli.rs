use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nam::baskets::build_baskets;
use nam::eval::{evaluate, make_cold_split};
use nam::ingest::{build_registry, parse_metadata, RegistryConfig, RegistryInputs};
use nam::model::ViewMode;
use nam::training::{build_pair_dataset, load_checkpoint};
use nam::views::{load_dense_view, Catalog, ItemIdx, ViewId, ViewKind};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixture/run.toml")
}

fn nam(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nam"))
        .arg("--manifest")
        .arg(fixture())
        .arg("--out")
        .arg(out)
        .arg("--strict")
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = nam(out, args);
    assert!(
        o.status.success(),
        "nam {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn pipeline(out: &Path) {
    for stage in ["ingest", "split-cold", "train-cf", "train-phase1", "train-phase2"] {
        ok(out, &[stage]);
    }
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn ingest_reports_counts_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let stdout = ok(a.path(), &["ingest"]);
    assert!(stdout.contains("items 26"), "{stdout}");
    assert!(stdout.contains("users 40 (train 32, test 8)"), "{stdout}");
    let first = fs::read(a.path().join("dataset.json")).unwrap();
    ok(a.path(), &["ingest"]);
    assert_eq!(first, fs::read(a.path().join("dataset.json")).unwrap());
}

#[test]
fn missing_input_is_a_data_error_naming_the_path() {
    let out = tempfile::tempdir().unwrap();
    let o = nam(out.path(), &["--set", "data.ratings=\"nope.csv\"", "ingest"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.csv"));
}

#[test]
fn usage_errors_exit_1() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(nam(out.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(nam(out.path(), &["--set", "train.epoch=3", "ingest"]).status.code(), Some(1));
    assert_eq!(nam(out.path(), &["evaluate", "--mode", "best"]).status.code(), Some(1));
}

#[test]
fn phase2_requires_phase1() {
    let out = tempfile::tempdir().unwrap();
    for stage in ["ingest", "train-cf"] {
        ok(out.path(), &[stage]);
    }
    let o = nam(out.path(), &["train-phase2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-phase1"));
}

#[test]
fn pipeline_is_deterministic_and_matches_the_library() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    ok(a.path(), &["evaluate"]);
    ok(b.path(), &["--threads", "2", "evaluate"]);
    for f in ["phase1.json", "phase2.json", "report-nam.csv", "phase2_loss.csv", "views/cf.tsv"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f} differs between runs"
        );
    }

    // Loss trace: comment, header, one row per epoch.
    let loss = fs::read_to_string(a.path().join("phase2_loss.csv")).unwrap();
    let mut lines = loss.lines();
    assert!(lines.next().unwrap().starts_with("# seed=11 checkpoint="));
    assert_eq!(lines.next().unwrap(), "epoch,phase,mean_loss");
    assert_eq!(lines.count(), 3);

    // Rebuild the same fold through the library and compare reports.
    let dir = fixture().parent().unwrap().to_path_buf();
    let ds: serde_json::Value = serde_json::from_slice(&fs::read(a.path().join("dataset.json")).unwrap()).unwrap();
    let users = |key: &str| -> Vec<Vec<ItemIdx>> { serde_json::from_value(ds[key].clone()).unwrap() };
    let catalog = Catalog::new(ds["ids"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()));
    let (train, _) = build_baskets(users("train"));
    let (split, train, _) = make_cold_split(&catalog, &train, 0.2, 11).unwrap();
    let mut split = split;
    let seen: BTreeSet<ItemIdx> = train.items().into_iter().collect();
    for i in catalog.items().filter(|i| !seen.contains(i)) {
        split.warm_items.remove(&i);
        split.cold_items.insert(i);
    }
    let schema = "genres:multihot,year:scalar".parse().unwrap();
    let (metadata, _) = parse_metadata(&dir.join("metadata.tsv"), &schema, true).unwrap();
    let cf = load_dense_view(&a.path().join("views/cf.tsv"), ViewId::new("cf", ViewKind::Cf), 8).unwrap();
    let (registry, _) = build_registry(
        RegistryInputs {
            catalog: catalog.clone(),
            metadata: Some(&metadata),
            cf: Some(cf),
            dense: Vec::new(),
            training_items: Some(&seen),
        },
        &RegistryConfig::default(),
    )
    .unwrap();
    let model = load_checkpoint(&a.path().join("phase2.json"), &registry).unwrap().model;
    let (test, _) = build_baskets(users("test"));
    let report = evaluate(
        &model,
        &registry,
        &build_pair_dataset(&test),
        &split,
        &[1, 5, 10],
        &ViewMode::Nam.enabled(registry.views()),
    )
    .unwrap();
    let cli = fs::read_to_string(a.path().join("report-nam.csv")).unwrap();
    let body: String = cli.lines().skip(1).map(|l| format!("{l}\n")).collect();
    assert_eq!(body, report.to_csv());
}

#[test]
fn evaluate_modes_and_recommend() {
    let out = tempfile::tempdir().unwrap();
    pipeline(out.path());
    let cf_only = ok(out.path(), &["evaluate", "--mode", "cf-only", "--k", "5"]);
    assert!(cf_only.contains("no view"), "{cf_only}");
    for row in csv_rows(&out.path().join("report-cf-only.csv")) {
        if row[0].starts_with("cold") {
            assert_eq!(row[3].parse::<f64>().unwrap(), 0.0, "{row:?}");
        }
    }

    // More than the catalog: every other item comes back once.
    ok(out.path(), &["recommend", "--item", "m1", "--k", "100"]);
    let rows = csv_rows(&out.path().join("recommend-m1.csv"));
    assert_eq!(rows.len(), 25);
    for row in &rows {
        let vals: Vec<f64> = row[2..].iter().map(|v| v.parse().unwrap_or(f64::NAN)).collect();
        let psi = vals[0];
        let (mut sum_a, mut sum_amu) = (0.0, 0.0);
        for view in vals[1..].chunks(3) {
            sum_a += view[0];
            if view[0] != 0.0 {
                sum_amu += view[0] * view[1];
            }
        }
        assert!((sum_a - 1.0).abs() <= 1e-9, "{row:?}");
        assert!((psi - sum_amu).abs() <= 1e-9, "{row:?}");
    }

    ok(out.path(), &["recommend", "--item", "m1", "--k", "5", "--mode", "nam-cb"]);
    let rows = csv_rows(&out.path().join("recommend-m1.csv"));
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r[3] == "0"), "a_cf must be exactly 0: {rows:?}");

    let o = nam(out.path(), &["recommend", "--item", "m999"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn selftest_passes_and_catches_a_corrupted_backward() {
    let out = tempfile::tempdir().unwrap();
    let stdout = ok(out.path(), &["selftest", "--cases", "5"]);
    assert!(stdout.contains("phase2_loss") && stdout.contains("max rel error"), "{stdout}");
    let o = nam(out.path(), &["selftest", "--cases", "5", "--corrupt-backward", "1.01"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn cross_validate_writes_an_aggregate() {
    let out = tempfile::tempdir().unwrap();
    ok(out.path(), &["--set", "data.folds=2", "cross-validate", "--k", "5"]);
    let rows = csv_rows(&out.path().join("cv.csv"));
    assert!(rows.iter().any(|r| r[0] == "warm" && r[2] == "hr" && r[5] == "2"), "{rows:?}");
    assert!(out.path().join("cv_folds.csv").exists());
}
