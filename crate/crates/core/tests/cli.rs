use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

use fedhpro::experiment::{COMPLETE_MARKER, HYPER_FILE, MODEL_FILE};
use fedhpro::metrics::{
    persist, read_metrics_csv, FairnessStats, FinalMetrics, RoundRecord, RunSummary, METRICS_FILE, SUMMARY_FILE,
    SUMMARY_SCHEMA_VERSION,
};

const TINY: &str = "\
[data]
train_per_class = 20
test_per_class = 5

[federation]
local_epochs = 1

[federation.gm]
rounds = 2
";

fn fedhpro(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedhpro"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

fn run_dirs(root: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| !n.ends_with(".toml"))
        .collect();
    names.sort();
    names
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

#[test]
fn unknown_preset_exits_2_and_lists_presets() {
    let o = fedhpro(&["run", "--preset", "cifar"]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    for p in ["nid1", "nid2", "longtail", "domain2", "domain4"] {
        assert!(msg.contains(p), "{msg}");
    }
}

#[test]
fn unknown_gradcheck_suite_exits_2() {
    let o = fedhpro(&["gradcheck", "--suite", "nope"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gm-ds"));
}

#[test]
fn single_cell_writes_one_complete_directory() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("runs");
    let o = fedhpro(&[
        "run",
        "--preset",
        "nid1",
        "--alpha",
        "0.5",
        "--strategy",
        "fedhpro",
        "--seed",
        "7",
        "--rounds",
        "3",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(run_dirs(&out), vec!["nid1-a0.5_fedhpro_s7"]);
    let cell = out.join("nid1-a0.5_fedhpro_s7");
    for f in [
        COMPLETE_MARKER,
        METRICS_FILE,
        SUMMARY_FILE,
        MODEL_FILE,
        HYPER_FILE,
        "timing.csv",
    ] {
        assert!(cell.join(f).is_file(), "missing {f}");
    }
    let records = read_metrics_csv(&cell.join(METRICS_FILE)).unwrap();
    assert_eq!(records.len(), 3);
    let text = fs::read_to_string(cell.join(METRICS_FILE)).unwrap();
    assert_eq!(text.lines().count(), 4);

    let summary = RunSummary::load(&cell.join(SUMMARY_FILE)).unwrap();
    assert_eq!(summary.seed, 7);
    assert_eq!(summary.strategy, "fedhpro");
    assert_eq!(summary.config["federation"]["rounds"], 3);
    assert_eq!(summary.config["data"]["train_per_class"], 20);
    assert_eq!(summary.config["alpha"], 0.5);
}

#[test]
fn matrix_run_refuses_overwrite_without_force() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("runs");
    let args = [
        "run",
        "--preset",
        "nid1",
        "--strategies",
        "fedavg,fedhpro",
        "--seeds",
        "1,2,3",
        "--rounds",
        "2",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ];
    let o = fedhpro(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let dirs = run_dirs(&out);
    assert_eq!(dirs.len(), 6, "{dirs:?}");
    assert!(dirs.iter().all(|d| out.join(d).join(COMPLETE_MARKER).is_file()));

    let before = sha(&out.join("nid1-a0.5_fedavg_s1").join(METRICS_FILE));
    let again = fedhpro(&args);
    assert!(!again.status.success());
    assert!(stderr(&again).contains("--force"));

    let mut forced = args.to_vec();
    forced.push("--force");
    let o = fedhpro(&forced);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(run_dirs(&out).len(), 6);
    assert_eq!(sha(&out.join("nid1-a0.5_fedavg_s1").join(METRICS_FILE)), before);
}

#[test]
fn identical_runs_produce_identical_files() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let go = |name: &str, workers: &str| {
        let out = tmp.path().join(name);
        let o = fedhpro(&[
            "run",
            "--preset",
            "domain4",
            "--strategy",
            "fedproto-hp",
            "--seed",
            "5",
            "--rounds",
            "3",
            "--workers",
            workers,
            "--config",
            cfg.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        out.join("domain4_fedproto-hp_s5")
    };
    let a = go("a", "1");
    let b = go("b", "8");
    for f in [METRICS_FILE, SUMMARY_FILE, MODEL_FILE, HYPER_FILE] {
        assert_eq!(sha(&a.join(f)), sha(&b.join(f)), "{f} differs");
    }
}

#[test]
fn invalid_config_leaves_no_output() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[federation]\nlearning_rte = 0.1\n").unwrap();
    let out = tmp.path().join("runs");
    let o = fedhpro(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rte"));
    assert!(!out.exists());
}

fn fixture_cell(root: &Path, name: &str, strategy: &str, seed: u64, finals: &[f64]) -> PathBuf {
    let dir = root.join(name);
    let records: Vec<RoundRecord> = finals
        .iter()
        .enumerate()
        .map(|(i, &acc)| RoundRecord {
            round: i + 1,
            participants: 2,
            train_ce: 1.0,
            train_hpcl: 0.0,
            train_hpal: 0.0,
            train_proto: 0.0,
            gm_loss_start: None,
            gm_loss: None,
            test_accuracy: acc,
            domain_accuracy: vec![],
            fairness: FairnessStats::default(),
            proto_l2: vec![Some(0.5), None],
            hyper_l2: vec![None, None],
            proto_l2_mean: Some(0.5),
            hyper_l2_mean: None,
        })
        .collect();
    let summary = RunSummary {
        schema_version: SUMMARY_SCHEMA_VERSION.into(),
        build: "fixture".into(),
        preset: "nid1-a0.5".into(),
        strategy: strategy.into(),
        seed,
        rounds: records.len(),
        config: serde_json::json!({}),
        final_metrics: FinalMetrics {
            test_accuracy: *finals.last().unwrap(),
            ..FinalMetrics::default()
        },
    };
    persist(&records, &summary, &dir).unwrap();
    fs::write(dir.join(COMPLETE_MARKER), "3\n").unwrap();
    dir
}

#[test]
fn three_round_fixture_has_three_data_rows() {
    let tmp = TempDir::new().unwrap();
    let dir = fixture_cell(tmp.path(), "f", "fedavg", 1, &[0.5, 0.6, 0.7]);
    let text = fs::read_to_string(dir.join(METRICS_FILE)).unwrap();
    assert_eq!(text.lines().count(), 1 + 3);
    let back = read_metrics_csv(&dir.join(METRICS_FILE)).unwrap();
    assert_eq!(
        back.iter().map(|r| r.test_accuracy).collect::<Vec<_>>(),
        vec![0.5, 0.6, 0.7]
    );
}

#[test]
fn compare_reports_delta_against_first_strategy() {
    let tmp = TempDir::new().unwrap();
    let a = fixture_cell(tmp.path(), "a", "fedavg", 1, &[0.4, 0.80]);
    let b = fixture_cell(tmp.path(), "b", "fedhpro", 1, &[0.5, 0.85]);
    let json = tmp.path().join("cmp.json");
    let o = fedhpro(&[
        "compare",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--json",
        json.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("+5.00"), "{table}");
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["baseline"], "fedavg");
    assert!((v["rows"][1]["delta"].as_f64().unwrap() - 0.05).abs() < 1e-12);
    assert_eq!(v["rows"][0]["delta"].as_f64().unwrap(), 0.0);
}

#[test]
fn comparing_a_run_with_itself_gives_zero_delta() {
    let tmp = TempDir::new().unwrap();
    let a = fixture_cell(tmp.path(), "a", "fedhpro", 4, &[0.71]);
    let json = tmp.path().join("cmp.json");
    let o = fedhpro(&[
        "compare",
        a.to_str().unwrap(),
        a.to_str().unwrap(),
        "--json",
        json.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 1);
    assert_eq!(v["rows"][0]["delta"].as_f64().unwrap(), 0.0);
    assert_eq!(v["rows"][0]["runs"], 2);
}

#[test]
fn compare_accepts_parent_directories() {
    let tmp = TempDir::new().unwrap();
    fixture_cell(tmp.path(), "x1", "fedavg", 1, &[0.6]);
    fixture_cell(tmp.path(), "x2", "fedavg", 2, &[0.8]);
    let o = fedhpro(&["compare", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("70.00"));
}

#[test]
fn compare_missing_dir_names_the_path() {
    let tmp = TempDir::new().unwrap();
    let a = fixture_cell(tmp.path(), "a", "fedavg", 1, &[0.8]);
    let missing = tmp.path().join("does-not-exist");
    let o = fedhpro(&["compare", a.to_str().unwrap(), missing.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("does-not-exist"), "{}", stderr(&o));
}

#[test]
fn compare_rejects_schema_mismatch() {
    let tmp = TempDir::new().unwrap();
    let a = fixture_cell(tmp.path(), "a", "fedavg", 1, &[0.8]);
    let b = fixture_cell(tmp.path(), "b", "fedavg", 2, &[0.8]);
    let path = b.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path)
        .unwrap()
        .replace(SUMMARY_SCHEMA_VERSION, "fedhpro-summary-v0");
    fs::write(&path, text).unwrap();
    let o = fedhpro(&["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("schema"), "{}", stderr(&o));
}

#[test]
fn dataset_export_round_trips_through_csv() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("data");
    let o = fedhpro(&[
        "dataset",
        "export",
        "--preset",
        "nid2",
        "--seed",
        "3",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let clients: Vec<_> = (0..7)
        .map(|k| fedhpro::data::load_csv(&out.join(format!("client_{k}.csv")), 10).unwrap())
        .collect();
    assert!(!out.join("client_7.csv").exists());
    assert_eq!(clients.iter().map(|c| c.len()).sum::<usize>(), 200);
    assert_eq!(clients[0].class_counts()[0], 10);

    let again = fedhpro(&[
        "dataset",
        "export",
        "--preset",
        "nid2",
        "--seed",
        "3",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(!again.status.success());
}
