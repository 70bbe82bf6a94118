use std::path::Path;
use std::process::{Command, Output};

use credfuse::data::{load_dataset, Split};
use credfuse::metrics::MetricsReport;
use credfuse::model::load_model;
use credfuse::train::{evaluate, EpochRecord};

fn credfuse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_credfuse"))
        .args(args)
        .current_dir(dir)
        .env_remove("CREDFUSE_SEED")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = credfuse(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_dataset(dir: &Path) {
    ok(
        dir,
        &[
            "gen",
            "--out",
            "data.json",
            "--classes",
            "3",
            "--examples",
            "240",
            "--seed",
            "3",
        ],
    );
}

#[test]
fn gen_with_the_same_seed_writes_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--seed", "7", "--out", "a.json"]);
    ok(d, &["gen", "--seed", "7", "--out", "b.json"]);
    ok(d, &["gen", "--seed", "8", "--out", "c.json"]);
    let read = |f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read("a.json"), read("b.json"));
    assert_ne!(read("a.json"), read("c.json"));
}

#[test]
fn seed_comes_from_flag_then_config_then_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.toml"), "[gen]\nseed = 5\nexamples = 100\n").unwrap();
    ok(d, &["gen", "--seed", "5", "--examples", "100", "--out", "flag.json"]);
    ok(d, &["--config", "c.toml", "gen", "--out", "config.json"]);
    let env = Command::new(env!("CARGO_BIN_EXE_credfuse"))
        .args(["gen", "--examples", "100", "--out", "env.json"])
        .current_dir(d)
        .env("CREDFUSE_SEED", "5")
        .output()
        .unwrap();
    assert!(env.status.success());
    ok(
        d,
        &["--config", "c.toml", "gen", "--seed", "6", "--out", "override.json"],
    );
    let read = |f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read("flag.json"), read("config.json"));
    assert_eq!(read("flag.json"), read("env.json"));
    assert_ne!(read("flag.json"), read("override.json"));
}

#[test]
fn eval_reproduces_the_final_validation_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);
    ok(
        d,
        &[
            "train",
            "--data",
            "data.json",
            "--fusion",
            "dpc",
            "--iters",
            "150",
            "--seed",
            "1",
            "--out",
            "m.json",
            "--history",
            "h.jsonl",
        ],
    );
    let history = std::fs::read_to_string(d.join("h.jsonl")).unwrap();
    let last: EpochRecord = serde_json::from_str(history.lines().last().unwrap()).unwrap();
    assert_eq!(last.iter, 150);

    let stdout = ok(
        d,
        &["eval", "--model", "m.json", "--data", "data.json", "--split", "val"],
    );
    let json_end = stdout.find("\n}").unwrap() + 2;
    let reported: MetricsReport = serde_json::from_str(&stdout[..json_end]).unwrap();
    assert_eq!(Some(reported), last.val_metrics);

    // the library agrees with the binary
    let model = load_model(d.join("m.json")).unwrap();
    let val = load_dataset(d.join("data.json")).unwrap().subset(Split::Val).unwrap();
    let (loss, metrics) = evaluate(&model, &val).unwrap();
    assert_eq!(Some(metrics), last.val_metrics);
    assert_eq!(Some(loss), last.val_loss);
}

#[test]
fn validate_passes_on_a_trained_circuit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--out", "data.json", "--examples", "120", "--seed", "2"]);
    ok(
        d,
        &[
            "train",
            "--data",
            "data.json",
            "--fusion",
            "cwm",
            "--iters",
            "40",
            "--out",
            "m.json",
            "--history",
            "h.jsonl",
        ],
    );
    let report = ok(d, &["validate", "--model", "m.json", "--dominance-grid", "10"]);
    assert!(report.contains("smooth: ok"), "{report}");
    assert!(report.contains("decomposable: ok"), "{report}");
    assert!(report.contains("marginal dominance (grid 10)"), "{report}");
}

#[test]
fn credibility_reports_every_example() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);
    ok(
        d,
        &[
            "train",
            "--data",
            "data.json",
            "--iters",
            "40",
            "--out",
            "m.json",
            "--history",
            "h.jsonl",
        ],
    );
    ok(
        d,
        &[
            "credibility",
            "--model",
            "m.json",
            "--data",
            "data.json",
            "--split",
            "test",
            "--out",
            "c.jsonl",
        ],
    );
    let lines = std::fs::read_to_string(d.join("c.jsonl")).unwrap();
    let test_size = load_dataset(d.join("data.json"))
        .unwrap()
        .subset(Split::Test)
        .unwrap()
        .len();
    assert_eq!(lines.lines().count(), test_size);
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let rel: Vec<f64> = serde_json::from_value(v["relative"].clone()).unwrap();
        assert!((rel.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn experiment_subcommands_write_csv_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);
    ok(
        d,
        &[
            "train",
            "--data",
            "data.json",
            "--fusion",
            "cwm",
            "--iters",
            "60",
            "--out",
            "cwm.json",
            "--history",
            "h1.jsonl",
        ],
    );
    ok(
        d,
        &[
            "train",
            "--data",
            "data.json",
            "--fusion",
            "wm",
            "--iters",
            "60",
            "--out",
            "wm.json",
            "--history",
            "h2.jsonl",
        ],
    );

    ok(
        d,
        &[
            "sweep-noise",
            "--data",
            "data.json",
            "--model",
            "cwm.json",
            "--lambdas",
            "0,1",
            "--trials",
            "1",
            "--iters",
            "20",
            "--out",
            "sweep.csv",
            "--metrics-out",
            "sweep_metrics.csv",
        ],
    );
    let sweep = credfuse::experiments::load_credibility_csv(d.join("sweep.csv")).unwrap();
    assert_eq!(sweep.len(), 4);
    assert_eq!(
        credfuse::experiments::load_metrics_csv(d.join("sweep_metrics.csv"))
            .unwrap()
            .len(),
        4
    );

    ok(
        d,
        &[
            "sweep-epochs",
            "--data",
            "data.json",
            "--lambdas",
            "0.2",
            "--iters",
            "30",
            "--out",
            "epochs.csv",
        ],
    );
    let epochs = credfuse::experiments::load_credibility_csv(d.join("epochs.csv")).unwrap();
    assert!(epochs.iter().all(|r| r.epoch.is_some()));

    ok(
        d,
        &[
            "robustness",
            "--data",
            "data.json",
            "--models",
            "cwm.json,wm.json",
            "--lambdas",
            "0.2,1",
            "--trials",
            "2",
            "--out",
            "rob.csv",
        ],
    );
    let rows = credfuse::experiments::load_metrics_csv(d.join("rob.csv")).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 2);
}

#[test]
fn failures_exit_with_their_category() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let code = |args: &[&str]| credfuse(d, args).status.code();
    assert_eq!(code(&["gen", "--bogus"]), Some(2));
    assert_eq!(
        code(&["eval", "--model", "missing.json", "--data", "missing.json"]),
        Some(3)
    );
    std::fs::write(d.join("broken.json"), "{ not json").unwrap();
    assert_eq!(code(&["validate", "--model", "broken.json"]), Some(4));
    assert_eq!(code(&["gen", "--out", "x.json", "--classes", "1"]), Some(5));
    small_dataset(d);
    assert_eq!(
        code(&["eval", "--model", "data.json", "--data", "data.json", "--split", "nope"]),
        Some(4)
    );
    ok(
        d,
        &[
            "train",
            "--data",
            "data.json",
            "--iters",
            "5",
            "--out",
            "m.json",
            "--history",
            "h.jsonl",
        ],
    );
    assert_eq!(
        code(&["eval", "--model", "m.json", "--data", "data.json", "--split", "nope"]),
        Some(2)
    );
    assert_eq!(
        code(&["train", "--data", "data.json", "--out", "m2.json", "--eta1=-1"]),
        Some(5)
    );
}
