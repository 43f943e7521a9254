//! Files in and out: datasets, configs, metrics and the command line.

use std::fs;
use std::path::Path;
use std::process::Command;

use fabk::config::{ExperimentConfig, SweepConfig};
use fabk::data::{partition_by_writer_csv, write_writer_csv, FederatedDataset};
use fabk::harness::{self, RoundRecord, SUMMARY_HEADER};
use fabk::{Error, Sample};

const CONFIG: &str = r#"
id = "io"
seed = 5

[data]
source = "synthetic"
classes = 4
features = 10
samples_per_class = 40
clients = 8
holdout_per_class = 10

[model]
kind = "mlp"
hidden = 6

[strategy]
kind = "fab_topk"
k = 12

[training]
max_rounds = 40
eta = 0.1
eval_every = 7

[controller]
kind = "extended"
update_window = 5

[timing]
comm_time_full = 10
"#;

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn writer_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let shards = vec![
        vec![Sample::new(vec![1.0, 2.5], 0), Sample::new(vec![-1.0, 0.0], 1)],
        vec![Sample::new(vec![0.125, 3.0], 2)],
    ];
    let fed = FederatedDataset::new(shards, vec!["w7".into(), "w2".into()]).unwrap();
    let path = dir.path().join("d.csv");
    write_writer_csv(&fed, &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("client_id,label,f0,f1\n"));
    assert_eq!(partition_by_writer_csv(&path).unwrap(), fed);
}

#[test]
fn malformed_csv_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "bad.csv", "client_id,label,f0,f1\na,0,1,2\nb,1,oops,2\n");
    match partition_by_writer_csv(&p) {
        Err(Error::Data { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a data error, got {other:?}"),
    }
    let p = write(dir.path(), "hdr.csv", "writer,label,f0\na,0,1\n");
    assert!(partition_by_writer_csv(&p).is_err());
}

#[test]
fn csv_dataset_drives_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("client_id,label,f0,f1,f2\n");
    for c in 0..3 {
        for i in 0..10 {
            let x = i as f64 * 0.1;
            text.push_str(&format!("writer{c},{},{},{},{}\n", (c + i) % 2, x, c as f64 - x, 1.0));
        }
    }
    write(dir.path(), "train.csv", &text);
    let cfg_text = r#"
        seed = 1
        [data]
        source = "csv"
        path = "train.csv"
        [strategy]
        kind = "fub_topk"
        k = 3
        [training]
        max_rounds = 5
    "#;
    let cfg_path = write(dir.path(), "cfg.toml", cfg_text);
    let cfg = ExperimentConfig::from_path(&cfg_path).unwrap();
    let out = harness::run_experiment(&cfg, dir.path().join("out")).unwrap();
    assert_eq!(out.records.len(), 5);
    assert!(out.records.iter().all(|r| r.selected <= 3));
}

#[test]
fn metrics_files_are_well_formed_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml_str(CONFIG).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out = harness::run_experiment(&cfg, &a).unwrap();
    harness::run_experiment(&cfg, &b).unwrap();

    let rounds = fs::read(a.join("rounds.jsonl")).unwrap();
    assert_eq!(rounds, fs::read(b.join("rounds.jsonl")).unwrap());
    let text = String::from_utf8(rounds).unwrap();
    assert!(!text.contains('\r'));
    let parsed: Vec<RoundRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed.len(), 40);
    for (line, rec) in text.lines().zip(&out.records) {
        assert_eq!(line, serde_json::to_string(rec).unwrap());
    }
    assert!(parsed.iter().filter(|r| r.eval_acc.is_some()).count() >= 5);

    let summary = fs::read_to_string(a.join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(lines.next().unwrap(), SUMMARY_HEADER.join(","));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "io");
    assert_eq!(row[2], "fab_topk");
    assert_eq!(row[3], "extended");
    assert_eq!(row[4], "40");
    let sim_time: f64 = row[5].parse().unwrap();
    let total: f64 = parsed.iter().map(|r| r.round_time).sum();
    assert!((sim_time - total).abs() < 1e-9 * total);
    assert!(!summary.contains('\r'));
}

#[test]
fn record_schema_is_the_same_for_every_strategy() {
    let keys = |kind: &str| {
        let text = CONFIG
            .replace("fab_topk", kind)
            .replace("kind = \"extended\"", "kind = \"fixed\"")
            .replace("max_rounds = 40", "max_rounds = 3");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let out = harness::simulate(&cfg).unwrap();
        let v = serde_json::to_value(&out.records[0]).unwrap();
        v.as_object().unwrap().keys().cloned().collect::<Vec<_>>()
    };
    let reference = keys("fab_topk");
    for kind in ["unidirectional_topk", "fub_topk", "periodic_k", "fedavg", "send_all"] {
        assert_eq!(keys(kind), reference, "{kind}");
    }
}

fn sweep_text(grid: &str) -> String {
    let base = CONFIG
        .replace("[data]", "[base.data]")
        .replace("[model]", "[base.model]")
        .replace("[strategy]", "[base.strategy]")
        .replace("[training]", "[base.training]")
        .replace("[controller]", "[base.controller]")
        .replace("[timing]", "[base.timing]")
        .replace("kind = \"extended\"", "kind = \"fixed\"")
        .replace("max_rounds = 40", "max_rounds = 4");
    format!("[base]\n{base}\n[grid]\n{grid}\n")
}

#[test]
fn sweep_grid_writes_one_row_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = SweepConfig::from_toml_str(&sweep_text(
        "comm_time = [0.1, 100]\nstrategy = [\"fab_topk\", \"send_all\"]",
    ))
    .unwrap();
    let result = harness::sweep_from(&sweep, dir.path()).unwrap();
    assert_eq!(result.rows.len(), 4);
    assert!(result.failures.is_empty());
    let table = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
    for cfg in sweep.expand() {
        assert!(dir.path().join(&cfg.id).join("rounds.jsonl").exists());
    }
}

#[test]
fn empty_grid_gives_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = SweepConfig::from_toml_str(&sweep_text("strategy = []")).unwrap();
    let result = harness::sweep_from(&sweep, dir.path()).unwrap();
    assert!(result.rows.is_empty());
    let table = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(table, "config_id,comm_time,strategy,controller,time_to_target,final_acc,status\n");
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary, format!("{}\n", SUMMARY_HEADER.join(",")));
}

#[test]
fn failing_grid_point_does_not_stop_the_sweep() {
    let dir = tempfile::tempdir().unwrap();
    // sign descent needs fab_topk, so the fub point fails validation
    let text = sweep_text("strategy = [\"fab_topk\", \"fub_topk\"]")
        .replace("kind = \"fixed\"", "kind = \"sign_descent\"");
    let sweep = SweepConfig::from_toml_str(&text).unwrap();
    let result = harness::sweep_from(&sweep, dir.path()).unwrap();
    assert_eq!(result.rows.len(), 2);
    assert_eq!(result.failures.len(), 1);
    assert!(result.rows[1].status.starts_with("error"));
    assert_eq!(result.summaries.len(), 1);
}

#[test]
fn switch_report_runs() {
    let mut cfg = ExperimentConfig::from_toml_str(CONFIG).unwrap();
    cfg.controller = Default::default();
    cfg.training.max_rounds = 400;
    let first = harness::simulate(&cfg).unwrap();
    cfg.training.target_loss = Some(first.records[30].global_loss);
    let report = harness::switch_report(&cfg, [6.0, 20.0], 12.0, 20, 0.05).unwrap();
    assert_eq!(report.differences.len(), 20);
    assert!(report.switch_round.iter().all(|&r| r > 0));
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fabk"))
}

#[test]
fn cli_run_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", &CONFIG.replace("max_rounds = 40", "max_rounds = 6"));
    let run = |seed: &str, out: &str| {
        let status = cli()
            .args(["run", "--config"])
            .arg(&cfg)
            .args(["--seed", seed, "--out"])
            .arg(dir.path().join(out))
            .env("RUST_LOG", "warn")
            .status()
            .unwrap();
        assert!(status.success());
        fs::read(dir.path().join(out).join("rounds.jsonl")).unwrap()
    };
    let a = run("9", "a");
    let b = run("9", "b");
    let c = run("10", "c");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn cli_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", &CONFIG.replace("seed = 5", "seed = 5\nsed = 6"));
    let out = cli()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sed"));
}

#[test]
fn cli_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "sweep.toml", &sweep_text("strategy = [\"fab_topk\", \"fedavg\"]"));
    let status = cli()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    assert!(status.success());
    let table = fs::read_to_string(dir.path().join("out/sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn cli_regret_writes_rows() {
    let dir = tempfile::tempdir().unwrap();
    let status = cli()
        .args(["regret", "--trials", "3", "--horizons", "10,100", "--out"])
        .arg(dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    let text = fs::read_to_string(dir.path().join("regret.csv")).unwrap();
    assert!(text.starts_with("M,trial,R,bound,violated\n"));
    assert_eq!(text.lines().count(), 7);
}
