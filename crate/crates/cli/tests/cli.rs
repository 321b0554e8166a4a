//! End-to-end tests of the pipeline binary: exit codes, idempotency, and
//! report behavior, all on tiny datasets and short runs.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_reldiff"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "command {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn gen_data(dir: &Path, seed: u64, samples: usize) {
    run_ok(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--samples",
        &samples.to_string(),
        "--seed",
        &seed.to_string(),
    ]);
}

fn train_short(data: &Path, out: &Path, seed: u64) {
    run_ok(&[
        "train",
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--loss",
        "none",
        "--steps",
        "2",
        "--batch",
        "1",
        "--seed",
        &seed.to_string(),
    ]);
}

#[test]
fn usage_and_input_errors_exit_1() {
    let out = bin().arg("--no-such-flag").output().unwrap();
    assert_eq!(exit_code(&out), 1);

    let out = bin()
        .args(["train", "--dataset", "/no/such/dataset", "--out", "/tmp/x", "--loss", "none"])
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 1);

    let out = bin().arg("--help").output().unwrap();
    assert_eq!(exit_code(&out), 0);
}

#[test]
fn gen_data_is_deterministic_and_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_data(&a, 7, 20);
    gen_data(&b, 7, 20);
    let ma = std::fs::read(a.join("manifest.json")).unwrap();
    let mb = std::fs::read(b.join("manifest.json")).unwrap();
    assert_eq!(ma, mb, "same seed must produce identical manifests");

    let out = run_ok(&[
        "gen-data",
        "--out",
        a.to_str().unwrap(),
        "--samples",
        "20",
        "--seed",
        "7",
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("already complete"));
    assert_eq!(std::fs::read(a.join("manifest.json")).unwrap(), ma);
}

#[test]
fn train_skips_completed_and_refuses_mismatched_unfinished_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, 1, 12);
    let run = tmp.path().join("run");
    train_short(&data, &run, 0);
    assert!(run.join("final.ckpt").exists());
    assert!(run.join("resolved_config.json").exists());

    // completed: rerun is a no-op even with a different config
    let out = run_ok(&[
        "train",
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--loss",
        "none",
        "--steps",
        "5",
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("already complete"));

    // unfinished with a different config: refused
    std::fs::remove_file(run.join("final.ckpt")).unwrap();
    let out = bin()
        .args([
            "train",
            "--dataset",
            data.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
            "--loss",
            "none",
            "--steps",
            "2",
            "--batch",
            "1",
            "--seed",
            "99",
        ])
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("different configuration"));
}

#[test]
fn probe_writes_result_and_skips_existing() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, 2, 16);
    let out_file = tmp.path().join("probe.json");
    run_ok(&[
        "probe",
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        out_file.to_str().unwrap(),
        "--source",
        "dit-untrained",
        "--layer",
        "2",
    ]);
    let v: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&out_file).unwrap()).unwrap();
    assert_eq!(v["source"], "dit-untrained-layer-2");
    let acc = v["probe"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(v["dataset_hash"].is_string());

    let bytes = std::fs::read(&out_file).unwrap();
    let out = run_ok(&[
        "probe",
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        out_file.to_str().unwrap(),
        "--source",
        "dit-untrained",
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("already present"));
    assert_eq!(std::fs::read(&out_file).unwrap(), bytes);
}

fn fake_probe_json(run: &Path, dataset_hash: &str) {
    let v = serde_json::json!({
        "probe": {
            "source": "dit-layer-4", "layer": 4, "accuracy": 0.75,
            "accuracy_pos": 0.7, "accuracy_neg": 0.8, "feature_dim": 8,
            "ci_low": 0.6, "ci_high": 0.85, "n_test": 40, "config_hash": "x",
        },
        "source": "dit-layer-4",
        "dataset_hash": dataset_hash,
        "checkpoint": null,
        "checkpoint_hash": null,
        "probe_config": {},
    });
    std::fs::write(
        run.join("probe_aligned.json"),
        serde_json::to_vec_pretty(&v).unwrap(),
    )
    .unwrap();
}

fn read_hash(run: &Path) -> String {
    let v: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("resolved_config.json")).unwrap()).unwrap();
    v["dataset_hash"].as_str().unwrap().to_string()
}

#[test]
fn report_aggregates_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, 3, 12);
    let (run_a, run_b) = (tmp.path().join("run-a"), tmp.path().join("run-b"));
    train_short(&data, &run_a, 0);
    train_short(&data, &run_b, 1);
    fake_probe_json(&run_a, &read_hash(&run_a));

    let corrupt = tmp.path().join("run-corrupt");
    std::fs::create_dir_all(&corrupt).unwrap();

    let rep = tmp.path().join("report");
    let args: Vec<String> = [
        "report",
        "--out",
        rep.to_str().unwrap(),
        run_a.to_str().unwrap(),
        run_b.to_str().unwrap(),
        corrupt.to_str().unwrap(),
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let args_ref: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    run_ok(&args_ref);
    for f in ["report.md", "summary.json", "loss_curves.png", "probe_accuracy.png"] {
        assert!(rep.join(f).exists(), "missing report artifact {f}");
    }
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(rep.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["runs"].as_array().unwrap().len(), 2);
    assert_eq!(summary["excluded"].as_array().unwrap().len(), 1);
    assert_eq!(
        summary["runs"][0]["probes"][0]["accuracy"].as_f64().unwrap(),
        0.75
    );
    let first = std::fs::read(rep.join("summary.json")).unwrap();

    // refuses to clobber without --force
    let out = bin().args(&args_ref).output().unwrap();
    assert_eq!(exit_code(&out), 1);

    // regenerating with --force is byte-identical
    let mut forced = args.clone();
    forced.insert(1, "--force".into());
    let forced_ref: Vec<&str> = forced.iter().map(|s| s.as_str()).collect();
    run_ok(&forced_ref);
    assert_eq!(std::fs::read(rep.join("summary.json")).unwrap(), first);
}

#[test]
fn report_refuses_mixed_datasets() {
    let tmp = tempfile::tempdir().unwrap();
    let (data_a, data_b) = (tmp.path().join("da"), tmp.path().join("db"));
    gen_data(&data_a, 4, 12);
    gen_data(&data_b, 5, 12);
    let (run_a, run_b) = (tmp.path().join("ra"), tmp.path().join("rb"));
    train_short(&data_a, &run_a, 0);
    train_short(&data_b, &run_b, 0);

    let rep = tmp.path().join("report");
    let out = bin()
        .args([
            "report",
            "--out",
            rep.to_str().unwrap(),
            run_a.to_str().unwrap(),
            run_b.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("mix datasets"));
}

#[test]
fn report_with_no_usable_runs_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let junk = tmp.path().join("junk");
    std::fs::create_dir_all(&junk).unwrap();
    let rep = tmp.path().join("report");
    let out = bin()
        .args([
            "report",
            "--out",
            rep.to_str().unwrap(),
            junk.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no usable runs"));
}
