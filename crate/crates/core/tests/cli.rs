use std::path::Path;
use std::process::{Command, Output};

use pmnet::experiment::read_metrics;

const TINY: &str = r#"{
  "seed": 3,
  "model": {"d_model": 16, "window": 4, "d_mem": 4, "n_heads": 2, "ffn_mult": 1, "max_seq_len": 64},
  "train": {"steps": 4, "batch_size": 4, "grad_shards": 2, "eval_every": 2, "eval_batches": 1, "checkpoint_every": 2},
  "task": {"kind": "copy_paste", "n_min": 2, "n_max": 8}
}"#;

fn pmnet(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pmnet"));
    cmd.args(args);
    match out_env {
        Some(dir) => cmd.env("PMNET_OUT_DIR", dir),
        None => cmd.env_remove("PMNET_OUT_DIR"),
    };
    cmd.output().expect("spawn pmnet")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn trained(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.join("run");
    ok(&pmnet(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
        ],
        None,
    ));
    run.join("final.ckpt")
}

#[test]
fn train_writes_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let run = ckpt.parent().unwrap();
    assert!(ckpt.exists());
    assert!(run.join("step_2.ckpt").exists());
    let records = read_metrics(&run.join("metrics.jsonl")).unwrap();
    assert_eq!(records.iter().filter(|r| r.split == "train").count(), 4);
    assert_eq!(records.iter().filter(|r| r.split == "eval").count(), 2);
    assert!(records.iter().all(|r| r.loss_nats.is_finite()));

    let info = ok(&pmnet(&["inspect-ckpt", ckpt.to_str().unwrap()], None));
    assert!(info.contains("step        4"), "{info}");
    assert!(info.contains("memory.1.anchors"));
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let env_out = dir.path().join("from-env");
    ok(&pmnet(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "train.steps=1",
            "memory_enabled=false",
        ],
        Some(&env_out),
    ));
    assert!(env_out.join("final.ckpt").exists());
    let info = ok(&pmnet(
        &["inspect-ckpt", env_out.join("final.ckpt").to_str().unwrap()],
        None,
    ));
    assert!(!info.contains("memory.1.anchors"));
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let out = pmnet(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "model.not_a_field=3",
        ],
        Some(dir.path()),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.not_a_field"));

    let out = pmnet(
        &["train", "--config", "/nonexistent/config.json"],
        Some(dir.path()),
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(pmnet(&["train"], None).status.code(), Some(2));
    assert_eq!(pmnet(&["no-such-command"], None).status.code(), Some(2));
}

#[test]
fn evaluations_write_csv_tables() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let ck = ckpt.to_str().unwrap();
    let out = dir.path().join("eval");
    let o = out.to_str().unwrap();

    ok(&pmnet(
        &[
            "eval-copy",
            "--ckpt",
            ck,
            "--n-grid",
            "2:6:2",
            "--trials",
            "4",
            "--out",
            o,
        ],
        None,
    ));
    let csv = std::fs::read_to_string(out.join("copy_accuracy.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "n,accuracy,positions");
    assert_eq!(lines.len(), 4);

    ok(&pmnet(
        &[
            "ablate",
            "--ckpt",
            ck,
            "--mode",
            "zero_root",
            "--docs",
            "2",
            "--n",
            "5",
            "--out",
            o,
        ],
        None,
    ));
    let csv = std::fs::read_to_string(out.join("delta_bpb_zero_root.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 10);

    ok(&pmnet(
        &[
            "ablate", "--ckpt", ck, "--mode", "none", "--docs", "1", "--n", "4", "--out", o,
        ],
        None,
    ));
    let csv = std::fs::read_to_string(out.join("delta_bpb_none.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",0")), "{csv}");

    let corpus = dir.path().join("corpus.txt");
    std::fs::write(
        &corpus,
        "the quick brown fox jumps over the lazy dog. ".repeat(8),
    )
    .unwrap();
    let table = ok(&pmnet(
        &[
            "eval-bpb",
            "--ckpt",
            ck,
            "--corpus",
            corpus.to_str().unwrap(),
            "--context",
            "100",
            "--chunk",
            "16",
            "--out",
            o,
        ],
        None,
    ));
    assert!(table.contains("bpb"));
    let csv = std::fs::read_to_string(out.join("bpb_buckets.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("bucket_lo,bucket_hi,bpb,count"));
    assert!(csv.lines().count() > 3);

    let bad = pmnet(
        &["eval-copy", "--ckpt", ck, "--n-grid", "x", "--out", o],
        None,
    );
    assert_eq!(bad.status.code(), Some(2));
    let bad = pmnet(
        &["ablate", "--ckpt", ck, "--mode", "zero_middle", "--out", o],
        None,
    );
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn checkpoint_config_mismatch_names_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let other = dir.path().join("other.json");
    std::fs::write(&other, TINY.replace("\"d_model\": 16", "\"d_model\": 32")).unwrap();
    let out = pmnet(
        &[
            "eval-copy",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--config",
            other.to_str().unwrap(),
            "--n-grid",
            "2:2:1",
        ],
        Some(dir.path()),
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("embed") && err.contains("[256, 16]") && err.contains("[256, 32]"),
        "{err}"
    );

    let out = pmnet(
        &[
            "inspect-ckpt",
            dir.path().join("tiny.json").to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_catches_a_sign_bug() {
    let report = ok(&pmnet(&["gradcheck", "--instances", "2"], None));
    for op in [
        "wrap",
        "stop_gradient",
        "segmented_scan",
        "memory_layer_step",
    ] {
        assert!(report.contains(op), "missing {op}");
    }
    let out = pmnet(
        &[
            "gradcheck",
            "--instances",
            "2",
            "--inject-fault",
            "tanh-sign",
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn scan_bench_reports_one_row_per_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&pmnet(
        &[
            "scan-bench",
            "--sizes",
            "16,64,256",
            "--reps",
            "1",
            "--width",
            "8",
        ],
        Some(dir.path()),
    ));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "S,K,t_scan_ns,t_seq_ns,speedup");
    assert_eq!(lines.len(), 4);
    for (line, s) in lines[1..].iter().zip([16, 64, 256]) {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(f[0], s as f64);
        assert!(f[1] >= 1.0 && f[1] <= s as f64);
        assert!((f[4] - f[3] / f[2]).abs() <= 1e-3 * f[4].max(1.0));
    }
    assert!(dir.path().join("scan_bench.csv").exists());
}
