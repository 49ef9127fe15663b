//! End-to-end runs of the `siamdrop` binary: synth -> train -> track ->
//! eval -> analyze, plus the failure paths users actually hit (bad config
//! keys, corrupt weight stores).

use std::path::Path;
use std::process::{Command, Output};

use siamdrop_cli::results::read_report;

fn siamdrop(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_siamdrop"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary spawns")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = siamdrop(args, dir);
    assert!(
        out.status.success(),
        "siamdrop {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fails(args: &[&str], dir: &Path) -> String {
    let out = siamdrop(args, dir);
    assert!(!out.status.success(), "siamdrop {args:?} unexpectedly passed");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn full_pipeline_over_a_tiny_suite() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    ok(
        &["synth", "--out", "suite", "--count", "2", "--seed", "11"],
        dir,
    );
    assert!(dir.join("suite/config.toml").is_file());
    assert!(dir.join("suite/seq-000/img/0001.png").is_file());
    assert!(dir.join("suite/seq-001/groundtruth_rect.txt").is_file());
    let occ_lines = std::fs::read_to_string(dir.join("suite/seq-000/occlusion.txt"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(occ_lines, 120);

    // a one-epoch pretrain exercises the train -> store -> track loop fast
    std::fs::write(
        dir.join("tiny-train.toml"),
        "[trainer]\nepochs_pretrain = 1\nbatch = 4\npairs_per_sequence = 2\n",
    )
    .unwrap();
    let train_out = ok(
        &[
            "--config",
            "tiny-train.toml",
            "train",
            "--data",
            "suite",
            "--weights",
            "model.sdwt",
            "--stages",
            "backbone-pretrain",
        ],
        dir,
    );
    assert!(train_out.contains("stage backbone-pretrain epoch 1"), "{train_out}");
    assert!(dir.join("model.sdwt").is_file());

    ok(
        &[
            "track",
            "--data",
            "suite",
            "--weights",
            "model.sdwt",
            "--out",
            "results-a",
        ],
        dir,
    );
    ok(
        &[
            "--dropout",
            "slice",
            "track",
            "--data",
            "suite",
            "--weights",
            "model.sdwt",
            "--out",
            "results-b",
        ],
        dir,
    );
    let csv = std::fs::read_to_string(dir.join("results-a/seq-000.csv")).unwrap();
    let data_rows = csv
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("frame,"))
        .count();
    assert_eq!(data_rows, 120, "one row per frame");
    assert!(csv.contains("# config-begin"));
    assert!(csv.contains("# sequence = seq-000"));

    let eval_out = ok(
        &[
            "eval",
            "--data",
            "suite",
            "--results",
            "results-a",
            "--report",
            "report.txt",
        ],
        dir,
    );
    assert!(eval_out.contains("sequences = 2"), "{eval_out}");
    let report = read_report(&dir.join("report.txt")).unwrap();
    let keys: Vec<&str> = report.iter().map(|(k, _)| k.as_str()).collect();
    for want in [
        "sequences",
        "seq-000.auc",
        "seq-001.auc",
        "precision",
        "auc",
        "ao",
        "sr50",
        "sr75",
        "success_curve",
    ] {
        assert!(keys.contains(&want), "report missing {want}: {keys:?}");
    }
    let curve = &report.iter().find(|(k, _)| k == "success_curve").unwrap().1;
    assert_eq!(curve.split(',').count(), 101);

    let analyze_out = ok(
        &[
            "analyze-occlusion",
            "--data",
            "suite",
            "--results-a",
            "results-a",
            "--results-b",
            "results-b",
            "--report",
            "gain.txt",
            "--rows",
            "rows.csv",
        ],
        dir,
    );
    assert!(analyze_out.contains("pooled_rank_correlation = "), "{analyze_out}");
    assert!(analyze_out.contains("frames = 238"), "{analyze_out}");
    let rows = std::fs::read_to_string(dir.join("rows.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 238, "header plus 2x119 rows");
    let gain = read_report(&dir.join("gain.txt")).unwrap();
    assert!(gain.iter().any(|(k, _)| k == "pooled_rank_correlation"));
}

#[test]
fn unknown_config_keys_abort_with_the_key_named() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("bad.toml"), "[dropout]\nkindd = \"slice\"\n").unwrap();
    let err = fails(
        &["--config", "bad.toml", "synth", "--out", "x", "--count", "1"],
        dir,
    );
    assert!(err.contains("kindd"), "stderr should name the bad key: {err}");
}

#[test]
fn corrupt_weight_stores_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(
        &["synth", "--out", "suite", "--count", "1", "--seed", "3"],
        dir,
    );
    std::fs::write(
        dir.join("one-epoch.toml"),
        "[trainer]\nepochs_pretrain = 1\nbatch = 4\npairs_per_sequence = 2\n",
    )
    .unwrap();
    ok(
        &[
            "--config",
            "one-epoch.toml",
            "train",
            "--data",
            "suite",
            "--weights",
            "w.sdwt",
            "--stages",
            "backbone-pretrain",
        ],
        dir,
    );
    let mut bytes = std::fs::read(dir.join("w.sdwt")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(dir.join("w.sdwt"), &bytes).unwrap();
    let err = fails(
        &[
            "track",
            "--data",
            "suite",
            "--weights",
            "w.sdwt",
            "--out",
            "r",
        ],
        dir,
    );
    assert!(
        err.contains("checksum") || err.contains("corrupt"),
        "stderr should point at the checksum: {err}"
    );
}

#[test]
fn missing_paths_give_a_single_line_hint() {
    let tmp = tempfile::tempdir().unwrap();
    let err = fails(&["track", "--out", "r"], tmp.path());
    assert!(err.starts_with("error: "), "{err}");
    assert!(err.contains("--data"), "{err}");
}
