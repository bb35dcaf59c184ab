//! End-to-end exercises of the binary: exit-code conventions, the full
//! pipeline emitting every declared artifact, bit-identical reruns from the
//! stored resolved config, and containment of writes to --out.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_edmcast"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn edmcast")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "edmcast {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn assert_files(dir: &Path, names: &[&str]) {
    for n in names {
        assert!(dir.join(n).is_file(), "{} missing from {}", n, dir.display());
    }
}

fn listing(root: &Path) -> BTreeSet<PathBuf> {
    let mut set = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p.clone());
            }
            set.insert(p);
        }
    }
    set
}

#[test]
fn exit_codes_follow_the_convention() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let help = run_in(dir, &["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("Usage"));

    let unknown_cmd = run_in(dir, &["frobnicate"]);
    assert_eq!(unknown_cmd.status.code(), Some(1));

    let unknown_flag = run_in(dir, &["rollout", "--bogus"]);
    assert_eq!(unknown_flag.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown_flag.stderr).contains("--bogus"));

    // Missing required value is a user error, not a crash.
    let missing = run_in(dir, &["train", "--out", "t"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("--task"));
}

#[test]
fn config_file_env_and_flags_layer_in_order() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("world.ini"),
        "# comment\n[data]\ntrain = 4\nval = 2\ntest = 2\n[world]\ngrid = 24\n",
    )
    .unwrap();

    // File alone.
    ok(dir, &["make-data", "--out", "a", "--config", "world.ini", "--seed", "5"]);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("a/train.json")).unwrap()).unwrap();
    assert_eq!(m["height"], 24);
    assert_eq!(m["count"], 4);

    // Environment overrides the file; flags override both.
    let out = bin()
        .current_dir(dir)
        .env("EDM_TRAIN", "3")
        .args(["make-data", "--out", "b", "--config", "world.ini", "--seed", "5", "--grid", "16"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("b/train.json")).unwrap()).unwrap();
    assert_eq!(m["height"], 16);
    assert_eq!(m["count"], 3);

    // A malformed config line is a user error naming the line.
    std::fs::write(dir.join("bad.ini"), "train\n").unwrap();
    let bad = run_in(dir, &["make-data", "--out", "c", "--config", "bad.ini"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("bad.ini"));
}

#[test]
fn pipeline_emits_everything_and_reruns_bit_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let provenance = ["resolved_config.json", "run.json"];

    ok(dir, &["make-data", "--out", "data", "--seed", "7", "--train", "10", "--val", "4", "--test", "2", "--grid", "32"]);
    assert_files(&dir.join("data"), &["train.edmt", "train.json", "val.edmt", "val.json", "test.edmt", "test.json"]);
    assert_files(&dir.join("data"), &provenance);

    for (out, task, extra) in [
        ("base", "baseline", vec![]),
        ("cond", "cond", vec![]),
        ("corr", "corrdiff", vec!["--baseline", "base/model"]),
        ("ae", "ae", vec![]),
        ("lat", "latent", vec!["--ae", "ae/model"]),
    ] {
        let mut args = vec![
            "train", "--out", out, "--task", task, "--data", "data/train.json",
            "--epochs", "2", "--batch-size", "4",
        ];
        args.extend(extra);
        ok(dir, &args);
        assert_files(&dir.join(out), &["loss_curve.csv"]);
        assert_files(&dir.join(out), &provenance);
    }
    assert_files(&dir.join("cond"), &["model.edmt", "model.json"]);
    assert_files(&dir.join("ae"), &["model-enc.edmt", "model-enc.json", "model-dec.edmt", "model-dec.json"]);

    // Condition/init tensors come straight from the held-out split.
    let test_m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("data/test.json")).unwrap()).unwrap();
    assert_eq!(test_m["units"], "kelvin");
    carve_window(&dir.join("data/test.edmt"), &dir.join("init.edmt"), &dir.join("truth.edmt"));

    ok(dir, &[
        "sample", "--out", "samp", "--checkpoint", "cond/model", "--condition", "init.edmt",
        "--stats", "data/train.json", "--num-steps", "4", "--members", "2", "--seed", "5",
        "--trajectory",
    ]);
    assert_files(&dir.join("samp"), &["samples.edmt", "trajectory.csv"]);
    assert_files(&dir.join("samp"), &provenance);

    for (out, model, extra) in [
        ("roll_p", "persistence", vec![]),
        ("roll_b", "baseline", vec!["--baseline", "base/model"]),
        ("roll_d", "diff", vec!["--checkpoint", "cond/model"]),
        ("roll_c", "corrdiff", vec!["--checkpoint", "corr/model", "--baseline", "base/model"]),
        ("roll_l", "ldm", vec!["--checkpoint", "lat/model", "--ae", "ae/model"]),
    ] {
        let mut args = vec![
            "rollout", "--out", out, "--model", model, "--init", "init.edmt",
            "--stats", "data/train.json", "--leads", "1", "--members", "2",
            "--seed", "11", "--num-steps", "4",
        ];
        args.extend(extra);
        ok(dir, &args);
        assert_files(&dir.join(out), &["rollout.edmt"]);
        assert_files(&dir.join(out), &provenance);
    }

    ok(dir, &[
        "evaluate", "--out", "eval", "--forecast", "roll_d/rollout.edmt", "--truth",
        "truth.edmt", "--label", "diff",
    ]);
    assert_files(&dir.join("eval"), &["metrics.csv", "spread_skill.csv", "spectrum.csv"]);
    assert_files(&dir.join("eval"), &provenance);
    assert_files(
        &dir.join("eval/pgm"),
        &["diff_truth_lead010.pgm", "diff_mean_lead010.pgm", "diff_member0_lead010.pgm"],
    );
    let metrics = std::fs::read_to_string(dir.join("eval/metrics.csv")).unwrap();
    assert!(metrics.starts_with("model,lead_min,me,mae,rmse\ndiff,10,"));

    ok(dir, &["evaluate-ae", "--out", "evalae", "--checkpoint", "ae/model", "--data", "data/val.json", "--label", "tiny"]);
    let report = std::fs::read_to_string(dir.join("evalae/ae_report.csv")).unwrap();
    assert!(report.starts_with("model,bias,mae,rmse\ntiny,"));

    std::fs::write(
        dir.join("grid.ini"),
        "[grid]\nnum_steps = 2,4\ns_churn = 0\nsigma_max = 20\nrho = 7\ncases = 2\nmembers = 2\n",
    )
    .unwrap();
    ok(dir, &["gridsearch", "--out", "gs", "--checkpoint", "cond/model", "--data", "data/val.json", "--config", "grid.ini", "--seed", "3"]);
    assert_files(&dir.join("gs"), &["grid.csv", "selected.json"]);
    assert_files(&dir.join("gs"), &provenance);

    // run.json must hash what is actually on disk.
    let log: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("roll_d/run.json")).unwrap()).unwrap();
    for rec in log["outputs"].as_array().unwrap() {
        let p = dir.join(rec["path"].as_str().unwrap());
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(rec["bytes"].as_u64().unwrap() as usize, bytes.len());
        assert_eq!(rec["sha256"].as_str().unwrap(), edmcast_core::rng::sha256_hex(&bytes));
    }

    // Rerunning from the stored resolved config reproduces outputs exactly.
    ok(dir, &["rollout", "--out", "roll_d2", "--config", "roll_d/resolved_config.json"]);
    let a = std::fs::read(dir.join("roll_d/rollout.edmt")).unwrap();
    let b = std::fs::read(dir.join("roll_d2/rollout.edmt")).unwrap();
    assert_eq!(a, b, "rollout rerun from resolved config differs");

    ok(dir, &["sample", "--out", "samp2", "--config", "samp/resolved_config.json"]);
    let a = std::fs::read(dir.join("samp/samples.edmt")).unwrap();
    let b = std::fs::read(dir.join("samp2/samples.edmt")).unwrap();
    assert_eq!(a, b, "sample rerun from resolved config differs");

    // Nothing was written outside the --out directories (and our own inputs).
    let expected_roots: BTreeSet<String> = [
        "data", "base", "cond", "corr", "ae", "lat", "samp", "samp2", "roll_p", "roll_b",
        "roll_d", "roll_c", "roll_l", "roll_d2", "eval", "evalae", "gs", "init.edmt",
        "truth.edmt", "grid.ini",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let actual_roots: BTreeSet<String> = listing(dir)
        .iter()
        .filter_map(|p| p.strip_prefix(dir).ok())
        .filter_map(|p| p.components().next())
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect();
    assert_eq!(actual_roots, expected_roots);
}

/// First two frames of the first test sample as [2,H,W] plus the third as
/// [1,H,W], written through the core tensor layer.
fn carve_window(src: &Path, init: &Path, truth: &Path) {
    use edmcast_core::tensor::{read_tensor_file, write_tensor_file, Tensor};
    let t = read_tensor_file(src).unwrap();
    let dims = t.dims().to_vec();
    let (c, h, w) = (dims[1], dims[2], dims[3]);
    assert_eq!(c, 3);
    let frame = h * w;
    let data = t.data();
    write_tensor_file(init, &Tensor::new(vec![2, h, w], data[..2 * frame].to_vec()).unwrap())
        .unwrap();
    write_tensor_file(
        truth,
        &Tensor::new(vec![1, h, w], data[2 * frame..3 * frame].to_vec()).unwrap(),
    )
    .unwrap();
}
