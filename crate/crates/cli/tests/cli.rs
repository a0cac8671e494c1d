//! End-to-end smoke test of the binary: every subcommand exercised on a
//! micro configuration, chaining artifacts exactly as a user would.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cliplab"))
}

const MICRO: &[&str] = &[
    "--set",
    "model.width=16",
    "--set",
    "model.depth=2",
    "--set",
    "model.mlp_dim=32",
    "--set",
    "model.heads=2",
    "--set",
    "model.image_size=32",
    "--set",
    "model.clip_dim=16",
    "--set",
    "model.text_width=16",
    "--set",
    "model.text_depth=1",
    "--set",
    "model.text_mlp_dim=32",
    "--set",
    "model.text_heads=2",
    "--set",
    "data.image_size=32",
    "--set",
    "data.n_train=32",
    "--set",
    "data.n_eval=12",
    "--set",
    "data.n_eval_clips=2",
    "--set",
    "data.clip_frames=4",
    "--set",
    "train.batch_size=8",
    "--set",
    "train.total_samples=32",
    "--set",
    "train.warmup_steps=1",
    "--set",
    "train.use_mask_reg=false",
    "--set",
    "probe.epochs=3",
    "--set",
    "probe.context_n=2",
    "--set",
    "viz.n_images=1",
];

fn run(out: &Path, cmd: &str, extra: &[(&str, &str)]) -> String {
    let mut c = bin();
    c.arg(cmd).arg("--out-dir").arg(out).arg("--seed").arg("11").args(MICRO);
    for (flag, value) in extra {
        c.arg(flag).arg(value);
    }
    let output = c.output().expect("binary runs");
    let stdout = String::from_utf8_lossy(&output.stdout).into_owned();
    assert!(
        output.status.success(),
        "{cmd} failed\nstdout: {stdout}\nstderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    stdout
}

/// First path printed as `  <label>: <path>` under a stage banner.
fn printed_path(stdout: &str, label: &str) -> PathBuf {
    let needle = format!("{label}: ");
    for line in stdout.lines() {
        if let Some(rest) = line.trim_start().strip_prefix(&needle) {
            return PathBuf::from(rest.trim());
        }
    }
    panic!("no `{label}:` line in output:\n{stdout}");
}

#[test]
fn subcommands_chain_into_a_full_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();

    let gen = run(out, "gen-data", &[]);
    let data_dir = printed_path(&gen, "gen-data");
    assert!(data_dir.join("config.toml").is_file());

    let pre = run(out, "pretrain", &[]);
    let ckpt = printed_path(&pre, "checkpoint");
    assert!(ckpt.is_file());
    let metrics = printed_path(&pre, "metrics");
    assert!(metrics.is_file());

    let probe = run(out, "probe", &[("--checkpoint", ckpt.to_str().unwrap())]);
    let probe_dir = printed_path(&probe, "probe");
    assert!(probe_dir.join("probe_knn.json").is_file());
    assert!(probe_dir.join("probe_tracking.json").is_file());

    let zs = run(
        out,
        "zeroshot",
        &[
            ("--checkpoint", ckpt.to_str().unwrap()),
            ("--data", data_dir.to_str().unwrap()),
        ],
    );
    let zs_dir = printed_path(&zs, "zeroshot");
    assert!(zs_dir.join("zeroshot.json").is_file());

    let viz = run(out, "viz", &[("--checkpoint", ckpt.to_str().unwrap())]);
    assert!(viz.contains("viz:"));

    let report = run(out, "report", &[("--runs", out.to_str().unwrap())]);
    let report_dir = printed_path(&report, "report");
    assert!(report_dir.join("report_knn.svg").is_file());
    assert!(report_dir.join("report.json").is_file());
}

#[test]
fn bad_inputs_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    // unknown config key
    let out = bin()
        .arg("pretrain")
        .arg("--out-dir")
        .arg(tmp.path())
        .arg("--set")
        .arg("train.no_such_field=1")
        .output()
        .unwrap();
    assert!(!out.status.success());

    // missing checkpoint
    let out = bin()
        .arg("probe")
        .arg("--out-dir")
        .arg(tmp.path())
        .arg("--checkpoint")
        .arg(tmp.path().join("missing.ckpt"))
        .output()
        .unwrap();
    assert!(!out.status.success());

    // unsupported device
    let out = bin()
        .arg("pretrain")
        .arg("--out-dir")
        .arg(tmp.path())
        .arg("--device")
        .arg("cuda")
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cpu"), "stderr should mention cpu: {err}");
}
