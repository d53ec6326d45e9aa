//! End-to-end runs of the `cmot` binary: synth -> train -> track -> eval ->
//! report, plus exit-code conventions.

use std::path::Path;
use std::process::Command;

fn cmot() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cmot"))
}

fn write_small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        r#"
seed = 5
jobs = 2

[synth]
n_train = 3
n_test = 2
n_dual = 2

[synth.options]
image_size = 48
min_length = 10
max_length = 14
ma_fraction = 0.0

[training]
stage1_iters = 2
stage2_iters = 4
stage3_iters = 2
batch_pos = 4
batch_neg = 8

[tracker]
n_candidates = 24
init_iters = 6
init_pos = 16
init_neg = 48
reg_samples = 16
update_iters = 2
"#,
    )
    .unwrap();
    path
}

#[test]
fn full_cli_pipeline() {
    let ws = tempfile::TempDir::new().unwrap();
    let config = write_small_config(ws.path());
    let wsp = ws.path().to_str().unwrap();
    let cfgp = config.to_str().unwrap();

    let synth = cmot()
        .args(["--workspace", wsp, "--config", cfgp, "synth"])
        .output()
        .unwrap();
    assert!(synth.status.success(), "synth failed: {synth:?}");
    let stdout = String::from_utf8_lossy(&synth.stdout);
    assert!(stdout.contains("3 train / 2 test"), "unexpected output: {stdout}");

    // Re-running without --force refuses with the config exit code.
    let again = cmot()
        .args(["--workspace", wsp, "--config", cfgp, "synth"])
        .output()
        .unwrap();
    assert_eq!(again.status.code(), Some(2));
    let forced = cmot()
        .args(["--workspace", wsp, "--config", cfgp, "synth", "--force"])
        .output()
        .unwrap();
    assert!(forced.status.success());

    let train = cmot()
        .args(["--workspace", wsp, "--config", cfgp, "train", "--stages", "three"])
        .output()
        .unwrap();
    assert!(train.status.success(), "train failed: {train:?}");
    assert!(ws.path().join("checkpoints/marmot-three/stage1.ckpt").exists());
    assert!(ws.path().join("checkpoints/marmot-three/stage2.ckpt").exists());
    assert!(ws.path().join("checkpoints/marmot-three/stage3.ckpt").exists());

    let one = cmot()
        .args(["--workspace", wsp, "--config", cfgp, "train", "--stages", "one"])
        .output()
        .unwrap();
    assert!(one.status.success());
    let one_dir = ws.path().join("checkpoints/marmot-one");
    let ckpts: Vec<_> = std::fs::read_dir(&one_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().map(|x| x == "ckpt").unwrap_or(false))
        .collect();
    assert_eq!(ckpts.len(), 1, "one-stage training emits exactly one checkpoint");

    let ckpt = ws.path().join("checkpoints/marmot-three/final.ckpt");
    let track = cmot()
        .args([
            "--workspace",
            wsp,
            "--config",
            cfgp,
            "track",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--name",
            "m3",
        ])
        .output()
        .unwrap();
    assert!(track.status.success(), "track failed: {track:?}");

    // One results file and one complete log per sequence.
    let results: Vec<_> = std::fs::read_dir(ws.path().join("results/m3"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().map(|x| x == "txt").unwrap_or(false))
        .collect();
    assert_eq!(results.len(), 2);

    let eval = cmot()
        .args(["--workspace", wsp, "--config", cfgp, "eval", "--results", "m3"])
        .output()
        .unwrap();
    assert!(eval.status.success(), "eval failed: {eval:?}");
    assert!(ws.path().join("reports/m3/report.json").exists());

    let report = cmot()
        .args([
            "--workspace",
            wsp,
            "report",
            "--report",
            ws.path().join("reports/m3/report.json").to_str().unwrap(),
            "--out",
            ws.path().join("reports/regen").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(report.status.success(), "report failed: {report:?}");
    let a = std::fs::read(ws.path().join("reports/m3/precision.svg")).unwrap();
    let b = std::fs::read(ws.path().join("reports/regen/precision.svg")).unwrap();
    assert_eq!(a, b, "report regeneration must be deterministic");
}

#[test]
fn missing_data_exits_with_data_code() {
    let ws = tempfile::TempDir::new().unwrap();
    let config = write_small_config(ws.path());
    let out = cmot()
        .args([
            "--workspace",
            ws.path().to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "train",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "missing benchmark is a data error");
}

#[test]
fn bad_config_exits_with_config_code() {
    let ws = tempfile::TempDir::new().unwrap();
    let bad = ws.path().join("bad.toml");
    std::fs::write(&bad, "jobs = 0\n").unwrap();
    let out = cmot()
        .args([
            "--workspace",
            ws.path().to_str().unwrap(),
            "--config",
            bad.to_str().unwrap(),
            "synth",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn no_marmot_flag_runs_the_identity_baseline() {
    let ws = tempfile::TempDir::new().unwrap();
    let config = write_small_config(ws.path());
    let wsp = ws.path().to_str().unwrap();
    let cfgp = config.to_str().unwrap();

    assert!(cmot()
        .args(["--workspace", wsp, "--config", cfgp, "synth"])
        .status()
        .unwrap()
        .success());
    assert!(cmot()
        .args(["--workspace", wsp, "--config", cfgp, "train", "--no-marmot"])
        .status()
        .unwrap()
        .success());
    let ckpt = ws.path().join("checkpoints/baseline-three/final.ckpt");
    assert!(ckpt.exists());
    let track = cmot()
        .args([
            "--workspace",
            wsp,
            "--config",
            cfgp,
            "track",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--no-marmot",
            "--name",
            "base",
        ])
        .output()
        .unwrap();
    assert!(track.status.success(), "baseline track failed: {track:?}");
}
