use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_neuralcmf"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small volume phantom; returns the manifest path.
fn phantom(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    let stdout = ok(&["phantom", "--out", s(&out), "--dims", "12", "--frames", "4"]);
    PathBuf::from(stdout.trim())
}

fn train(data: &Path, out: &Path, iters: &str) {
    ok(&[
        "train", "--data", s(data), "--out", s(out), "--iters", iters, "--batch", "256",
        "--threads", "1", "--eval-points", "200",
    ]);
}

#[test]
fn help_and_version_exit_zero() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["phantom", "train", "track", "warp", "strain", "metrics", "sweep"] {
        assert!(text.contains(cmd), "help lists {cmd}");
    }
    assert!(run(&["--version"]).status.success());
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["train"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = run(&["train", "--data", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let data = phantom(dir.path());
    let out = run(&["train", "--data", s(&data), "--out", s(&dir.path().join("o")), "--batch", "0"]);
    assert_eq!(out.status.code(), Some(1), "invalid config");
}

#[test]
fn phantom_writes_dataset_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = phantom(dir.path());
    assert!(data.exists());
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&data).unwrap()).unwrap();
    assert!(m["phantom"].is_object());
    let run_manifest = dir.path().join("data/run_manifest.json");
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run_manifest).unwrap()).unwrap();
    assert_eq!(r["subcommand"], "phantom");
    assert_eq!(r["seed"], 1);

    let mv = dir.path().join("mv");
    ok(&[
        "phantom", "--out", s(&mv), "--dims", "12", "--frames", "4", "--mode", "multiview2d", "--views", "3",
        "--image", "10", "--perturb-deg", "2",
    ]);
    assert!(mv.join("run_manifest.json").exists());
}

#[test]
fn single_thread_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = phantom(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&data, &a, "6");
    train(&data, &b, "6");
    for f in ["final.bin", "train_log.csv", "report.json", "config.json"] {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        assert!(x == y, "{f} differs between identical runs");
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["iterations"], 6);
    assert!(report["phantom"]["mte_mm"].as_f64().unwrap().is_finite());
    let log = std::fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 7);
}

#[test]
fn downstream_commands_on_a_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = phantom(dir.path());
    let model = dir.path().join("model");
    train(&data, &model, "3");
    let ck = model.join("final.bin");

    let track = dir.path().join("track");
    ok(&["track", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&track), "--threads", "1"]);
    let traj = std::fs::read_to_string(track.join("trajectories.csv")).unwrap();
    assert!(traj.lines().count() > 1);

    let warp = dir.path().join("warp");
    ok(&["warp", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&warp)]);
    assert_eq!(std::fs::metadata(warp.join("warped_000_to_002.f32raw")).unwrap().len(), 12 * 12 * 12 * 4);
    assert_eq!(std::fs::metadata(warp.join("warped_mask_000_to_002.u8raw")).unwrap().len(), 12 * 12 * 12);
    let w: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(warp.join("warp.json")).unwrap()).unwrap();
    assert!(w["mask_vs_target"]["dice"].as_f64().is_some());

    let strain = dir.path().join("strain");
    ok(&["strain", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&strain), "--count", "500"]);
    let seg = std::fs::read_to_string(strain.join("strain_segments.csv")).unwrap();
    assert_eq!(seg.lines().count(), 1 + 17 * 4);
    let long = std::fs::read_to_string(strain.join("strain_long.csv")).unwrap();
    assert_eq!(long.lines().count(), 1 + 17 * 4 * 3 + 4 * 3);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(strain.join("strain_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["frames"], 4);

    let report = ok(&["metrics", "--checkpoint", s(&ck), "--data", s(&data), "--eval-points", "300"]);
    let r: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(r["points"], 300);
}

#[test]
fn metrics_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.csv");
    let gt = dir.path().join("gt.csv");
    std::fs::write(&pred, "x,y,z\n0.1,0,0\n0,0.2,0\n").unwrap();
    std::fs::write(&gt, "x,y,z\n0.1,0,0\n0,0,0.2\n").unwrap();
    let (a, b) = (dir.path().join("a.u8raw"), dir.path().join("b.u8raw"));
    let mut ma = vec![0u8; 64];
    let mut mb = vec![0u8; 64];
    ma[..32].fill(1);
    mb[16..48].fill(1);
    std::fs::write(&a, &ma).unwrap();
    std::fs::write(&b, &mb).unwrap();
    let out = dir.path().join("m.json");
    ok(&[
        "metrics", "--pred", s(&pred), "--gt", s(&gt), "--mask-a", s(&a), "--mask-b", s(&b), "--dims", "4,4,4",
        "--spacing", "1,1,1", "--out", s(&out),
    ]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!((r["dice"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    // identical first vector, orthogonal second
    assert!((r["cosine_similarity"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert!(r["mte_mm"].as_f64().unwrap() > 0.0);
    let bad = run(&["metrics", "--pred", s(&pred), "--gt", s(&gt), "--dims", "4,4"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn sweep_writes_one_directory_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let data = phantom(dir.path());
    let out = dir.path().join("sweep");
    ok(&[
        "sweep", "--data", s(&data), "--out", s(&out), "--param", "alpha2", "--values", "0.1,1", "--iters", "2",
        "--batch", "128", "--threads", "1", "--eval-points", "100",
    ]);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    let cells = summary["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 3);
    assert!(summary["default_rank"].as_u64().unwrap() < 3);
    for c in cells {
        let d = out.join(c["label"].as_str().unwrap());
        assert!(d.join("final.bin").exists() && d.join("run_manifest.json").exists());
    }
    assert_eq!(std::fs::read_to_string(out.join("sweep.csv")).unwrap().lines().count(), 4);
    let bad = run(&["sweep", "--data", s(&data), "--out", s(&out), "--param", "beta"]);
    assert_eq!(bad.status.code(), Some(1));
}
