use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "system": {"matrix": 32, "dwell_us": 18.75},
  "dataset": {"n_series": 12, "n_frames": 8, "matrix": 32, "n_coils": 2,
              "final_split": [0.5, 0.25, 0.25], "search_split": [0.5, 0.25, 0.0]},
  "training": {
    "arch": {"widths": [4, 8, 16]},
    "hyper": {"batch": 4, "windows_per_series": 1, "crop": null, "val_frames": [5, 6]},
    "final_training": {"epochs": 2, "val_every": 1, "metric_frames": [5, 6, 7]}
  },
  "hyperband": {"params": {"max_epochs": 3, "eta": 3, "seed": 7}}
}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_spiralforge"));
    c.env("SPIRALFORGE_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn spiralforge")
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

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn expect_error(args: &[&str], code: i32, tag: &str) {
    let out = run(args);
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {err}");
    assert!(err.starts_with(&format!("ERROR {tag}")), "{args:?}: {err}");
}

#[test]
fn end_to_end_trajgen_simulate_train_evaluate_stream() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = tiny_config(d);
    let traj_dir = d.join("traj");
    let data = d.join("data");
    let model = d.join("model");
    let eval = d.join("eval");

    let scatter = d.join("frame0.pgm");
    let out = ok(&["--config", s(&cfg), "trajgen", "--out", s(&traj_dir), "--scatter", s(&scatter)]);
    assert!(out.contains("15 interleaves"), "{out}");
    let pgm = std::fs::read(&scatter).unwrap();
    assert!(pgm.starts_with(b"P5\n512 512\n255\n") && pgm.contains(&0u8));
    let manifest = traj_dir.join("trajectory.json");
    assert!(manifest.exists());

    ok(&["--config", s(&cfg), "simulate", "--traj", s(&manifest), "--out", s(&data)]);
    let ds: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(data.join("dataset.json")).unwrap()).unwrap();
    let test_id = ds["split"]["test"][0].as_u64().unwrap() as usize;

    let out = ok(&["--config", s(&cfg), "train", "--data", s(&data), "--out", s(&model)]);
    assert!(out.contains("epoch    2"), "{out}");
    let ckpt = model.join("model.ckpt");
    let log: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(model.join("train_log.json")).unwrap()).unwrap();
    assert_eq!(log["epochs"], 2);

    // One more epoch on top of the checkpoint.
    let out = ok(&["--config", s(&cfg), "train", "--data", s(&data), "--out", s(&model), "--resume", s(&ckpt), "--epochs", "3"]);
    assert!(out.contains("epoch    3") && !out.contains("epoch    1 "), "{out}");

    let out = ok(&["--config", s(&cfg), "evaluate", "--data", s(&data), "--model", s(&ckpt), "--out", s(&eval)]);
    assert!(out.contains("SSIM"), "{out}");
    let csv = std::fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 3, "{csv}");
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(eval.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["n_series"], 3);

    // Stream the test series from k-space and from its gridded frames; both
    // must reproduce the offline reconstruction exactly.
    let gt = data.join(format!("series_{test_id:05}_gt.tnsr"));
    let gridded = data.join(format!("series_{test_id:05}_gridded.tnsr"));
    let from_k = d.join("from_k.tnsr");
    let from_img = d.join("from_img.tnsr");
    let report = d.join("latency.json");
    let id = test_id.to_string();
    let out = ok(&[
        "--config", s(&cfg), "stream", "--input", s(&gt), "--traj", s(&manifest), "--series-id", &id,
        "--model", s(&ckpt), "--mode", "serial", "--output", s(&from_k), "--report", s(&report),
    ]);
    assert!(out.contains("period"), "{out}");
    ok(&["--config", s(&cfg), "stream", "--input", s(&gridded), "--model", s(&ckpt), "--output", s(&from_img)]);
    assert_eq!(std::fs::read(&from_k).unwrap(), std::fs::read(&from_img).unwrap());
    let lat: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(lat["frames_out"], 4);

    // Tensor mode scores the streamed output against the ground truth.
    let eval2 = d.join("eval2");
    ok(&["evaluate", "--gt", s(&gt), "--recon", s(&from_img), "--frames", "5,8", "--out", s(&eval2)]);
    let csv = std::fs::read_to_string(eval2.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");

    let same = d.join("same");
    ok(&["evaluate", "--gt", s(&gt), "--recon", s(&gt), "--frames", "5,6,7,8", "--out", s(&same)]);
    let csv = std::fs::read_to_string(same.join("metrics.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "ssim").unwrap();
    for line in csv.lines().skip(1) {
        assert_eq!(line.split(',').nth(col).unwrap().parse::<f64>().unwrap(), 1.0, "{line}");
    }

    // Longer runs cycle through the input.
    let long = d.join("long.tnsr");
    ok(&["--config", s(&cfg), "stream", "--input", s(&gridded), "--model", s(&ckpt), "--frames", "40", "--output", s(&long), "--report", s(&report)]);
    let lat: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(lat["frames_out"], 36);
}

#[test]
fn hyperband_resume_reproduces_an_uninterrupted_search() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = tiny_config(d);
    let full = d.join("full");
    let staged = d.join("staged");

    let out = ok(&["--config", s(&cfg), "hyperband", "--out", s(&full)]);
    assert!(out.contains("best trial"), "{out}");

    let out = ok(&["--config", s(&cfg), "hyperband", "--out", s(&staged), "--stop-after-rungs", "1"]);
    assert!(out.contains("continue with --resume"), "{out}");
    expect_error(&["--config", s(&cfg), "hyperband", "--out", s(&staged)], 1, "CONFIG");
    let out = ok(&["--config", s(&cfg), "hyperband", "--out", s(&staged), "--resume"]);
    assert!(out.contains("(replayed)") && out.contains("best trial"), "{out}");

    for f in ["search_report.json", "ledger.json", "best/pointer.json"] {
        assert_eq!(std::fs::read(full.join(f)).unwrap(), std::fs::read(staged.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = tiny_config(d);
    let out = d.join("out");

    expect_error(&[], 1, "USAGE");
    expect_error(&["trajgen"], 1, "USAGE");
    expect_error(&["trajgen", "--out", s(&out), "--bogus"], 1, "USAGE");
    expect_error(&["--config", s(&cfg), "trajgen", "--out", s(&out), "--rho", "0.5"], 1, "OUT_OF_BOUNDS");
    expect_error(&["--config", s(&cfg), "hyperband", "--out", s(&out), "--resume"], 1, "CONFIG");

    let bad = d.join("bad.json");
    std::fs::write(&bad, r#"{"trainng": {}}"#).unwrap();
    expect_error(&["--config", s(&bad), "trajgen", "--out", s(&out)], 1, "CONFIG");

    expect_error(&["evaluate", "--gt", "/nonexistent.tnsr", "--recon", "/nonexistent.tnsr", "--out", s(&out)], 2, "IO");
    let junk = d.join("junk.tnsr");
    std::fs::write(&junk, b"not a tensor").unwrap();
    expect_error(&["evaluate", "--gt", s(&junk), "--recon", s(&junk), "--out", s(&out)], 2, "FORMAT");

    let threads = bin().env("SPIRALFORGE_THREADS", "zero").arg("--help").output().unwrap();
    assert_eq!(threads.status.code(), Some(1));

    assert!(run(&["--help"]).status.success());
    assert!(run(&["--version"]).status.success());
}
