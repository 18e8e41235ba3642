use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn coeffcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coeffcast"))
        .args(args)
        .output()
        .expect("spawn coeffcast")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn synth_is_seeded_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = coeffcast(&["--seed", "7", "--dataset", path(d), "synth", "--clips", "10", "--frames", "40"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let manifest = fs::read_to_string(a.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 10);
    assert_eq!(manifest, fs::read_to_string(b.join("manifest.jsonl")).unwrap());
    for line in manifest.lines() {
        let entry: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["coeff_path", "wav_path"] {
            let rel = entry[key].as_str().unwrap();
            assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel}");
        }
    }

    let c = dir.path().join("c");
    let out = coeffcast(&["--seed", "8", "--dataset", path(&c), "synth", "--clips", "10", "--frames", "40"]);
    assert!(out.status.success());
    let first = "clips/clip_00000.coeff";
    assert_ne!(fs::read(a.join(first)).unwrap(), fs::read(c.join(first)).unwrap());
}

#[test]
fn eval_of_ground_truth_against_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = coeffcast(&["--dataset", path(&data), "synth", "--clips", "10", "--frames", "60"]);
    assert!(out.status.success());
    let clips = data.join("clips");
    let out = coeffcast(&[
        "--dataset",
        path(&data),
        "--out",
        path(&dir.path().join("run")),
        "eval",
        "--pred",
        path(&clips),
        "--gt",
        path(&clips),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["clip_count"], 10);
    for key in ["pose_error", "mouth_error", "detail_error", "frechet_distance"] {
        assert_eq!(report[key].as_f64().unwrap(), 0.0, "{key}");
    }
    assert!(dir.path().join("run/eval/report.json").is_file());
}

#[test]
fn missing_checkpoint_is_a_one_line_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(coeffcast(&["--dataset", path(&data), "synth", "--clips", "10", "--frames", "40"]).status.success());
    let out = coeffcast(&["--desk", "--dataset", path(&data), "--out", path(&dir.path().join("run")), "infer"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with("error kind=io msg=\""), "{err}");
    assert!(lines[0].contains("checkpoints/") && lines[0].contains(".ckpt"), "{err}");
}

#[test]
fn contradictory_config_fails_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    let run = dir.path().join("run");
    fs::write(
        &cfg,
        format!(
            r#"{{"out": "{}", "dataset": "{}", "predictor": {{"d_model": 7}}}}"#,
            path(&run),
            path(&dir.path().join("missing"))
        ),
    )
    .unwrap();
    for cmd in ["train-vqvae", "run", "config"] {
        let out = coeffcast(&["--config", path(&cfg), cmd]);
        assert!(!out.status.success());
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.starts_with("error kind=config msg="), "{cmd}: {err}");
        assert!(!run.exists(), "{cmd} created output before failing");
    }

    let out = coeffcast(&["--config", path(&dir.path().join("absent.json")), "config"]);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error kind=io"));
}

#[test]
fn effective_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = coeffcast(&["--desk", "--seed", "3", "--epochs", "5", "--mode", "no_window", "config"]);
    assert!(out.status.success());
    let saved = dir.path().join("cfg.json");
    fs::write(&saved, &out.stdout).unwrap();
    let cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["seed"], 3);
    assert_eq!(cfg["mode"], "no_window");
    assert_eq!(cfg["vq_train"]["epochs"], 5);
    assert_eq!(cfg["predictor_train"]["schedule"]["decay_epochs"], 5);
    assert_eq!(cfg["predictor"]["d_model"], 32);
    let again = coeffcast(&["--config", path(&saved), "config"]);
    assert_eq!(again.stdout, out.stdout);
}
