use std::path::Path;
use std::process::{Command, Output};

fn rmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rmoe"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

/// A small synthetic setup that trains in seconds.
const SMALL: [&str; 6] = [
    "--set",
    "data.synth.per_class=60",
    "--set",
    "data.synth.size=16",
    "--set",
    "experts.max_epochs=10",
];

#[test]
fn usage_errors_exit_2() {
    assert_eq!(rmoe(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(rmoe(&["evaluate", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(rmoe(&[]).status.code(), Some(2));
}

#[test]
fn invalid_config_exits_2_and_names_the_field() {
    let out = rmoe(&["evaluate", "--set", "gate.lambda=-0.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("gate.lambda"), "{}", text(&out.stderr));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[distortions]\nnoise_max = 100.0\nblur_sigma = 3\n").unwrap();
    let out = rmoe(&["evaluate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("blur_sigma"), "{}", text(&out.stderr));

    let out = rmoe(&["evaluate", "--config", "/nonexistent/config.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_without_checkpoints_names_the_missing_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = rmoe(&["evaluate", "--output-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    let expected = dir.path().join("experts").join("clean.rmoe");
    assert!(err.contains(expected.to_str().unwrap()), "{err}");
}

#[test]
fn synth_data_then_train_clean_expert() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let mut args = vec!["synth-data", "--output-dir", out_dir];
    args.extend(SMALL);
    let out = rmoe(&args);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let images = dir.path().join("data/images.idx");
    let labels = dir.path().join("data/labels.idx");
    assert!(images.is_file() && labels.is_file());

    let images_set = format!("data.idx.images={}", images.display());
    let labels_set = format!("data.idx.labels={}", labels.display());
    let mut args = vec![
        "train-expert",
        "--policy",
        "clean",
        "--output-dir",
        out_dir,
        "--set",
        "data.source=idx",
        "--set",
        &images_set,
        "--set",
        &labels_set,
    ];
    args.extend(SMALL);
    let out = rmoe(&args);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(Path::new(out_dir).join("experts/clean.rmoe").is_file());
    let stdout = text(&out.stdout);
    assert_eq!(stdout.lines().count(), 1, "{stdout}");
    let acc: f64 = stdout
        .split("clean accuracy ")
        .nth(1)
        .and_then(|s| s.split_whitespace().next())
        .and_then(|s| s.parse().ok())
        .unwrap_or_else(|| panic!("no accuracy in {stdout:?}"));
    assert!(acc >= 0.95, "clean accuracy {acc}");

    // Visualization runs on the saved expert and writes its two files.
    let mut args = vec![
        "visualize", "--output-dir", out_dir, "--layer", "Conv2", "--unit", "3", "--steps", "5",
    ];
    args.extend(SMALL);
    let out = rmoe(&args);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let pgm = std::fs::read(dir.path().join("visualize/clean-Conv2-3.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
    let traj = std::fs::read_to_string(dir.path().join("visualize/clean-Conv2-3.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 6);
}
