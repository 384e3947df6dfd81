use std::path::Path;
use std::process::{Command, Output};

fn mogaf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mogaf"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mogaf(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_is_deterministic_and_creates_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("nested/a");
    let b = dir.path().join("b");
    ok(&["generate", "--seed", "4", "--preset", "two-groups", "--out", p(&a)]);
    ok(&["generate", "--seed", "4", "--preset", "two-groups", "--out", p(&b)]);
    for f in ["scene.json", "ground_truth.json", "trajectories.csv", "masks/index.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(a.join("config.json").exists());
}

#[test]
fn invalid_arguments_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(mogaf(&["generate", "--groups", "0", "--out", p(&out)]).status.code(), Some(2));
    assert_eq!(mogaf(&["generate", "--groups", "99", "--out", p(&out)]).status.code(), Some(2));
    assert_eq!(
        mogaf(&["export", "--scene", "s.json", "--format", "obj", "--out", p(&out)]).status.code(),
        Some(2)
    );
    assert_eq!(mogaf(&["generate", "--set", "nope=1", "--out", p(&out)]).status.code(), Some(2));
    assert_eq!(mogaf(&["pipeline", "--ablate", "everything"]).status.code(), Some(2));
}

#[test]
fn missing_input_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let out = mogaf(&[
        "export",
        "--scene",
        p(&dir.path().join("missing.json")),
        "--format",
        "csv",
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let res = ok(&["pipeline", "--dry-run", "--ablate", "no-masking", "--out", p(&out)]);
    let text = String::from_utf8(res.stdout).unwrap();
    assert!(text.contains("no-masking"));
    assert!(!out.exists());
}

#[test]
fn env_layer_is_below_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mogaf"))
        .args(["pipeline", "--dry-run", "--seed", "9"])
        .env("MOGAF_SEED", "3")
        .env("MOGAF_FORECASTER__EPOCHS", "17")
        .current_dir(dir.path())
        .output()
        .unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("\"seed\": 9"), "{text}");
    assert!(text.contains("\"epochs\": 17"), "{text}");
}

#[test]
fn staged_commands_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let quick = ["--epochs", "2", "--set", "forecaster.d_model=8", "--set", "forecaster.heads=2", "--set", "forecaster.window=4"];
    ok(&["generate", "--preset", "two-groups", "--out", p(&d.join("gen"))]);
    let scene = d.join("gen/scene.json");
    ok(&["group", "--scene", p(&scene), "--masks", p(&d.join("gen/masks/index.json")), "--out", p(&d.join("grp"))]);
    let bank = d.join("grp/bank.json");
    let mut train = vec!["train", "--scene", p(&scene), "--bank", p(&bank), "--out"];
    let tr = d.join("tr");
    train.push(p(&tr));
    train.extend(quick);
    ok(&train);
    ok(&[
        "forecast",
        "--scene",
        p(&scene),
        "--bank",
        p(&bank),
        "--models",
        p(&tr.join("models.json")),
        "--horizon",
        "3",
        "--out",
        p(&d.join("fc")),
    ]);
    let csv = std::fs::read_to_string(d.join("fc/forecast.csv")).unwrap();
    assert!(csv.starts_with("gaussian_id,t,"));

    // CSV export then re-export of the same scene is byte-stable
    ok(&["export", "--scene", p(&scene), "--format", "csv", "--bank", p(&bank), "--out", p(&d.join("ex"))]);
    let exported = std::fs::read(d.join("ex/trajectories.csv")).unwrap();
    assert_eq!(exported, std::fs::read(d.join("gen/trajectories.csv")).unwrap());
    assert!(d.join("ex/labels.csv").exists());

    ok(&["export", "--scene", p(&scene), "--format", "ply", "--t", "2", "--out", p(&d.join("ply"))]);
    let ply = std::fs::read_to_string(d.join("ply/frame_0002.ply")).unwrap();
    assert!(ply.starts_with("ply\nformat ascii 1.0\n"));
}
