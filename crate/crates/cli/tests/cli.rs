use std::path::Path;
use std::process::{Command, Output};

fn pforecast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pforecast")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: [&str; 16] = [
    "--set", "height=16", "--set", "width=24", "--set", "d_e=8", "--set", "ffn=16", "--set", "drop_step=3", "--set",
    "refine_steps=3", "--set", "refine_drop_step=2", "--set", "app_size=2",
];

#[test]
fn gradcheck_passes() {
    let o = pforecast(&["gradcheck", "--seed", "7"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("worst relative error"));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(pforecast(&["gradcheck", "--bogus"]).status.code(), Some(2));
    assert_eq!(pforecast(&["--set", "nope=1", "gradcheck"]).status.code(), Some(2));
    assert_eq!(pforecast(&["--set", "steps", "gradcheck"]).status.code(), Some(2));
}

#[test]
fn missing_out_dir_is_a_usage_error() {
    assert_eq!(pforecast(&["gen"]).status.code(), Some(2));
}

#[test]
fn eval_of_target_against_itself_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = pforecast(&["gen", "--seed", "3", "--out", d]);
    assert!(o.status.success());
    let target = dir.path().join("scene-000.target_panoptic.pgm");
    let t = target.to_str().unwrap();
    let o = pforecast(&["eval", "--pred", t, "--target", t, "--out", d]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let all = text.lines().find(|l| l.starts_with("All,")).unwrap();
    assert!(all.starts_with("All,aggregate,1.000000,1.000000,1.000000,1.000000"), "{all}");
    assert_eq!(std::fs::read_to_string(dir.path().join("eval.csv")).unwrap(), text);
}

#[test]
fn gen_train_forecast_reproject() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |args: &[&str]| {
        let mut all: Vec<&str> = SMALL.to_vec();
        all.extend(["--steps", "4", "--seed", "11", "--out", d.to_str().unwrap()]);
        all.extend(args);
        let o = pforecast(&all);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    run(&["gen", "--count", "2"]);
    let s0 = d.join("scene-000.scene");
    let s1 = d.join("scene-001.scene");
    assert!(s0.exists() && s1.exists());

    let o = run(&["train", s0.to_str().unwrap(), "--val", s1.to_str().unwrap()]);
    assert!(stdout(&o).contains("copy-last loc loss"));
    let ckpt = d.join("checkpoint.pfc");
    let log = std::fs::read_to_string(d.join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 4 + 3);

    let fc = d.join("fc");
    let o = pforecast(&[
        "forecast",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--scene",
        s1.to_str().unwrap(),
        "--out",
        fc.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["panoptic.ppm", "panoptic.pgm", "selection.pgm", "depth.pgm", "forecasts.csv"] {
        assert!(fc.join(f).exists(), "{f}");
    }

    let o = run(&["reproject", "--scene", s0.to_str().unwrap()]);
    assert!(stdout(&o).contains("coverage"));
    assert!(Path::new(&d.join("reprojected_q.pgm")).exists());
}

#[test]
fn train_without_scene_files_generates_them() {
    let dir = tempfile::tempdir().unwrap();
    let mut args: Vec<&str> = SMALL.to_vec();
    args.extend(["--steps", "4", "--set", "scenes=2", "--set", "val_scenes=1", "--out", dir.path().to_str().unwrap(), "train"]);
    let o = pforecast(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("validation loc loss"));
    assert!(dir.path().join("checkpoint.pfc").exists());
}

#[test]
fn checkpoint_from_another_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.pfc");
    std::fs::write(&bogus, "not a checkpoint\n").unwrap();
    let o = pforecast(&["forecast", "--checkpoint", bogus.to_str().unwrap(), "--scene", "x", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}
