mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use dmiso_service::dataset::read_image;
use dmiso_service::scene_file::{load_scene, save_scene};
use serde_json::json;

fn dmiso(args: &[&dyn AsRef<std::ffi::OsStr>]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dmiso"))
        .args(args.iter().map(|a| a.as_ref()))
        .env("DMISO_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(out: std::process::Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

#[test]
fn synth_render_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(&d.join("spec.json"), r#"{"timesteps": 2, "width": 24, "height": 24}"#);
    ok(dmiso(&[&"synth", &d.join("spec.json"), &"-o", &d.join("data")]));
    let gt = d.join("data/ground_truth.dms");
    assert!(d.join("data/transforms_train.json").exists());

    fs::create_dir_all(d.join("a/train")).unwrap();
    ok(dmiso(&[&"render", &gt, &"--time", &"0", &"--camera-index", &"1", &"-o", &d.join("a/train/r_001.png")]));
    let img = read_image(&d.join("a/train/r_001.png"), [0.0; 3]).unwrap();
    assert_eq!((img.width, img.height), (24, 24));

    let table = ok(dmiso(&[&"metrics", &d.join("a"), &d.join("data")]));
    let mean = table.lines().last().unwrap();
    assert!(mean.starts_with("mean"));
    let psnr: f64 = mean.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(psnr > 40.0, "{table}");

    let out = dmiso(&[&"render", &gt, &"--camera-index", &"50", &"-o", &d.join("x.png")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("out of range"));
}

#[test]
fn edit_and_mesh_verbs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let scene = d.join("s.dms");
    save_scene(&scene, &common::scene_file(7, 10, 2)).unwrap();

    ok(dmiso(&[&"mesh", &scene, &"--radius", &"1e6", &"-o", &d.join("hull.obj")]));
    let obj = fs::read_to_string(d.join("hull.obj")).unwrap();
    assert!(obj.lines().filter(|l| l.starts_with("f ")).count() >= 4);

    let ops = json!([
        {"op": "remove", "selection": {"indices": [0, 1]}},
        {"op": "scale", "selection": "all", "factors": [1.0, 2.0, 1.0], "pivot": [0.0, 0.0, 0.0]}
    ]);
    write(&d.join("ops.json"), &ops.to_string());
    ok(dmiso(&[&"edit", &scene, &"--ops", &d.join("ops.json"), &"-o", &d.join("e.dms")]));
    let edited = load_scene(&d.join("e.dms")).unwrap();
    assert_eq!(edited.session.unwrap().soup.len(), 18);

    write(&d.join("bad.json"), r#"[{"op": "remove", "selection": {"indices": [999]}}]"#);
    let out = dmiso(&[&"edit", &scene, &"--ops", &d.join("bad.json"), &"-o", &d.join("f.dms")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("op 0"));
    assert!(!d.join("f.dms").exists());
}

#[test]
fn tiny_fit_writes_scene_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(&d.join("spec.json"), r#"{"gaussians": 2, "timesteps": 2, "train_cameras": 2, "width": 16, "height": 16}"#);
    ok(dmiso(&[&"synth", &d.join("spec.json"), &"-o", &d.join("data")]));
    let stdout = ok(dmiso(&[&"fit", &d.join("data"), &"-o", &d.join("fit.dms"), &"--iters", &"6", &"--stage2-start", &"3", &"--k", &"2", &"--batch", &"2"]));
    assert!(stdout.starts_with("held-out psnr"));
    let file = load_scene(&d.join("fit.dms")).unwrap();
    assert!(file.scene.multis.iter().all(|m| m.subs.len() == 2));
    let curve = fs::read_to_string(d.join("fit.dms.curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 7);
}
