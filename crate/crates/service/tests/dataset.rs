use std::fs;
use std::path::Path;

use dmiso_core::render::Image;
use dmiso_service::dataset::*;

fn small_spec() -> SynthSpec {
    SynthSpec { timesteps: 3, width: 24, height: 20, ..SynthSpec::default() }
}

fn all_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synthetic_dataset_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let made = make_synthetic_dataset(&spec, dir.path()).unwrap();
    let read = load_dataset(dir.path(), spec.background).unwrap();
    assert_eq!(read.train.len(), 3 * 4);
    assert_eq!(read.test.len(), 3);
    for (a, b) in made.train.iter().chain(&made.test).zip(read.train.iter().chain(&read.test)) {
        assert_eq!(a.time, b.time);
        assert!((a.camera.rotation - b.camera.rotation).amax() < 1e-12);
        assert!((a.camera.translation - b.camera.translation).amax() < 1e-12);
        assert_eq!((b.camera.width, b.camera.height), (24, 20));
        assert!(a.image.clone().clamped().max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-12);
    }
    assert_eq!(read.time_range(), [0.0, 1.0]);
    assert_eq!(read.cameras().len(), 5);
    assert!(dir.path().join("ground_truth.dms").exists());
    let spec_back: SynthSpec = serde_json::from_str(&fs::read_to_string(dir.path().join("synth_spec.json")).unwrap()).unwrap();
    assert_eq!(spec_back, spec);
}

#[test]
fn synthesis_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    make_synthetic_dataset(&small_spec(), a.path()).unwrap();
    make_synthetic_dataset(&small_spec(), b.path()).unwrap();
    assert_eq!(all_files(a.path()), all_files(b.path()));
    let other = tempfile::tempdir().unwrap();
    make_synthetic_dataset(&SynthSpec { seed: 1, ..small_spec() }, other.path()).unwrap();
    assert_ne!(all_files(a.path()), all_files(other.path()));
}

#[test]
fn static_spec_has_one_frame_per_camera() {
    let spec = SynthSpec { timesteps: 1, test_cameras: 0, width: 16, height: 16, ..SynthSpec::default() };
    let data = synthesize(&spec).unwrap();
    assert_eq!(ground_truth(&spec).len(), 5);
    assert_eq!(data.train.len(), 4);
    assert!(data.test.is_empty());
    assert!(data.train.iter().all(|v| v.time == 0.0));
}

#[test]
fn translation_trajectory_moves_centers() {
    let spec = SynthSpec {
        trajectory: Trajectory { translation: [1.0, 0.0, 0.0], rotation_axis: [0.0; 3], rotation_angle: 0.0 },
        width: 32,
        height: 32,
        ..SynthSpec::default()
    };
    let gt = ground_truth(&spec);
    let (start, end) = (ground_truth_at(&spec, &gt, 0.0), ground_truth_at(&spec, &gt, 1.0));
    for (a, b) in start.iter().zip(&end) {
        assert!((b.mean - a.mean - nalgebra::Vector3::new(1.0, 0.0, 0.0)).amax() < 1e-12);
        assert_eq!(a.rotation, b.rotation);
    }
    let cam = spec.cameras().0[0];
    let first = render_ground_truth(&spec, &gt, 0.0, &cam).unwrap();
    let last = render_ground_truth(&spec, &gt, 1.0, &cam).unwrap();
    assert!(first.max_abs_diff(&last) > 0.1);
}

fn write_manifest(dir: &Path, split: &str, m: &Manifest) {
    fs::write(manifest_path(dir, split), serde_json::to_string(m).unwrap()).unwrap();
}

fn two_frame_dir() -> (tempfile::TempDir, Manifest) {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("train")).unwrap();
    write_png(&dir.path().join("train/a.png"), &Image::filled(40, 30, [0.2, 0.4, 0.6])).unwrap();
    write_png(&dir.path().join("train/b.png"), &Image::filled(40, 30, [1.0, 0.0, 0.5])).unwrap();
    let eye = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 3.0], [0.0, 0.0, 0.0, 1.0]];
    let m = Manifest {
        camera_angle_x: 0.8,
        frames: vec![
            ManifestFrame { file_path: "./train/a".into(), transform_matrix: eye, time: 0.25 },
            ManifestFrame { file_path: "train/b.png".into(), transform_matrix: eye, time: 0.75 },
        ],
    };
    write_manifest(dir.path(), "train", &m);
    (dir, m)
}

#[test]
fn hand_written_manifest_loads() {
    let (dir, _) = two_frame_dir();
    let data = load_dataset(dir.path(), [0.0; 3]).unwrap();
    assert_eq!(data.train.len(), 2);
    assert!(data.test.is_empty());
    assert_eq!(data.time_range(), [0.25, 0.75]);
    let cam = &data.train[0].camera;
    assert!((cam.fx - 20.0 / 0.4f64.tan()).abs() < 1e-12);
    assert_eq!((cam.cx, cam.cy), (20.0, 15.0));
    // camera at +3z looking down -z: the origin is 3 units in front
    let p = cam.to_camera(&nalgebra::Vector3::zeros());
    assert!((p - nalgebra::Vector3::new(0.0, 0.0, 3.0)).amax() < 1e-12);
    // +y world is up, image y grows downward
    assert!(cam.to_camera(&nalgebra::Vector3::new(0.0, 1.0, 0.0)).y < 0.0);
    assert_eq!(data.train[1].image.pixel(3, 3), [1.0, 0.0, 128.0 / 255.0]);
}

#[test]
fn bad_inputs_are_named() {
    let (dir, m) = two_frame_dir();
    let mut late = m.clone();
    late.frames[1].time = 1.5;
    write_manifest(dir.path(), "train", &late);
    assert!(matches!(load_dataset(dir.path(), [0.0; 3]), Err(DatasetError::BadTime { frame: 1, .. })));

    let mut skew = m.clone();
    skew.frames[0].transform_matrix[0][1] = 0.5;
    write_manifest(dir.path(), "train", &skew);
    assert!(matches!(load_dataset(dir.path(), [0.0; 3]), Err(DatasetError::BadMatrix { frame: 0 })));

    let mut missing = m.clone();
    missing.frames[0].file_path = "train/nope".into();
    write_manifest(dir.path(), "train", &missing);
    assert!(matches!(load_dataset(dir.path(), [0.0; 3]), Err(DatasetError::MissingImage(_))));

    write_png(&dir.path().join("train/b.png"), &Image::filled(8, 8, [0.0; 3])).unwrap();
    write_manifest(dir.path(), "train", &m);
    assert!(matches!(load_dataset(dir.path(), [0.0; 3]), Err(DatasetError::SizeMismatch { .. })));

    fs::write(manifest_path(dir.path(), "train"), "{").unwrap();
    assert!(matches!(load_dataset(dir.path(), [0.0; 3]), Err(DatasetError::BadManifest { .. })));

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(empty.path(), [0.0; 3]), Err(DatasetError::MissingManifest(_))));
}

#[test]
fn alpha_is_composited_over_background() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.png");
    image::RgbaImage::from_pixel(2, 2, image::Rgba([255, 0, 0, 0])).save(&path).unwrap();
    let img = read_image(&path, [0.0, 1.0, 0.0]).unwrap();
    assert_eq!(img.pixel(0, 0), [0.0, 1.0, 0.0]);
}
