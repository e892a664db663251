//! D-NeRF style datasets: a `transforms_<split>.json` manifest per split with
//! a horizontal field of view and, per frame, an image path, an OpenGL
//! camera-to-world matrix and a time in `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use dmiso_core::deform::DeformFieldParams;
use dmiso_core::fit::TimedView;
use dmiso_core::fixtures::random_rotation;
use dmiso_core::multigauss::{MultiGaussian, SoupScene};
use dmiso_core::render::{focal_from_fov, prepare_splats, render_brute, Camera, Image, RenderGaussian};
use dmiso_core::soup::{is_rotation, triangle_from_gaussian, FlatGaussianGeometry, GaussianAppearance, Mat3, Vec3};
use dmiso_core::math::flat_covariance;
use nalgebra::{Rotation3, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene_file::{save_scene, SceneFile};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest {0} not found")]
    MissingManifest(PathBuf),
    #[error("manifest {path} is malformed: {reason}")]
    BadManifest { path: PathBuf, reason: String },
    #[error("frame {frame}: camera matrix is not an invertible rigid transform")]
    BadMatrix { frame: usize },
    #[error("frame {frame}: time {time} is outside [0, 1]")]
    BadTime { frame: usize, time: f64 },
    #[error("image {0} is missing or unreadable")]
    MissingImage(PathBuf),
    #[error("image {path} is {got:?}, expected {expected:?}")]
    SizeMismatch { path: PathBuf, got: (usize, usize), expected: (usize, usize) },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub file_path: String,
    pub transform_matrix: [[f64; 4]; 4],
    pub time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub camera_angle_x: f64,
    pub frames: Vec<ManifestFrame>,
}

pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("transforms_{split}.json"))
}

/// Camera from an OpenGL camera-to-world matrix (`+y` up, looking down `-z`).
pub fn camera_from_c2w(m: &[[f64; 4]; 4], width: usize, height: usize, fov_x: f64) -> Option<Camera> {
    if m.iter().flatten().any(|v| !v.is_finite()) || m[3] != [0.0, 0.0, 0.0, 1.0] {
        return None;
    }
    let r_gl = Mat3::from_fn(|i, j| m[i][j]);
    let center = Vec3::new(m[0][3], m[1][3], m[2][3]);
    if r_gl.determinant().abs() < 1e-9 {
        return None;
    }
    // manifests are often written in single precision
    let svd = r_gl.svd(true, true);
    let r_gl = svd.u? * svd.v_t?;
    if !is_rotation(&r_gl, 1e-9) || (Mat3::from_fn(|i, j| m[i][j]) - r_gl).amax() > 1e-3 {
        return None;
    }
    let c2w = r_gl * Mat3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0));
    let rotation = c2w.transpose();
    let f = focal_from_fov(width, fov_x);
    Some(Camera {
        width,
        height,
        fx: f,
        fy: f,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        rotation,
        translation: -(rotation * center),
    })
}

/// Inverse of [`camera_from_c2w`].
pub fn c2w_from_camera(cam: &Camera) -> [[f64; 4]; 4] {
    let r_gl = cam.rotation.transpose() * Mat3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0));
    let c = cam.center();
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r_gl[(i, j)];
        }
        m[i][3] = c[i];
    }
    m[3][3] = 1.0;
    m
}

pub fn read_manifest(dir: &Path, split: &str) -> Result<Manifest, DatasetError> {
    let path = manifest_path(dir, split);
    let text = fs::read_to_string(&path).map_err(|_| DatasetError::MissingManifest(path.clone()))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::BadManifest { path, reason: e.to_string() })
}

/// Decodes a PNG to floats, compositing any alpha channel over `background`.
pub fn read_image(path: &Path, background: [f64; 3]) -> Result<Image, DatasetError> {
    let img = image::open(path).map_err(|_| DatasetError::MissingImage(path.to_path_buf()))?.to_rgba8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Vec::with_capacity(w * h * 3);
    for p in img.pixels() {
        let a = p[3] as f64 / 255.0;
        for c in 0..3 {
            data.push(p[c] as f64 / 255.0 * a + background[c] * (1.0 - a));
        }
    }
    Ok(Image { width: w, height: h, data })
}

pub fn write_png(path: &Path, img: &Image) -> Result<(), DatasetError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode_png(img)?)?;
    Ok(())
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>, image::ImageError> {
    let mut out = Vec::new();
    let encoder = image::codecs::png::PngEncoder::new(&mut out);
    image::ImageEncoder::write_image(encoder, &img.to_rgb8(), img.width as u32, img.height as u32, image::ExtendedColorType::Rgb8)?;
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<Image, image::ImageError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
    Ok(Image::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw()))
}

/// Views of one split; every image must exist and share the first one's size.
pub fn load_split(dir: &Path, split: &str, background: [f64; 3]) -> Result<Vec<TimedView>, DatasetError> {
    let manifest = read_manifest(dir, split)?;
    let mut size = None;
    let mut views = Vec::with_capacity(manifest.frames.len());
    for (i, frame) in manifest.frames.iter().enumerate() {
        if !(0.0..=1.0).contains(&frame.time) {
            return Err(DatasetError::BadTime { frame: i, time: frame.time });
        }
        let mut path = dir.join(&frame.file_path);
        if path.extension().is_none() {
            path.set_extension("png");
        }
        let image = read_image(&path, background)?;
        let got = (image.width, image.height);
        let expected = *size.get_or_insert(got);
        if got != expected {
            return Err(DatasetError::SizeMismatch { path, got, expected });
        }
        let camera = camera_from_c2w(&frame.transform_matrix, got.0, got.1, manifest.camera_angle_x)
            .ok_or(DatasetError::BadMatrix { frame: i })?;
        views.push(TimedView { image, camera, time: frame.time });
    }
    Ok(views)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<TimedView>,
    /// Empty when the dataset has no test manifest.
    pub test: Vec<TimedView>,
}

impl Dataset {
    /// Smallest and largest frame time over both splits.
    pub fn time_range(&self) -> [f64; 2] {
        let times = self.train.iter().chain(&self.test).map(|v| v.time);
        let lo = times.clone().fold(f64::INFINITY, f64::min);
        let hi = times.fold(f64::NEG_INFINITY, f64::max);
        if lo <= hi {
            [lo, hi]
        } else {
            [0.0, 1.0]
        }
    }

    pub fn cameras(&self) -> Vec<Camera> {
        let mut out: Vec<Camera> = Vec::new();
        for v in self.train.iter().chain(&self.test) {
            if !out.contains(&v.camera) {
                out.push(v.camera);
            }
        }
        out
    }
}

pub fn load_dataset(dir: &Path, background: [f64; 3]) -> Result<Dataset, DatasetError> {
    let train = load_split(dir, "train", background)?;
    let test = if manifest_path(dir, "test").exists() {
        load_split(dir, "test", background)?
    } else {
        Vec::new()
    };
    Ok(Dataset { train, test })
}

/// Writes images as `<split>/r_NNN.png` and the split manifest.
pub fn write_split(dir: &Path, split: &str, views: &[TimedView], fov_x: f64) -> Result<(), DatasetError> {
    let mut frames = Vec::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        let rel = format!("{split}/r_{i:03}.png");
        write_png(&dir.join(&rel), &v.image)?;
        frames.push(ManifestFrame {
            file_path: format!("./{split}/r_{i:03}"),
            transform_matrix: c2w_from_camera(&v.camera),
            time: v.time,
        });
    }
    let manifest = Manifest { camera_angle_x: fov_x, frames };
    fs::create_dir_all(dir)?;
    fs::write(manifest_path(dir, split), serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    Ok(())
}

/// Rigid motion of the whole cluster about its centroid:
/// `x(t) = c + R(angle t) (x - c) + t translation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub translation: [f64; 3],
    pub rotation_axis: [f64; 3],
    pub rotation_angle: f64,
}

impl Trajectory {
    pub fn rotation(&self, t: f64) -> Mat3 {
        let axis = Vec3::from(self.rotation_axis);
        if self.rotation_angle == 0.0 || axis.norm() == 0.0 {
            return Mat3::identity();
        }
        Rotation3::from_axis_angle(&Unit::new_normalize(axis), self.rotation_angle * t).into_inner()
    }

    pub fn apply(&self, g: &FlatGaussianGeometry, centroid: &Vec3, t: f64) -> FlatGaussianGeometry {
        let r = self.rotation(t);
        FlatGaussianGeometry {
            mean: centroid + r * (g.mean - centroid) + Vec3::from(self.translation) * t,
            rotation: r * g.rotation,
            scale: g.scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub gaussians: usize,
    pub timesteps: usize,
    pub train_cameras: usize,
    pub test_cameras: usize,
    pub width: usize,
    pub height: usize,
    pub fov_x: f64,
    pub camera_distance: f64,
    /// Camera elevation above the orbit plane, radians.
    pub elevation: f64,
    /// Half-width of the cube the ground-truth means are drawn from.
    pub spread: f64,
    pub scale_range: [f64; 2],
    pub opacity_range: [f64; 2],
    pub background: [f64; 3],
    pub trajectory: Trajectory,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            gaussians: 5,
            timesteps: 20,
            train_cameras: 4,
            test_cameras: 1,
            width: 64,
            height: 64,
            fov_x: 0.9,
            camera_distance: 4.0,
            elevation: 0.3,
            spread: 0.4,
            scale_range: [0.15, 0.35],
            opacity_range: [0.7, 0.95],
            background: [0.0; 3],
            trajectory: Trajectory {
                translation: [0.5, 0.0, 0.0],
                rotation_axis: [0.0, 1.0, 0.0],
                rotation_angle: 0.6,
            },
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.gaussians == 0 || self.timesteps == 0 || self.train_cameras == 0 {
            return Err("need at least one gaussian, timestep and training camera".into());
        }
        if self.width == 0 || self.height == 0 {
            return Err("image size must be positive".into());
        }
        if !(self.fov_x > 0.0 && self.fov_x < std::f64::consts::PI) || !(self.camera_distance > 0.0) {
            return Err("bad camera parameters".into());
        }
        if !(0.0 < self.scale_range[0] && self.scale_range[0] <= self.scale_range[1]) {
            return Err("bad scale range".into());
        }
        if !(0.0 < self.opacity_range[0] && self.opacity_range[0] <= self.opacity_range[1] && self.opacity_range[1] <= 1.0) {
            return Err("bad opacity range".into());
        }
        Ok(())
    }

    /// Frame times, evenly spaced over `[0, 1]`.
    pub fn times(&self) -> Vec<f64> {
        if self.timesteps == 1 {
            return vec![0.0];
        }
        (0..self.timesteps).map(|i| i as f64 / (self.timesteps - 1) as f64).collect()
    }

    /// Training cameras evenly spaced in azimuth, then held-out cameras halfway between them.
    pub fn cameras(&self) -> (Vec<Camera>, Vec<Camera>) {
        let ring = |azimuth: f64| {
            let (s, c) = azimuth.sin_cos();
            let eye = Vec3::new(s * self.elevation.cos(), -self.elevation.sin(), -c * self.elevation.cos()) * self.camera_distance;
            Camera::look_at(eye, Vec3::zeros(), Vec3::new(0.0, -1.0, 0.0), self.width, self.height, self.fov_x)
        };
        let step = std::f64::consts::TAU / self.train_cameras as f64;
        let train = (0..self.train_cameras).map(|i| ring(i as f64 * step)).collect();
        let test = (0..self.test_cameras)
            .map(|i| ring(((i * self.train_cameras / self.test_cameras) as f64 + 0.5) * step))
            .collect();
        (train, test)
    }
}

/// Ground-truth Gaussians at `t = 0`, centered so the motion path straddles the origin.
pub fn ground_truth(spec: &SynthSpec) -> Vec<(FlatGaussianGeometry, GaussianAppearance)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shift = Vec3::from(spec.trajectory.translation) * 0.5;
    (0..spec.gaussians)
        .map(|_| {
            let mean = Vec3::from_fn(|_, _| rng.random_range(-spec.spread..=spec.spread)) - shift;
            let g = FlatGaussianGeometry::new(
                mean,
                random_rotation(&mut rng),
                rng.random_range(spec.scale_range[0]..=spec.scale_range[1]),
                rng.random_range(spec.scale_range[0]..=spec.scale_range[1]),
            );
            let rgb = [rng.random_range(0.2..1.0), rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)];
            let opacity = rng.random_range(spec.opacity_range[0]..=spec.opacity_range[1]);
            (g, GaussianAppearance::from_rgb(opacity, rgb))
        })
        .collect()
}

pub fn ground_truth_at(spec: &SynthSpec, gt: &[(FlatGaussianGeometry, GaussianAppearance)], t: f64) -> Vec<FlatGaussianGeometry> {
    let centroid = gt.iter().map(|(g, _)| g.mean).sum::<Vec3>() / gt.len() as f64;
    gt.iter().map(|(g, _)| spec.trajectory.apply(g, &centroid, t)).collect()
}

pub fn render_ground_truth(
    spec: &SynthSpec,
    gt: &[(FlatGaussianGeometry, GaussianAppearance)],
    t: f64,
    cam: &Camera,
) -> Result<Image, dmiso_core::RenderError> {
    let moved = ground_truth_at(spec, gt, t);
    let gaussians: Vec<RenderGaussian<'_>> = moved
        .iter()
        .zip(gt)
        .map(|(g, (_, a))| RenderGaussian {
            mean: g.mean,
            cov: flat_covariance(&g.rotation, g.scale[1], g.scale[2]),
            appearance: a,
        })
        .collect();
    Ok(render_brute(&prepare_splats(cam, &gaussians)?, cam, spec.background))
}

/// Splits of a synthetic dataset, rendered but not yet quantized.
pub fn synthesize(spec: &SynthSpec) -> Result<Dataset, String> {
    spec.validate()?;
    let gt = ground_truth(spec);
    let (train_cams, test_cams) = spec.cameras();
    let views = |cams: &[Camera]| -> Result<Vec<TimedView>, String> {
        let mut out = Vec::new();
        for &t in &spec.times() {
            for cam in cams {
                let image = render_ground_truth(spec, &gt, t, cam).map_err(|e| e.to_string())?;
                out.push(TimedView { image, camera: *cam, time: t });
            }
        }
        Ok(out)
    };
    Ok(Dataset {
        train: views(&train_cams)?,
        test: views(&test_cams)?,
    })
}

/// Ground truth at `t = 0` as a static scene of cores with identity fields.
pub fn ground_truth_scene(spec: &SynthSpec) -> SceneFile {
    let mut scene = SoupScene::new(0, spec.background);
    for (g, a) in ground_truth(spec) {
        scene.multis.push(MultiGaussian {
            core: triangle_from_gaussian(&g).expect("valid ground truth"),
            core_appearance: a,
            subs: Vec::new(),
        });
    }
    let (train, test) = spec.cameras();
    SceneFile {
        scene,
        params: DeformFieldParams::new(Default::default(), spec.seed),
        session: None,
        cameras: train.into_iter().chain(test).collect(),
        time_range: [0.0, 1.0],
    }
}

/// Writes both splits, `synth_spec.json` and `ground_truth.dms`. Output bytes
/// depend only on the spec.
pub fn make_synthetic_dataset(spec: &SynthSpec, dir: &Path) -> Result<Dataset, DatasetError> {
    let data = synthesize(spec).map_err(|reason| DatasetError::BadManifest { path: dir.join("synth_spec.json"), reason })?;
    fs::create_dir_all(dir)?;
    write_split(dir, "train", &data.train, spec.fov_x)?;
    write_split(dir, "test", &data.test, spec.fov_x)?;
    fs::write(dir.join("synth_spec.json"), serde_json::to_string_pretty(spec).expect("spec serializes"))?;
    save_scene(&dir.join("ground_truth.dms"), &ground_truth_scene(spec)).map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn c2w_round_trip() {
        let spec = SynthSpec::default();
        let (train, _) = spec.cameras();
        for cam in train {
            let back = camera_from_c2w(&c2w_from_camera(&cam), cam.width, cam.height, spec.fov_x).unwrap();
            assert!((back.rotation - cam.rotation).amax() < 1e-12);
            assert!((back.translation - cam.translation).amax() < 1e-12);
            assert!((back.fx - cam.fx).abs() < 1e-9);
        }
    }

    #[test]
    fn opengl_camera_looks_down_minus_z() {
        // identity c2w: camera at the origin looking along -z with +y up
        let mut m = [[0.0; 4]; 4];
        (0..4).for_each(|i| m[i][i] = 1.0);
        m[2][3] = 5.0;
        let cam = camera_from_c2w(&m, 10, 10, 1.0).unwrap();
        let p = cam.to_camera(&Vec3::new(0.0, 1.0, 0.0));
        assert!(p.z > 0.0 && p.y < 0.0);
        m[0][0] = 0.0;
        assert!(camera_from_c2w(&m, 10, 10, 1.0).is_none());
    }

    #[test]
    fn trajectory_translates() {
        let spec = SynthSpec {
            trajectory: Trajectory { translation: [1.0, 0.0, 0.0], rotation_axis: [0.0, 1.0, 0.0], rotation_angle: 0.0 },
            ..Default::default()
        };
        let gt = ground_truth(&spec);
        let a = ground_truth_at(&spec, &gt, 0.0);
        let b = ground_truth_at(&spec, &gt, 1.0);
        for (p, q) in a.iter().zip(&b) {
            assert!((q.mean - p.mean - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        }
    }
}
