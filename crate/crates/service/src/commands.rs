//! Implementations behind the `dmiso` command line verbs.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use dmiso_core::edit::{alpha_shape, core_points, default_radius, EstimatedMesh};
use dmiso_core::fit::{fit_with_progress, CurvePoint, FitConfig, TimedView};
use dmiso_core::loss::psnr;
use dmiso_core::render::Camera;

use crate::dataset::{load_dataset, write_png, SynthSpec};
use crate::scene_file::{load_scene, save_scene, SceneFile};
use crate::state::{render_at, replay, EditRequest};

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("iteration,loss,psnr\n");
    for p in curve {
        s.push_str(&format!("{},{},{}\n", p.iteration, p.loss, p.psnr));
    }
    s
}

/// Mean PSNR of the scene's renders against `views`.
pub fn evaluate(file: &SceneFile, views: &[TimedView]) -> Result<f64> {
    if views.is_empty() {
        bail!("no views to evaluate");
    }
    let mut total = 0.0;
    for v in views {
        total += psnr(&render_at(file, v.time, &v.camera, false)?, &v.image)?;
    }
    Ok(total / views.len() as f64)
}

/// Fits a dataset and writes the scene plus `<out>.curve.csv`. Returns the
/// held-out PSNR when the dataset has a test split.
pub fn fit_command(dataset: &Path, out: &Path, cfg: &FitConfig, log_every: usize) -> Result<Option<f64>> {
    let data = load_dataset(dataset, cfg.background).with_context(|| format!("loading {}", dataset.display()))?;
    let mut progress = |p: &CurvePoint| {
        if log_every > 0 && p.iteration % log_every == 0 {
            tracing::info!(iteration = p.iteration, loss = p.loss, psnr = p.psnr, "fit");
        }
    };
    let fitted = fit_with_progress(&data.train, cfg, &mut progress)?;
    let mut file = SceneFile::new(fitted.scene, fitted.params);
    file.cameras = data.cameras();
    file.time_range = data.time_range();
    save_scene(out, &file)?;
    let mut csv = out.as_os_str().to_owned();
    csv.push(".curve.csv");
    fs::write(&csv, curve_csv(&fitted.curve))?;
    if data.test.is_empty() {
        return Ok(None);
    }
    Ok(Some(evaluate(&file, &data.test)?))
}

pub fn pick_camera(file: &SceneFile, index: Option<usize>, pose: Option<&Path>) -> Result<Camera> {
    match (index, pose) {
        (_, Some(p)) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let cam: Camera = serde_json::from_str(&text).context("pose must be a camera JSON object")?;
            cam.validate()?;
            Ok(cam)
        }
        (i, None) => {
            let i = i.unwrap_or(0);
            file.cameras
                .get(i)
                .copied()
                .ok_or_else(|| anyhow!("camera index {i} out of range ({} cameras)", file.cameras.len()))
        }
    }
}

pub fn render_command(scene: &Path, t: f64, camera: Option<usize>, pose: Option<&Path>, out: &Path, brute: bool) -> Result<()> {
    let file = load_scene(scene)?;
    let cam = pick_camera(&file, camera, pose)?;
    write_png(out, &render_at(&file, t, &cam, brute)?)?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<EditRequest>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).context("ops file must be a JSON array of edit requests")
}

pub fn edit_command(scene: &Path, ops: &Path, out: &Path) -> Result<()> {
    let file = load_scene(scene)?;
    let log = read_log(ops)?;
    let edited = replay(&file, &log).map_err(|(i, e)| anyhow!("op {i}: {e}"))?;
    save_scene(out, &edited)?;
    Ok(())
}

/// Alpha shape over the deformed cores at `t`.
pub fn scene_mesh(file: &SceneFile, t: f64, radius: Option<f64>) -> Result<EstimatedMesh> {
    let points = core_points(&file.scene, &file.params, t)?;
    let r = radius.unwrap_or_else(|| default_radius(&points));
    Ok(alpha_shape(&points, r)?)
}

pub fn mesh_command(scene: &Path, t: f64, radius: Option<f64>, out: &Path) -> Result<()> {
    let file = load_scene(scene)?;
    fs::write(out, scene_mesh(&file, t, radius)?.to_obj())?;
    Ok(())
}

pub fn synth_command(spec: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let spec: SynthSpec = serde_json::from_str(&text).context("bad synth spec")?;
    crate::dataset::make_synthetic_dataset(&spec, out)?;
    Ok(())
}
