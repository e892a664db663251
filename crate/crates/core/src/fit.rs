//! Two-stage fitting from posed, timed images.
//!
//! Stage 1 optimizes core triangles, their appearance and the core field.
//! Stage 2 attaches subs to every surviving core and optimizes everything,
//! rendering subs only. Opacities are optimized as logits and sub scales as
//! logarithms; every other scalar is optimized directly.

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deform::{DeformFieldParams, FieldArchitecture};
use crate::loss::psnr;
use crate::multigauss::{attach_all, MultiGaussian, SoupScene};
use crate::render::{Camera, Image};
use crate::soup::{sh_len, triangle_from_gaussian, FlatGaussianGeometry, GaussianAppearance, Mat3, Triangle, Vec3};
use crate::train::{accumulate_view_gradients, visit_params, ParamClass, SceneGrad};
use crate::FitError;

/// One training image.
#[derive(Clone, Debug, PartialEq)]
pub struct TimedView {
    pub image: Image,
    pub camera: Camera,
    pub time: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    /// Scaled by the scene extent.
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub sh: f64,
    pub opacity: f64,
    pub network: f64,
    /// Network rate at the last iteration relative to the first.
    pub network_final_ratio: f64,
    /// Factor on core vertex rates once subs are attached.
    pub stage2_core_factor: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            rotation: 1e-3,
            scale: 5e-3,
            sh: 2.5e-3,
            opacity: 5e-2,
            network: 1e-4,
            network_final_ratio: 0.1,
            stage2_core_factor: 0.1,
        }
    }
}

impl LearningRates {
    /// Rates for short desk-scale runs: a few thousand steps from a random
    /// initialization instead of tens of thousands from a point cloud.
    pub fn desk() -> Self {
        Self {
            position: 2e-3,
            rotation: 5e-3,
            scale: 1e-2,
            sh: 1e-2,
            opacity: 5e-2,
            network: 1e-3,
            network_final_ratio: 0.1,
            stage2_core_factor: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub total_iterations: usize,
    pub stage2_start: usize,
    pub batch_size: usize,
    pub subs_per_core: usize,
    pub learning_rates: LearningRates,
    pub prune_opacity_threshold: f64,
    pub prune_interval: usize,
    pub lambda_dssim: f64,
    pub seed: u64,
    pub initial_cores: usize,
    /// Radius of the ball cores are initialized in; derived from the cameras when unset.
    pub init_radius: Option<f64>,
    pub initial_opacity: f64,
    pub sh_degree: usize,
    pub background: [f64; 3],
    pub field: FieldArchitecture,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            total_iterations: 2000,
            stage2_start: 500,
            batch_size: 4,
            subs_per_core: crate::multigauss::DEFAULT_SUBS_PER_CORE,
            learning_rates: LearningRates::desk(),
            prune_opacity_threshold: 0.005,
            prune_interval: 100,
            lambda_dssim: crate::loss::DEFAULT_LAMBDA_DSSIM,
            seed: 0,
            initial_cores: 100,
            init_radius: None,
            initial_opacity: 0.1,
            sh_degree: 1,
            background: [0.0; 3],
            field: FieldArchitecture::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |m: &str| Err(FitError::BadConfig(m.to_string()));
        if !(0 < self.stage2_start && self.stage2_start < self.total_iterations) {
            return bad("need 0 < stage2_start < total_iterations");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.subs_per_core == 0 {
            return bad("subs_per_core must be at least 1");
        }
        if self.initial_cores == 0 {
            return bad("initial_cores must be at least 1");
        }
        if self.sh_degree > 1 {
            return bad("sh_degree must be 0 or 1");
        }
        if !(0.0..1.0).contains(&self.initial_opacity) || self.initial_opacity == 0.0 {
            return bad("initial_opacity must be in (0, 1)");
        }
        Ok(())
    }
}

/// One point of the training curve: mean batch loss and PSNR.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub loss: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutput {
    pub scene: SoupScene,
    pub params: DeformFieldParams,
    pub curve: Vec<CurvePoint>,
}

/// Indices whose opacity is at least `threshold`, in order.
pub fn prune(cores: &[Triangle], opacities: &[f64], threshold: f64) -> Vec<usize> {
    assert_eq!(cores.len(), opacities.len(), "cores and opacities must be aligned");
    opacities
        .iter()
        .enumerate()
        .filter(|(_, &o)| o >= threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Point closest to all optical axes and the mean distance from it to the cameras.
pub fn scene_bounds(views: &[TimedView]) -> (Vec3, f64) {
    let mut a = Mat3::zeros();
    let mut b = Vec3::zeros();
    for v in views {
        let c = v.camera.center();
        let d: Vector3<f64> = v.camera.rotation.row(2).transpose();
        let p = Mat3::identity() - d * d.transpose();
        a += p;
        b += p * c;
    }
    let center = a.try_inverse().map(|inv| inv * b).unwrap_or_else(|| {
        views.iter().map(|v| v.camera.center()).sum::<Vec3>() / views.len().max(1) as f64
    });
    let dist = views.iter().map(|v| (v.camera.center() - center).norm()).sum::<f64>() / views.len().max(1) as f64;
    (center, dist)
}

fn extent(views: &[TimedView]) -> f64 {
    1.1 * scene_bounds(views).1
}

/// Random cores in a ball around the scene center.
pub fn initial_cores(views: &[TimedView], cfg: &FitConfig) -> SoupScene {
    let (center, dist) = scene_bounds(views);
    let radius = cfg.init_radius.unwrap_or(0.3 * dist);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scene = SoupScene::new(cfg.sh_degree, cfg.background);
    let size = radius * 0.15;
    while scene.multis.len() < cfg.initial_cores {
        let p = crate::fixtures::random_vec(&mut rng, radius);
        if p.norm() > radius {
            continue;
        }
        let frame = FlatGaussianGeometry::new(center + p, crate::fixtures::random_rotation(&mut rng), size, size);
        let core = triangle_from_gaussian(&frame).expect("valid frame");
        let mut sh = vec![0.0; sh_len(cfg.sh_degree)];
        for v in sh.iter_mut().take(3) {
            *v = rng.random_range(-0.5..0.5);
        }
        scene.multis.push(MultiGaussian {
            core,
            core_appearance: GaussianAppearance::new(cfg.initial_opacity, sh).expect("valid length"),
            subs: Vec::new(),
        });
    }
    scene
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;
const OPACITY_LIMIT: f64 = 1e-6;

/// Adam over the visitation order of [`visit_params`].
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new() -> Self {
        Self { m: Vec::new(), v: Vec::new(), step: 0 }
    }

    fn apply(
        &mut self,
        scene: &mut SoupScene,
        params: &mut DeformFieldParams,
        grad: &SceneGrad,
        rate: impl Fn(ParamClass) -> f64,
    ) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut k = 0;
        visit_params(scene, params, grad, |class, value, g| {
            if k == m.len() {
                m.push(0.0);
                v.push(0.0);
            }
            let (raw, g_raw) = match class {
                ParamClass::CoreOpacity | ParamClass::SubOpacity => {
                    let s = value.clamp(OPACITY_LIMIT, 1.0 - OPACITY_LIMIT);
                    ((s / (1.0 - s)).ln(), g * s * (1.0 - s))
                }
                ParamClass::SubScale => (value.ln(), g * *value),
                _ => (*value, g),
            };
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * g_raw;
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * g_raw * g_raw;
            let update = rate(class) * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
            let raw = raw - update;
            *value = match class {
                ParamClass::CoreOpacity | ParamClass::SubOpacity => 1.0 / (1.0 + (-raw).exp()),
                ParamClass::SubScale => raw.exp(),
                _ => raw,
            };
            k += 1;
        });
    }

    /// Keeps the state of the listed cores; only valid before subs exist.
    fn retain_cores(&mut self, keep: &[usize], per_core: usize, cores: usize) {
        let tail = cores * per_core;
        let mut m = Vec::with_capacity(self.m.len());
        let mut v = Vec::with_capacity(self.v.len());
        for &j in keep {
            m.extend_from_slice(&self.m[j * per_core..(j + 1) * per_core]);
            v.extend_from_slice(&self.v[j * per_core..(j + 1) * per_core]);
        }
        m.extend_from_slice(&self.m[tail..]);
        v.extend_from_slice(&self.v[tail..]);
        self.m = m;
        self.v = v;
    }
}

struct Trainer<'a> {
    views: &'a [TimedView],
    cfg: &'a FitConfig,
    rng: ChaCha8Rng,
    extent: f64,
}

impl Trainer<'_> {
    fn step(
        &mut self,
        scene: &mut SoupScene,
        params: &mut DeformFieldParams,
        adam: &mut Adam,
        iteration: usize,
        stage2: bool,
    ) -> Result<CurvePoint, FitError> {
        let n = self.views.len();
        let picks = sample(&mut self.rng, n, self.cfg.batch_size.min(n)).into_vec();
        let mut grad = SceneGrad::zeros(scene, params);
        let mut loss = 0.0;
        let mut quality = 0.0;
        for &i in &picks {
            let view = &self.views[i];
            let (l, image) = accumulate_view_gradients(scene, params, view.time, &view.camera, &view.image, self.cfg.lambda_dssim, &mut grad)?;
            loss += l;
            quality += psnr(&image.clamped(), &view.image)?;
        }
        let lr = &self.cfg.learning_rates;
        let progress = iteration as f64 / self.cfg.total_iterations as f64;
        let network = lr.network * lr.network_final_ratio.powf(progress);
        let position = lr.position * self.extent;
        let core_factor = if stage2 { lr.stage2_core_factor } else { 1.0 };
        adam.apply(scene, params, &grad, |class| match class {
            ParamClass::CoreVertex => position * core_factor,
            ParamClass::SubAlpha => position,
            ParamClass::SubRotation => lr.rotation,
            ParamClass::SubScale => lr.scale,
            ParamClass::CoreOpacity | ParamClass::SubOpacity => lr.opacity,
            ParamClass::CoreSh | ParamClass::SubSh => lr.sh,
            ParamClass::Psi | ParamClass::Phi => network,
        });
        let b = picks.len() as f64;
        Ok(CurvePoint {
            iteration,
            loss: loss / b,
            psnr: quality / b,
        })
    }
}

fn check_views(views: &[TimedView]) -> Result<(), FitError> {
    if views.is_empty() {
        return Err(FitError::EmptyDataset);
    }
    for v in views {
        if v.image.width != v.camera.width || v.image.height != v.camera.height {
            return Err(crate::RenderError::DimensionMismatch.into());
        }
    }
    Ok(())
}

/// Stage 1 from a random initialization; returns the state at `stage2_start`.
pub fn stage1_fit(views: &[TimedView], cfg: &FitConfig) -> Result<FitOutput, FitError> {
    stage1_fit_with_progress(views, cfg, &mut |_| {})
}

pub fn stage1_fit_with_progress(
    views: &[TimedView],
    cfg: &FitConfig,
    progress: &mut dyn FnMut(&CurvePoint),
) -> Result<FitOutput, FitError> {
    cfg.validate()?;
    check_views(views)?;
    let mut scene = initial_cores(views, cfg);
    let mut params = DeformFieldParams::new(cfg.field, cfg.seed.wrapping_add(17));
    let mut trainer = Trainer {
        views,
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)),
        extent: extent(views),
    };
    let mut adam = Adam::new();
    let mut curve = Vec::with_capacity(cfg.stage2_start);
    let per_core = 9 + 1 + sh_len(cfg.sh_degree);
    for it in 0..cfg.stage2_start {
        let point = trainer.step(&mut scene, &mut params, &mut adam, it, false)?;
        progress(&point);
        curve.push(point);
        if cfg.prune_interval > 0 && (it + 1) % cfg.prune_interval == 0 {
            let cores: Vec<Triangle> = scene.multis.iter().map(|m| m.core).collect();
            let opacities: Vec<f64> = scene.multis.iter().map(|m| m.core_appearance.opacity).collect();
            let keep = prune(&cores, &opacities, cfg.prune_opacity_threshold);
            if keep.is_empty() {
                return Err(FitError::AllPruned);
            }
            if keep.len() < scene.multis.len() {
                adam.retain_cores(&keep, per_core, scene.multis.len());
                let old = std::mem::take(&mut scene.multis);
                scene.multis = keep.iter().map(|&j| old[j].clone()).collect();
            }
        }
    }
    Ok(FitOutput { scene, params, curve })
}

/// Stage 2: attaches subs once, then trains until `total_iterations`.
pub fn stage2_fit(
    scene: &SoupScene,
    params: &DeformFieldParams,
    views: &[TimedView],
    cfg: &FitConfig,
) -> Result<FitOutput, FitError> {
    stage2_fit_with_progress(scene, params, views, cfg, &mut |_| {})
}

pub fn stage2_fit_with_progress(
    scene: &SoupScene,
    params: &DeformFieldParams,
    views: &[TimedView],
    cfg: &FitConfig,
    progress: &mut dyn FnMut(&CurvePoint),
) -> Result<FitOutput, FitError> {
    cfg.validate()?;
    check_views(views)?;
    if scene.multis.is_empty() {
        return Err(FitError::AllPruned);
    }
    let mut scene = attach_all(scene, cfg.subs_per_core, cfg.seed.wrapping_add(2)).map_err(crate::RenderError::from)?;
    let mut params = params.clone();
    let mut trainer = Trainer {
        views,
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3)),
        extent: extent(views),
    };
    let mut adam = Adam::new();
    let mut curve = Vec::with_capacity(cfg.total_iterations - cfg.stage2_start);
    for it in cfg.stage2_start..cfg.total_iterations {
        let point = trainer.step(&mut scene, &mut params, &mut adam, it, true)?;
        progress(&point);
        curve.push(point);
    }
    Ok(FitOutput { scene, params, curve })
}

/// Both stages back to back.
pub fn fit(views: &[TimedView], cfg: &FitConfig) -> Result<FitOutput, FitError> {
    fit_with_progress(views, cfg, &mut |_| {})
}

pub fn fit_with_progress(views: &[TimedView], cfg: &FitConfig, progress: &mut dyn FnMut(&CurvePoint)) -> Result<FitOutput, FitError> {
    let first = stage1_fit_with_progress(views, cfg, progress)?;
    let second = stage2_fit_with_progress(&first.scene, &first.params, views, cfg, progress)?;
    let mut curve = first.curve;
    curve.extend(second.curve);
    Ok(FitOutput {
        scene: second.scene,
        params: second.params,
        curve,
    })
}
