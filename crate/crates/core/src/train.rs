//! Differentiable rendering of a deformable scene at one time.
//!
//! Before subs are attached every core renders as its own flat Gaussian.
//! Afterwards only subs render, placed in the frames of the deformed cores and
//! rotated by the sub field. Gradients are reported for the natural scene
//! parameters (vertices, offsets, raw quaternions, scales, opacities, SH) and
//! for both networks.

use nalgebra::Vector4;

use crate::deform::{apply_deform_backward, apply_deform_unchecked, CoreFieldBatch, DeformFieldParams, SubFieldBatch};
use crate::loss::loss_with_grad;
use crate::math::{flat_covariance, flat_covariance_backward, normalize_backward, quat_to_matrix, quat_to_matrix_backward, FrameGrad, FrameTape};
use crate::multigauss::SoupScene;
use crate::render::{prepare_splats, project_backward, rasterize_backward, render_unclamped, sh_backward, Camera, Image, RenderGaussian, Splat2D};
use crate::soup::{GaussianAppearance, Mat3, Triangle, Vec3};
use crate::RenderError;

#[derive(Clone, Debug, PartialEq)]
pub struct SubGrad {
    pub alpha: Vec3,
    pub rotation: Vector4<f64>,
    pub scale: [f64; 2],
    pub opacity: f64,
    pub sh: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiGrad {
    pub core: [Vec3; 3],
    pub core_opacity: f64,
    pub core_sh: Vec<f64>,
    pub subs: Vec<SubGrad>,
}

/// Gradient of a scalar loss, shaped like the scene and its fields.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGrad {
    pub multis: Vec<MultiGrad>,
    pub fields: DeformFieldParams,
}

impl SceneGrad {
    pub fn zeros(scene: &SoupScene, params: &DeformFieldParams) -> Self {
        let sh = crate::soup::sh_len(scene.sh_degree);
        Self {
            multis: scene
                .multis
                .iter()
                .map(|m| MultiGrad {
                    core: [Vec3::zeros(); 3],
                    core_opacity: 0.0,
                    core_sh: vec![0.0; sh],
                    subs: m
                        .subs
                        .iter()
                        .map(|_| SubGrad {
                            alpha: Vec3::zeros(),
                            rotation: Vector4::zeros(),
                            scale: [0.0; 2],
                            opacity: 0.0,
                            sh: vec![0.0; sh],
                        })
                        .collect(),
                })
                .collect(),
            fields: params.zeros_like(),
        }
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &SceneGrad) {
        for (a, b) in self.multis.iter_mut().zip(&other.multis) {
            for i in 0..3 {
                a.core[i] += b.core[i];
            }
            a.core_opacity += b.core_opacity;
            add_into(&mut a.core_sh, &b.core_sh);
            for (sa, sb) in a.subs.iter_mut().zip(&b.subs) {
                sa.alpha += sb.alpha;
                sa.rotation += sb.rotation;
                sa.scale[0] += sb.scale[0];
                sa.scale[1] += sb.scale[1];
                sa.opacity += sb.opacity;
                add_into(&mut sa.sh, &sb.sh);
            }
        }
        self.fields.psi.add_scaled(&other.fields.psi, 1.0);
        self.fields.phi.add_scaled(&other.fields.phi, 1.0);
    }

    /// Largest absolute entry; used to check that a gradient vanishes.
    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for g in &self.multis {
            for v in &g.core {
                m = m.max(v.amax());
            }
            m = m.max(g.core_opacity.abs());
            m = g.core_sh.iter().fold(m, |m, v| m.max(v.abs()));
            for s in &g.subs {
                m = m.max(s.alpha.amax()).max(s.rotation.amax()).max(s.opacity.abs());
                m = m.max(s.scale[0].abs()).max(s.scale[1].abs());
                m = s.sh.iter().fold(m, |m, v| m.max(v.abs()));
            }
        }
        for v in self.fields.psi.to_flat().into_iter().chain(self.fields.phi.to_flat()) {
            m = m.max(v.abs());
        }
        m
    }
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Which Gaussian a rendered element came from.
#[derive(Clone, Copy, Debug)]
enum Source {
    Core(usize),
    Sub(usize, usize),
}

/// Forward pass of the scene at one time, keeping what the backward pass needs.
pub struct SceneTape<'a> {
    scene: &'a SoupScene,
    t: f64,
    cores: Vec<Triangle>,
    field: CoreFieldBatch,
    frames: Vec<FrameTape>,
    sub_field: Option<SubFieldBatch>,
    sub_rotations: Vec<Mat3>,
    means: Vec<Vec3>,
    rotations: Vec<Mat3>,
    scales: Vec<[f64; 2]>,
    sources: Vec<Source>,
}

impl<'a> SceneTape<'a> {
    pub fn forward(scene: &'a SoupScene, params: &DeformFieldParams, t: f64) -> Result<Self, RenderError> {
        let cores: Vec<Triangle> = scene.multis.iter().map(|m| m.core).collect();
        let field = CoreFieldBatch::forward(params, &cores, t);
        let frames = cores
            .iter()
            .zip(&field.deltas)
            .map(|(c, d)| FrameTape::new(&apply_deform_unchecked(c, d)))
            .collect::<Result<Vec<_>, _>>()?;
        let mut tape = Self {
            scene,
            t,
            cores,
            field,
            frames,
            sub_field: None,
            sub_rotations: Vec::new(),
            means: Vec::new(),
            rotations: Vec::new(),
            scales: Vec::new(),
            sources: Vec::new(),
        };
        if scene.has_subs() {
            for (j, m) in scene.multis.iter().enumerate() {
                for (i, sub) in m.subs.iter().enumerate() {
                    tape.sub_rotations.push(quat_to_matrix(&sub.rotation));
                    tape.sources.push(Source::Sub(j, i));
                }
            }
            let batch = SubFieldBatch::forward(params, &tape.sub_rotations, t);
            for (k, src) in tape.sources.iter().enumerate() {
                let Source::Sub(j, i) = *src else { unreachable!() };
                let sub = &scene.multis[j].subs[i];
                let f = &tape.frames[j];
                tape.means.push(f.mean + f.rotation * sub.alpha);
                tape.rotations.push(batch.rotations[k] * tape.sub_rotations[k]);
                tape.scales.push(sub.scale);
            }
            tape.sub_field = Some(batch);
        } else {
            for (j, f) in tape.frames.iter().enumerate() {
                tape.means.push(f.mean);
                tape.rotations.push(f.rotation);
                tape.scales.push([f.s2, f.s3]);
                tape.sources.push(Source::Core(j));
            }
        }
        Ok(tape)
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    fn appearance(&self, k: usize) -> &'a GaussianAppearance {
        match self.sources[k] {
            Source::Core(j) => &self.scene.multis[j].core_appearance,
            Source::Sub(j, i) => &self.scene.multis[j].subs[i].appearance,
        }
    }

    fn covariance(&self, k: usize) -> Mat3 {
        flat_covariance(&self.rotations[k], self.scales[k][0], self.scales[k][1])
    }

    /// Rendered elements in scene order.
    pub fn gaussians(&self) -> Vec<RenderGaussian<'a>> {
        (0..self.len())
            .map(|k| RenderGaussian {
                mean: self.means[k],
                cov: self.covariance(k),
                appearance: self.appearance(k),
            })
            .collect()
    }

    pub fn splats(&self, cam: &Camera) -> Result<Vec<Splat2D>, RenderError> {
        prepare_splats(cam, &self.gaussians())
    }

    /// Backward from per-splat screen-space gradients to the scene.
    fn backward(
        &self,
        params: &DeformFieldParams,
        cam: &Camera,
        splats: &[Splat2D],
        splat_grads: &[crate::render::Splat2DGrad],
        grad: &mut SceneGrad,
    ) {
        let n = self.len();
        let center = cam.center();
        let mut g_mean = vec![Vec3::zeros(); n];
        let mut g_cov = vec![Mat3::zeros(); n];
        for (s, g) in splats.iter().zip(splat_grads) {
            let k = s.index;
            let cov = self.covariance(k);
            let (gm, gc) = project_backward(cam, &self.means[k], &cov, &g.mean2d, &g.cov2d);
            let to = self.means[k] - center;
            let (gsh, gdir) = sh_backward(&self.appearance(k).sh, &to.normalize(), &g.color);
            g_mean[k] += gm + normalize_backward(&to, &gdir);
            g_cov[k] += gc;
            match self.sources[k] {
                Source::Core(j) => {
                    grad.multis[j].core_opacity += g.opacity;
                    add_into(&mut grad.multis[j].core_sh, &gsh);
                }
                Source::Sub(j, i) => {
                    let sg = &mut grad.multis[j].subs[i];
                    sg.opacity += g.opacity;
                    add_into(&mut sg.sh, &gsh);
                }
            }
        }

        let mut frame_grads = vec![FrameGrad::default(); self.frames.len()];
        match &self.sub_field {
            None => {
                for k in 0..n {
                    let Source::Core(j) = self.sources[k] else { unreachable!() };
                    let (gr, gs2, gs3) = flat_covariance_backward(&self.rotations[k], self.scales[k][0], self.scales[k][1], &g_cov[k]);
                    let fg = &mut frame_grads[j];
                    fg.mean += g_mean[k];
                    fg.rotation += gr;
                    fg.s2 += gs2;
                    fg.s3 += gs3;
                }
            }
            Some(batch) => {
                let mut g_delta = vec![Mat3::zeros(); n];
                let mut g_base = vec![Mat3::zeros(); n];
                for k in 0..n {
                    let Source::Sub(j, i) = self.sources[k] else { unreachable!() };
                    let sub = &self.scene.multis[j].subs[i];
                    let (gr, gs2, gs3) = flat_covariance_backward(&self.rotations[k], self.scales[k][0], self.scales[k][1], &g_cov[k]);
                    g_delta[k] = gr * self.sub_rotations[k].transpose();
                    g_base[k] = batch.rotations[k].transpose() * gr;
                    let f = &self.frames[j];
                    let fg = &mut frame_grads[j];
                    fg.mean += g_mean[k];
                    fg.rotation += g_mean[k] * sub.alpha.transpose();
                    let sg = &mut grad.multis[j].subs[i];
                    sg.alpha += f.rotation.transpose() * g_mean[k];
                    sg.scale[0] += gs2;
                    sg.scale[1] += gs3;
                }
                let g_input = batch.backward(params, &g_delta, &mut grad.fields);
                for k in 0..n {
                    let Source::Sub(j, i) = self.sources[k] else { unreachable!() };
                    let sub = &self.scene.multis[j].subs[i];
                    grad.multis[j].subs[i].rotation += quat_to_matrix_backward(&sub.rotation, &(g_base[k] + g_input[k]));
                }
            }
        }

        let m = self.cores.len();
        let mut g_dv = vec![[Vec3::zeros(); 3]; m];
        let mut g_rot = vec![Mat3::zeros(); m];
        let mut g_vertices = vec![[Vec3::zeros(); 3]; m];
        for j in 0..m {
            let g_moved = self.frames[j].backward(&frame_grads[j]);
            let (gv, gdv, gr) = apply_deform_backward(&self.cores[j], &self.field.deltas[j], &g_moved);
            g_vertices[j] = gv;
            g_dv[j] = gdv;
            g_rot[j] = gr;
        }
        self.field.backward(params, &self.cores, &g_dv, &g_rot, &mut grad.fields, &mut g_vertices);
        for j in 0..m {
            for i in 0..3 {
                grad.multis[j].core[i] += g_vertices[j][i];
            }
        }
    }
}

/// Scene at time `t` seen from `cam`, clamped to `[0, 1]`.
pub fn render_scene(scene: &SoupScene, params: &DeformFieldParams, t: f64, cam: &Camera) -> Result<Image, RenderError> {
    Ok(render_scene_unclamped(scene, params, t, cam)?.clamped())
}

pub fn render_scene_unclamped(scene: &SoupScene, params: &DeformFieldParams, t: f64, cam: &Camera) -> Result<Image, RenderError> {
    let tape = SceneTape::forward(scene, params, t)?;
    Ok(render_unclamped(&tape.splats(cam)?, cam, scene.background))
}

/// Training loss of one view. The loss sees the unclamped composite.
pub fn scene_loss(
    scene: &SoupScene,
    params: &DeformFieldParams,
    t: f64,
    cam: &Camera,
    target: &Image,
    lambda_dssim: f64,
) -> Result<f64, RenderError> {
    let image = render_scene_unclamped(scene, params, t, cam)?;
    crate::loss::loss(&image, target, lambda_dssim)
}

/// Loss of one view and its gradient w.r.t. every trainable scalar.
pub fn render_with_gradients(
    scene: &SoupScene,
    params: &DeformFieldParams,
    t: f64,
    cam: &Camera,
    target: &Image,
    lambda_dssim: f64,
) -> Result<(f64, SceneGrad), RenderError> {
    let mut grad = SceneGrad::zeros(scene, params);
    let (loss, _) = accumulate_view_gradients(scene, params, t, cam, target, lambda_dssim, &mut grad)?;
    Ok((loss, grad))
}

/// Like [`render_with_gradients`] but adds into an existing gradient and
/// also returns the unclamped render.
pub fn accumulate_view_gradients(
    scene: &SoupScene,
    params: &DeformFieldParams,
    t: f64,
    cam: &Camera,
    target: &Image,
    lambda_dssim: f64,
    grad: &mut SceneGrad,
) -> Result<(f64, Image), RenderError> {
    if target.width != cam.width || target.height != cam.height {
        return Err(RenderError::DimensionMismatch);
    }
    let tape = SceneTape::forward(scene, params, t)?;
    let splats = tape.splats(cam)?;
    let image = render_unclamped(&splats, cam, scene.background);
    let (loss, g_image) = loss_with_grad(&image, target, lambda_dssim)?;
    let splat_grads = rasterize_backward(&splats, cam, scene.background, &g_image);
    tape.backward(params, cam, &splats, &splat_grads, grad);
    Ok((loss, image))
}

/// Kinds of trainable scalars.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamClass {
    CoreVertex,
    CoreOpacity,
    CoreSh,
    SubAlpha,
    SubRotation,
    SubScale,
    SubOpacity,
    SubSh,
    Psi,
    Phi,
}

impl ParamClass {
    pub const ALL: [ParamClass; 10] = [
        ParamClass::CoreVertex,
        ParamClass::CoreOpacity,
        ParamClass::CoreSh,
        ParamClass::SubAlpha,
        ParamClass::SubRotation,
        ParamClass::SubScale,
        ParamClass::SubOpacity,
        ParamClass::SubSh,
        ParamClass::Psi,
        ParamClass::Phi,
    ];
}

fn visit_mlp(m: &mut crate::deform::Mlp, g: &crate::deform::Mlp, class: ParamClass, f: &mut impl FnMut(ParamClass, &mut f64, f64)) {
    for (l, gl) in m.layers.iter_mut().zip(&g.layers) {
        for (v, gv) in l.weight.iter_mut().zip(gl.weight.iter()) {
            f(class, v, *gv);
        }
        for (v, gv) in l.bias.iter_mut().zip(gl.bias.iter()) {
            f(class, v, *gv);
        }
    }
}

/// Calls `f(class, value, gradient)` for every trainable scalar in a fixed order.
pub fn visit_params(
    scene: &mut SoupScene,
    params: &mut DeformFieldParams,
    grad: &SceneGrad,
    mut f: impl FnMut(ParamClass, &mut f64, f64),
) {
    for (m, g) in scene.multis.iter_mut().zip(&grad.multis) {
        for (v, gv) in [&mut m.core.v1, &mut m.core.v2, &mut m.core.v3].into_iter().zip(&g.core) {
            for c in 0..3 {
                f(ParamClass::CoreVertex, &mut v[c], gv[c]);
            }
        }
        f(ParamClass::CoreOpacity, &mut m.core_appearance.opacity, g.core_opacity);
        for (v, gv) in m.core_appearance.sh.iter_mut().zip(&g.core_sh) {
            f(ParamClass::CoreSh, v, *gv);
        }
        for (s, gs) in m.subs.iter_mut().zip(&g.subs) {
            for c in 0..3 {
                f(ParamClass::SubAlpha, &mut s.alpha[c], gs.alpha[c]);
            }
            for c in 0..4 {
                f(ParamClass::SubRotation, &mut s.rotation[c], gs.rotation[c]);
            }
            for c in 0..2 {
                f(ParamClass::SubScale, &mut s.scale[c], gs.scale[c]);
            }
            f(ParamClass::SubOpacity, &mut s.appearance.opacity, gs.opacity);
            for (v, gv) in s.appearance.sh.iter_mut().zip(&gs.sh) {
                f(ParamClass::SubSh, v, *gv);
            }
        }
    }
    visit_mlp(&mut params.psi, &grad.fields.psi, ParamClass::Psi, &mut f);
    visit_mlp(&mut params.phi, &grad.fields.phi, ParamClass::Phi, &mut f);
}
