//! Seeded random scenes for tests and benchmarks.

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Vector2, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deform::{DeformFieldParams, FieldArchitecture};
use crate::math::quat_to_matrix;
use crate::multigauss::{matrix_to_quat, MultiGaussian, SoupScene, SubGaussian};
use crate::render::{Camera, Image, ProjectedGeometry, Splat2D};
use crate::soup::{FlatGaussianGeometry, GaussianAppearance, Mat3, Triangle, Vec3};
use crate::train::{render_with_gradients, scene_loss, visit_params, ParamClass};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut impl Rng, half_width: f64) -> Vec3 {
    Vec3::from_fn(|_, _| rng.random_range(-half_width..half_width))
}

/// Uniformly distributed rotation.
pub fn random_rotation(rng: &mut impl Rng) -> Mat3 {
    loop {
        let q = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let n = q.norm();
        if n > 0.1 && n <= 1.0 {
            return quat_to_matrix(&q);
        }
    }
}

/// Rotation within `max_angle` radians of the identity.
pub fn small_rotation(rng: &mut impl Rng, max_angle: f64) -> Mat3 {
    let axis = loop {
        let a = random_vec(rng, 1.0);
        if a.norm() > 0.1 {
            break a.normalize();
        }
    };
    let angle = rng.random_range(-max_angle..max_angle);
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(axis), angle).into_inner()
}

pub fn random_flat_gaussian(rng: &mut impl Rng) -> FlatGaussianGeometry {
    FlatGaussianGeometry::new(
        random_vec(rng, 2.0),
        random_rotation(rng),
        rng.random_range(0.05..2.0),
        rng.random_range(0.05..2.0),
    )
}

/// Random triangle whose smallest angle stays well away from zero.
pub fn random_triangle(rng: &mut impl Rng) -> Triangle {
    loop {
        let t = Triangle::new(random_vec(rng, 2.0), random_vec(rng, 2.0), random_vec(rng, 2.0));
        let e2 = t.v2 - t.v1;
        let e3 = t.v3 - t.v1;
        if e2.cross(&e3).norm() > 0.05 * e2.norm() * e3.norm() && e2.norm() > 0.05 && e3.norm() > 0.05 {
            return t;
        }
    }
}

pub fn random_sh(rng: &mut impl Rng, degree: usize) -> Vec<f64> {
    let mut sh: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
    if degree >= 1 {
        sh.extend((0..9).map(|_| rng.random_range(-0.1..0.1)));
    }
    sh
}

/// Frame whose normal faces `+z` up to a tilt of `max_tilt` radians.
pub fn facing_rotation(rng: &mut impl Rng, max_tilt: f64) -> Mat3 {
    let base = Mat3::from_columns(&[Vec3::z(), Vec3::x(), Vec3::y()]);
    small_rotation(rng, max_tilt) * base
}

/// Camera on the `-z` axis looking at the origin, `+y` down in the image.
pub fn front_camera(width: usize, height: usize, distance: f64) -> Camera {
    Camera::look_at(Vec3::new(0.0, 0.0, -distance), Vec3::zeros(), Vec3::new(0.0, -1.0, 0.0), width, height, 1.0)
}

pub fn small_field_arch() -> FieldArchitecture {
    FieldArchitecture {
        hidden_width: 8,
        hidden_layers: 2,
        vertex_frequencies: 2,
        rotation_frequencies: 1,
        time_frequencies: 2,
    }
}

/// Gives both output layers small random weights so the fields are not the identity.
pub fn perturb_fields(params: &mut DeformFieldParams, rng: &mut impl Rng, scale: f64) {
    for mlp in [&mut params.psi, &mut params.phi] {
        let last = mlp.layers.last_mut().expect("at least one layer");
        last.weight.iter_mut().for_each(|w| *w = rng.random_range(-scale..scale));
        last.bias.iter_mut().for_each(|w| *w = rng.random_range(-scale..scale));
    }
}

/// A small scene with its fields, a camera and a target image.
pub struct GradientScene {
    pub scene: SoupScene,
    pub params: DeformFieldParams,
    pub camera: Camera,
    pub target: Image,
    pub time: f64,
}

/// Scene for finite-difference checks at 16x16: few large, semi-transparent
/// Gaussians facing the camera, so every footprint covers the whole image
/// with alpha strictly between the floor and the ceiling.
pub fn gradient_scene(seed: u64, with_subs: bool) -> GradientScene {
    let mut r = rng(seed);
    let camera = front_camera(16, 16, 4.0);
    let mut scene = SoupScene::new(1, [0.1, 0.2, 0.3]);
    let cores = if with_subs { 3 } else { 4 };
    for _ in 0..cores {
        let frame = FlatGaussianGeometry::new(
            random_vec(&mut r, 0.3),
            facing_rotation(&mut r, 0.5),
            r.random_range(2.5..3.5),
            r.random_range(2.5..3.5),
        );
        let core = crate::soup::triangle_from_gaussian(&frame).expect("valid frame");
        let core_appearance = GaussianAppearance::new(r.random_range(0.3..0.6), random_sh(&mut r, 1)).expect("valid");
        let subs = if with_subs {
            (0..2)
                .map(|_| SubGaussian {
                    alpha: random_vec(&mut r, 0.3),
                    rotation: matrix_to_quat(&facing_rotation(&mut r, 0.5)) * r.random_range(0.8..1.2),
                    scale: [r.random_range(2.5..3.5), r.random_range(2.5..3.5)],
                    appearance: GaussianAppearance::new(r.random_range(0.2..0.45), random_sh(&mut r, 1)).expect("valid"),
                })
                .collect()
        } else {
            Vec::new()
        };
        scene.multis.push(MultiGaussian { core, core_appearance, subs });
    }
    let mut params = DeformFieldParams::new(small_field_arch(), seed ^ 0x5eed);
    perturb_fields(&mut params, &mut r, 0.02);
    let target = Image {
        width: 16,
        height: 16,
        data: (0..16 * 16 * 3).map(|_| r.random_range(0.0..1.0)).collect(),
    };
    GradientScene {
        scene,
        params,
        camera,
        target,
        time: r.random_range(0.0..1.0),
    }
}

/// Up to `max` random screen-space splats, depth-sorted.
pub fn random_splats(rng: &mut impl Rng, cam: &Camera, max: usize) -> Vec<Splat2D> {
    let n = rng.random_range(1..=max);
    let mut splats: Vec<Splat2D> = (0..n)
        .map(|i| {
            let a = Matrix2::from_fn(|_, _| rng.random_range(-4.0..4.0));
            let geom = ProjectedGeometry {
                mean2d: Vector2::new(
                    rng.random_range(-8.0..cam.width as f64 + 8.0),
                    rng.random_range(-8.0..cam.height as f64 + 8.0),
                ),
                cov2d: a * a.transpose() + Matrix2::identity() * crate::render::LOW_PASS,
                depth: rng.random_range(1.0..10.0),
            };
            let color = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            Splat2D::new(geom, color, rng.random_range(0.0..1.0), i).expect("positive definite")
        })
        .collect();
    crate::render::sort_splats(&mut splats);
    splats
}

/// Finite-difference step of [`gradient_check`].
pub const FD_STEP: f64 = 1e-5;

/// Normalized disagreement of an analytic derivative with a central
/// difference: relative error over `1e-3`, or absolute error over `1e-6`
/// when both are below `1e-3`. At most 1 passes.
pub fn normalized_error(analytic: f64, fd: f64) -> f64 {
    if analytic.abs().max(fd.abs()) < 1e-3 {
        (fd - analytic).abs() / 1e-6
    } else {
        (fd - analytic).abs() / (1e-3 * fd.abs().max(analytic.abs()))
    }
}

/// Compares every trainable scalar's analytic gradient with a central
/// difference. Network weights are sampled every `network_stride` entries.
/// Returns, per class, the number of scalars checked and the worst
/// [`normalized_error`].
pub fn gradient_check(s: &GradientScene, lambda_dssim: f64, network_stride: usize) -> BTreeMap<ParamClass, (usize, f64)> {
    let (_, grad) = render_with_gradients(&s.scene, &s.params, s.time, &s.camera, &s.target, lambda_dssim).expect("renderable");
    let mut scene = s.scene.clone();
    let mut params = s.params.clone();
    let mut entries = Vec::new();
    visit_params(&mut scene, &mut params, &grad, |c, _, g| entries.push((c, g)));
    let mut nudge = |index: usize, delta: f64| {
        let mut k = 0;
        visit_params(&mut scene, &mut params, &grad, |_, v, _| {
            if k == index {
                *v += delta;
            }
            k += 1;
        });
        (scene.clone(), params.clone())
    };
    let loss = |(sc, p): (SoupScene, DeformFieldParams)| scene_loss(&sc, &p, s.time, &s.camera, &s.target, lambda_dssim).expect("renderable");
    let mut report = BTreeMap::new();
    let mut seen: BTreeMap<ParamClass, usize> = BTreeMap::new();
    for (index, (class, analytic)) in entries.into_iter().enumerate() {
        let n = seen.entry(class).or_default();
        *n += 1;
        if matches!(class, ParamClass::Psi | ParamClass::Phi) && (*n - 1) % network_stride.max(1) != 0 {
            continue;
        }
        let plus = loss(nudge(index, FD_STEP));
        let minus = loss(nudge(index, -2.0 * FD_STEP));
        nudge(index, FD_STEP);
        let fd = (plus - minus) / (2.0 * FD_STEP);
        let e = report.entry(class).or_insert((0, 0.0f64));
        e.0 += 1;
        e.1 = e.1.max(normalized_error(analytic, fd));
    }
    report
}

/// Cores in a cube of half-width 1 with `k` subs each, varied rotations,
/// scales and colors, and slightly perturbed fields. Visible from
/// [`front_camera`] at distance 4.
pub fn random_scene(seed: u64, cores: usize, k: usize, sh_degree: usize) -> (SoupScene, DeformFieldParams) {
    let mut r = rng(seed);
    let mut scene = SoupScene::new(sh_degree, [0.05, 0.1, 0.15]);
    for _ in 0..cores {
        let frame = FlatGaussianGeometry::new(
            random_vec(&mut r, 1.0),
            random_rotation(&mut r),
            r.random_range(0.1..0.4),
            r.random_range(0.1..0.4),
        );
        let core = crate::soup::triangle_from_gaussian(&frame).expect("valid frame");
        let appearance = |r: &mut ChaCha8Rng| GaussianAppearance::new(r.random_range(0.2..0.9), random_sh(r, sh_degree)).expect("valid");
        let core_appearance = appearance(&mut r);
        let subs = (0..k)
            .map(|_| SubGaussian {
                alpha: random_vec(&mut r, 0.3),
                rotation: matrix_to_quat(&random_rotation(&mut r)),
                scale: [r.random_range(0.03..0.15), r.random_range(0.03..0.15)],
                appearance: appearance(&mut r),
            })
            .collect();
        scene.multis.push(MultiGaussian { core, core_appearance, subs });
    }
    let mut params = DeformFieldParams::new(small_field_arch(), seed ^ 0xf1e1d);
    perturb_fields(&mut params, &mut r, 0.02);
    (scene, params)
}
