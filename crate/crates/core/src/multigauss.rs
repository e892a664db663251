//! Core-Gaussians with attached Sub-Gaussians.
//!
//! Every sub lives in its core's local frame: its center is
//! `m + R alpha` where `(m, R)` come from the core triangle. The sub's own
//! rotation, scales and appearance are free parameters.

use nalgebra::{UnitQuaternion, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::soup::{
    gaussian_from_triangle, triangle_from_gaussian, FlatGaussianGeometry, GaussianAppearance,
    Mat3, Triangle, Vec3,
};
use crate::GeometryError;

pub use crate::math::quat_to_matrix;

/// Number of subs attached to every core unless configured otherwise.
pub const DEFAULT_SUBS_PER_CORE: usize = 25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubGaussian {
    /// Offsets along the core's `(r1, r2, r3)` axes.
    pub alpha: Vec3,
    /// Rotation stored as a quaternion `(w, x, y, z)`; normalized on use.
    pub rotation: Vector4<f64>,
    /// Tangential scales `(s2, s3)`; the normal scale is always epsilon.
    pub scale: [f64; 2],
    pub appearance: GaussianAppearance,
}

impl SubGaussian {
    pub fn rotation_matrix(&self) -> Mat3 {
        quat_to_matrix(&self.rotation)
    }

    /// World geometry of the sub given its core's frame.
    pub fn geometry_in(&self, frame: &FlatGaussianGeometry) -> FlatGaussianGeometry {
        FlatGaussianGeometry::new(
            sub_center(frame, &self.alpha),
            self.rotation_matrix(),
            self.scale[0],
            self.scale[1],
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiGaussian {
    pub core: Triangle,
    /// Appearance of the core itself; only rendered before subs are attached.
    pub core_appearance: GaussianAppearance,
    pub subs: Vec<SubGaussian>,
}

impl MultiGaussian {
    pub fn frame(&self) -> Result<FlatGaussianGeometry, GeometryError> {
        gaussian_from_triangle(&self.core)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoupScene {
    pub multis: Vec<MultiGaussian>,
    pub sh_degree: usize,
    pub background: [f64; 3],
}

impl SoupScene {
    pub fn new(sh_degree: usize, background: [f64; 3]) -> Self {
        Self {
            multis: Vec::new(),
            sh_degree,
            background,
        }
    }

    pub fn core_count(&self) -> usize {
        self.multis.len()
    }

    pub fn sub_count(&self) -> usize {
        self.multis.iter().map(|m| m.subs.len()).sum()
    }

    /// True once subs have been attached; from then on only subs render.
    pub fn has_subs(&self) -> bool {
        self.multis.iter().any(|m| !m.subs.is_empty())
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let expected = crate::soup::sh_len(self.sh_degree);
        for multi in &self.multis {
            multi.core.validate()?;
            if multi.core_appearance.sh.len() != expected {
                return Err(GeometryError::BadCoefficientCount(multi.core_appearance.sh.len()));
            }
            for sub in &multi.subs {
                if sub.appearance.sh.len() != expected {
                    return Err(GeometryError::BadCoefficientCount(sub.appearance.sh.len()));
                }
                if !(sub.scale[0] > 0.0 && sub.scale[1] > 0.0) {
                    return Err(GeometryError::BadScale);
                }
                if sub.rotation.norm() < 1e-12 {
                    return Err(GeometryError::NotARotation);
                }
            }
        }
        Ok(())
    }
}

/// One rendered element of a soup: a triangle-parameterized Gaussian with
/// its appearance and the index of the core it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoupEntry {
    pub triangle: Triangle,
    pub appearance: GaussianAppearance,
    pub core: usize,
}

/// `m + alpha_1 r1 + alpha_2 r2 + alpha_3 r3`.
pub fn sub_center(core: &FlatGaussianGeometry, alpha: &Vec3) -> Vec3 {
    core.mean + core.rotation * alpha
}

/// Local offsets of `sub`'s center in `new_frame`.
pub fn rebind_sub(sub: &FlatGaussianGeometry, new_frame: &FlatGaussianGeometry) -> Vec3 {
    new_frame.rotation.transpose() * (sub.mean - new_frame.mean)
}

/// How sub offsets are drawn when subs are attached.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AlphaInit {
    /// Uniform over the core's footprint, thin along the normal.
    Footprint,
    /// Every sub at the core mean.
    Zero,
}

pub fn attach_subs(
    core: &Triangle,
    appearance: &GaussianAppearance,
    k: usize,
    seed: u64,
    init: AlphaInit,
) -> Result<MultiGaussian, GeometryError> {
    let frame = gaussian_from_triangle(core)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rotation = matrix_to_quat(&frame.rotation);
    let shrink = (k.max(1) as f64).sqrt();
    let (s2, s3) = (frame.scale[1], frame.scale[2]);
    let subs = (0..k)
        .map(|_| {
            let alpha = match init {
                AlphaInit::Zero => Vec3::zeros(),
                AlphaInit::Footprint => Vec3::new(
                    rng.random_range(-0.1..=0.1) * s2.max(s3),
                    rng.random_range(-1.0..=1.0) * s2,
                    rng.random_range(-1.0..=1.0) * s3,
                ),
            };
            SubGaussian {
                alpha,
                rotation,
                scale: [s2 / shrink, s3 / shrink],
                appearance: appearance.clone(),
            }
        })
        .collect();
    Ok(MultiGaussian {
        core: *core,
        core_appearance: appearance.clone(),
        subs,
    })
}

/// Attaches `k` subs to every core; seeds are derived from `seed` and the core index.
pub fn attach_all(scene: &SoupScene, k: usize, seed: u64) -> Result<SoupScene, GeometryError> {
    let multis = scene
        .multis
        .iter()
        .enumerate()
        .map(|(j, m)| {
            attach_subs(
                &m.core,
                &m.core_appearance,
                k,
                seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(j as u64),
                AlphaInit::Footprint,
            )
        })
        .collect::<Result<_, _>>()?;
    Ok(SoupScene {
        multis,
        sh_degree: scene.sh_degree,
        background: scene.background,
    })
}

/// The Sub-Triangle Soup of a scene at rest.
pub fn flatten_to_sub_soup(scene: &SoupScene) -> Result<Vec<SoupEntry>, GeometryError> {
    let mut out = Vec::with_capacity(scene.sub_count());
    for (j, multi) in scene.multis.iter().enumerate() {
        let frame = multi.frame()?;
        for sub in &multi.subs {
            out.push(SoupEntry {
                triangle: triangle_from_gaussian(&sub.geometry_in(&frame))?,
                appearance: sub.appearance.clone(),
                core: j,
            });
        }
    }
    Ok(out)
}

pub fn matrix_to_quat(r: &Mat3) -> Vector4<f64> {
    let q = UnitQuaternion::from_matrix(r);
    Vector4::new(q.w, q.i, q.j, q.k)
}
