//! Flat Gaussians and their triangle parameterization.
//!
//! A flat Gaussian has mean `m`, rotation `R = [r1 r2 r3]` and scales
//! `(ε, s2, s3)`. It maps to the triangle `(m, m + s2 r2, m + s3 r3)`; the
//! inverse rebuilds the frame from the triangle edges with one Gram–Schmidt
//! step. Both directions agree at the covariance level.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::GeometryError;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Thickness of every flat Gaussian, in scene units.
pub const EPSILON: f64 = 1e-6;

/// Below this norm an edge cross product (or residual) counts as zero.
pub const DEGENERACY_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triangle {
    pub v1: Vec3,
    pub v2: Vec3,
    pub v3: Vec3,
}

impl Triangle {
    pub fn new(v1: Vec3, v2: Vec3, v3: Vec3) -> Self {
        Self { v1, v2, v3 }
    }

    pub fn vertices(&self) -> [Vec3; 3] {
        [self.v1, self.v2, self.v3]
    }

    pub fn from_vertices(v: [Vec3; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn map(&self, mut f: impl FnMut(&Vec3) -> Vec3) -> Self {
        Self::new(f(&self.v1), f(&self.v2), f(&self.v3))
    }

    pub fn centroid(&self) -> Vec3 {
        (self.v1 + self.v2 + self.v3) / 3.0
    }

    /// Unnormalized normal `(v2 - v1) x (v3 - v1)`.
    pub fn edge_cross(&self) -> Vec3 {
        (self.v2 - self.v1).cross(&(self.v3 - self.v1))
    }

    pub fn is_degenerate(&self) -> bool {
        self.edge_cross().norm() < DEGENERACY_TOLERANCE
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.is_degenerate() {
            Err(GeometryError::DegenerateFace)
        } else {
            Ok(())
        }
    }

    pub fn is_finite(&self) -> bool {
        self.vertices().iter().all(|v| v.iter().all(|c| c.is_finite()))
    }
}

/// Mean, rotation and scales of a flat Gaussian. `scale[0]` is always [`EPSILON`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatGaussianGeometry {
    pub mean: Vec3,
    pub rotation: Mat3,
    pub scale: Vec3,
}

impl FlatGaussianGeometry {
    /// Builds a flat Gaussian from its two tangential scales.
    pub fn new(mean: Vec3, rotation: Mat3, s2: f64, s3: f64) -> Self {
        Self {
            mean,
            rotation,
            scale: Vec3::new(EPSILON, s2, s3),
        }
    }

    pub fn axis(&self, i: usize) -> Vec3 {
        self.rotation.column(i).into_owned()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !is_rotation(&self.rotation, 1e-9) {
            return Err(GeometryError::NotARotation);
        }
        if self.scale[0] != EPSILON || self.scale[1] <= 0.0 || self.scale[2] <= 0.0 {
            return Err(GeometryError::BadScale);
        }
        Ok(())
    }
}

/// Symmetric positive semidefinite 3x3 covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Covariance3(pub Mat3);

impl Covariance3 {
    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    /// Relative Frobenius distance `|a - b| / max(|a|, |b|)`.
    pub fn relative_error(&self, other: &Covariance3) -> f64 {
        let scale = self.0.norm().max(other.0.norm());
        if scale == 0.0 {
            0.0
        } else {
            (self.0 - other.0).norm() / scale
        }
    }
}

/// Opacity and spherical-harmonic color of a Gaussian.
///
/// `sh` holds coefficient-major RGB triples: 3 values for degree 0, 12 for
/// degree 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianAppearance {
    pub opacity: f64,
    pub sh: Vec<f64>,
}

impl GaussianAppearance {
    pub fn new(opacity: f64, sh: Vec<f64>) -> Result<Self, GeometryError> {
        sh_degree_of(sh.len())?;
        Ok(Self {
            opacity: opacity.clamp(0.0, 1.0),
            sh,
        })
    }

    /// Flat color of degree 0 with the given RGB (before the +0.5 offset is removed).
    pub fn from_rgb(opacity: f64, rgb: [f64; 3]) -> Self {
        let sh = rgb
            .iter()
            .map(|c| (c - 0.5) / crate::render::SH_C0)
            .collect();
        Self {
            opacity: opacity.clamp(0.0, 1.0),
            sh,
        }
    }

    pub fn sh_degree(&self) -> usize {
        sh_degree_of(self.sh.len()).unwrap_or(0)
    }
}

/// Number of SH coefficients (times three channels) for a degree.
pub fn sh_len(degree: usize) -> usize {
    3 * (degree + 1) * (degree + 1)
}

pub fn sh_degree_of(len: usize) -> Result<usize, GeometryError> {
    match len {
        3 => Ok(0),
        12 => Ok(1),
        n => Err(GeometryError::BadCoefficientCount(n)),
    }
}

pub fn is_rotation(r: &Mat3, tol: f64) -> bool {
    (r.transpose() * r - Mat3::identity()).norm() <= tol && (r.determinant() - 1.0).abs() <= tol
}

/// `R diag(s^2) R^T`.
pub fn covariance_of(g: &FlatGaussianGeometry) -> Covariance3 {
    let s2 = g.scale.component_mul(&g.scale);
    let cov = g.rotation * Mat3::from_diagonal(&s2) * g.rotation.transpose();
    // exact symmetry
    Covariance3((cov + cov.transpose()) * 0.5)
}

pub fn triangle_from_gaussian(g: &FlatGaussianGeometry) -> Result<Triangle, GeometryError> {
    if g.scale[1] < DEGENERACY_TOLERANCE || g.scale[2] < DEGENERACY_TOLERANCE {
        return Err(GeometryError::DegenerateFace);
    }
    Ok(Triangle::new(
        g.mean,
        g.mean + g.axis(1) * g.scale[1],
        g.mean + g.axis(2) * g.scale[2],
    ))
}

/// Removes from `x` its components along the orthonormal pair `b1`, `b2` and
/// normalizes the residual.
pub fn orth(x: &Vec3, b1: &Vec3, b2: &Vec3) -> Result<Vec3, GeometryError> {
    let residual = x - b1 * x.dot(b1) - b2 * x.dot(b2);
    let norm = residual.norm();
    if norm < DEGENERACY_TOLERANCE {
        return Err(GeometryError::ZeroResidual);
    }
    Ok(residual / norm)
}

pub fn gaussian_from_triangle(t: &Triangle) -> Result<FlatGaussianGeometry, GeometryError> {
    let e2 = t.v2 - t.v1;
    let e3 = t.v3 - t.v1;
    let cross = e2.cross(&e3);
    let cross_norm = cross.norm();
    if cross_norm < DEGENERACY_TOLERANCE {
        return Err(GeometryError::DegenerateFace);
    }
    let r1 = cross / cross_norm;
    let s2 = e2.norm();
    let r2 = e2 / s2;
    let r3 = orth(&e3, &r1, &r2)?;
    let s3 = e3.dot(&r3);
    Ok(FlatGaussianGeometry::new(
        t.v1,
        Mat3::from_columns(&[r1, r2, r3]),
        s2,
        s3,
    ))
}

/// Covariance of the flat Gaussian a triangle parameterizes.
pub fn triangle_covariance(t: &Triangle) -> Result<Covariance3, GeometryError> {
    gaussian_from_triangle(t).map(|g| covariance_of(&g))
}
