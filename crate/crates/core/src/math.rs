//! Rotation, frame and covariance helpers together with their vector-Jacobian
//! products. Matrix gradients treat every entry as independent.

use nalgebra::Vector4;

use crate::soup::{Mat3, Triangle, Vec3, DEGENERACY_TOLERANCE, EPSILON};
use crate::GeometryError;

/// Rotation of the normalized quaternion `(w, x, y, z)`. A zero quaternion maps to identity.
pub fn quat_to_matrix(q: &Vector4<f64>) -> Mat3 {
    let n = q.norm();
    if n == 0.0 {
        return Mat3::identity();
    }
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient w.r.t. the unnormalized quaternion given `dL/dR`.
pub fn quat_to_matrix_backward(q: &Vector4<f64>, grad: &Mat3) -> Vector4<f64> {
    let n = q.norm();
    if n == 0.0 {
        return Vector4::zeros();
    }
    let u = q / n;
    let (w, x, y, z) = (u[0], u[1], u[2], u[3]);
    let dw = Mat3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Mat3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dy = Mat3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dz = Mat3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    let gu = Vector4::new(
        grad.component_mul(&dw).sum(),
        grad.component_mul(&dx).sum(),
        grad.component_mul(&dy).sum(),
        grad.component_mul(&dz).sum(),
    );
    (gu - u * u.dot(&gu)) / n
}

/// Quaternion that is the identity when the raw network output is zero.
pub fn offset_quat(raw: &[f64]) -> Vector4<f64> {
    Vector4::new(1.0 + raw[0], raw[1], raw[2], raw[3])
}

/// Backward of `x / |x|`.
pub fn normalize_backward(x: &Vec3, grad: &Vec3) -> Vec3 {
    let n = x.norm();
    let y = x / n;
    (grad - y * y.dot(grad)) / n
}

/// Frame of a triangle with the intermediates its backward pass needs.
#[derive(Clone, Copy, Debug)]
pub struct FrameTape {
    pub mean: Vec3,
    pub rotation: Mat3,
    pub s2: f64,
    pub s3: f64,
    e2: Vec3,
    e3: Vec3,
    cross: Vec3,
    w: Vec3,
}

/// Upstream gradients on a frame's outputs.
#[derive(Clone, Copy, Debug, Default)]
pub struct FrameGrad {
    pub mean: Vec3,
    pub rotation: Mat3,
    pub s2: f64,
    pub s3: f64,
}

impl FrameTape {
    pub fn new(t: &Triangle) -> Result<Self, GeometryError> {
        let e2 = t.v2 - t.v1;
        let e3 = t.v3 - t.v1;
        let cross = e2.cross(&e3);
        let cn = cross.norm();
        if cn < DEGENERACY_TOLERANCE {
            return Err(GeometryError::DegenerateFace);
        }
        let r1 = cross / cn;
        let s2 = e2.norm();
        let r2 = e2 / s2;
        // e3 has no component along r1, so this is the Gram-Schmidt residual
        let w = e3 - r1 * e3.dot(&r1) - r2 * e3.dot(&r2);
        let s3 = w.norm();
        if s3 < DEGENERACY_TOLERANCE {
            return Err(GeometryError::ZeroResidual);
        }
        let r3 = w / s3;
        Ok(Self {
            mean: t.v1,
            rotation: Mat3::from_columns(&[r1, r2, r3]),
            s2,
            s3: e3.dot(&r3),
            e2,
            e3,
            cross,
            w,
        })
    }

    /// Gradients on `(v1, v2, v3)`.
    pub fn backward(&self, g: &FrameGrad) -> [Vec3; 3] {
        let r2 = self.rotation.column(1).into_owned();
        let gr1: Vec3 = g.rotation.column(0).into_owned();
        let mut gr2: Vec3 = g.rotation.column(1).into_owned();
        let gr3: Vec3 = g.rotation.column(2).into_owned();

        let gc = normalize_backward(&self.cross, &gr1);
        let mut ge2 = self.e3.cross(&gc);
        let mut ge3 = gc.cross(&self.e2);

        // s3 = |w| and r3 = w / |w|
        let gw = normalize_backward(&self.w, &gr3) + self.w / self.w.norm() * g.s3;
        let d = self.e3.dot(&r2);
        ge3 += gw - r2 * r2.dot(&gw);
        gr2 -= gw * d + self.e3 * r2.dot(&gw);

        ge2 += normalize_backward(&self.e2, &gr2) + r2 * g.s2;
        [g.mean - ge2 - ge3, ge2, ge3]
    }
}

/// `R diag(eps^2, s2^2, s3^2) R^T`.
pub fn flat_covariance(rotation: &Mat3, s2: f64, s3: f64) -> Mat3 {
    let d = Vec3::new(EPSILON * EPSILON, s2 * s2, s3 * s3);
    rotation * Mat3::from_diagonal(&d) * rotation.transpose()
}

/// Backward of [`flat_covariance`]: gradients on `(R, s2, s3)`.
pub fn flat_covariance_backward(rotation: &Mat3, s2: f64, s3: f64, grad: &Mat3) -> (Mat3, f64, f64) {
    let d = Vec3::new(EPSILON * EPSILON, s2 * s2, s3 * s3);
    let sym = grad + grad.transpose();
    let g_rot = sym * rotation * Mat3::from_diagonal(&d);
    let r2 = rotation.column(1);
    let r3 = rotation.column(2);
    let g_s2 = 2.0 * s2 * (r2.transpose() * grad * r2)[0];
    let g_s3 = 2.0 * s3 * (r3.transpose() * grad * r3)[0];
    (g_rot, g_s2, g_s3)
}
