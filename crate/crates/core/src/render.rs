//! CPU splatting of flat Gaussians.
//!
//! Gaussians are projected with the local affine approximation of the
//! pinhole map, sorted by camera depth and alpha-composited front to back.
//! The tiled renderer only visits splats whose footprint can reach a tile;
//! [`render_brute`] visits every splat at every pixel and is the reference
//! the tiled path must reproduce.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{Matrix2, Matrix2x3, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::soup::{sh_degree_of, GaussianAppearance, Mat3, Vec3};
use crate::RenderError;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

/// Added to both diagonal entries of every projected covariance (pixels²).
pub const LOW_PASS: f64 = 0.3;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const ALPHA_MAX: f64 = 0.99;
pub const NEAR_PLANE: f64 = 0.01;
pub const TILE_SIZE: usize = 16;

/// Pinhole camera with a world-to-camera pose (`x_cam = R x_world + t`,
/// `+z` forward, `+y` down).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Camera {
    /// Camera at `eye` looking at `target`, square pixels, horizontal field of view `fov_x`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, width: usize, height: usize, fov_x: f64) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let f = focal_from_fov(width, fov_x);
        Self {
            width,
            height,
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation,
            translation: -(rotation * eye),
        }
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Pixel coordinates of a camera-space point (pixel centers at integers).
    pub fn project(&self, p_cam: &Vec3) -> Vector2<f64> {
        Vector2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        )
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(RenderError::BadCamera);
        }
        if !crate::soup::is_rotation(&self.rotation, 1e-6) {
            return Err(RenderError::BadCamera);
        }
        Ok(())
    }
}

/// `0.5 width / tan(0.5 fov)`.
pub fn focal_from_fov(width: usize, fov: f64) -> f64 {
    0.5 * width as f64 / (0.5 * fov).tan()
}

/// Interleaved RGB float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn clamped(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// 8-bit RGB, row-major.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Self {
        Self {
            width,
            height,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    /// Planar little-endian float32 dump: all R, then all G, then all B.
    pub fn to_planar_f32(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for c in 0..3 {
            for p in 0..self.width * self.height {
                out.extend_from_slice(&(self.data[3 * p + c] as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_planar_f32(width: usize, height: usize, bytes: &[u8]) -> Option<Self> {
        let n = width * height;
        if bytes.len() != n * 12 {
            return None;
        }
        let mut data = vec![0.0; n * 3];
        for (k, chunk) in bytes.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
            let (c, p) = (k / n, k % n);
            data[3 * p + c] = v;
        }
        Some(Self { width, height, data })
    }
}

fn sh_basis(degree: usize, dir: &Vec3) -> ([f64; 4], usize) {
    let mut b = [SH_C0, 0.0, 0.0, 0.0];
    if degree >= 1 {
        b[1] = -SH_C1 * dir.y;
        b[2] = SH_C1 * dir.z;
        b[3] = -SH_C1 * dir.x;
    }
    (b, (degree + 1) * (degree + 1))
}

/// View-dependent color, clamped below at zero.
pub fn sh_to_color(sh: &[f64], view_dir: &Vec3) -> Result<[f64; 3], RenderError> {
    let degree = sh_degree_of(sh.len()).map_err(|_| RenderError::BadCoefficientCount(sh.len()))?;
    Ok(sh_color_raw(sh, degree, view_dir).map(|c| c.max(0.0)))
}

fn sh_color_raw(sh: &[f64], degree: usize, dir: &Vec3) -> [f64; 3] {
    let (basis, count) = sh_basis(degree, dir);
    let mut c = [0.5; 3];
    for (k, b) in basis.iter().enumerate().take(count) {
        for (ch, out) in c.iter_mut().enumerate() {
            *out += b * sh[3 * k + ch];
        }
    }
    c
}

/// Gradients on the coefficients and on the view direction.
pub(crate) fn sh_backward(sh: &[f64], dir: &Vec3, grad_color: &[f64; 3]) -> (Vec<f64>, Vec3) {
    let degree = sh_degree_of(sh.len()).unwrap_or(0);
    let raw = sh_color_raw(sh, degree, dir);
    let g: [f64; 3] = std::array::from_fn(|c| if raw[c] > 0.0 { grad_color[c] } else { 0.0 });
    let (basis, count) = sh_basis(degree, dir);
    let mut gsh = vec![0.0; sh.len()];
    for k in 0..count {
        for c in 0..3 {
            gsh[3 * k + c] = g[c] * basis[k];
        }
    }
    let mut gdir = Vec3::zeros();
    if degree >= 1 {
        for c in 0..3 {
            gdir.y -= SH_C1 * sh[3 + c] * g[c];
            gdir.z += SH_C1 * sh[6 + c] * g[c];
            gdir.x -= SH_C1 * sh[9 + c] * g[c];
        }
    }
    (gsh, gdir)
}

/// Screen-space footprint of a projected Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedGeometry {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
}

/// Affine projection of a 3D Gaussian, low-pass included.
pub fn project_gaussian(cam: &Camera, mean: &Vec3, cov: &Mat3) -> Result<ProjectedGeometry, RenderError> {
    let p = cam.to_camera(mean);
    if p.z <= NEAR_PLANE {
        return Err(RenderError::BehindCamera);
    }
    let t = projection_jacobian(cam, &p) * cam.rotation;
    let cov2d = t * cov * t.transpose() + Matrix2::identity() * LOW_PASS;
    Ok(ProjectedGeometry {
        mean2d: cam.project(&p),
        cov2d: (cov2d + cov2d.transpose()) * 0.5,
        depth: p.z,
    })
}

fn projection_jacobian(cam: &Camera, p: &Vec3) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * p.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * p.y * iz * iz,
    )
}

/// Gradient of [`project_gaussian`] w.r.t. the mean and covariance.
pub(crate) fn project_backward(
    cam: &Camera,
    mean: &Vec3,
    cov: &Mat3,
    grad_mean2d: &Vector2<f64>,
    grad_cov2d: &Matrix2<f64>,
) -> (Vec3, Mat3) {
    let p = cam.to_camera(mean);
    let jac = projection_jacobian(cam, &p);
    let t = jac * cam.rotation;
    // the symmetrization in the forward pass averages the off-diagonal gradient
    let g2 = (grad_cov2d + grad_cov2d.transpose()) * 0.5;
    let g_cov = t.transpose() * g2 * t;
    let g_t = (g2 + g2.transpose()) * t * cov;
    let g_j = g_t * cam.rotation.transpose();
    let (x, y, z) = (p.x, p.y, p.z);
    let (iz, iz2, iz3) = (1.0 / z, 1.0 / (z * z), 1.0 / (z * z * z));
    let mut gp = Vec3::zeros();
    gp.z += g_j[(0, 0)] * (-cam.fx * iz2);
    gp.x += g_j[(0, 2)] * (-cam.fx * iz2);
    gp.z += g_j[(0, 2)] * (2.0 * cam.fx * x * iz3);
    gp.z += g_j[(1, 1)] * (-cam.fy * iz2);
    gp.y += g_j[(1, 2)] * (-cam.fy * iz2);
    gp.z += g_j[(1, 2)] * (2.0 * cam.fy * y * iz3);
    gp.x += grad_mean2d.x * cam.fx * iz;
    gp.z -= grad_mean2d.x * cam.fx * x * iz2;
    gp.y += grad_mean2d.y * cam.fy * iz;
    gp.z -= grad_mean2d.y * cam.fy * y * iz2;
    (cam.rotation.transpose() * gp, g_cov)
}

/// A projected, shaded Gaussian ready for compositing.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    /// Position of the source Gaussian in the caller's list.
    pub index: usize,
}

impl Splat2D {
    pub fn new(geom: ProjectedGeometry, color: [f64; 3], opacity: f64, index: usize) -> Result<Self, RenderError> {
        let conic = geom.cov2d.try_inverse().ok_or(RenderError::SingularFootprint)?;
        if geom.cov2d.determinant() <= 0.0 {
            return Err(RenderError::SingularFootprint);
        }
        Ok(Self {
            mean2d: geom.mean2d,
            cov2d: geom.cov2d,
            conic,
            depth: geom.depth,
            color,
            opacity,
            index,
        })
    }

    /// Inclusive pixel bounding box outside which alpha stays below [`ALPHA_MIN`].
    fn footprint(&self, cam: &Camera) -> Option<(usize, usize, usize, usize)> {
        let peak = (self.opacity * 255.0).min(ALPHA_MAX * 255.0);
        if peak < 1.0 {
            return None;
        }
        let mahalanobis2 = 2.0 * (self.opacity * 255.0).ln();
        let (a, b, c) = (self.cov2d[(0, 0)], self.cov2d[(0, 1)], self.cov2d[(1, 1)]);
        let mid = 0.5 * (a + c);
        let lambda = mid + (mid * mid - (a * c - b * b)).max(0.0).sqrt();
        let radius = (mahalanobis2 * lambda).sqrt() + 1.0;
        let x0 = (self.mean2d.x - radius).floor().max(0.0);
        let y0 = (self.mean2d.y - radius).floor().max(0.0);
        let x1 = (self.mean2d.x + radius).ceil().min(cam.width as f64 - 1.0);
        let y1 = (self.mean2d.y + radius).ceil().min(cam.height as f64 - 1.0);
        if x1 < x0 || y1 < y0 {
            return None;
        }
        Some((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
    }

    /// `(alpha, falloff, clamped)` at a pixel, or `None` below the alpha floor.
    #[inline]
    fn alpha_at(&self, px: f64, py: f64) -> Option<(f64, f64, bool)> {
        let dx = px - self.mean2d.x;
        let dy = py - self.mean2d.y;
        let power = -0.5 * (self.conic[(0, 0)] * dx * dx + (self.conic[(0, 1)] + self.conic[(1, 0)]) * dx * dy + self.conic[(1, 1)] * dy * dy);
        if power > 0.0 {
            return None;
        }
        let g = power.exp();
        let raw = self.opacity * g;
        if raw < ALPHA_MIN {
            return None;
        }
        if raw > ALPHA_MAX {
            Some((ALPHA_MAX, g, true))
        } else {
            Some((raw, g, false))
        }
    }
}

/// A world-space Gaussian handed to the renderer.
#[derive(Clone, Debug)]
pub struct RenderGaussian<'a> {
    pub mean: Vec3,
    pub cov: Mat3,
    pub appearance: &'a GaussianAppearance,
}

/// Projects, shades and depth-sorts Gaussians. Gaussians behind the near
/// plane are dropped. Equal depths keep input order.
pub fn prepare_splats(cam: &Camera, gaussians: &[RenderGaussian<'_>]) -> Result<Vec<Splat2D>, RenderError> {
    let center = cam.center();
    let mut splats = Vec::with_capacity(gaussians.len());
    for (i, g) in gaussians.iter().enumerate() {
        let geom = match project_gaussian(cam, &g.mean, &g.cov) {
            Ok(geom) => geom,
            Err(RenderError::BehindCamera) => continue,
            Err(e) => return Err(e),
        };
        let dir = (g.mean - center).normalize();
        let color = sh_to_color(&g.appearance.sh, &dir)?;
        splats.push(Splat2D::new(geom, color, g.appearance.opacity, i)?);
    }
    sort_splats(&mut splats);
    Ok(splats)
}

/// Ascending depth, ties by source index.
pub fn sort_splats(splats: &mut [Splat2D]) {
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
}

fn pool(workers: usize) -> Arc<rayon::ThreadPool> {
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<rayon::ThreadPool>>>> = OnceLock::new();
    let pools = POOLS.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = pools.lock().unwrap_or_else(|e| e.into_inner());
    map.entry(workers)
        .or_insert_with(|| {
            Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .expect("thread pool"),
            )
        })
        .clone()
}

/// Runs `f` on a pool with exactly `workers` threads.
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    pool(workers.max(1)).install(f)
}

struct TileGrid {
    cols: usize,
    rows: usize,
    lists: Vec<Vec<usize>>,
}

impl TileGrid {
    fn build(splats: &[Splat2D], cam: &Camera) -> Self {
        let cols = cam.width.div_ceil(TILE_SIZE);
        let rows = cam.height.div_ceil(TILE_SIZE);
        let mut lists = vec![Vec::new(); cols * rows];
        for (i, s) in splats.iter().enumerate() {
            if let Some((x0, y0, x1, y1)) = s.footprint(cam) {
                for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
                    for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                        lists[ty * cols + tx].push(i);
                    }
                }
            }
        }
        Self { cols, rows, lists }
    }

    fn bounds(&self, tile: usize, cam: &Camera) -> (usize, usize, usize, usize) {
        let (tx, ty) = (tile % self.cols, tile / self.cols);
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        (x0, y0, (x0 + TILE_SIZE).min(cam.width), (y0 + TILE_SIZE).min(cam.height))
    }
}

#[inline]
fn composite_pixel<'a>(splats: impl Iterator<Item = &'a Splat2D>, px: f64, py: f64, background: &[f64; 3]) -> [f64; 3] {
    let mut c = [0.0; 3];
    let mut transmittance = 1.0;
    for s in splats {
        if let Some((alpha, _, _)) = s.alpha_at(px, py) {
            let w = alpha * transmittance;
            for ch in 0..3 {
                c[ch] += s.color[ch] * w;
            }
            transmittance *= 1.0 - alpha;
        }
    }
    for ch in 0..3 {
        c[ch] += transmittance * background[ch];
    }
    c
}

/// Tiled compositing without the final clamp.
pub fn render_unclamped(splats: &[Splat2D], cam: &Camera, background: [f64; 3]) -> Image {
    let grid = TileGrid::build(splats, cam);
    let tiles: Vec<Vec<f64>> = (0..grid.cols * grid.rows)
        .into_par_iter()
        .map(|tile| {
            let (x0, y0, x1, y1) = grid.bounds(tile, cam);
            let list = &grid.lists[tile];
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0) * 3);
            for y in y0..y1 {
                for x in x0..x1 {
                    let c = composite_pixel(list.iter().map(|&i| &splats[i]), x as f64, y as f64, &background);
                    out.extend_from_slice(&c);
                }
            }
            out
        })
        .collect();
    let mut image = Image::filled(cam.width, cam.height, [0.0; 3]);
    for (tile, values) in tiles.iter().enumerate() {
        let (x0, y0, x1, y1) = grid.bounds(tile, cam);
        let mut k = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                image.set_pixel(x, y, [values[k], values[k + 1], values[k + 2]]);
                k += 3;
            }
        }
    }
    image
}

/// Composites depth-sorted splats; output clamped to `[0, 1]`.
pub fn render(splats: &[Splat2D], cam: &Camera, background: [f64; 3]) -> Image {
    render_unclamped(splats, cam, background).clamped()
}

/// Reference compositor: every splat at every pixel, no culling.
pub fn render_brute(splats: &[Splat2D], cam: &Camera, background: [f64; 3]) -> Image {
    let mut image = Image::filled(cam.width, cam.height, [0.0; 3]);
    for y in 0..cam.height {
        for x in 0..cam.width {
            image.set_pixel(x, y, composite_pixel(splats.iter(), x as f64, y as f64, &background));
        }
    }
    image.clamped()
}

/// Gradient of the unclamped image w.r.t. one splat.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Splat2DGrad {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub color: [f64; 3],
    pub opacity: f64,
}

struct Contribution {
    local: usize,
    alpha: f64,
    falloff: f64,
    clamped: bool,
    transmittance: f64,
}

/// Backward of [`render_unclamped`] given `dL/dImage`. Per-tile gradient
/// buffers are summed in tile order so the result does not depend on the
/// number of workers.
pub fn rasterize_backward(splats: &[Splat2D], cam: &Camera, background: [f64; 3], grad_image: &Image) -> Vec<Splat2DGrad> {
    let grid = TileGrid::build(splats, cam);
    let per_tile: Vec<Vec<Splat2DGrad>> = (0..grid.cols * grid.rows)
        .into_par_iter()
        .map(|tile| {
            let (x0, y0, x1, y1) = grid.bounds(tile, cam);
            let list = &grid.lists[tile];
            let mut grads = vec![Splat2DGrad::default(); list.len()];
            let mut contribs: Vec<Contribution> = Vec::with_capacity(list.len());
            for y in y0..y1 {
                for x in x0..x1 {
                    let g_pix = grad_image.pixel(x, y);
                    if g_pix == [0.0; 3] {
                        continue;
                    }
                    let (px, py) = (x as f64, y as f64);
                    contribs.clear();
                    let mut transmittance = 1.0;
                    for (local, &i) in list.iter().enumerate() {
                        if let Some((alpha, falloff, clamped)) = splats[i].alpha_at(px, py) {
                            contribs.push(Contribution { local, alpha, falloff, clamped, transmittance });
                            transmittance *= 1.0 - alpha;
                        }
                    }
                    // color accumulated behind the current splat, background included
                    let mut behind = [0.0; 3];
                    for ch in 0..3 {
                        behind[ch] = transmittance * background[ch];
                    }
                    for c in contribs.iter().rev() {
                        let s = &splats[list[c.local]];
                        let g = &mut grads[c.local];
                        let w = c.alpha * c.transmittance;
                        let mut g_alpha = 0.0;
                        for ch in 0..3 {
                            g.color[ch] += g_pix[ch] * w;
                            g_alpha += g_pix[ch] * (s.color[ch] * c.transmittance - behind[ch] / (1.0 - c.alpha));
                            behind[ch] += s.color[ch] * w;
                        }
                        if c.clamped {
                            continue;
                        }
                        g.opacity += g_alpha * c.falloff;
                        // alpha = opacity * exp(power)
                        let g_power = g_alpha * c.alpha;
                        let d = Vector2::new(px - s.mean2d.x, py - s.mean2d.y);
                        let kd = (s.conic + s.conic.transpose()) * d * 0.5;
                        g.mean2d += kd * g_power;
                        let g_conic = d * d.transpose() * (-0.5 * g_power);
                        g.cov2d -= s.conic.transpose() * g_conic * s.conic.transpose();
                    }
                }
            }
            grads
        })
        .collect();
    let mut out = vec![Splat2DGrad::default(); splats.len()];
    for (tile, grads) in per_tile.iter().enumerate() {
        for (&i, g) in grid.lists[tile].iter().zip(grads) {
            let o = &mut out[i];
            o.mean2d += g.mean2d;
            o.cov2d += g.cov2d;
            for ch in 0..3 {
                o.color[ch] += g.color[ch];
            }
            o.opacity += g.opacity;
        }
    }
    out
}
