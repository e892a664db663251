//! Time-conditioned deformation of core triangles and sub rotations.
//!
//! The core field maps the encoded vertices of a core triangle and the
//! encoded time to three vertex translations and a rotation about the
//! translated first vertex. The sub field maps an encoded sub rotation and
//! time to a rotation that is composed on the left of the sub rotation.
//! Both networks start with a zero output layer, so a fresh field is the
//! identity deformation.

use nalgebra::{DMatrix, DVector, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::math::{offset_quat, quat_to_matrix, quat_to_matrix_backward};
use crate::multigauss::{sub_center, SoupEntry, SoupScene};
use crate::soup::{
    gaussian_from_triangle, triangle_from_gaussian, FlatGaussianGeometry, GaussianAppearance,
    Mat3, Triangle, Vec3,
};
use crate::GeometryError;

pub const DEFAULT_HIDDEN_WIDTH: usize = 64;
pub const DEFAULT_HIDDEN_LAYERS: usize = 3;
pub const CORE_FIELD_OUTPUTS: usize = 13;
pub const SUB_FIELD_OUTPUTS: usize = 4;

/// Sinusoidal encoding `[x, sin(f x), cos(f x), sin(2 f x), ...]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeEncodingConfig {
    pub frequency_count: usize,
    pub base_frequency: f64,
}

impl TimeEncodingConfig {
    pub fn new(frequency_count: usize) -> Self {
        Self {
            frequency_count,
            base_frequency: std::f64::consts::PI,
        }
    }

    pub fn len(&self) -> usize {
        1 + 2 * self.frequency_count
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encode_into(&self, x: f64, out: &mut Vec<f64>) {
        out.push(x);
        let mut f = self.base_frequency;
        for _ in 0..self.frequency_count {
            let (s, c) = (f * x).sin_cos();
            out.push(s);
            out.push(c);
            f *= 2.0;
        }
    }

    /// Chain rule through the encoding of one scalar.
    pub fn backward(&self, x: f64, grad: &[f64]) -> f64 {
        let mut g = grad[0];
        let mut f = self.base_frequency;
        for k in 0..self.frequency_count {
            let (s, c) = (f * x).sin_cos();
            g += grad[1 + 2 * k] * f * c - grad[2 + 2 * k] * f * s;
            f *= 2.0;
        }
        g
    }
}

pub fn time_embed(t: f64, cfg: &TimeEncodingConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.len());
    cfg.encode_into(t, &mut out);
    out
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out x in`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Feed-forward network with SiLU hidden activations and a linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations kept from a batched forward pass.
pub struct MlpTape {
    inputs: DMatrix<f64>,
    pre: Vec<DMatrix<f64>>,
    post: Vec<DMatrix<f64>>,
}

impl Mlp {
    /// Xavier-uniform hidden layers and a zero output layer.
    pub fn new(input: usize, hidden: usize, depth: usize, output: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(hidden, depth));
        dims.push(output);
        let count = dims.len() - 1;
        let layers = (0..count)
            .map(|l| {
                let (fan_in, fan_out) = (dims[l], dims[l + 1]);
                let weight = if l + 1 == count {
                    DMatrix::zeros(fan_out, fan_in)
                } else {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound))
                };
                Dense {
                    weight,
                    bias: DVector::zeros(fan_out),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                    bias: DVector::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    /// `(out, in)` per layer.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.weight.nrows(), l.weight.ncols())).collect()
    }

    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(|(o, i)| o * i + o).sum()
    }

    /// Weights (column-major) then bias, layer by layer.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    pub fn from_flat(shapes: &[(usize, usize)], flat: &[f64]) -> Option<Self> {
        let mut offset = 0;
        let mut layers = Vec::with_capacity(shapes.len());
        for &(o, i) in shapes {
            let w = flat.get(offset..offset + o * i)?;
            offset += o * i;
            let b = flat.get(offset..offset + o)?;
            offset += o;
            layers.push(Dense {
                weight: DMatrix::from_column_slice(o, i, w),
                bias: DVector::from_column_slice(b),
            });
        }
        (offset == flat.len()).then_some(Self { layers })
    }

    pub fn add_scaled(&mut self, other: &Mlp, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight * scale;
            a.bias.axpy(scale, &b.bias, 1.0);
        }
    }

    /// Batched forward; every column of `inputs` is one sample.
    pub fn forward(&self, inputs: DMatrix<f64>) -> (DMatrix<f64>, MlpTape) {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<DMatrix<f64>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let x = if l == 0 { &inputs } else { &post[l - 1] };
            let mut z = &layer.weight * x;
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            let a = if l + 1 == self.layers.len() {
                z.clone()
            } else {
                z.map(silu)
            };
            pre.push(z);
            post.push(a);
        }
        let out = post.last().cloned().unwrap_or_else(|| inputs.clone());
        (out, MlpTape { inputs, pre, post })
    }

    pub fn forward_one(&self, input: &[f64]) -> Vec<f64> {
        let (out, _) = self.forward(DMatrix::from_column_slice(input.len(), 1, input));
        out.as_slice().to_vec()
    }

    /// Accumulates weight gradients into `grad` and returns input gradients.
    pub fn backward(&self, tape: &MlpTape, grad_out: DMatrix<f64>, grad: &mut Mlp) -> DMatrix<f64> {
        let mut g = grad_out;
        for l in (0..self.layers.len()).rev() {
            if l + 1 != self.layers.len() {
                g.zip_apply(&tape.pre[l], |gi, z| *gi *= silu_grad(z));
            }
            let x = if l == 0 { &tape.inputs } else { &tape.post[l - 1] };
            grad.layers[l].weight.gemm(1.0, &g, &x.transpose(), 1.0);
            for col in g.column_iter() {
                grad.layers[l].bias += col;
            }
            g = self.layers[l].weight.transpose() * g;
        }
        g
    }
}

/// Parameters of both deformation networks and their input encodings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformFieldParams {
    pub psi: Mlp,
    pub phi: Mlp,
    pub vertex_encoding: TimeEncodingConfig,
    pub rotation_encoding: TimeEncodingConfig,
    pub time_encoding: TimeEncodingConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldArchitecture {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub vertex_frequencies: usize,
    pub rotation_frequencies: usize,
    pub time_frequencies: usize,
}

impl Default for FieldArchitecture {
    fn default() -> Self {
        Self {
            hidden_width: DEFAULT_HIDDEN_WIDTH,
            hidden_layers: DEFAULT_HIDDEN_LAYERS,
            vertex_frequencies: 6,
            rotation_frequencies: 2,
            time_frequencies: 6,
        }
    }
}

impl DeformFieldParams {
    pub fn new(arch: FieldArchitecture, seed: u64) -> Self {
        let vertex_encoding = TimeEncodingConfig::new(arch.vertex_frequencies);
        let rotation_encoding = TimeEncodingConfig::new(arch.rotation_frequencies);
        let time_encoding = TimeEncodingConfig::new(arch.time_frequencies);
        let psi_in = 9 * vertex_encoding.len() + time_encoding.len();
        let phi_in = 9 * rotation_encoding.len() + time_encoding.len();
        Self {
            psi: Mlp::new(psi_in, arch.hidden_width, arch.hidden_layers, CORE_FIELD_OUTPUTS, seed),
            phi: Mlp::new(
                phi_in,
                arch.hidden_width,
                arch.hidden_layers,
                SUB_FIELD_OUTPUTS,
                seed.wrapping_add(1),
            ),
            vertex_encoding,
            rotation_encoding,
            time_encoding,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            psi: self.psi.zeros_like(),
            phi: self.phi.zeros_like(),
            ..self.clone()
        }
    }

    pub fn is_well_formed(&self) -> bool {
        self.psi.input_dim() == 9 * self.vertex_encoding.len() + self.time_encoding.len()
            && self.psi.output_dim() == CORE_FIELD_OUTPUTS
            && self.phi.input_dim() == 9 * self.rotation_encoding.len() + self.time_encoding.len()
            && self.phi.output_dim() == SUB_FIELD_OUTPUTS
    }

    pub fn core_input(&self, v: &Triangle, t: f64, out: &mut Vec<f64>) {
        for p in v.vertices() {
            for c in 0..3 {
                self.vertex_encoding.encode_into(p[c], out);
            }
        }
        self.time_encoding.encode_into(t, out);
    }

    pub fn sub_input(&self, r: &Mat3, t: f64, out: &mut Vec<f64>) {
        for i in 0..3 {
            for j in 0..3 {
                self.rotation_encoding.encode_into(r[(i, j)], out);
            }
        }
        self.time_encoding.encode_into(t, out);
    }
}

/// Translations of the three vertices and a rotation about the moved first vertex.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoreDelta {
    pub dv: [Vec3; 3],
    pub rotation: Mat3,
}

impl CoreDelta {
    pub fn identity() -> Self {
        Self {
            dv: [Vec3::zeros(); 3],
            rotation: Mat3::identity(),
        }
    }

    fn from_raw(raw: &[f64]) -> Self {
        Self {
            dv: [
                Vec3::new(raw[0], raw[1], raw[2]),
                Vec3::new(raw[3], raw[4], raw[5]),
                Vec3::new(raw[6], raw[7], raw[8]),
            ],
            rotation: quat_to_matrix(&offset_quat(&raw[9..13])),
        }
    }
}

pub fn eval_deform(params: &DeformFieldParams, v: &Triangle, t: f64) -> CoreDelta {
    let mut input = Vec::with_capacity(params.psi.input_dim());
    params.core_input(v, t, &mut input);
    CoreDelta::from_raw(&params.psi.forward_one(&input))
}

/// Rotation produced by the sub field for the sub rotation `r` at time `t`.
pub fn eval_subrot(params: &DeformFieldParams, r: &Mat3, t: f64) -> Mat3 {
    let mut input = Vec::with_capacity(params.phi.input_dim());
    params.sub_input(r, t, &mut input);
    let raw = params.phi.forward_one(&input);
    quat_to_matrix(&offset_quat(&raw))
}

/// `v_i' = p + dR (v_i + dv_i - p)` with pivot `p = v1 + dv1`.
pub fn apply_deform_unchecked(v: &Triangle, d: &CoreDelta) -> Triangle {
    if d.rotation == Mat3::identity() {
        // same map; avoids the rounding of going through the pivot
        return Triangle::new(v.v1 + d.dv[0], v.v2 + d.dv[1], v.v3 + d.dv[2]);
    }
    let pivot = v.v1 + d.dv[0];
    Triangle::new(
        pivot,
        pivot + d.rotation * (v.v2 + d.dv[1] - pivot),
        pivot + d.rotation * (v.v3 + d.dv[2] - pivot),
    )
}

pub fn apply_deform(v: &Triangle, d: &CoreDelta) -> Result<Triangle, GeometryError> {
    let out = apply_deform_unchecked(v, d);
    out.validate()?;
    Ok(out)
}

/// Backward of [`apply_deform_unchecked`]: gradients on the input vertices,
/// the translations and the rotation.
pub fn apply_deform_backward(v: &Triangle, d: &CoreDelta, grad: &[Vec3; 3]) -> ([Vec3; 3], [Vec3; 3], Mat3) {
    let pivot = v.v1 + d.dv[0];
    let mut g_pivot = grad[0];
    let mut g_rot = Mat3::zeros();
    let mut gv = [Vec3::zeros(); 3];
    let mut gdv = [Vec3::zeros(); 3];
    for (i, p) in [(1, v.v2), (2, v.v3)] {
        let arm = p + d.dv[i] - pivot;
        let g_arm = d.rotation.transpose() * grad[i];
        g_rot += grad[i] * arm.transpose();
        g_pivot += grad[i] - g_arm;
        gv[i] = g_arm;
        gdv[i] = g_arm;
    }
    gv[0] = g_pivot;
    gdv[0] = g_pivot;
    (gv, gdv, g_rot)
}

/// Deformed core triangles at time `t`.
pub fn cores_at_time(scene: &SoupScene, params: &DeformFieldParams, t: f64) -> Result<Vec<Triangle>, GeometryError> {
    scene
        .multis
        .iter()
        .map(|m| apply_deform(&m.core, &eval_deform(params, &m.core, t)))
        .collect()
}

/// Every sub Gaussian of the scene at time `t`.
pub fn soup_at_time(
    scene: &SoupScene,
    params: &DeformFieldParams,
    t: f64,
) -> Result<Vec<(FlatGaussianGeometry, GaussianAppearance)>, GeometryError> {
    let mut out = Vec::with_capacity(scene.sub_count());
    for multi in &scene.multis {
        let moved = apply_deform(&multi.core, &eval_deform(params, &multi.core, t))?;
        let frame = gaussian_from_triangle(&moved)?;
        for sub in &multi.subs {
            let r = sub.rotation_matrix();
            let rotation = eval_subrot(params, &r, t) * r;
            out.push((
                FlatGaussianGeometry::new(sub_center(&frame, &sub.alpha), rotation, sub.scale[0], sub.scale[1]),
                sub.appearance.clone(),
            ));
        }
    }
    Ok(out)
}

/// The Sub-Triangle Soup at time `t`, tagged with each sub's core.
pub fn sub_soup_at_time(scene: &SoupScene, params: &DeformFieldParams, t: f64) -> Result<Vec<SoupEntry>, GeometryError> {
    let cores: Vec<usize> = scene
        .multis
        .iter()
        .enumerate()
        .flat_map(|(j, m)| std::iter::repeat_n(j, m.subs.len()))
        .collect();
    soup_at_time(scene, params, t)?
        .into_iter()
        .zip(cores)
        .map(|((g, appearance), core)| {
            Ok(SoupEntry {
                triangle: triangle_from_gaussian(&g)?,
                appearance,
                core,
            })
        })
        .collect()
}

/// Batched evaluation of the core field for many triangles at one time.
pub(crate) struct CoreFieldBatch {
    pub deltas: Vec<CoreDelta>,
    raw: DMatrix<f64>,
    tape: MlpTape,
}

impl CoreFieldBatch {
    pub fn forward(params: &DeformFieldParams, cores: &[Triangle], t: f64) -> Self {
        let dim = params.psi.input_dim();
        let mut data = Vec::with_capacity(dim * cores.len());
        for c in cores {
            params.core_input(c, t, &mut data);
        }
        let inputs = DMatrix::from_vec(dim, cores.len(), data);
        let (raw, tape) = params.psi.forward(inputs);
        let deltas = raw.column_iter().map(|c| CoreDelta::from_raw(c.as_slice())).collect();
        Self { deltas, raw, tape }
    }

    /// Takes per-core gradients on `(dv, dR)`, accumulates network gradients
    /// and adds the input-path gradients into `grad_vertices`.
    pub fn backward(
        &self,
        params: &DeformFieldParams,
        cores: &[Triangle],
        grad_dv: &[[Vec3; 3]],
        grad_rot: &[Mat3],
        grad_params: &mut DeformFieldParams,
        grad_vertices: &mut [[Vec3; 3]],
    ) {
        let n = cores.len();
        let mut g = DMatrix::zeros(CORE_FIELD_OUTPUTS, n);
        for j in 0..n {
            for (i, gv) in grad_dv[j].iter().enumerate() {
                for c in 0..3 {
                    g[(3 * i + c, j)] = gv[c];
                }
            }
            let raw = self.raw.column(j);
            let q = offset_quat(&raw.as_slice()[9..13]);
            let gq = quat_to_matrix_backward(&q, &grad_rot[j]);
            for k in 0..4 {
                g[(9 + k, j)] = gq[k];
            }
        }
        let g_in = params.psi.backward(&self.tape, g, &mut grad_params.psi);
        let enc = &params.vertex_encoding;
        let width = enc.len();
        for (j, core) in cores.iter().enumerate() {
            let col = g_in.column(j);
            for (vi, p) in core.vertices().iter().enumerate() {
                for c in 0..3 {
                    let start = (3 * vi + c) * width;
                    grad_vertices[j][vi][c] += enc.backward(p[c], &col.as_slice()[start..start + width]);
                }
            }
        }
    }
}

/// Batched evaluation of the sub field.
pub(crate) struct SubFieldBatch {
    pub rotations: Vec<Mat3>,
    quats: Vec<Vector4<f64>>,
    inputs: Vec<Mat3>,
    tape: MlpTape,
}

impl SubFieldBatch {
    pub fn forward(params: &DeformFieldParams, rotations: &[Mat3], t: f64) -> Self {
        let dim = params.phi.input_dim();
        let mut data = Vec::with_capacity(dim * rotations.len());
        for r in rotations {
            params.sub_input(r, t, &mut data);
        }
        let (raw, tape) = params.phi.forward(DMatrix::from_vec(dim, rotations.len(), data));
        let quats: Vec<_> = raw.column_iter().map(|c| offset_quat(c.as_slice())).collect();
        Self {
            rotations: quats.iter().map(quat_to_matrix).collect(),
            quats,
            inputs: rotations.to_vec(),
            tape,
        }
    }

    /// Given gradients on each produced rotation, accumulates network
    /// gradients and returns gradients on each input rotation.
    pub fn backward(&self, params: &DeformFieldParams, grad_rot: &[Mat3], grad_params: &mut DeformFieldParams) -> Vec<Mat3> {
        let n = grad_rot.len();
        let mut g = DMatrix::zeros(SUB_FIELD_OUTPUTS, n);
        for j in 0..n {
            let gq = quat_to_matrix_backward(&self.quats[j], &grad_rot[j]);
            for k in 0..4 {
                g[(k, j)] = gq[k];
            }
        }
        let g_in = params.phi.backward(&self.tape, g, &mut grad_params.phi);
        let enc = &params.rotation_encoding;
        let width = enc.len();
        (0..n)
            .map(|j| {
                let col = g_in.column(j);
                Mat3::from_fn(|a, b| {
                    let start = (3 * a + b) * width;
                    enc.backward(self.inputs[j][(a, b)], &col.as_slice()[start..start + width])
                })
            })
            .collect()
    }
}
