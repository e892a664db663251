//! `.dms` scene files.
//!
//! Layout: the magic `DMISOSCN`, a little-endian `u32` header length, a JSON
//! header, then every float of the scene as little-endian `f64` in a fixed
//! order. The header carries all counts and shapes, so the payload length is
//! known before it is read.

use std::fs;
use std::path::Path;

use dmiso_core::deform::{DeformFieldParams, FieldArchitecture, Mlp, TimeEncodingConfig};
use dmiso_core::edit::EditSession;
use dmiso_core::multigauss::{MultiGaussian, SoupEntry, SoupScene, SubGaussian};
use dmiso_core::render::Camera;
use dmiso_core::soup::{sh_len, GaussianAppearance, Triangle, Vec3, EPSILON};
use nalgebra::Vector4;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"DMISOSCN";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SceneFileError {
    #[error("not a scene file")]
    BadMagic,
    #[error("scene file version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("header is malformed: {0}")]
    BadHeader(String),
    #[error("payload is truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("payload has {0} bytes past its declared end")]
    TrailingPayload(usize),
    #[error("every gaussian must use spherical harmonics of degree {0}")]
    MixedShDegree(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything a scene file holds.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneFile {
    pub scene: SoupScene,
    pub params: DeformFieldParams,
    /// Present once the scene has been edited. Mesh bindings are not stored.
    pub session: Option<EditSession>,
    /// Cameras addressable by index, typically the dataset's.
    pub cameras: Vec<Camera>,
    pub time_range: [f64; 2],
}

impl SceneFile {
    pub fn new(scene: SoupScene, params: DeformFieldParams) -> Self {
        Self {
            scene,
            params,
            session: None,
            cameras: Vec::new(),
            time_range: [0.0, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SessionHeader {
    t0: f64,
    mesh_edited: bool,
    /// Core index of every soup entry.
    soup_cores: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub epsilon: f64,
    pub sh_degree: usize,
    pub background: [f64; 3],
    /// Number of cores.
    pub p: usize,
    /// Subs per core.
    pub k: Vec<usize>,
    pub field: Option<FieldArchitecture>,
    pub vertex_encoding: TimeEncodingConfig,
    pub rotation_encoding: TimeEncodingConfig,
    pub time_encoding: TimeEncodingConfig,
    pub psi_shapes: Vec<(usize, usize)>,
    pub phi_shapes: Vec<(usize, usize)>,
    pub cameras: Vec<Camera>,
    pub time_range: [f64; 2],
    session: Option<SessionHeader>,
    /// Number of `f64` values in the payload.
    pub payload_len: usize,
}

fn push_appearance(out: &mut Vec<f64>, a: &GaussianAppearance, sh: usize, degree: usize) -> Result<(), SceneFileError> {
    if a.sh.len() != sh {
        return Err(SceneFileError::MixedShDegree(degree));
    }
    out.push(a.opacity);
    out.extend_from_slice(&a.sh);
    Ok(())
}

fn push_triangle(out: &mut Vec<f64>, t: &Triangle) {
    for v in t.vertices() {
        out.extend_from_slice(v.as_slice());
    }
}

/// Sequential reader over the payload; lengths are checked up front.
struct Cursor<'a> {
    data: &'a [f64],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> &[f64] {
        let s = &self.data[self.at..self.at + n];
        self.at += n;
        s
    }

    fn vec3(&mut self) -> Vec3 {
        Vec3::from_column_slice(self.take(3))
    }

    fn triangle(&mut self) -> Triangle {
        Triangle::new(self.vec3(), self.vec3(), self.vec3())
    }

    fn appearance(&mut self, sh: usize) -> GaussianAppearance {
        let opacity = self.take(1)[0];
        GaussianAppearance {
            opacity,
            sh: self.take(sh).to_vec(),
        }
    }
}

fn field_architecture(params: &DeformFieldParams) -> Option<FieldArchitecture> {
    let shapes = params.psi.shapes();
    let (hidden_width, hidden_layers) = (shapes.first()?.0, shapes.len() - 1);
    Some(FieldArchitecture {
        hidden_width,
        hidden_layers,
        vertex_frequencies: params.vertex_encoding.frequency_count,
        rotation_frequencies: params.rotation_encoding.frequency_count,
        time_frequencies: params.time_encoding.frequency_count,
    })
}

pub fn encode_scene(file: &SceneFile) -> Result<Vec<u8>, SceneFileError> {
    let scene = &file.scene;
    let degree = scene.sh_degree;
    let sh = sh_len(degree);
    let mut payload = Vec::new();
    for m in &scene.multis {
        push_triangle(&mut payload, &m.core);
        push_appearance(&mut payload, &m.core_appearance, sh, degree)?;
        for s in &m.subs {
            payload.extend_from_slice(s.alpha.as_slice());
            payload.extend_from_slice(s.rotation.as_slice());
            payload.extend_from_slice(&s.scale);
            push_appearance(&mut payload, &s.appearance, sh, degree)?;
        }
    }
    payload.extend(file.params.psi.to_flat());
    payload.extend(file.params.phi.to_flat());
    let session = match &file.session {
        None => None,
        Some(s) => {
            for e in &s.soup {
                push_triangle(&mut payload, &e.triangle);
                push_appearance(&mut payload, &e.appearance, sh, degree)?;
            }
            Some(SessionHeader {
                t0: s.t0,
                mesh_edited: s.mesh_edited,
                soup_cores: s.soup.iter().map(|e| e.core).collect(),
            })
        }
    };
    let header = Header {
        version: VERSION,
        epsilon: EPSILON,
        sh_degree: degree,
        background: scene.background,
        p: scene.multis.len(),
        k: scene.multis.iter().map(|m| m.subs.len()).collect(),
        field: field_architecture(&file.params),
        vertex_encoding: file.params.vertex_encoding,
        rotation_encoding: file.params.rotation_encoding,
        time_encoding: file.params.time_encoding,
        psi_shapes: file.params.psi.shapes(),
        phi_shapes: file.params.phi.shapes(),
        cameras: file.cameras.clone(),
        time_range: file.time_range,
        session,
        payload_len: payload.len(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| SceneFileError::BadHeader(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + json.len() + 8 * payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Reads the header without touching the payload.
pub fn decode_header(bytes: &[u8]) -> Result<(Header, &[u8]), SceneFileError> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(SceneFileError::BadMagic);
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes")) as usize;
    let json = bytes.get(12..12 + len).ok_or(SceneFileError::TruncatedPayload {
        expected: 12 + len,
        found: bytes.len(),
    })?;
    let value: serde_json::Value = serde_json::from_slice(json).map_err(|e| SceneFileError::BadHeader(e.to_string()))?;
    let found = value.get("version").and_then(|v| v.as_u64()).ok_or_else(|| SceneFileError::BadHeader("missing version".into()))?;
    if found != VERSION as u64 {
        return Err(SceneFileError::VersionMismatch { found: found as u32, expected: VERSION });
    }
    let header: Header = serde_json::from_value(value).map_err(|e| SceneFileError::BadHeader(e.to_string()))?;
    Ok((header, &bytes[12 + len..]))
}

fn expected_payload(h: &Header) -> usize {
    let sh = sh_len(h.sh_degree);
    let mlp = |shapes: &[(usize, usize)]| shapes.iter().map(|(o, i)| o * i + o).sum::<usize>();
    let subs: usize = h.k.iter().sum();
    let soup = h.session.as_ref().map_or(0, |s| s.soup_cores.len());
    h.p * (10 + sh) + subs * (10 + sh) + mlp(&h.psi_shapes) + mlp(&h.phi_shapes) + soup * (10 + sh)
}

pub fn decode_scene(bytes: &[u8]) -> Result<SceneFile, SceneFileError> {
    let (h, body) = decode_header(bytes)?;
    if h.k.len() != h.p {
        return Err(SceneFileError::BadHeader("k has one entry per core".into()));
    }
    if h.payload_len != expected_payload(&h) {
        return Err(SceneFileError::BadHeader("payload length disagrees with the declared counts".into()));
    }
    let need = 8 * h.payload_len;
    if body.len() < need {
        return Err(SceneFileError::TruncatedPayload { expected: need, found: body.len() });
    }
    if body.len() > need {
        return Err(SceneFileError::TrailingPayload(body.len() - need));
    }
    let data: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
        .collect();
    let sh = sh_len(h.sh_degree);
    let mut cur = Cursor { data: &data, at: 0 };
    let mut scene = SoupScene::new(h.sh_degree, h.background);
    for &k in &h.k {
        let core = cur.triangle();
        let core_appearance = cur.appearance(sh);
        let subs = (0..k)
            .map(|_| {
                let alpha = cur.vec3();
                let rotation = Vector4::from_column_slice(cur.take(4));
                let s = cur.take(2);
                let scale = [s[0], s[1]];
                let appearance = cur.appearance(sh);
                SubGaussian { alpha, rotation, scale, appearance }
            })
            .collect();
        scene.multis.push(MultiGaussian { core, core_appearance, subs });
    }
    let mlp = |shapes: &[(usize, usize)], cur: &mut Cursor| {
        let n = shapes.iter().map(|(o, i)| o * i + o).sum();
        Mlp::from_flat(shapes, cur.take(n)).ok_or_else(|| SceneFileError::BadHeader("bad network shapes".into()))
    };
    let psi = mlp(&h.psi_shapes, &mut cur)?;
    let phi = mlp(&h.phi_shapes, &mut cur)?;
    let params = DeformFieldParams {
        psi,
        phi,
        vertex_encoding: h.vertex_encoding,
        rotation_encoding: h.rotation_encoding,
        time_encoding: h.time_encoding,
    };
    if !params.is_well_formed() {
        return Err(SceneFileError::BadHeader("network shapes do not match the encodings".into()));
    }
    let session = h.session.map(|s| {
        let soup = s
            .soup_cores
            .iter()
            .map(|&core| SoupEntry {
                triangle: cur.triangle(),
                appearance: cur.appearance(sh),
                core,
            })
            .collect();
        EditSession {
            t0: s.t0,
            soup,
            mesh: None,
            mesh_edited: s.mesh_edited,
        }
    });
    Ok(SceneFile {
        scene,
        params,
        session,
        cameras: h.cameras,
        time_range: h.time_range,
    })
}

pub fn save_scene(path: &Path, file: &SceneFile) -> Result<(), SceneFileError> {
    fs::write(path, encode_scene(file)?)?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<SceneFile, SceneFileError> {
    decode_scene(&fs::read(path)?)
}
