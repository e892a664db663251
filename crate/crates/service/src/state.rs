//! Edits and renders of a loaded scene file, shared by the CLI and the server.
//!
//! A scene is deformable until its first edit. That edit freezes it at the
//! edit's time `t0`; later edits must target `t0`. Frozen scenes render their
//! edited soup at `t0`. At other times they are reanimated through the
//! fields, unless a mesh edit made them static.

use dmiso_core::edit::{reanimate, renderable_soup, soup_splats, EditOp, EditSession, EstimatedMesh};
use dmiso_core::multigauss::SoupEntry;
use dmiso_core::render::{render, render_brute, Camera, Image, Splat2D};
use dmiso_core::train::SceneTape;
use dmiso_core::{EditError, RenderError};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::scene_file::SceneFile;

#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    Edit(EditOp),
    /// Builds an alpha shape over the cores at `t0` and binds the soup to it.
    BuildMesh { radius: Option<f64> },
}

/// One entry of an edit log: an [`EditOp`] or `{"op": "build_mesh"}`, with
/// an optional `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct EditRequest {
    pub t: Option<f64>,
    pub command: Command,
}

#[derive(Deserialize)]
struct MeshFields {
    #[serde(default)]
    radius: Option<f64>,
}

impl EditRequest {
    pub fn edit(op: EditOp) -> Self {
        Self { t: None, command: Command::Edit(op) }
    }

    pub fn from_value(mut v: Value) -> Result<Self, String> {
        let obj = v.as_object_mut().ok_or("edit request must be a JSON object")?;
        let t = match obj.remove("t") {
            None | Some(Value::Null) => None,
            Some(t) => Some(t.as_f64().filter(|t| t.is_finite()).ok_or("t must be a finite number")?),
        };
        let command = if obj.get("op").and_then(Value::as_str) == Some("build_mesh") {
            obj.remove("op");
            let f: MeshFields = serde_json::from_value(v).map_err(|e| e.to_string())?;
            Command::BuildMesh { radius: f.radius }
        } else {
            Command::Edit(serde_json::from_value(v).map_err(|e| e.to_string())?)
        };
        Ok(Self { t, command })
    }

    pub fn to_value(&self) -> Value {
        let mut v = match &self.command {
            Command::Edit(op) => serde_json::to_value(op).expect("edit ops serialize"),
            Command::BuildMesh { radius } => serde_json::json!({ "op": "build_mesh", "radius": radius }),
        };
        if let Some(t) = self.t {
            v["t"] = t.into();
        }
        v
    }
}

impl Serialize for EditRequest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_value().serialize(s)
    }
}

impl<'de> Deserialize<'de> for EditRequest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Self::from_value(Value::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// Applies one request to a copy of `file`. Returns the built mesh for
/// `build_mesh` requests.
pub fn apply_request(file: &SceneFile, req: &EditRequest) -> Result<(SceneFile, Option<EstimatedMesh>), EditError> {
    let mut session = match &file.session {
        Some(s) => {
            if let Some(t) = req.t {
                if t != s.t0 {
                    return Err(EditError::Unsupported(format!("scene is frozen at t = {}", s.t0)));
                }
            }
            s.clone()
        }
        None => EditSession::freeze(&file.scene, &file.params, req.t.unwrap_or(file.time_range[0]))?,
    };
    let mut mesh = None;
    match &req.command {
        Command::Edit(op) => session.apply(op)?,
        Command::BuildMesh { radius } => {
            mesh = Some(session.build_mesh(&file.scene, &file.params, *radius)?.mesh.clone());
        }
    }
    let mut out = file.clone();
    out.session = Some(session);
    Ok((out, mesh))
}

fn reanimated(file: &SceneFile, session: &EditSession, t: f64) -> Result<Option<Vec<SoupEntry>>, EditError> {
    if t == session.t0 || session.mesh_edited {
        return Ok(None);
    }
    let scene = reanimate(&file.scene, &file.params, session)?;
    Ok(Some(renderable_soup(&scene, &file.params, t)?))
}

/// Soup shown at `t`.
pub fn soup_at(file: &SceneFile, t: f64) -> Result<Vec<SoupEntry>, EditError> {
    match &file.session {
        None => Ok(renderable_soup(&file.scene, &file.params, t)?),
        Some(s) => Ok(reanimated(file, s, t)?.unwrap_or_else(|| s.soup.clone())),
    }
}

pub fn splats_at(file: &SceneFile, t: f64, cam: &Camera) -> Result<Vec<Splat2D>, RenderError> {
    match &file.session {
        None => SceneTape::forward(&file.scene, &file.params, t)?.splats(cam),
        Some(s) => {
            let soup = match reanimated(file, s, t) {
                Ok(Some(soup)) => soup,
                Ok(None) => s.soup.clone(),
                Err(EditError::Geometry(g)) => return Err(g.into()),
                Err(_) => s.soup.clone(),
            };
            soup_splats(&soup, cam)
        }
    }
}

pub fn render_at(file: &SceneFile, t: f64, cam: &Camera, brute: bool) -> Result<Image, RenderError> {
    cam.validate()?;
    let splats = splats_at(file, t, cam)?;
    let bg = file.scene.background;
    Ok(if brute { render_brute(&splats, cam, bg) } else { render(&splats, cam, bg) })
}

/// Applies a whole log in order.
pub fn replay(file: &SceneFile, log: &[EditRequest]) -> Result<SceneFile, (usize, EditError)> {
    let mut cur = file.clone();
    for (i, req) in log.iter().enumerate() {
        cur = apply_request(&cur, req).map_err(|e| (i, e))?.0;
    }
    Ok(cur)
}
