//! Dynamic scenes made of flat Gaussians parameterized by triangles.
//!
//! A scene is a soup of core triangles, each carrying a cloud of sub-Gaussians
//! expressed in the core's local frame. Two small MLPs deform cores and rotate
//! subs over time. Scenes are rendered by CPU splatting, fitted to images and
//! edited through triangle operations or a bound mesh.

pub mod deform;
pub mod edit;
pub mod fixtures;
pub mod fit;
pub mod loss;
pub mod math;
pub mod multigauss;
pub mod render;
pub mod soup;
pub mod train;

use thiserror::Error;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum GeometryError {
    #[error("triangle is degenerate")]
    DegenerateFace,
    #[error("third edge has no component orthogonal to the second")]
    ZeroResidual,
    #[error("matrix is not a proper rotation")]
    NotARotation,
    #[error("scale must be finite and positive")]
    BadScale,
    #[error("{0} is not a valid spherical harmonics coefficient count")]
    BadCoefficientCount(usize),
    #[error("value is not finite")]
    NonFinite,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum RenderError {
    #[error("gaussian is behind the near plane")]
    BehindCamera,
    #[error("invalid camera")]
    BadCamera,
    #[error("projected footprint is singular")]
    SingularFootprint,
    #[error("image dimensions do not match")]
    DimensionMismatch,
    #[error("image is smaller than the SSIM window")]
    TooSmall,
    #[error("{0} is not a valid spherical harmonics coefficient count")]
    BadCoefficientCount(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("dataset has no views")]
    EmptyDataset,
    #[error("every gaussian was pruned")]
    AllPruned,
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Render(#[from] RenderError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EditError {
    #[error("selection is invalid: {0}")]
    BadSelection(String),
    #[error("mesh has no faces")]
    EmptyMesh,
    #[error("edited mesh does not match the bound topology")]
    TopologyMismatch,
    #[error("input is degenerate: {0}")]
    DegenerateInput(String),
    #[error("operation is not supported here: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}
