//! Editing a scene at a fixed time.
//!
//! The first edit freezes the scene at its time `t0` into a soup of sub
//! triangles. Soup edits select triangles by index or by a box around their
//! centroids. Mesh edits go through an alpha shape built on the deformed core
//! vertices: every soup triangle is bound to its nearest face and follows that
//! face's frame when mesh vertices move.

use std::collections::HashMap;

use nalgebra::Matrix4;
use robust::{insphere, orient3d, Coord3D};
use serde::{Deserialize, Serialize};

use crate::deform::{cores_at_time, eval_subrot, sub_soup_at_time, DeformFieldParams};
use crate::math::flat_covariance;
use crate::multigauss::{matrix_to_quat, MultiGaussian, SoupEntry, SoupScene, SubGaussian};
use crate::render::{prepare_splats, render, Camera, Image, RenderGaussian, Splat2D};
use crate::soup::{gaussian_from_triangle, FlatGaussianGeometry, Mat3, Triangle, Vec3};
use crate::{EditError, GeometryError, RenderError};

/// Axis-aligned box, bounds inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| self.min[i] <= p[i] && p[i] <= self.max[i])
    }
}

/// Which soup triangles an edit applies to. A box matches triangle centroids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Indices(Vec<usize>),
    Aabb(Aabb),
    All,
}

impl Selection {
    /// Sorted, deduplicated indices; empty or out-of-range selections are errors.
    pub fn resolve(&self, soup: &[SoupEntry]) -> Result<Vec<usize>, EditError> {
        let mut out: Vec<usize> = match self {
            Selection::Indices(ix) => {
                if let Some(bad) = ix.iter().find(|&&i| i >= soup.len()) {
                    return Err(EditError::BadSelection(format!("index {bad} out of range for {} triangles", soup.len())));
                }
                ix.clone()
            }
            Selection::Aabb(b) => (0..soup.len()).filter(|&i| b.contains(&soup[i].triangle.centroid())).collect(),
            Selection::All => (0..soup.len()).collect(),
        };
        out.sort_unstable();
        out.dedup();
        if out.is_empty() {
            return Err(EditError::BadSelection("selection is empty".into()));
        }
        Ok(out)
    }
}

/// Row-major 4x4 matrix to its linear part and translation.
pub fn split_affine(m: &[f64; 16]) -> Result<(Mat3, Vec3), EditError> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(EditError::DegenerateInput("transform has non-finite entries".into()));
    }
    if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
        return Err(EditError::DegenerateInput("transform is not affine".into()));
    }
    let a = Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
    Ok((a, Vec3::new(m[3], m[7], m[11])))
}

pub fn affine_to_array(linear: &Mat3, translation: &Vec3) -> [f64; 16] {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(linear);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(translation);
    let mut out = [0.0; 16];
    for r in 0..4 {
        for c in 0..4 {
            out[4 * r + c] = m[(r, c)];
        }
    }
    out
}

pub const IDENTITY_TRANSFORM: [f64; 16] = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];

fn identity_transform() -> [f64; 16] {
    IDENTITY_TRANSFORM
}

/// Affine map about a pivot: `x -> pivot + A (x - pivot) + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PivotAffine {
    pub linear: Mat3,
    pub translation: Vec3,
    pub pivot: Vec3,
}

impl PivotAffine {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.pivot + self.linear * (p - self.pivot) + self.translation
    }

    fn triangle(&self, t: &Triangle) -> Triangle {
        t.map(|p| self.apply(p))
    }
}

/// A transform applied to selected soup triangles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SoupTransform {
    Rigid(PivotAffine),
    Scale { factors: Vec3, pivot: Vec3 },
}

impl SoupTransform {
    pub fn rigid(transform: &[f64; 16], pivot: Vec3) -> Result<Self, EditError> {
        let (linear, translation) = split_affine(transform)?;
        if !crate::soup::is_rotation(&linear, 1e-9) {
            return Err(EditError::DegenerateInput("rigid transform has a non-rotation linear part".into()));
        }
        Ok(Self::Rigid(PivotAffine { linear, translation, pivot }))
    }

    pub fn scale(factors: [f64; 3], pivot: Vec3) -> Result<Self, EditError> {
        if factors.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(EditError::DegenerateInput("scale factors must be positive".into()));
        }
        Ok(Self::Scale { factors: Vec3::from(factors), pivot })
    }

    fn as_affine(&self) -> PivotAffine {
        match *self {
            SoupTransform::Rigid(a) => a,
            SoupTransform::Scale { factors, pivot } => PivotAffine {
                linear: Mat3::from_diagonal(&factors),
                translation: Vec3::zeros(),
                pivot,
            },
        }
    }
}

/// Applies `op` to the selected triangles; everything else is copied untouched.
pub fn transform_selection(soup: &[SoupEntry], selection: &Selection, op: &SoupTransform) -> Result<Vec<SoupEntry>, EditError> {
    let picked = selection.resolve(soup)?;
    let affine = op.as_affine();
    let mut out = soup.to_vec();
    for i in picked {
        out[i].triangle = affine.triangle(&soup[i].triangle);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum WarpFamily {
    /// `x + amplitude sin(2 pi frequency <axis, x> + phase) direction`, `axis` normalized.
    Sinusoidal {
        amplitude: f64,
        frequency: f64,
        axis: [f64; 3],
        direction: [f64; 3],
        #[serde(default)]
        phase: f64,
    },
    /// `x + offset`.
    Translate { offset: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpSpec {
    #[serde(flatten)]
    pub family: WarpFamily,
    /// Only triangles with their centroid inside are warped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Aabb>,
}

impl WarpSpec {
    pub fn validate(&self) -> Result<(), EditError> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let ok = match &self.family {
            WarpFamily::Sinusoidal { amplitude, frequency, axis, direction, phase } => {
                finite(&[*amplitude, *frequency, *phase]) && finite(axis) && finite(direction) && Vec3::from(*axis).norm() > 0.0
            }
            WarpFamily::Translate { offset } => finite(offset),
        };
        if ok {
            Ok(())
        } else {
            Err(EditError::DegenerateInput("warp parameters must be finite with a nonzero axis".into()))
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        match &self.family {
            WarpFamily::Sinusoidal { amplitude, frequency, axis, direction, phase } => {
                if *amplitude == 0.0 {
                    return *p;
                }
                let u = Vec3::from(*axis).normalize();
                let s = (2.0 * std::f64::consts::PI * frequency * u.dot(p) + phase).sin();
                p + Vec3::from(*direction) * (amplitude * s)
            }
            WarpFamily::Translate { offset } => p + Vec3::from(*offset),
        }
    }
}

/// Maps the vertices of every triangle in the warp region through the warp.
pub fn warp_space(soup: &[SoupEntry], warp: &WarpSpec) -> Result<Vec<SoupEntry>, EditError> {
    warp.validate()?;
    Ok(soup
        .iter()
        .map(|e| {
            if warp.region.is_some_and(|r| !r.contains(&e.triangle.centroid())) {
                return e.clone();
            }
            SoupEntry {
                triangle: e.triangle.map(|p| warp.apply(p)),
                ..e.clone()
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub enum DuplicateRemove {
    /// Appends a transformed copy of every selected triangle, in selection order.
    Duplicate { selection: Selection, transform: PivotAffine },
    Remove { selection: Selection },
}

pub fn duplicate_remove(soup: &[SoupEntry], op: &DuplicateRemove) -> Result<Vec<SoupEntry>, EditError> {
    match op {
        DuplicateRemove::Duplicate { selection, transform } => {
            let picked = selection.resolve(soup)?;
            let mut out = soup.to_vec();
            out.extend(picked.iter().map(|&i| SoupEntry {
                triangle: transform.triangle(&soup[i].triangle),
                ..soup[i].clone()
            }));
            Ok(out)
        }
        DuplicateRemove::Remove { selection } => {
            let picked = selection.resolve(soup)?;
            let mut drop = vec![false; soup.len()];
            picked.iter().for_each(|&i| drop[i] = true);
            Ok(soup.iter().zip(drop).filter(|(_, d)| !d).map(|(e, _)| e.clone()).collect())
        }
    }
}

/// Triangle mesh over a point set; faces are wound outward.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimatedMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

impl EstimatedMesh {
    pub fn face(&self, f: usize) -> Triangle {
        let [a, b, c] = self.faces[f];
        Triangle::new(self.vertices[a], self.vertices[b], self.vertices[c])
    }

    /// ASCII OBJ with one-based indices.
    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            s.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
        }
        for f in &self.faces {
            s.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
        }
        s
    }
}

const GHOST: usize = usize::MAX;
const NONE: usize = usize::MAX;

fn coord(p: &Vec3) -> Coord3D<f64> {
    Coord3D { x: p.x, y: p.y, z: p.z }
}

fn face_key(mut f: [usize; 3]) -> [usize; 3] {
    f.sort_unstable();
    f
}

fn face_opposite(t: &[usize; 4], i: usize) -> [usize; 3] {
    let mut f = [0; 3];
    let mut k = 0;
    for (j, &v) in t.iter().enumerate() {
        if j != i {
            f[k] = v;
            k += 1;
        }
    }
    f
}

/// Incremental Delaunay tetrahedralization with a vertex at infinity.
///
/// A finite tet `[a, b, c, d]` has `orient3d(a, b, c, d) > 0`. A ghost tet
/// has one slot set to [`GHOST`]; putting a point `q` in that slot gives a
/// positive orientation exactly when `q` is outside the hull face.
pub struct Delaunay<'a> {
    points: &'a [Vec3],
    tets: Vec<[usize; 4]>,
    alive: Vec<bool>,
    faces: HashMap<[usize; 3], [usize; 2]>,
}

impl<'a> Delaunay<'a> {
    /// Points must be pairwise distinct.
    pub fn new(points: &'a [Vec3]) -> Result<Self, EditError> {
        let degenerate = || EditError::DegenerateInput("points do not span three dimensions".into());
        if points.len() < 4 {
            return Err(degenerate());
        }
        let i1 = 1;
        let d = points[i1] - points[0];
        let i2 = (2..points.len())
            .max_by(|&a, &b| {
                let ca = d.cross(&(points[a] - points[0])).norm();
                let cb = d.cross(&(points[b] - points[0])).norm();
                ca.total_cmp(&cb).then(b.cmp(&a))
            })
            .ok_or_else(degenerate)?;
        let i3 = (2..points.len())
            .filter(|&i| i != i2)
            .find(|&i| orient3d(coord(&points[0]), coord(&points[i1]), coord(&points[i2]), coord(&points[i])) != 0.0)
            .ok_or_else(degenerate)?;
        let mut first = [0, i1, i2, i3];
        if orient3d(coord(&points[0]), coord(&points[i1]), coord(&points[i2]), coord(&points[i3])) < 0.0 {
            first.swap(1, 2);
        }
        let mut dt = Self {
            points,
            tets: Vec::new(),
            alive: Vec::new(),
            faces: HashMap::new(),
        };
        dt.add(first);
        for i in 0..4 {
            let mut g = first;
            g[i] = GHOST;
            // mirror so the ghost lies on the far side of the face
            let (a, b) = if i < 2 { (2, 3) } else { (0, 1) };
            g.swap(a, b);
            dt.add(g);
        }
        for i in 0..points.len() {
            if !first.contains(&i) {
                dt.insert(i);
            }
        }
        Ok(dt)
    }

    fn add(&mut self, t: [usize; 4]) {
        let id = self.tets.len();
        self.tets.push(t);
        self.alive.push(true);
        for i in 0..4 {
            let e = self.faces.entry(face_key(face_opposite(&t, i))).or_insert([NONE, NONE]);
            if e[0] == NONE {
                e[0] = id;
            } else {
                e[1] = id;
            }
        }
    }

    fn kill(&mut self, id: usize) {
        self.alive[id] = false;
        let t = self.tets[id];
        for i in 0..4 {
            let key = face_key(face_opposite(&t, i));
            let e = self.faces.get_mut(&key).expect("face of a live tet");
            if e[0] == id {
                e[0] = e[1];
            }
            e[1] = NONE;
            if e[0] == NONE {
                self.faces.remove(&key);
            }
        }
    }

    fn neighbor(&self, id: usize, i: usize) -> usize {
        let e = self.faces[&face_key(face_opposite(&self.tets[id], i))];
        if e[0] == id {
            e[1]
        } else {
            e[0]
        }
    }

    fn orient_with(&self, t: &[usize; 4], p: usize) -> f64 {
        let c = |v: usize| coord(&self.points[if v == GHOST { p } else { v }]);
        orient3d(c(t[0]), c(t[1]), c(t[2]), c(t[3]))
    }

    fn insert(&mut self, p: usize) {
        let n = self.tets.len();
        let mut conflict = vec![false; n];
        let q = coord(&self.points[p]);
        for id in 0..n {
            let t = &self.tets[id];
            if self.alive[id] && !t.contains(&GHOST) {
                let c = |v: usize| coord(&self.points[v]);
                conflict[id] = insphere(c(t[0]), c(t[1]), c(t[2]), c(t[3]), q) > 0.0;
            }
        }
        for id in 0..n {
            let t = self.tets[id];
            if !self.alive[id] || !t.contains(&GHOST) {
                continue;
            }
            let o = self.orient_with(&t, p);
            conflict[id] = if o > 0.0 {
                true
            } else if o == 0.0 {
                // on the hull plane: inside the face's circumcircle iff inside
                // the circumsphere of the finite tet behind it
                let g = t.iter().position(|&v| v == GHOST).expect("ghost slot");
                conflict[self.neighbor(id, g)]
            } else {
                false
            };
        }
        let mut created = Vec::new();
        for id in (0..n).filter(|&id| conflict[id]) {
            for i in 0..4 {
                let nb = self.neighbor(id, i);
                if nb == NONE || !conflict[nb] {
                    let mut t = self.tets[id];
                    t[i] = p;
                    created.push(t);
                }
            }
        }
        for id in (0..n).filter(|&id| conflict[id]) {
            self.kill(id);
        }
        for t in created {
            self.add(t);
        }
    }

    /// Live finite tets.
    pub fn tetrahedra(&self) -> Vec<[usize; 4]> {
        self.tets
            .iter()
            .zip(&self.alive)
            .filter(|(t, a)| **a && !t.contains(&GHOST))
            .map(|(t, _)| *t)
            .collect()
    }
}

/// Circumradius of a tetrahedron; infinite when flat.
pub fn circumradius(a: &Vec3, b: &Vec3, c: &Vec3, d: &Vec3) -> f64 {
    let m = Mat3::from_rows(&[(b - a).transpose(), (c - a).transpose(), (d - a).transpose()]);
    let rhs = Vec3::new((b - a).norm_squared(), (c - a).norm_squared(), (d - a).norm_squared()) * 0.5;
    match m.lu().solve(&rhs) {
        Some(x) if x.iter().all(|v| v.is_finite()) => x.norm(),
        _ => f64::INFINITY,
    }
}

/// Distinct points in first-occurrence order and the index of each input point among them.
pub fn dedup_points(points: &[Vec3]) -> (Vec<Vec3>, Vec<usize>) {
    let mut seen: HashMap<[u64; 3], usize> = HashMap::new();
    let mut unique = Vec::new();
    let map = points
        .iter()
        .map(|p| {
            // +0.0 and -0.0 are the same point
            let key = [p.x + 0.0, p.y + 0.0, p.z + 0.0].map(f64::to_bits);
            *seen.entry(key).or_insert_with(|| {
                unique.push(*p);
                unique.len() - 1
            })
        })
        .collect();
    (unique, map)
}

/// Boundary of the union of Delaunay tetrahedra with circumradius below
/// `radius`. An infinite radius gives the convex hull.
pub fn alpha_shape(points: &[Vec3], radius: f64) -> Result<EstimatedMesh, EditError> {
    if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(EditError::DegenerateInput("non-finite point".into()));
    }
    if radius.is_nan() || radius <= 0.0 {
        return Err(EditError::DegenerateInput("radius must be positive".into()));
    }
    let (vertices, _) = dedup_points(points);
    let dt = Delaunay::new(&vertices)?;
    let mut count: HashMap<[usize; 3], (usize, [usize; 3])> = HashMap::new();
    for t in dt.tetrahedra() {
        let p = |i: usize| &vertices[t[i]];
        if radius.is_finite() && circumradius(p(0), p(1), p(2), p(3)) >= radius {
            continue;
        }
        for i in 0..4 {
            let mut f = face_opposite(&t, i);
            let c = |v: usize| coord(&vertices[v]);
            if orient3d(c(f[0]), c(f[1]), c(f[2]), c(t[i])) < 0.0 {
                f.swap(1, 2);
            }
            let e = count.entry(face_key(f)).or_insert((0, f));
            e.0 += 1;
        }
    }
    let mut faces: Vec<[usize; 3]> = count
        .into_values()
        .filter(|(n, f)| {
            *n == 1 && !Triangle::new(vertices[f[0]], vertices[f[1]], vertices[f[2]]).is_degenerate()
        })
        .map(|(_, f)| f)
        .collect();
    faces.sort_unstable_by_key(|f| face_key(*f));
    Ok(EstimatedMesh { vertices, faces })
}

/// Twice the median nearest-neighbour distance.
pub fn default_radius(points: &[Vec3]) -> f64 {
    let (pts, _) = dedup_points(points);
    let mut nn: Vec<f64> = pts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            pts.iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (p - q).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .filter(|d| d.is_finite())
        .collect();
    if nn.is_empty() {
        return f64::INFINITY;
    }
    nn.sort_by(f64::total_cmp);
    2.0 * nn[nn.len() / 2]
}

/// Closest point of triangle `abc` to `p`.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

pub fn point_triangle_distance(p: &Vec3, t: &Triangle) -> f64 {
    (p - closest_point_on_triangle(p, &t.v1, &t.v2, &t.v3)).norm()
}

/// Index of the nearest face; ties go to the lowest index.
pub fn nearest_face(p: &Vec3, mesh: &EstimatedMesh) -> Option<usize> {
    let mut best = None;
    let mut best_d = f64::INFINITY;
    for f in 0..mesh.faces.len() {
        let d = point_triangle_distance(p, &mesh.face(f));
        if d < best_d {
            best_d = d;
            best = Some(f);
        }
    }
    best
}

/// A soup triangle expressed in the frame of its nearest face.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSub {
    pub face: usize,
    /// Offset of the first vertex from the face mean, in face axes.
    pub alpha: Vec3,
    /// `v2 - v1` and `v3 - v1` in face axes.
    pub edges: [Vec3; 2],
    pub original: SoupEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceBinding {
    pub t0: f64,
    pub faces: Vec<[usize; 3]>,
    /// Mesh vertex positions at binding time.
    pub rest: Vec<Vec3>,
    pub subs: Vec<BoundSub>,
}

impl FaceBinding {
    fn face_triangle(&self, f: usize, positions: &[Vec3]) -> Triangle {
        let [a, b, c] = self.faces[f];
        Triangle::new(positions[a], positions[b], positions[c])
    }

    /// The sub's triangle placed in the frame of its face over `positions`.
    pub fn place(&self, i: usize, positions: &[Vec3]) -> Result<Triangle, GeometryError> {
        let s = &self.subs[i];
        let frame = gaussian_from_triangle(&self.face_triangle(s.face, positions))?;
        Ok(place_in(&frame, s))
    }
}

fn place_in(frame: &FlatGaussianGeometry, s: &BoundSub) -> Triangle {
    let v1 = frame.mean + frame.rotation * s.alpha;
    Triangle::new(v1, v1 + frame.rotation * s.edges[0], v1 + frame.rotation * s.edges[1])
}

pub fn bind_subs_to_mesh(soup: &[SoupEntry], mesh: &EstimatedMesh, t0: f64) -> Result<FaceBinding, EditError> {
    if mesh.faces.is_empty() {
        return Err(EditError::EmptyMesh);
    }
    let frames = (0..mesh.faces.len())
        .map(|f| gaussian_from_triangle(&mesh.face(f)))
        .collect::<Result<Vec<_>, _>>()?;
    let subs = soup
        .iter()
        .map(|e| {
            let t = &e.triangle;
            let face = nearest_face(&t.v1, mesh).expect("mesh has faces");
            let r = frames[face].rotation.transpose();
            BoundSub {
                face,
                alpha: r * (t.v1 - frames[face].mean),
                edges: [r * (t.v2 - t.v1), r * (t.v3 - t.v1)],
                original: e.clone(),
            }
        })
        .collect();
    Ok(FaceBinding {
        t0,
        faces: mesh.faces.clone(),
        rest: mesh.vertices.clone(),
        subs,
    })
}

/// Re-places every bound triangle over moved mesh vertices. Triangles bound
/// to faces whose vertices did not move are returned unchanged.
pub fn apply_mesh_edit(binding: &FaceBinding, positions: &[Vec3]) -> Result<Vec<SoupEntry>, EditError> {
    if positions.len() != binding.rest.len() {
        return Err(EditError::TopologyMismatch);
    }
    let mut frames: Vec<Option<FlatGaussianGeometry>> = Vec::with_capacity(binding.faces.len());
    for f in &binding.faces {
        let moved = f.iter().any(|&v| positions[v] != binding.rest[v]);
        frames.push(if moved {
            Some(gaussian_from_triangle(&Triangle::new(positions[f[0]], positions[f[1]], positions[f[2]]))?)
        } else {
            None
        });
    }
    Ok(binding
        .subs
        .iter()
        .map(|s| match &frames[s.face] {
            None => s.original.clone(),
            Some(frame) => SoupEntry {
                triangle: place_in(frame, s),
                ..s.original.clone()
            },
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertexDelta {
    pub vertex: usize,
    pub delta: [f64; 3],
}

/// Wire format of a single edit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditOp {
    RigidTransform {
        selection: Selection,
        /// Row-major 4x4; the linear part must be a rotation.
        transform: [f64; 16],
        #[serde(default)]
        pivot: [f64; 3],
    },
    Scale {
        selection: Selection,
        factors: [f64; 3],
        #[serde(default)]
        pivot: [f64; 3],
    },
    VertexDisplace { deltas: Vec<VertexDelta> },
    SpaceWarp { warp: WarpSpec },
    Duplicate {
        selection: Selection,
        #[serde(default = "identity_transform")]
        transform: [f64; 16],
        #[serde(default)]
        pivot: [f64; 3],
    },
    Remove { selection: Selection },
}

impl EditOp {
    pub fn is_mesh_edit(&self) -> bool {
        matches!(self, EditOp::VertexDisplace { .. })
    }
}

/// Bound mesh of an edit session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshState {
    pub mesh: EstimatedMesh,
    pub binding: FaceBinding,
    /// Current, possibly edited, vertex positions.
    pub positions: Vec<Vec3>,
}

/// A scene frozen at `t0` and the edits applied to it so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditSession {
    pub t0: f64,
    pub soup: Vec<SoupEntry>,
    pub mesh: Option<MeshState>,
    pub mesh_edited: bool,
}

/// What a scene renders at `t`: its subs, or its cores before subs exist.
pub fn renderable_soup(scene: &SoupScene, params: &DeformFieldParams, t: f64) -> Result<Vec<SoupEntry>, GeometryError> {
    if scene.has_subs() {
        return sub_soup_at_time(scene, params, t);
    }
    Ok(cores_at_time(scene, params, t)?
        .into_iter()
        .zip(&scene.multis)
        .enumerate()
        .map(|(j, (triangle, m))| SoupEntry {
            triangle,
            appearance: m.core_appearance.clone(),
            core: j,
        })
        .collect())
}

/// Deduplicated vertices of the deformed cores at `t`.
pub fn core_points(scene: &SoupScene, params: &DeformFieldParams, t: f64) -> Result<Vec<Vec3>, GeometryError> {
    let pts: Vec<Vec3> = cores_at_time(scene, params, t)?.iter().flat_map(|c| c.vertices()).collect();
    Ok(dedup_points(&pts).0)
}

impl EditSession {
    pub fn freeze(scene: &SoupScene, params: &DeformFieldParams, t: f64) -> Result<Self, EditError> {
        Ok(Self {
            t0: t,
            soup: renderable_soup(scene, params, t)?,
            mesh: None,
            mesh_edited: false,
        })
    }

    /// Builds an alpha shape over the cores at `t0` and binds the soup to it.
    pub fn build_mesh(&mut self, scene: &SoupScene, params: &DeformFieldParams, radius: Option<f64>) -> Result<&MeshState, EditError> {
        let points = core_points(scene, params, self.t0)?;
        let r = radius.unwrap_or_else(|| default_radius(&points));
        let mesh = alpha_shape(&points, r)?;
        let binding = bind_subs_to_mesh(&self.soup, &mesh, self.t0)?;
        let positions = mesh.vertices.clone();
        Ok(self.mesh.insert(MeshState { mesh, binding, positions }))
    }

    /// Applies one edit; on error the session is unchanged.
    pub fn apply(&mut self, op: &EditOp) -> Result<(), EditError> {
        let soup = match op {
            EditOp::RigidTransform { selection, transform, pivot } => {
                transform_selection(&self.soup, selection, &SoupTransform::rigid(transform, Vec3::from(*pivot))?)?
            }
            EditOp::Scale { selection, factors, pivot } => {
                transform_selection(&self.soup, selection, &SoupTransform::scale(*factors, Vec3::from(*pivot))?)?
            }
            EditOp::SpaceWarp { warp } => warp_space(&self.soup, warp)?,
            EditOp::Duplicate { selection, transform, pivot } => {
                let (linear, translation) = split_affine(transform)?;
                let op = DuplicateRemove::Duplicate {
                    selection: selection.clone(),
                    transform: PivotAffine { linear, translation, pivot: Vec3::from(*pivot) },
                };
                duplicate_remove(&self.soup, &op)?
            }
            EditOp::Remove { selection } => duplicate_remove(&self.soup, &DuplicateRemove::Remove { selection: selection.clone() })?,
            EditOp::VertexDisplace { deltas } => {
                let state = self
                    .mesh
                    .as_mut()
                    .ok_or_else(|| EditError::Unsupported("no mesh is bound; build one first".into()))?;
                let mut positions = state.positions.clone();
                for d in deltas {
                    let p = positions
                        .get_mut(d.vertex)
                        .ok_or_else(|| EditError::BadSelection(format!("mesh vertex {} out of range", d.vertex)))?;
                    *p += Vec3::from(d.delta);
                }
                let soup = apply_mesh_edit(&state.binding, &positions)?;
                state.positions = positions;
                self.soup = soup;
                self.mesh_edited = true;
                return Ok(());
            }
        };
        self.soup = soup;
        // the binding describes the soup it was built from
        self.mesh = None;
        Ok(())
    }
}

/// Flat Gaussians of a soup, in soup order.
pub fn soup_gaussians(soup: &[SoupEntry]) -> Result<Vec<FlatGaussianGeometry>, GeometryError> {
    soup.iter().map(|e| gaussian_from_triangle(&e.triangle)).collect()
}

pub fn soup_splats(soup: &[SoupEntry], cam: &Camera) -> Result<Vec<Splat2D>, RenderError> {
    let geoms = soup_gaussians(soup)?;
    let gaussians: Vec<RenderGaussian<'_>> = geoms
        .iter()
        .zip(soup)
        .map(|(g, e)| RenderGaussian {
            mean: g.mean,
            cov: flat_covariance(&g.rotation, g.scale[1], g.scale[2]),
            appearance: &e.appearance,
        })
        .collect();
    prepare_splats(cam, &gaussians)
}

pub fn render_soup(soup: &[SoupEntry], cam: &Camera, background: [f64; 3]) -> Result<Image, RenderError> {
    Ok(render(&soup_splats(soup, cam)?, cam, background))
}

const REANIMATE_ITERATIONS: usize = 100;

/// Turns an edited soup back into a deformable scene: every triangle becomes
/// a sub of its core, with offsets taken in the core's frame at `t0` and a
/// rest rotation that the sub field maps onto the edited orientation at `t0`.
/// Cores left without triangles are dropped.
pub fn reanimate(scene: &SoupScene, params: &DeformFieldParams, session: &EditSession) -> Result<SoupScene, EditError> {
    if session.mesh_edited {
        return Err(EditError::Unsupported("mesh edits stay anchored at their edit time".into()));
    }
    let frames = cores_at_time(scene, params, session.t0)?
        .iter()
        .map(gaussian_from_triangle)
        .collect::<Result<Vec<_>, _>>()?;
    let mut subs: Vec<Vec<SubGaussian>> = vec![Vec::new(); scene.multis.len()];
    for e in &session.soup {
        let frame = frames
            .get(e.core)
            .ok_or_else(|| EditError::BadSelection(format!("core {} out of range", e.core)))?;
        let g = gaussian_from_triangle(&e.triangle)?;
        let mut rest = g.rotation;
        for _ in 0..REANIMATE_ITERATIONS {
            let next = eval_subrot(params, &rest, session.t0).transpose() * g.rotation;
            let done = (next - rest).amax() < 1e-14;
            rest = next;
            if done {
                break;
            }
        }
        subs[e.core].push(SubGaussian {
            alpha: frame.rotation.transpose() * (g.mean - frame.mean),
            rotation: matrix_to_quat(&rest),
            scale: [g.scale[1], g.scale[2]],
            appearance: e.appearance.clone(),
        });
    }
    let multis = scene
        .multis
        .iter()
        .zip(subs)
        .filter(|(_, s)| !s.is_empty())
        .map(|(m, subs)| MultiGaussian {
            core: m.core,
            core_appearance: m.core_appearance.clone(),
            subs,
        })
        .collect();
    Ok(SoupScene {
        multis,
        sh_degree: scene.sh_degree,
        background: scene.background,
    })
}
