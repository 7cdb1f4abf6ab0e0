//! Oriented 3D boxes: projection, visibility, 2D boxes, exact IoU, basemap
//! transfer, instance point filtering and view selection.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::UnitQuaternion;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::geom::{CameraModel, Projection, RigidTransform, Trajectory, Vec3};
use crate::io::{read_json, write_json};

/// The fixed taxonomy plus the open `Anything` class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Bed,
    Chair,
    Couch,
    Door,
    Floor,
    LampLight,
    Mirror,
    Table,
    WallArtPictureFrame,
    WindowOpening,
    Plant,
    StorageShelf,
    ScreenDisplay,
    Wall,
    Sink,
    Toilet,
    Refrigerator,
    WasherDryer,
    Stairs,
    Anything,
}

pub const FIXED_CATEGORIES: [Category; 19] = [
    Category::Bed,
    Category::Chair,
    Category::Couch,
    Category::Door,
    Category::Floor,
    Category::LampLight,
    Category::Mirror,
    Category::Table,
    Category::WallArtPictureFrame,
    Category::WindowOpening,
    Category::Plant,
    Category::StorageShelf,
    Category::ScreenDisplay,
    Category::Wall,
    Category::Sink,
    Category::Toilet,
    Category::Refrigerator,
    Category::WasherDryer,
    Category::Stairs,
];

/// Default wall thickness for synthesized wall boxes (meters).
pub const WALL_THICKNESS: f64 = 0.12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ObbRecord {
    id: u64,
    category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    caption: Option<String>,
    center: [f64; 3],
    rotation: [f64; 4],
    half_extents: [f64; 3],
}

/// A 9-DoF box: `world_from_box` pose plus positive half extents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ObbRecord", into = "ObbRecord")]
pub struct Obb3 {
    pub id: u64,
    pub category: Category,
    pub caption: Option<String>,
    pub center: Vec3,
    pub rotation: UnitQuaternion<f64>,
    pub half_extents: Vec3,
}

impl TryFrom<ObbRecord> for Obb3 {
    type Error = Error;

    fn try_from(r: ObbRecord) -> Result<Self> {
        let pose = RigidTransform::from_wxyz(r.rotation, Vec3::from(r.center))?;
        let b = Obb3 {
            id: r.id,
            category: r.category,
            caption: r.caption,
            center: pose.translation,
            rotation: pose.rotation,
            half_extents: Vec3::from(r.half_extents),
        };
        b.validate()?;
        Ok(b)
    }
}

impl From<Obb3> for ObbRecord {
    fn from(b: Obb3) -> Self {
        let pose = b.world_from_box();
        ObbRecord {
            id: b.id,
            category: b.category,
            caption: b.caption,
            center: b.center.into(),
            rotation: pose.wxyz(),
            half_extents: b.half_extents.into(),
        }
    }
}

impl Obb3 {
    pub fn new(
        id: u64,
        category: Category,
        center: Vec3,
        rotation: UnitQuaternion<f64>,
        half_extents: Vec3,
    ) -> Result<Self> {
        let b = Self {
            id,
            category,
            caption: None,
            center,
            rotation,
            half_extents,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn axis_aligned(id: u64, category: Category, center: Vec3, half_extents: Vec3) -> Result<Self> {
        Self::new(id, category, center, UnitQuaternion::identity(), half_extents)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.half_extents.iter().all(|h| *h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "box {}: half extents must be positive",
                self.id
            )));
        }
        if !self.center.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidInput(format!("box {}: non-finite center", self.id)));
        }
        Ok(())
    }

    pub fn world_from_box(&self) -> RigidTransform {
        RigidTransform::new(self.rotation, self.center)
    }

    pub fn volume(&self) -> f64 {
        8.0 * self.half_extents.product()
    }

    /// Corner `i` has sign pattern `(±x, ±y, ±z)` from bits 0, 1, 2.
    pub fn corners(&self) -> [Vec3; 8] {
        let t = self.world_from_box();
        std::array::from_fn(|i| {
            let s = |b: usize| if i >> b & 1 == 1 { 1.0 } else { -1.0 };
            let h = &self.half_extents;
            t.transform_point(&Vec3::new(s(0) * h.x, s(1) * h.y, s(2) * h.z))
        })
    }

    /// Corner index pairs of the 12 edges.
    pub const EDGES: [(usize, usize); 12] = [
        (0, 1),
        (2, 3),
        (4, 5),
        (6, 7),
        (0, 2),
        (1, 3),
        (4, 6),
        (5, 7),
        (0, 4),
        (1, 5),
        (2, 6),
        (3, 7),
    ];

    /// `n_per_edge` uniform samples per edge, endpoints included, so corners
    /// appear once per incident edge.
    pub fn edge_samples(&self, n_per_edge: usize) -> Result<Vec<Vec3>> {
        if n_per_edge < 2 {
            return Err(Error::InvalidInput("n_per_edge must be at least 2".into()));
        }
        let c = self.corners();
        let mut out = Vec::with_capacity(12 * n_per_edge);
        for (a, b) in Self::EDGES {
            for k in 0..n_per_edge {
                let s = k as f64 / (n_per_edge - 1) as f64;
                out.push(c[a] + (c[b] - c[a]) * s);
            }
        }
        Ok(out)
    }

    /// Closed containment: `|R⁻¹(p − c)| ≤ h` componentwise.
    pub fn contains(&self, p: &Vec3) -> bool {
        let l = self.rotation.inverse_transform_vector(&(p - self.center));
        (0..3).all(|i| l[i].abs() <= self.half_extents[i])
    }

    pub fn transformed(&self, t: &RigidTransform) -> Obb3 {
        Obb3 {
            center: t.transform_point(&self.center),
            rotation: t.rotation * self.rotation,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub venue_id: String,
    pub frame: String,
    pub boxes: Vec<Obb3>,
}

impl SceneAnnotation {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for b in &self.boxes {
            b.validate()?;
            if !seen.insert(b.id) {
                return Err(Error::InvariantViolation(format!("duplicate box id {}", b.id)));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s: Self = read_json(&path)?;
        s.validate().map_err(|e| e.in_file(path.as_ref()))?;
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }
}

/// Reads a bare JSON array of boxes.
pub fn read_boxes(path: impl AsRef<Path>) -> Result<Vec<Obb3>> {
    let boxes: Vec<Obb3> = read_json(&path)?;
    let mut seen = HashSet::new();
    for b in &boxes {
        if !seen.insert(b.id) {
            return Err(Error::InvariantViolation(format!("duplicate box id {}", b.id)).in_file(path.as_ref()));
        }
    }
    Ok(boxes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2 {
    pub min_u: f64,
    pub min_v: f64,
    pub max_u: f64,
    pub max_v: f64,
}

impl Box2 {
    pub fn width(&self) -> f64 {
        self.max_u - self.min_u
    }

    pub fn height(&self) -> f64 {
        self.max_v - self.min_v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisibilityParams {
    pub n_per_edge: usize,
    pub inside_fraction: f64,
    pub min_points: usize,
}

impl Default for VisibilityParams {
    fn default() -> Self {
        Self {
            n_per_edge: 8,
            inside_fraction: 0.85,
            min_points: 2,
        }
    }
}

/// A failed visibility condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    NotProjectable,
    TooFewPoints,
    MostlyOutsideImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibilityVerdict {
    pub visible: bool,
    pub reasons: Vec<Reason>,
    pub fraction_inside: f64,
    pub points_inside: usize,
}

fn project_all(cam: &CameraModel, world_from_camera: &RigidTransform, pts: &[Vec3]) -> Vec<Projection> {
    let camera_from_world = world_from_camera.inverse();
    pts.iter()
        .map(|p| cam.project(&camera_from_world.transform_point(p)))
        .collect()
}

/// Visible iff some edge sample projects into the image, at least
/// `min_points` cloud points lie in the box, and at least `inside_fraction`
/// of all edge samples project into the image (samples behind the camera
/// count as outside).
pub fn compute_visibility(
    obb: &Obb3,
    cam: &CameraModel,
    world_from_camera: &RigidTransform,
    cloud: &[Vec3],
    params: &VisibilityParams,
) -> Result<VisibilityVerdict> {
    cam.validate()?;
    let samples = obb.edge_samples(params.n_per_edge)?;
    let proj = project_all(cam, world_from_camera, &samples);
    let inside = proj
        .iter()
        .filter(|p| p.pixel().is_some_and(|(u, v)| cam.in_image(u, v)))
        .count();
    let points_inside = cloud.iter().filter(|p| obb.contains(p)).count();
    let fraction_inside = inside as f64 / samples.len() as f64;
    let mut reasons = Vec::new();
    if inside == 0 {
        reasons.push(Reason::NotProjectable);
    }
    if points_inside < params.min_points {
        reasons.push(Reason::TooFewPoints);
    }
    if fraction_inside < params.inside_fraction {
        reasons.push(Reason::MostlyOutsideImage);
    }
    Ok(VisibilityVerdict {
        visible: reasons.is_empty(),
        reasons,
        fraction_inside,
        points_inside,
    })
}

fn clipped_bounds(cam: &CameraModel, proj: &[Projection]) -> Result<Box2> {
    let mut b = Box2 {
        min_u: f64::INFINITY,
        min_v: f64::INFINITY,
        max_u: f64::NEG_INFINITY,
        max_v: f64::NEG_INFINITY,
    };
    let mut any = false;
    for (u, v) in proj.iter().filter_map(|p| p.pixel()) {
        any = true;
        b.min_u = b.min_u.min(u);
        b.min_v = b.min_v.min(v);
        b.max_u = b.max_u.max(u);
        b.max_v = b.max_v.max(v);
    }
    if !any {
        return Err(Error::NotProjectable);
    }
    let (w, h) = (cam.width as f64, cam.height as f64);
    Ok(Box2 {
        min_u: b.min_u.clamp(0.0, w),
        min_v: b.min_v.clamp(0.0, h),
        max_u: b.max_u.clamp(0.0, w),
        max_v: b.max_v.clamp(0.0, h),
    })
}

/// Image AABB of the in-front edge samples, clipped to the image.
pub fn compute_2dbb(
    obb: &Obb3,
    cam: &CameraModel,
    world_from_camera: &RigidTransform,
    n_per_edge: usize,
) -> Result<Box2> {
    cam.validate()?;
    let samples = obb.edge_samples(n_per_edge)?;
    clipped_bounds(cam, &project_all(cam, world_from_camera, &samples))
}

/// Same bounds from arbitrary world points (used by the dense oracle).
pub fn bounds_of_points(cam: &CameraModel, world_from_camera: &RigidTransform, pts: &[Vec3]) -> Result<Box2> {
    clipped_bounds(cam, &project_all(cam, world_from_camera, pts))
}

/// Convex polytope as outward-oriented planar faces.
#[derive(Debug, Clone)]
struct Polytope {
    faces: Vec<Vec<Vec3>>,
}

const CLIP_EPS: f64 = 1e-12;

impl Polytope {
    fn of_box(b: &Obb3) -> Self {
        let c = b.corners();
        // counter-clockwise seen from outside
        let quads = [
            [0, 4, 6, 2], // -x
            [1, 3, 7, 5], // +x
            [0, 1, 5, 4], // -y
            [2, 6, 7, 3], // +y
            [0, 2, 3, 1], // -z
            [4, 5, 7, 6], // +z
        ];
        Self {
            faces: quads.iter().map(|q| q.iter().map(|&i| c[i]).collect()).collect(),
        }
    }

    /// Keeps the part with `n·x ≤ d`, closing the cut with a cap face.
    fn clip(&self, n: &Vec3, d: f64) -> Self {
        let scale = 1.0 + d.abs();
        let side = |p: &Vec3| n.dot(p) - d;
        let verts = || self.faces.iter().flatten();
        // Nothing outside: faces lying on the plane must not gain a cap.
        if verts().all(|p| side(p) <= CLIP_EPS * scale) {
            return self.clone();
        }
        if !verts().any(|p| side(p) < -CLIP_EPS * scale) {
            return Self { faces: Vec::new() };
        }
        let mut faces = Vec::with_capacity(self.faces.len() + 1);
        let mut cut: Vec<Vec3> = Vec::new();
        for f in &self.faces {
            let mut out = Vec::with_capacity(f.len() + 2);
            for i in 0..f.len() {
                let a = f[i];
                let b = f[(i + 1) % f.len()];
                let da = n.dot(&a) - d;
                let db = n.dot(&b) - d;
                let a_in = da <= CLIP_EPS * scale;
                let b_in = db <= CLIP_EPS * scale;
                if a_in {
                    out.push(a);
                    if da.abs() <= CLIP_EPS * scale {
                        cut.push(a);
                    }
                }
                if a_in != b_in && (da.abs() > CLIP_EPS * scale) && (db.abs() > CLIP_EPS * scale) {
                    let p = a + (b - a) * (da / (da - db));
                    out.push(p);
                    cut.push(p);
                }
            }
            if out.len() >= 3 {
                faces.push(out);
            }
        }
        let cap = order_cap(cut, n);
        if cap.len() >= 3 {
            faces.push(cap);
        }
        Self { faces }
    }

    /// Divergence theorem over fan triangles.
    fn volume(&self) -> f64 {
        let mut v = 0.0;
        for f in &self.faces {
            for i in 1..f.len().saturating_sub(1) {
                v += f[0].dot(&f[i].cross(&f[i + 1]));
            }
        }
        (v / 6.0).max(0.0)
    }
}

/// Deduplicates points on the cutting plane and orders them counter-clockwise
/// about the outward normal `n`.
fn order_cap(pts: Vec<Vec3>, n: &Vec3) -> Vec<Vec3> {
    let mut uniq: Vec<Vec3> = Vec::new();
    for p in pts {
        if !uniq.iter().any(|q| (q - p).norm() <= 1e-10 * (1.0 + p.norm())) {
            uniq.push(p);
        }
    }
    if uniq.len() < 3 {
        return uniq;
    }
    let c = uniq.iter().sum::<Vec3>() / uniq.len() as f64;
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = n.cross(&helper).normalize();
    let e2 = n.cross(&e1);
    let mut keyed: Vec<(f64, Vec3)> = uniq
        .into_iter()
        .map(|p| {
            let r = p - c;
            (r.dot(&e2).atan2(r.dot(&e1)), p)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    keyed.into_iter().map(|(_, p)| p).collect()
}

/// Exact intersection volume of two boxes.
pub fn intersection_volume(a: &Obb3, b: &Obb3) -> f64 {
    let mut poly = Polytope::of_box(a);
    let axes = b.rotation.to_rotation_matrix();
    for i in 0..3 {
        let n: Vec3 = axes.matrix().column(i).into();
        let c = n.dot(&b.center);
        let h = b.half_extents[i];
        poly = poly.clip(&n, c + h);
        poly = poly.clip(&-n, -(c - h));
        if poly.faces.len() < 4 {
            return 0.0;
        }
    }
    poly.volume()
}

pub fn iou3d(a: &Obb3, b: &Obb3) -> f64 {
    let inter = intersection_volume(a, b).min(a.volume()).min(b.volume());
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Boxes mapped by `world_alignment`; ids, categories and captions kept.
pub fn transfer_annotations(
    basemap: &SceneAnnotation,
    target_frame: &str,
    world_alignment: &RigidTransform,
) -> SceneAnnotation {
    SceneAnnotation {
        venue_id: basemap.venue_id.clone(),
        frame: target_frame.to_string(),
        boxes: basemap.boxes.iter().map(|b| b.transformed(world_alignment)).collect(),
    }
}

pub const DEFAULT_IOU_GATE: f64 = 0.95;

/// The candidate with maximal IoU at or above `iou_threshold`.
pub fn gate_shape_transfer(source: &Obb3, candidates: &[Obb3], iou_threshold: f64) -> Result<Option<u64>> {
    let ious = exec::map_slice(candidates, |c| iou3d(source, c));
    let mut passing: Vec<(usize, f64)> = ious
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, v)| *v >= iou_threshold)
        .collect();
    passing.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    match passing.as_slice() {
        [] => Ok(None),
        [(i, best), (j, second), ..] if best - second <= 1e-9 => Err(Error::AmbiguousMatch {
            first: candidates[*i].id,
            second: candidates[*j].id,
            iou: *best,
        }),
        [(i, _), ..] => Ok(Some(candidates[*i].id)),
    }
}

/// A precomputed instance mask for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskFrame {
    pub world_from_camera: RigidTransform,
    pub width: u32,
    pub height: u32,
    /// Row-major `height × width` raster.
    pub mask: Vec<bool>,
}

impl MaskFrame {
    pub fn at(&self, u: f64, v: f64) -> bool {
        let (x, y) = (u.floor() as usize, v.floor() as usize);
        self.mask[y * self.width as usize + x]
    }
}

/// Containment filter, then, with masks, keeps points whose projection lands
/// in the mask in at least `min_hits` of the frames that see them. Points
/// seen by no frame carry no mask evidence and are kept.
pub fn filter_instance_points(
    obb: &Obb3,
    cloud: &[Vec3],
    masks: Option<(&CameraModel, &[MaskFrame])>,
    min_hits: usize,
) -> Result<Vec<Vec3>> {
    let inside: Vec<Vec3> = cloud.iter().copied().filter(|p| obb.contains(p)).collect();
    let Some((cam, frames)) = masks else {
        return Ok(inside);
    };
    cam.validate()?;
    for (i, m) in frames.iter().enumerate() {
        if m.width != cam.width || m.height != cam.height || m.mask.len() != (m.width * m.height) as usize {
            return Err(Error::InvalidInput("mask raster does not match the camera".into()).at_frame(i));
        }
    }
    let inverses: Vec<RigidTransform> = frames.iter().map(|m| m.world_from_camera.inverse()).collect();
    let keep = exec::map_slice(&inside, |p| {
        let mut seen = 0;
        let mut hits = 0;
        for (m, inv) in frames.iter().zip(&inverses) {
            if let Some((u, v)) = cam.project(&inv.transform_point(p)).pixel() {
                if cam.in_image(u, v) {
                    seen += 1;
                    if m.at(u, v) {
                        hits += 1;
                    }
                }
            }
        }
        seen == 0 || hits >= min_hits
    });
    Ok(inside
        .into_iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(p, _)| p)
        .collect())
}

/// Greedy farthest-point selection over viewing directions, seeded by the
/// frame whose projected object extent covers the most image area.
pub fn select_views(points: &[Vec3], camera_poses: &Trajectory, cam: &CameraModel, k: usize) -> Result<Vec<i64>> {
    cam.validate()?;
    if points.is_empty() {
        return Err(Error::InvalidInput("object has no points".into()));
    }
    let centroid = points.iter().sum::<Vec3>() / points.len() as f64;
    struct Cand {
        t_ns: i64,
        dir: Vec3,
        coverage: f64,
    }
    let cands: Vec<Cand> = camera_poses
        .samples()
        .iter()
        .filter_map(|s| {
            let inv = s.pose.inverse();
            let (u, v) = cam.project(&inv.transform_point(&centroid)).pixel()?;
            if !cam.in_image(u, v) {
                return None;
            }
            let coverage = bounds_of_points(cam, &s.pose, points).map_or(0.0, |b| b.width() * b.height());
            let dir = centroid - s.pose.translation;
            let dir = if dir.norm() > 0.0 {
                dir.normalize()
            } else {
                Vec3::zeros()
            };
            Some(Cand {
                t_ns: s.t_ns,
                dir,
                coverage,
            })
        })
        .collect();
    if cands.len() < k {
        log::warn!("only {} candidate views for {k} requested; returning all", cands.len());
    }
    if cands.is_empty() {
        return Ok(Vec::new());
    }
    let mut first = 0;
    for (i, c) in cands.iter().enumerate() {
        if c.coverage > cands[first].coverage {
            first = i;
        }
    }
    let take = k.min(cands.len());
    let angle = |a: &Vec3, b: &Vec3| a.dot(b).clamp(-1.0, 1.0).acos();
    let mut chosen = vec![first];
    let mut min_angle: Vec<f64> = cands.iter().map(|c| angle(&c.dir, &cands[first].dir)).collect();
    let mut used = vec![false; cands.len()];
    used[first] = true;
    while chosen.len() < take {
        let mut best: Option<usize> = None;
        for i in 0..cands.len() {
            if !used[i] && best.is_none_or(|b| min_angle[i] > min_angle[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("unused candidate exists");
        used[b] = true;
        chosen.push(b);
        for i in 0..cands.len() {
            min_angle[i] = min_angle[i].min(angle(&cands[i].dir, &cands[b].dir));
        }
    }
    if take > 1 && chosen.iter().all(|&i| angle(&cands[i].dir, &cands[first].dir) < 1e-9) {
        log::warn!("selected views share one viewing direction");
    }
    Ok(chosen.into_iter().map(|i| cands[i].t_ns).collect())
}

/// One line of the per-frame 2D box output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRecord {
    pub t_ns: i64,
    pub box_id: u64,
    pub visible: bool,
    pub min_u: Option<f64>,
    pub min_v: Option<f64>,
    pub max_u: Option<f64>,
    pub max_v: Option<f64>,
    pub fraction_inside: f64,
    pub points_inside: usize,
}

/// Visibility and 2D box of every box at every camera pose.
pub fn project_scene(
    boxes: &[Obb3],
    cloud: &[Vec3],
    cam: &CameraModel,
    camera_poses: &Trajectory,
    params: &VisibilityParams,
) -> Result<Vec<ProjectionRecord>> {
    let per_frame = exec::map_slice(camera_poses.samples(), |s| -> Result<Vec<ProjectionRecord>> {
        boxes
            .iter()
            .map(|b| {
                let vis = compute_visibility(b, cam, &s.pose, cloud, params)?;
                let bb = match compute_2dbb(b, cam, &s.pose, params.n_per_edge) {
                    Ok(bb) => Some(bb),
                    Err(Error::NotProjectable) => None,
                    Err(e) => return Err(e),
                };
                Ok(ProjectionRecord {
                    t_ns: s.t_ns,
                    box_id: b.id,
                    visible: vis.visible,
                    min_u: bb.map(|b| b.min_u),
                    min_v: bb.map(|b| b.min_v),
                    max_u: bb.map(|b| b.max_u),
                    max_v: bb.map(|b| b.max_v),
                    fraction_inside: vis.fraction_inside,
                    points_inside: vis.points_inside,
                })
            })
            .collect()
    });
    let mut out = Vec::new();
    for f in per_frame {
        out.extend(f?);
    }
    Ok(out)
}

/// Uniform random point on the box surface from three unit variates.
pub fn surface_point(b: &Obb3, r: [f64; 3]) -> Vec3 {
    let h = b.half_extents;
    let areas = [h.y * h.z, h.x * h.z, h.x * h.y];
    let total: f64 = areas.iter().sum();
    let mut pick = r[0] * 2.0 * total;
    let mut local = Vec3::zeros();
    for face in 0..6 {
        let axis = face / 2;
        if pick <= areas[axis] || face == 5 {
            let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
            local[axis] = if face % 2 == 0 { -h[axis] } else { h[axis] };
            local[i] = (2.0 * r[1] - 1.0) * h[i];
            local[j] = (2.0 * r[2] - 1.0) * h[j];
            break;
        }
        pick -= areas[axis];
    }
    b.world_from_box().transform_point(&local)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube(id: u64, c: [f64; 3]) -> Obb3 {
        Obb3::axis_aligned(id, Category::Table, Vec3::from(c), Vec3::repeat(0.5)).unwrap()
    }

    fn cam() -> CameraModel {
        CameraModel::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    /// Camera at the origin looking along world +z.
    fn at_origin() -> RigidTransform {
        RigidTransform::identity()
    }

    #[test]
    fn corners_and_edges() {
        let b = cube(1, [0.0; 3]);
        for c in b.corners() {
            assert!(c.iter().all(|v| (v.abs() - 0.5).abs() < 1e-15));
        }
        let s = b.edge_samples(2).unwrap();
        let mut uniq: Vec<Vec3> = Vec::new();
        for p in s {
            if !uniq.iter().any(|q| (q - p).norm() < 1e-12) {
                uniq.push(p);
            }
        }
        assert_eq!(uniq.len(), 8);
        assert!(b.edge_samples(1).is_err());
    }

    #[test]
    fn iou_analytic_cases() {
        let a = cube(1, [0.0; 3]);
        assert_eq!(iou3d(&a, &a), 1.0);
        assert_eq!(iou3d(&a, &cube(2, [3.0, 0.0, 0.0])), 0.0);
        assert!((iou3d(&a, &cube(2, [0.5, 0.0, 0.0])) - 1.0 / 3.0).abs() < 1e-12);
        // shifted by 30% of the full extent along x
        let b = cube(2, [0.3, 0.0, 0.0]);
        assert!((iou3d(&a, &b) - 0.7 / 1.3).abs() < 1e-12);
    }

    fn random_box(rng: &mut ChaCha8Rng, id: u64) -> Obb3 {
        let axis = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        Obb3::new(
            id,
            Category::Anything,
            Vec3::new(
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
            ),
            UnitQuaternion::from_scaled_axis(axis * 1.5),
            Vec3::new(
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
            ),
        )
        .unwrap()
    }

    fn monte_carlo_iou(a: &Obb3, b: &Obb3, n: usize, rng: &mut ChaCha8Rng) -> f64 {
        let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
        for c in a.corners().iter().chain(b.corners().iter()) {
            lo = lo.inf(c);
            hi = hi.sup(c);
        }
        let (mut both, mut any) = (0usize, 0usize);
        for _ in 0..n {
            let p = Vec3::new(
                rng.random_range(lo.x..hi.x),
                rng.random_range(lo.y..hi.y),
                rng.random_range(lo.z..hi.z),
            );
            let (ia, ib) = (a.contains(&p), b.contains(&p));
            both += (ia && ib) as usize;
            any += (ia || ib) as usize;
        }
        both as f64 / any as f64
    }

    #[test]
    fn iou_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..5 {
            let a = random_box(&mut rng, 2 * i);
            let b = random_box(&mut rng, 2 * i + 1);
            let mc = monte_carlo_iou(&a, &b, 200_000, &mut rng);
            assert!((iou3d(&a, &b) - mc).abs() < 0.01);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn iou_symmetric_bounded_and_rigidly_invariant(seed in 0u64..10_000, w in prop::array::uniform3(-3.0..3.0f64), t in prop::array::uniform3(-5.0..5.0f64)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_box(&mut rng, 0);
            let b = random_box(&mut rng, 1);
            let ab = iou3d(&a, &b);
            prop_assert!((ab - iou3d(&b, &a)).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&ab));
            let g = RigidTransform::new(UnitQuaternion::from_scaled_axis(Vec3::from(w)), Vec3::from(t));
            prop_assert!((ab - iou3d(&a.transformed(&g), &b.transformed(&g))).abs() < 1e-9);
        }

        #[test]
        fn two_d_box_never_shrinks_with_more_samples(seed in 0u64..10_000, n in 2usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut b = random_box(&mut rng, 0);
            b.center += Vec3::new(0.0, 0.0, 4.0);
            let coarse = compute_2dbb(&b, &cam(), &at_origin(), n).unwrap();
            let fine = compute_2dbb(&b, &cam(), &at_origin(), 2 * n - 1).unwrap();
            prop_assert!(fine.min_u <= coarse.min_u && fine.min_v <= coarse.min_v);
            prop_assert!(fine.max_u >= coarse.max_u && fine.max_v >= coarse.max_v);
        }
    }

    #[test]
    fn visibility_rules() {
        let b = cube(1, [0.0, 0.0, 5.0]);
        let cloud: Vec<Vec3> = (0..10).map(|i| Vec3::new(0.0, 0.0, 4.6 + 0.08 * i as f64)).collect();
        let v = compute_visibility(&b, &cam(), &at_origin(), &cloud, &VisibilityParams::default()).unwrap();
        assert!(v.visible);
        assert_eq!(v.fraction_inside, 1.0);
        assert_eq!(v.points_inside, 10);

        let behind = cube(2, [0.0, 0.0, -5.0]);
        let v = compute_visibility(&behind, &cam(), &at_origin(), &cloud, &VisibilityParams::default()).unwrap();
        assert!(!v.visible && v.reasons.contains(&Reason::NotProjectable));

        let v = compute_visibility(&b, &cam(), &at_origin(), &cloud[..1], &VisibilityParams::default()).unwrap();
        assert_eq!(v.reasons, vec![Reason::TooFewPoints]);

        let v = compute_visibility(&b, &cam(), &at_origin(), &[], &VisibilityParams::default()).unwrap();
        assert!(!v.visible);

        // degenerate parameters reduce the rule to projectability
        let loose = VisibilityParams {
            inside_fraction: 0.0,
            min_points: 0,
            ..Default::default()
        };
        let edge = cube(3, [2.6, 0.0, 5.0]);
        let v = compute_visibility(&edge, &cam(), &at_origin(), &[], &loose).unwrap();
        assert!(v.visible && v.fraction_inside < 0.85);
        assert!(
            !compute_visibility(&behind, &cam(), &at_origin(), &[], &loose)
                .unwrap()
                .visible
        );
    }

    #[test]
    fn two_d_box_symmetry_and_clipping() {
        let b = cube(1, [0.0, 0.0, 5.0]);
        let bb = compute_2dbb(&b, &cam(), &at_origin(), 8).unwrap();
        assert!((bb.min_u + bb.max_u - 640.0).abs() < 1e-6);
        assert!((bb.min_v + bb.max_v - 480.0).abs() < 1e-6);
        let edge = cube(2, [3.0, 0.0, 5.0]);
        let bb = compute_2dbb(&edge, &cam(), &at_origin(), 8).unwrap();
        assert_eq!(bb.max_u, 640.0);
        assert!(matches!(
            compute_2dbb(&cube(3, [0.0, 0.0, -5.0]), &cam(), &at_origin(), 8),
            Err(Error::NotProjectable)
        ));
    }

    #[test]
    fn transfer_round_trip() {
        let scene = SceneAnnotation {
            venue_id: "v".into(),
            frame: "basemap".into(),
            boxes: vec![cube(1, [1.0, 2.0, 0.5]), cube(2, [-1.0, 0.0, 0.5])],
        };
        let same = transfer_annotations(&scene, "rec", &RigidTransform::identity());
        assert_eq!(same.boxes, scene.boxes);
        let t = RigidTransform::from_translation(Vec3::new(1.0, -2.0, 0.0));
        let moved = transfer_annotations(&scene, "rec", &t);
        assert_eq!(moved.boxes[0].center, Vec3::new(2.0, 0.0, 0.5));
        assert_eq!(moved.boxes[0].rotation, scene.boxes[0].rotation);
        let g = RigidTransform::new(
            UnitQuaternion::from_scaled_axis(Vec3::new(0.1, 0.5, -0.3)),
            Vec3::new(3.0, 1.0, -2.0),
        );
        let back = transfer_annotations(&transfer_annotations(&scene, "x", &g), "basemap", &g.inverse());
        for (a, b) in back.boxes.iter().zip(&scene.boxes) {
            assert!((a.center - b.center).norm() < 1e-9);
            assert!(a.rotation.angle_to(&b.rotation) < 1e-9);
            assert_eq!(a.id, b.id);
        }
    }

    #[test]
    fn gate_cases() {
        let a = cube(1, [0.0; 3]);
        assert_eq!(
            gate_shape_transfer(&a, &[cube(9, [0.0; 3])], DEFAULT_IOU_GATE).unwrap(),
            Some(9)
        );
        assert_eq!(
            gate_shape_transfer(&a, &[cube(9, [0.3, 0.0, 0.0])], DEFAULT_IOU_GATE).unwrap(),
            None
        );
        assert_eq!(gate_shape_transfer(&a, &[], DEFAULT_IOU_GATE).unwrap(), None);
        assert!(matches!(
            gate_shape_transfer(&a, &[cube(7, [0.0; 3]), cube(8, [0.0; 3])], DEFAULT_IOU_GATE),
            Err(Error::AmbiguousMatch { .. })
        ));
    }

    #[test]
    fn mask_filter_removes_planted_intruder() {
        let b = Obb3::axis_aligned(1, Category::Plant, Vec3::new(0.0, 0.0, 5.0), Vec3::new(1.0, 1.0, 0.5)).unwrap();
        let mut cloud = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                cloud.push(Vec3::new(-0.9 + 0.1 * i as f64, -0.2 + 0.1 * j as f64, 5.0));
                cloud.push(Vec3::new(0.5 + 0.05 * i as f64, -0.2 + 0.1 * j as f64, 5.0));
            }
        }
        let c = cam();
        let cams = [at_origin(), RigidTransform::from_translation(Vec3::new(0.0, 0.3, 0.0))];
        // the mask covers the left image half, where the instance projects
        let frames: Vec<MaskFrame> = cams
            .iter()
            .map(|t| MaskFrame {
                world_from_camera: *t,
                width: 640,
                height: 480,
                mask: (0..640 * 480).map(|k| k % 640 < 320).collect(),
            })
            .collect();
        let kept = filter_instance_points(&b, &cloud, Some((&c, &frames)), 1).unwrap();
        assert_eq!(kept.len(), 25);
        assert!(kept.iter().all(|p| p.x < 0.0));
        let all_true: Vec<MaskFrame> = frames
            .iter()
            .map(|f| MaskFrame {
                mask: vec![true; f.mask.len()],
                ..f.clone()
            })
            .collect();
        let plain = filter_instance_points(&b, &cloud, None, 1).unwrap();
        assert_eq!(
            filter_instance_points(&b, &cloud, Some((&c, &all_true)), 1).unwrap(),
            plain
        );
        assert_eq!(plain.len(), 50);
    }

    fn ring_cameras(n: usize, radius: f64) -> Trajectory {
        let samples = (0..n)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                let pos = Vec3::new(radius * a.cos(), radius * a.sin(), 0.0);
                // camera z toward the origin, y down
                let z = -pos.normalize();
                let y = -Vec3::z();
                let x = y.cross(&z);
                let r = nalgebra::Matrix3::from_columns(&[x, y, z]);
                crate::geom::PoseSample {
                    t_ns: i as i64,
                    pose: RigidTransform::from_matrix(&r, pos),
                }
            })
            .collect();
        Trajectory::new("world", samples).unwrap()
    }

    #[test]
    fn ring_views_are_spread() {
        let pts = vec![Vec3::new(0.1, 0.0, 0.0), Vec3::new(-0.1, 0.05, 0.1)];
        let traj = ring_cameras(36, 3.0);
        let sel = select_views(&pts, &traj, &cam(), 4).unwrap();
        assert_eq!(sel.len(), 4);
        let c = pts.iter().sum::<Vec3>() / 2.0;
        let dirs: Vec<Vec3> = sel
            .iter()
            .map(|t| (c - traj.samples()[*t as usize].pose.translation).normalize())
            .collect();
        for i in 0..4 {
            for j in 0..i {
                assert!(dirs[i].dot(&dirs[j]).acos() >= 80f64.to_radians());
            }
        }
        assert_eq!(select_views(&pts, &traj, &cam(), 36).unwrap().len(), 36);
        assert_eq!(select_views(&pts, &traj, &cam(), 50).unwrap().len(), 36);
    }

    #[test]
    fn obb_file_round_trip() {
        let mut b = cube(4, [1.0, 2.0, 3.0]);
        b.caption = Some("red chair".into());
        let s = serde_json::to_string(&vec![b.clone()]).unwrap();
        let back: Vec<Obb3> = serde_json::from_str(&s).unwrap();
        assert_eq!(back[0], b);
        assert!(serde_json::from_str::<Obb3>(
            r#"{"id":1,"category":"chair","center":[0,0,0],"rotation":[1,0,0,0],"half_extents":[0,1,1]}"#
        )
        .is_err());
    }
}
