//! Rigid transforms, timestamped trajectories, SO(3) helpers and the pinhole
//! camera.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// A rigid motion `x -> rotation * x + translation`.
///
/// Poses are named `a_from_b`: they map coordinates expressed in frame `b`
/// into frame `a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    pub fn from_rotation(r: UnitQuaternion<f64>) -> Self {
        Self::new(r, Vec3::zeros())
    }

    /// Builds from a rotation matrix (re-orthonormalized) and translation.
    pub fn from_matrix(r: &Mat3, t: Vec3) -> Self {
        let rot = nalgebra::Rotation3::from_matrix(r);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), t)
    }

    /// Builds from `[w, x, y, z]` quaternion coefficients, normalizing them.
    pub fn from_wxyz(q: [f64; 4], t: Vec3) -> Result<Self> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let n = quat.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::InvalidInput(format!("quaternion {q:?} cannot be normalized")));
        }
        if !t.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite translation".into()));
        }
        // already-unit input is kept bit-exact so files round-trip
        let rotation = if (n - 1.0).abs() < 1e-12 {
            UnitQuaternion::new_unchecked(quat)
        } else {
            UnitQuaternion::from_quaternion(quat)
        };
        Ok(Self::new(rotation, t))
    }

    /// `[w, x, y, z]`
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        *self.rotation.to_rotation_matrix().matrix()
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let rotation = renormalize(self.rotation * other.rotation);
        RigidTransform {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let inv = self.rotation.inverse();
        RigidTransform {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Geodesic angle between the two rotations, `2 acos |<q1, q2>|`.
    pub fn rotation_angle_to(&self, other: &RigidTransform) -> f64 {
        geodesic_angle(&self.rotation, &other.rotation)
    }

    pub fn translation_distance_to(&self, other: &RigidTransform) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Applies a right increment: rotation `R exp(omega)`, translation `t + dt`.
    pub fn retract(&self, dt: &Vec3, omega: &Vec3) -> RigidTransform {
        RigidTransform {
            rotation: renormalize(self.rotation * UnitQuaternion::from_scaled_axis(*omega)),
            translation: self.translation + dt,
        }
    }
}

/// Serialized as `[tx, ty, tz, qw, qx, qy, qz]`.
impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let q = self.wxyz();
        let t = self.translation;
        [t.x, t.y, t.z, q[0], q[1], q[2], q[3]].serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let a = <[f64; 7]>::deserialize(d)?;
        RigidTransform::from_wxyz([a[3], a[4], a[5], a[6]], Vec3::new(a[0], a[1], a[2]))
            .map_err(serde::de::Error::custom)
    }
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

impl std::ops::Mul<&RigidTransform> for &RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: &RigidTransform) -> RigidTransform {
        self.compose(rhs)
    }
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(q.into_inner())
}

/// `2 acos |<a, b>|`, evaluated through atan2 so small angles keep precision.
pub fn geodesic_angle(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    let rel = a.inverse() * b;
    2.0 * rel.imag().norm().atan2(rel.w.abs())
}

/// Spherical interpolation on the shorter arc.
pub fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, s: f64) -> UnitQuaternion<f64> {
    let mut qb = b.coords;
    let mut dot = a.coords.dot(&qb);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    let qa = a.coords;
    let coords = if dot > 1.0 - 1e-12 {
        qa * (1.0 - s) + qb * s
    } else {
        let theta = dot.min(1.0).acos();
        let sin = theta.sin();
        qa * (((1.0 - s) * theta).sin() / sin) + qb * ((s * theta).sin() / sin)
    };
    UnitQuaternion::new_normalize(Quaternion::from(coords))
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn so3_exp(omega: &Vec3) -> Mat3 {
    *nalgebra::Rotation3::new(*omega).matrix()
}

/// Rotation vector of a rotation matrix.
pub fn so3_log(r: &Mat3) -> Vec3 {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
    let q = UnitQuaternion::from_rotation_matrix(&rot);
    quat_log(&q)
}

/// Rotation vector of a unit quaternion (angle in `[0, pi]`).
pub fn quat_log(q: &UnitQuaternion<f64>) -> Vec3 {
    let (mut w, mut v) = (q.w, q.imag());
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let s = v.norm();
    if s < 1e-12 {
        return v * 2.0;
    }
    let angle = 2.0 * s.atan2(w);
    v * (angle / s)
}

/// Inverse of the right Jacobian of SO(3) at `phi`:
/// `log(exp(phi) exp(d)) ≈ phi + Jr^{-1}(phi) d`.
pub fn so3_right_jacobian_inv(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-6 {
        return Mat3::identity() + 0.5 * k + (1.0 / 12.0) * k * k;
    }
    let coeff = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Mat3::identity() + 0.5 * k + coeff * k * k
}

/// Intrinsic XYZ Euler angles: `Rx(a) Ry(b) Rz(c)`.
pub fn euler_xyz(a: f64, b: f64, c: f64) -> Mat3 {
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let (sc, cc) = c.sin_cos();
    let rx = Mat3::new(1.0, 0.0, 0.0, 0.0, ca, -sa, 0.0, sa, ca);
    let ry = Mat3::new(cb, 0.0, sb, 0.0, 1.0, 0.0, -sb, 0.0, cb);
    let rz = Mat3::new(cc, -sc, 0.0, sc, cc, 0.0, 0.0, 0.0, 1.0);
    rx * ry * rz
}

/// Inverse of [`euler_xyz`] with `b` in `[-pi/2, pi/2]`.
pub fn euler_xyz_from_matrix(r: &Mat3) -> [f64; 3] {
    let sb = r[(0, 2)].clamp(-1.0, 1.0);
    let b = sb.asin();
    if sb.abs() < 1.0 - 1e-12 {
        let a = (-r[(1, 2)]).atan2(r[(2, 2)]);
        let c = (-r[(0, 1)]).atan2(r[(0, 0)]);
        [a, b, c]
    } else {
        // gimbal lock: fold everything into a
        let a = r[(2, 1)].atan2(r[(1, 1)]);
        [a, b, 0.0]
    }
}

/// Proper rotation closest to `m` in Frobenius norm (orthogonal Procrustes).
pub fn nearest_rotation(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut d = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

/// Least-squares rigid fit `dst ≈ R src + t` (Kabsch).
pub fn kabsch(src: &[Vec3], dst: &[Vec3], weights: Option<&[f64]>) -> Option<RigidTransform> {
    if src.len() != dst.len() || src.is_empty() {
        return None;
    }
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total: f64 = (0..src.len()).map(w).sum();
    if total <= 0.0 {
        return None;
    }
    let cs = (0..src.len()).map(|i| src[i] * w(i)).sum::<Vec3>() / total;
    let cd = (0..src.len()).map(|i| dst[i] * w(i)).sum::<Vec3>() / total;
    let mut h = Mat3::zeros();
    for i in 0..src.len() {
        h += w(i) * (dst[i] - cd) * (src[i] - cs).transpose();
    }
    let r = nearest_rotation(&h);
    Some(RigidTransform::from_matrix(&r, cd - r * cs))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSample {
    pub t_ns: i64,
    pub pose: RigidTransform,
}

/// Timestamped `world_from_body` poses in a named frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    frame_id: String,
    samples: Vec<PoseSample>,
}

impl Trajectory {
    pub fn new(frame_id: impl Into<String>, samples: Vec<PoseSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("trajectory has no samples".into()));
        }
        for (i, w) in samples.windows(2).enumerate() {
            if w[1].t_ns <= w[0].t_ns {
                return Err(Error::InvalidInput(format!(
                    "trajectory timestamps not strictly increasing at sample {}",
                    i + 1
                )));
            }
        }
        Ok(Self {
            frame_id: frame_id.into(),
            samples,
        })
    }

    pub fn frame_id(&self) -> &str {
        &self.frame_id
    }

    pub fn samples(&self) -> &[PoseSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn start_ns(&self) -> i64 {
        self.samples[0].t_ns
    }

    pub fn end_ns(&self) -> i64 {
        self.samples[self.samples.len() - 1].t_ns
    }

    pub fn covers(&self, t_ns: i64) -> bool {
        t_ns >= self.start_ns() && t_ns <= self.end_ns()
    }

    /// Pose at `t_ns`: linear in translation, slerp in rotation.
    pub fn interpolate(&self, t_ns: i64) -> Result<RigidTransform> {
        if !self.covers(t_ns) {
            return Err(Error::OutOfRange {
                t_ns,
                start_ns: self.start_ns(),
                end_ns: self.end_ns(),
            });
        }
        let idx = self.samples.partition_point(|s| s.t_ns < t_ns);
        let hi = &self.samples[idx];
        if hi.t_ns == t_ns {
            return Ok(hi.pose);
        }
        let lo = &self.samples[idx - 1];
        let s = (t_ns - lo.t_ns) as f64 / (hi.t_ns - lo.t_ns) as f64;
        Ok(RigidTransform {
            rotation: slerp(&lo.pose.rotation, &hi.pose.rotation, s),
            translation: lo.pose.translation * (1.0 - s) + hi.pose.translation * s,
        })
    }

    /// Composes every pose with `left ∘ pose ∘ right`.
    pub fn map_poses(&self, f: impl Fn(&RigidTransform) -> RigidTransform) -> Trajectory {
        Trajectory {
            frame_id: self.frame_id.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| PoseSample {
                    t_ns: s.t_ns,
                    pose: f(&s.pose),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Pixel { u: f64, v: f64 },
    Behind,
}

impl Projection {
    pub fn pixel(&self) -> Option<(f64, f64)> {
        match *self {
            Projection::Pixel { u, v } => Some((u, v)),
            Projection::Behind => None,
        }
    }
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidInput("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("image size must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) || !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidInput("principal point outside the image".into()));
        }
        Ok(())
    }

    /// Pinhole projection of a camera-frame point; `Behind` for `z <= 0`.
    pub fn project(&self, p: &Vec3) -> Projection {
        if p.z <= 0.0 {
            return Projection::Behind;
        }
        Projection::Pixel {
            u: self.fx * p.x / p.z + self.cx,
            v: self.fy * p.y / p.z + self.cy,
        }
    }

    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z)
    }

    /// Half-open image rectangle test `[0, width) x [0, height)`.
    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }
}
