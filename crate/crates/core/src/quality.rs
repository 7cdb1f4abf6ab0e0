//! Motion quality metrics: wrist distance to wristband trajectories,
//! capsule self-penetration and heel sliding during contact.
//!
//! All metrics are evaluated after nearest-frame downsampling to a common
//! rate (30 fps by default).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::fuse::ContactLabels;
use crate::geom::{Trajectory, Vec3};
use crate::rig::{Kinematics, MotionSequence, RigModel};

pub const DEFAULT_METRIC_FPS: f64 = 30.0;
pub const DEFAULT_SLIDING_THRESHOLD: f64 = 0.1;

/// A capsule rigidly attached to a joint. With `taper` the radius varies
/// linearly from `radius` at `a` to `taper` at `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionPrimitive {
    pub joint: usize,
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub radius: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taper: Option<f64>,
}

impl CollisionPrimitive {
    pub fn validate(&self, joint_count: usize) -> std::result::Result<(), String> {
        if self.joint >= joint_count {
            return Err(format!("joint {} does not exist", self.joint));
        }
        if !(self.radius > 0.0) || self.taper.is_some_and(|t| !(t > 0.0)) {
            return Err("radius must be positive".into());
        }
        if self.a == self.b {
            return Err("capsule endpoints coincide".into());
        }
        Ok(())
    }

    fn radius_at(&self, s: f64) -> f64 {
        match self.taper {
            Some(rb) => self.radius + (rb - self.radius) * s,
            None => self.radius,
        }
    }
}

/// Closest points between segments `p0p1` and `q0q1`: returns
/// `(distance, s, t)` with the closest points at `p0 + s (p1 - p0)` and
/// `q0 + t (q1 - q0)`. Degenerate and parallel segments fall back to endpoint
/// clamping.
pub fn closest_points_segments(p0: &Vec3, p1: &Vec3, q0: &Vec3, q1: &Vec3) -> (f64, f64, f64) {
    let d1 = p1 - p0;
    let d2 = q1 - q0;
    let r = p0 - q0;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    let eps = 1e-14;
    let (s, t);
    if a <= eps && e <= eps {
        s = 0.0;
        t = 0.0;
    } else if a <= eps {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= eps {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > eps * a * e {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    let cp = p0 + d1 * s;
    let cq = q0 + d2 * t;
    ((cp - cq).norm(), s, t)
}

fn lex_less(a: &[Vec3; 2], b: &[Vec3; 2]) -> bool {
    let ka = [a[0].x, a[0].y, a[0].z, a[1].x, a[1].y, a[1].z];
    let kb = [b[0].x, b[0].y, b[0].z, b[1].x, b[1].y, b[1].z];
    ka.partial_cmp(&kb) == Some(std::cmp::Ordering::Less)
}

/// Minimum distance between two segments. Symmetric bit for bit: the
/// arguments are put in a canonical order before evaluation.
pub fn segment_distance(p: [Vec3; 2], q: [Vec3; 2]) -> f64 {
    if lex_less(&q, &p) {
        closest_points_segments(&q[0], &q[1], &p[0], &p[1]).0
    } else {
        closest_points_segments(&p[0], &p[1], &q[0], &q[1]).0
    }
}

/// Overlap depth `max(0, r1 + r2 - d)` of two world-space capsules.
pub fn capsule_depth(p: [Vec3; 2], p_prim: &CollisionPrimitive, q: [Vec3; 2], q_prim: &CollisionPrimitive) -> f64 {
    let (d, s, t) = if lex_less(&q, &p) {
        let (d, t, s) = closest_points_segments(&q[0], &q[1], &p[0], &p[1]);
        (d, s, t)
    } else {
        closest_points_segments(&p[0], &p[1], &q[0], &q[1])
    };
    (p_prim.radius_at(s) + q_prim.radius_at(t) - d).max(0.0)
}

/// Joints separated by at most this many bones share a skipped pair.
pub const EXCLUSION_HOPS: usize = 2;

fn tree_distance(rig: &RigModel, a: usize, b: usize) -> usize {
    let chain = |mut j: usize| {
        let mut c = vec![j];
        while let Some(p) = rig.parent(j) {
            c.push(p);
            j = p;
        }
        c
    };
    let (ca, cb) = (chain(a), chain(b));
    for (i, ja) in ca.iter().enumerate() {
        if let Some(k) = cb.iter().position(|jb| jb == ja) {
            return i + k;
        }
    }
    usize::MAX
}

/// Pairs skipped by default: capsules on joints at most
/// [`EXCLUSION_HOPS`] bones apart, whose rest-pose overlap is by design.
pub fn default_exclusions(rig: &RigModel, prims: &[CollisionPrimitive]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..prims.len() {
        for j in i + 1..prims.len() {
            if tree_distance(rig, prims[i].joint, prims[j].joint) <= EXCLUSION_HOPS {
                out.push((i, j));
            }
        }
    }
    out
}

/// Frame indices nearest to the uniform grid `t0 + k / target_hz`.
pub fn downsample_indices(times: &[i64], source_hz: f64, target_hz: f64) -> Result<Vec<usize>> {
    if times.is_empty() {
        return Err(Error::InvalidInput("no frames to downsample".into()));
    }
    if !(target_hz > 0.0) {
        return Err(Error::InvalidInput("target rate must be positive".into()));
    }
    if target_hz > source_hz * (1.0 + 1e-9) {
        return Err(Error::InvalidInput(format!(
            "target rate {target_hz} Hz exceeds source rate {source_hz} Hz"
        )));
    }
    let t0 = times[0] as f64;
    let last = *times.last().unwrap() as f64;
    let period = 1e9 / target_hz;
    let mut out: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut k = 0u64;
    loop {
        let g = t0 + k as f64 * period;
        if g > last + 0.5 * period {
            break;
        }
        while cursor + 1 < times.len() && ((times[cursor + 1] as f64) - g).abs() < ((times[cursor] as f64) - g).abs() {
            cursor += 1;
        }
        if out.last() != Some(&cursor) && ((times[cursor] as f64) - g).abs() <= 0.5 * period {
            out.push(cursor);
        }
        k += 1;
    }
    Ok(out)
}

/// Nearest-frame downsampling (no pose interpolation).
pub fn downsample(motion: &MotionSequence, target_hz: f64) -> Result<MotionSequence> {
    let idx = downsample_indices(&motion.times(), motion.rate_hz, target_hz)?;
    Ok(select_frames(motion, &idx, target_hz))
}

pub(crate) fn select_frames(motion: &MotionSequence, idx: &[usize], rate_hz: f64) -> MotionSequence {
    MotionSequence {
        identity: motion.identity.clone(),
        frames: idx.iter().map(|&i| motion.frames[i].clone()).collect(),
        rate_hz,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WristError {
    /// Per frame `[left, right]` distances in cm; `None` where a wristband
    /// trajectory does not cover the frame.
    pub per_frame: Vec<Option<[f64; 2]>>,
    pub mean_cm: f64,
    pub skipped_frames: usize,
}

/// Distance (cm) between FK wrist joints and wristband positions. Any
/// constant wristband mounting offset stays in the error.
pub fn wrist_distance_error(motion: &MotionSequence, rig: &RigModel, wrists: [&Trajectory; 2]) -> Result<WristError> {
    motion.validate(rig)?;
    let named = *rig.named();
    let per_frame: Vec<Option<[f64; 2]>> = exec::map_slice(&motion.frames, |f| {
        if !wrists.iter().all(|w| w.covers(f.t_ns)) {
            return None;
        }
        let kin = Kinematics::of_frame(rig, &motion.identity, f);
        let mut d = [0.0; 2];
        for (k, joint) in named.wrists().into_iter().enumerate() {
            let band = wrists[k].interpolate(f.t_ns).ok()?;
            d[k] = (kin.positions[joint] - band.translation).norm() * 100.0;
        }
        Some(d)
    });
    let valid: Vec<&[f64; 2]> = per_frame.iter().flatten().collect();
    let skipped = per_frame.len() - valid.len();
    let mean = if valid.is_empty() {
        f64::NAN
    } else {
        valid.iter().map(|d| d[0] + d[1]).sum::<f64>() / (2.0 * valid.len() as f64)
    };
    Ok(WristError {
        per_frame,
        mean_cm: mean,
        skipped_frames: skipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenetrationError {
    /// Summed overlap depth (m) per frame.
    pub per_frame: Vec<f64>,
    pub mean: f64,
}

pub fn self_penetration_error(
    motion: &MotionSequence,
    rig: &RigModel,
    primitives: &[CollisionPrimitive],
    excluded_pairs: Option<&[(usize, usize)]>,
) -> Result<PenetrationError> {
    if primitives.is_empty() {
        return Err(Error::EmptyPrimitiveSet);
    }
    motion.validate(rig)?;
    for (k, p) in primitives.iter().enumerate() {
        p.validate(rig.joint_count())
            .map_err(|e| Error::InvalidInput(format!("primitive {k}: {e}")))?;
    }
    let default_ex;
    let excluded = match excluded_pairs {
        Some(e) => e,
        None => {
            default_ex = default_exclusions(rig, primitives);
            &default_ex
        }
    };
    let mut pairs = Vec::new();
    for i in 0..primitives.len() {
        for j in i + 1..primitives.len() {
            if !excluded.contains(&(i, j)) && !excluded.contains(&(j, i)) {
                pairs.push((i, j));
            }
        }
    }
    let per_frame = exec::map_slice(&motion.frames, |f| {
        let kin = Kinematics::of_frame(rig, &motion.identity, f);
        let segs: Vec<[Vec3; 2]> = primitives
            .iter()
            .map(|p| {
                [
                    kin.point(p.joint, &Vec3::from(p.a)),
                    kin.point(p.joint, &Vec3::from(p.b)),
                ]
            })
            .collect();
        pairs
            .iter()
            .map(|&(i, j)| capsule_depth(segs[i], &primitives[i], segs[j], &primitives[j]))
            .sum::<f64>()
    });
    let mean = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    Ok(PenetrationError { per_frame, mean })
}

/// Heel world positions per frame, `[left, right]`.
pub fn heel_positions(motion: &MotionSequence, rig: &RigModel) -> Vec<[Vec3; 2]> {
    let heels = rig.named().heels();
    exec::map_slice(&motion.frames, |f| {
        let kin = Kinematics::of_frame(rig, &motion.identity, f);
        [kin.positions[heels[0]], kin.positions[heels[1]]]
    })
}

/// Speeds by central differences over timestamps (one-sided at the ends).
pub fn finite_difference_speeds(times: &[i64], positions: &[Vec3]) -> Vec<f64> {
    let n = positions.len();
    if n < 2 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|k| {
            let (a, b) = if k == 0 {
                (0, 1)
            } else if k == n - 1 {
                (n - 2, n - 1)
            } else {
                (k - 1, k + 1)
            };
            let dt = (times[b] - times[a]) as f64 * 1e-9;
            (positions[b] - positions[a]).norm() / dt
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlidingResult {
    pub percent: f64,
    /// Per frame `[left, right]` sliding flags.
    pub flags: Vec<[bool; 2]>,
    pub contact_frames: usize,
    pub sliding_frames: usize,
}

/// Percentage of contact frames (pooled over both feet) whose heel speed
/// exceeds `threshold` m/s.
pub fn foot_sliding_percent(
    motion: &MotionSequence,
    rig: &RigModel,
    contacts: &ContactLabels,
    threshold: f64,
) -> Result<SlidingResult> {
    motion.validate(rig)?;
    if contacts.len() != motion.len() {
        return Err(Error::FrameMisalignment(format!(
            "{} contact labels for {} frames",
            contacts.len(),
            motion.len()
        )));
    }
    let heels = heel_positions(motion, rig);
    let times = motion.times();
    let mut flags = vec![[false; 2]; motion.len()];
    let mut contact_frames = 0;
    let mut sliding_frames = 0;
    for foot in 0..2 {
        let pos: Vec<Vec3> = heels.iter().map(|h| h[foot]).collect();
        let speeds = finite_difference_speeds(&times, &pos);
        let labels = contacts.foot(foot);
        for k in 0..motion.len() {
            if labels[k] {
                contact_frames += 1;
                if speeds[k] > threshold {
                    sliding_frames += 1;
                    flags[k][foot] = true;
                }
            }
        }
    }
    if contact_frames == 0 {
        return Err(Error::NoContactFrames);
    }
    Ok(SlidingResult {
        percent: 100.0 * sliding_frames as f64 / contact_frames as f64,
        flags,
        contact_frames,
        sliding_frames,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub wrist_mean_cm: f64,
    pub penetration_mean: f64,
    /// `None` when there are no contact frames.
    pub sliding_percent: Option<f64>,
    pub frames_evaluated: usize,
    pub frames_skipped: usize,
    pub fps_used: f64,
}

/// Downsamples and evaluates all three metrics with the rig's collision
/// primitives and default exclusions.
pub fn evaluate(
    motion: &MotionSequence,
    rig: &RigModel,
    wrists: [&Trajectory; 2],
    contacts: &ContactLabels,
    target_hz: f64,
) -> Result<MetricReport> {
    motion.validate(rig)?;
    if contacts.len() != motion.len() {
        return Err(Error::FrameMisalignment(format!(
            "{} contact labels for {} frames",
            contacts.len(),
            motion.len()
        )));
    }
    let fps = target_hz.min(motion.rate_hz);
    let idx = downsample_indices(&motion.times(), motion.rate_hz, fps)?;
    let ds = select_frames(motion, &idx, fps);
    let ds_contacts = contacts.select(&idx);
    let wrist = wrist_distance_error(&ds, rig, wrists)?;
    let pen = self_penetration_error(&ds, rig, rig.collision(), None)?;
    let sliding = match foot_sliding_percent(&ds, rig, &ds_contacts, DEFAULT_SLIDING_THRESHOLD) {
        Ok(s) => Some(s.percent),
        Err(Error::NoContactFrames) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricReport {
        wrist_mean_cm: wrist.mean_cm,
        penetration_mean: pen.mean,
        sliding_percent: sliding,
        frames_evaluated: ds.len() - wrist.skipped_frames,
        frames_skipped: wrist.skipped_frames,
        fps_used: fps,
    })
}
