//! Hand-eye calibration of the head-segment-to-device transform and the
//! per-frame rigid alignment that pins the body's head to the device.
//!
//! With `X = device_from_headsegment`, a device trajectory `D(t)` and a
//! head-segment trajectory `H(t)` in a drifting source frame, relative
//! motions `A = D(t)^-1 D(t + dt)` and `B = H(t)^-1 H(t + dt)` satisfy
//! `A X = X B` whenever the source frame is stable over `dt`.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::geom::{nearest_rotation, quat_log, PoseSample, RigidTransform, Trajectory, Vec3};
use crate::rig::{Kinematics, MotionSequence, RigModel};

pub const DEFAULT_PAIR_SPACING_NS: i64 = 500_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandEyeResult {
    pub device_from_headsegment: RigidTransform,
    pub rotation_rms_rad: f64,
    pub translation_rms_m: f64,
    pub pair_count: usize,
}

/// Ratio of the second to the first singular value of the rotation-axis
/// scatter below which the axes are treated as parallel.
const AXIS_SPREAD_MIN: f64 = 1e-4;

pub fn estimate_handeye(
    device_traj: &Trajectory,
    head_traj: &Trajectory,
    pair_spacing_ns: i64,
) -> Result<HandEyeResult> {
    if pair_spacing_ns <= 0 {
        return Err(Error::InvalidInput("pair spacing must be positive".into()));
    }
    let start = device_traj.start_ns().max(head_traj.start_ns());
    let end = device_traj.end_ns().min(head_traj.end_ns());
    if end - start < 2 * pair_spacing_ns {
        return Err(Error::InsufficientOverlap(format!(
            "trajectories overlap for {} ns, need {} ns",
            (end - start).max(0),
            2 * pair_spacing_ns
        )));
    }
    // pair head samples with the sample nearest dt later so that both ends
    // fall on head timestamps
    let hs: Vec<&PoseSample> = head_traj
        .samples()
        .iter()
        .filter(|s| s.t_ns >= start && s.t_ns <= end)
        .collect();
    let mut pairs = Vec::new();
    let mut j = 0usize;
    for i in 0..hs.len() {
        let target = hs[i].t_ns + pair_spacing_ns;
        if target > end {
            break;
        }
        j = j.max(i + 1);
        while j + 1 < hs.len() && (hs[j + 1].t_ns - target).abs() <= (hs[j].t_ns - target).abs() {
            j += 1;
        }
        if j >= hs.len() {
            break;
        }
        let a = device_traj
            .interpolate(hs[i].t_ns)?
            .inverse()
            .compose(&device_traj.interpolate(hs[j].t_ns)?);
        let b = hs[i].pose.inverse().compose(&hs[j].pose);
        pairs.push((a, b));
    }
    if pairs.len() < 2 {
        return Err(Error::InsufficientOverlap(format!(
            "only {} relative-motion pairs",
            pairs.len()
        )));
    }

    let mut scatter_b = Matrix3::zeros();
    let mut m = Matrix3::zeros();
    for (a, b) in &pairs {
        let alpha = quat_log(&a.rotation);
        let beta = quat_log(&b.rotation);
        m += alpha * beta.transpose();
        scatter_b += beta * beta.transpose();
    }
    let sv = scatter_b.singular_values();
    let mut sv: Vec<f64> = sv.iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    if !(sv[0] > 0.0) || sv[1] < AXIS_SPREAD_MIN * sv[0] {
        return Err(Error::DegenerateMotion(
            "relative rotations share a single axis; translation along it is unobservable".into(),
        ));
    }
    let rx = nearest_rotation(&m);

    let mut lhs = Matrix3::zeros();
    let mut rhs = Vec3::zeros();
    for (a, b) in &pairs {
        let ra = a.rotation_matrix() - Matrix3::identity();
        let r = rx * b.translation - a.translation;
        lhs += ra.transpose() * ra;
        rhs += ra.transpose() * r;
    }
    let tx = lhs
        .cholesky()
        .ok_or_else(|| Error::DegenerateMotion("translation is unobservable".into()))?
        .solve(&rhs);
    let x = RigidTransform::from_matrix(&rx, tx);

    let (mut rot_sq, mut tr_sq) = (0.0, 0.0);
    for (a, b) in &pairs {
        let lhs = a.compose(&x);
        let rhs = x.compose(b);
        rot_sq += lhs.rotation_angle_to(&rhs).powi(2);
        tr_sq += (lhs.translation - rhs.translation).norm_squared();
    }
    let n = pairs.len() as f64;
    Ok(HandEyeResult {
        device_from_headsegment: x,
        rotation_rms_rad: (rot_sq / n).sqrt(),
        translation_rms_m: (tr_sq / n).sqrt(),
        pair_count: pairs.len(),
    })
}

/// FK pose of the head joint for every frame, as a trajectory in the
/// motion's frame.
pub fn head_trajectory(motion: &MotionSequence, rig: &RigModel, frame_id: &str) -> Result<Trajectory> {
    motion.validate(rig)?;
    let head = rig.named().head;
    let samples = exec::map_slice(&motion.frames, |f| PoseSample {
        t_ns: f.t_ns,
        pose: Kinematics::of_frame(rig, &motion.identity, f).transform(head),
    });
    Trajectory::new(frame_id, samples)
}

/// Re-expresses every frame in the device world so that the head joint sits
/// at `world_from_device(t) ∘ device_from_headsegment`. Local DoFs are kept.
pub fn rigid_align_sequence(
    theta_x: &MotionSequence,
    device_traj: &Trajectory,
    handeye: &HandEyeResult,
    rig: &RigModel,
) -> Result<MotionSequence> {
    theta_x.validate(rig)?;
    let head = rig.named().head;
    let x = handeye.device_from_headsegment;
    let frames = exec::map_indexed(theta_x.len(), |i| {
        let f = &theta_x.frames[i];
        let device = device_traj.interpolate(f.t_ns).map_err(|e| e.at_frame(i))?;
        let head_pose = Kinematics::of_frame(rig, &theta_x.identity, f).transform(head);
        let worldmap = device.compose(&x).compose(&head_pose.inverse());
        let mut out = f.clone();
        out.root = worldmap.compose(&f.root);
        Ok(out)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(MotionSequence {
        identity: theta_x.identity.clone(),
        frames,
        rate_hz: theta_x.rate_hz,
    })
}
