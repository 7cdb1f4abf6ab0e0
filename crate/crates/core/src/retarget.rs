//! Inverse-kinematics retargeting of source-skeleton motion onto the rig.
//!
//! A sequence is retargeted in two stages. First a single identity is
//! estimated jointly with the poses of a strided subset of frames, with a
//! quadratic pull toward the regressed identity. The identity is then frozen
//! and every frame is solved for root and pose only, warm-started from its
//! predecessor. Frames are processed in chunks that start at strided frames,
//! so chunks are independent and may run in parallel.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::fuse::apply_frame_step;
use crate::geom::{kabsch, quat_log, so3_right_jacobian_inv, RigidTransform, Vec3};
use crate::io::{read_json, write_json};
use crate::rig::{Kinematics, MotionSequence, PoseFrame, RigModel, COL_POSE, COL_ROOT_R};
use crate::solver::{minimize, ArrowBlock, ArrowSystem, DenseSystem, LmProblem, LmReport, LmSettings, NormalEquations};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceFrame {
    pub t_ns: i64,
    /// `sourceframe_from_segment` per segment.
    #[serde(rename = "segments")]
    pub segment_poses: Vec<RigidTransform>,
    #[serde(rename = "landmarks")]
    pub landmark_positions: Vec<[f64; 3]>,
}

impl SourceFrame {
    pub fn landmark(&self, i: usize) -> Vec3 {
        Vec3::from(self.landmark_positions[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceMotion {
    pub rate_hz: f64,
    pub frames: Vec<SourceFrame>,
}

impl SourceMotion {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }

    /// Checks layout consistency, finiteness and timestamp order; errors
    /// name the offending frame.
    pub fn validate(&self) -> Result<()> {
        let first = self
            .frames
            .first()
            .ok_or_else(|| Error::InvalidInput("source motion has no frames".into()))?;
        let (ns, nl) = (first.segment_poses.len(), first.landmark_positions.len());
        for (k, f) in self.frames.iter().enumerate() {
            let bad = |msg: String| Err(Error::InvalidInput(msg).at_frame(k));
            if f.segment_poses.len() != ns || f.landmark_positions.len() != nl {
                return bad("segment or landmark count differs from frame 0".into());
            }
            if let Some(i) = f
                .landmark_positions
                .iter()
                .position(|p| p.iter().any(|v| !v.is_finite()))
            {
                return bad(format!("landmark {i} is not finite"));
            }
            if k > 0 && f.t_ns <= self.frames[k - 1].t_ns {
                return bad("timestamps not strictly increasing".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub source: usize,
    pub rig: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientationPair {
    pub segment: usize,
    pub joint: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetargetMap {
    pub correspondences: Vec<Correspondence>,
    #[serde(default)]
    pub segment_orientation_pairs: Vec<OrientationPair>,
}

impl RetargetMap {
    pub fn validate(&self, rig: &RigModel, segments: usize, landmarks: usize) -> Result<()> {
        for (i, c) in self.correspondences.iter().enumerate() {
            if c.source >= landmarks || c.rig >= rig.landmarks().len() {
                return Err(Error::InvalidInput(format!("correspondence {i} has an invalid index")));
            }
            if !(c.weight >= 0.0) || !c.weight.is_finite() {
                return Err(Error::InvalidInput(format!("correspondence {i} has an invalid weight")));
            }
        }
        for (i, p) in self.segment_orientation_pairs.iter().enumerate() {
            if p.segment >= segments || p.joint >= rig.joint_count() {
                return Err(Error::InvalidInput(format!(
                    "orientation pair {i} has an invalid index"
                )));
            }
            if !(p.weight >= 0.0) || !p.weight.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "orientation pair {i} has an invalid weight"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IkSettings {
    pub identity_reg_weight: f64,
    pub limit_weight: f64,
    /// Keeps DoFs that no landmark observes near zero.
    pub pose_reg_weight: f64,
    pub max_iterations: usize,
    /// Step-norm tolerance.
    pub tol: f64,
    /// Relative cost-decrease tolerance.
    pub tol_cost: f64,
    pub initial_damping: f64,
    /// Every `identity_stride`-th frame enters the identity stage; chunks of
    /// the pose stage start at these frames.
    pub identity_stride: usize,
}

impl Default for IkSettings {
    fn default() -> Self {
        Self {
            identity_reg_weight: 100.0,
            limit_weight: 100.0,
            pose_reg_weight: 1e-6,
            max_iterations: 400,
            tol: 1e-10,
            tol_cost: 1e-8,
            initial_damping: 1e-3,
            identity_stride: 60,
        }
    }
}

impl IkSettings {
    fn validate(&self) -> Result<()> {
        let pos = [
            self.identity_reg_weight,
            self.limit_weight,
            self.tol,
            self.tol_cost,
            self.initial_damping,
        ];
        if pos.iter().any(|v| !(*v > 0.0)) || !(self.pose_reg_weight >= 0.0) {
            return Err(Error::InvalidInput("IK weights and tolerances must be positive".into()));
        }
        if self.max_iterations == 0 || self.identity_stride == 0 {
            return Err(Error::InvalidInput("iteration cap and stride must be positive".into()));
        }
        Ok(())
    }

    fn lm(&self) -> LmSettings {
        LmSettings {
            max_iterations: self.max_iterations,
            tol_step: self.tol,
            tol_cost: self.tol_cost,
            initial_damping: self.initial_damping,
            damping_floor: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IkReport {
    pub landmark_rmse: f64,
    pub orientation_rms: f64,
    pub identity_cost: f64,
    pub limit_cost: f64,
    pub lm: LmReport,
}

struct Objective<'a> {
    rig: &'a RigModel,
    map: &'a RetargetMap,
    settings: &'a IkSettings,
}

#[derive(Default)]
struct Costs {
    landmarks: f64,
    orientation: f64,
    limits: f64,
    pose_reg: f64,
}

impl Objective<'_> {
    /// Frame residuals except the identity prior. With `ne` set, the normal
    /// equations over `[root, pose, identity?]` are accumulated.
    fn frame(
        &self,
        target: &SourceFrame,
        f: &PoseFrame,
        identity: &[f64],
        mut ne: Option<&mut NormalEquations>,
        with_identity: bool,
    ) -> Costs {
        let rig = self.rig;
        let kin = Kinematics::of_frame(rig, identity, f);
        let mut costs = Costs::default();
        let mut entries: Vec<(usize, Vec3)> = Vec::new();
        for c in &self.map.correspondences {
            if c.weight == 0.0 {
                continue;
            }
            let w = c.weight.sqrt();
            let lm = &rig.landmarks()[c.rig];
            let p = kin.point(lm.joint, &Vec3::from(lm.offset));
            let r = (p - target.landmark(c.source)) * w;
            costs.landmarks += r.norm_squared();
            if let Some(ne) = ne.as_deref_mut() {
                entries.clear();
                kin.for_each_point_column(rig, lm.joint, &p, with_identity, |col, d| entries.push((col, d * w)));
                ne.add_block3(&r, &entries);
            }
        }
        for o in &self.map.segment_orientation_pairs {
            if o.weight == 0.0 {
                continue;
            }
            let w = o.weight.sqrt();
            let rs = target.segment_poses[o.segment].rotation_matrix();
            let rj = kin.rotations[o.joint];
            let phi = quat_log(&RigidTransform::from_matrix(&(rs.transpose() * rj), Vec3::zeros()).rotation);
            let r = phi * w;
            costs.orientation += r.norm_squared();
            if let Some(ne) = ne.as_deref_mut() {
                let m = so3_right_jacobian_inv(&phi) * rj.transpose() * w;
                entries.clear();
                for a in 0..3 {
                    let axis: Vec3 = kin.rotations[0].column(a).into();
                    entries.push((COL_ROOT_R + a, m * axis));
                }
                for &k in rig.chain(o.joint) {
                    if let Some(s) = rig.dof_start(k) {
                        for d in 0..3 {
                            entries.push((COL_POSE + s + d, m * kin.dof_axes[s + d]));
                        }
                    }
                }
                ne.add_block3(&r, &entries);
            }
        }
        let sl = self.settings.limit_weight.sqrt();
        let sp = self.settings.pose_reg_weight.sqrt();
        for (i, &v) in f.pose.iter().enumerate() {
            let [lo, hi] = rig.limits()[i];
            let (r, d) = if v > hi {
                (sl * (v - hi), sl)
            } else if v < lo {
                (sl * (lo - v), -sl)
            } else {
                (0.0, 0.0)
            };
            costs.limits += r * r;
            if d != 0.0 {
                if let Some(ne) = ne.as_deref_mut() {
                    ne.add_diag(COL_POSE + i, d, r);
                }
            }
            if sp > 0.0 {
                costs.pose_reg += (sp * v).powi(2);
                if let Some(ne) = ne.as_deref_mut() {
                    ne.add_diag(COL_POSE + i, sp, sp * v);
                }
            }
        }
        costs
    }

    fn identity_cost(&self, identity: &[f64], prior: &[f64]) -> f64 {
        self.settings.identity_reg_weight * identity.iter().zip(prior).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    }

    fn total(&self, target: &SourceFrame, f: &PoseFrame, identity: &[f64]) -> f64 {
        let c = self.frame(target, f, identity, None, false);
        c.landmarks + c.orientation + c.limits + c.pose_reg
    }
}

struct FrameProblem<'a> {
    obj: Objective<'a>,
    target: &'a SourceFrame,
    prior: &'a [f64],
    solve_identity: bool,
}

type FrameState = (PoseFrame, Vec<f64>);

impl LmProblem for FrameProblem<'_> {
    type State = FrameState;
    type Lin = DenseSystem;

    fn cost(&self, s: &FrameState) -> f64 {
        let mut c = self.obj.total(self.target, &s.0, &s.1);
        if self.solve_identity {
            c += self.obj.identity_cost(&s.1, self.prior);
        }
        c
    }

    fn linearize(&self, s: &FrameState) -> DenseSystem {
        let n = self.obj.rig.frame_cols();
        let nid = if self.solve_identity { s.1.len() } else { 0 };
        let mut ne = NormalEquations::new(n + nid);
        self.obj
            .frame(self.target, &s.0, &s.1, Some(&mut ne), self.solve_identity);
        if self.solve_identity {
            let w = self.obj.settings.identity_reg_weight.sqrt();
            for m in 0..nid {
                ne.add_diag(n + m, w, w * (s.1[m] - self.prior[m]));
            }
        }
        DenseSystem(ne)
    }

    fn apply(&self, s: &FrameState, dx: &DVector<f64>) -> FrameState {
        let n = self.obj.rig.frame_cols();
        let frame = apply_frame_step(&s.0, &|c| dx[c]);
        let identity = if self.solve_identity {
            s.1.iter().enumerate().map(|(m, v)| v + dx[n + m]).collect()
        } else {
            s.1.clone()
        };
        (frame, identity)
    }
}

/// Root from a rigid fit of the rest-pose rig landmarks to the source
/// landmarks, with zero pose. Falls back to the identity root when fewer
/// than three correspondences are weighted.
pub fn kabsch_init(rig: &RigModel, map: &RetargetMap, target: &SourceFrame, identity: &[f64]) -> PoseFrame {
    let mut frame = PoseFrame::zero(rig, target.t_ns);
    let active: Vec<&Correspondence> = map.correspondences.iter().filter(|c| c.weight > 0.0).collect();
    if active.len() < 3 {
        return frame;
    }
    let kin = Kinematics::of_frame(rig, identity, &frame);
    let src: Vec<Vec3> = active
        .iter()
        .map(|c| {
            let lm = &rig.landmarks()[c.rig];
            kin.point(lm.joint, &Vec3::from(lm.offset))
        })
        .collect();
    let dst: Vec<Vec3> = active.iter().map(|c| target.landmark(c.source)).collect();
    let w: Vec<f64> = active.iter().map(|c| c.weight).collect();
    if let Some(t) = kabsch(&src, &dst, Some(&w)) {
        frame.root = t;
    }
    frame
}

fn report_for(obj: &Objective, target: &SourceFrame, s: &FrameState, prior: &[f64], lm: LmReport) -> IkReport {
    let c = obj.frame(target, &s.0, &s.1, None, false);
    let (mut lm_sq, mut lm_w) = (0.0, 0.0);
    let kin = Kinematics::of_frame(obj.rig, &s.1, &s.0);
    for c in &obj.map.correspondences {
        if c.weight > 0.0 {
            let l = &obj.rig.landmarks()[c.rig];
            lm_sq += (kin.point(l.joint, &Vec3::from(l.offset)) - target.landmark(c.source)).norm_squared();
            lm_w += 1.0;
        }
    }
    let npairs = obj.map.segment_orientation_pairs.len().max(1) as f64;
    IkReport {
        landmark_rmse: if lm_w > 0.0 { (lm_sq / lm_w).sqrt() } else { 0.0 },
        orientation_rms: (c.orientation / npairs).sqrt(),
        identity_cost: obj.identity_cost(&s.1, prior),
        limit_cost: c.limits,
        lm,
    }
}

/// Solves root, pose and identity for one frame, starting from `init`.
pub fn solve_ik_frame(
    rig: &RigModel,
    map: &RetargetMap,
    frame: &SourceFrame,
    identity_prior: &[f64],
    init: (&PoseFrame, &[f64]),
    settings: &IkSettings,
) -> Result<(PoseFrame, Vec<f64>, IkReport)> {
    settings.validate()?;
    rig.check_identity(identity_prior)?;
    rig.check_identity(init.1)?;
    rig.check_pose(&init.0.pose)?;
    map.validate(rig, frame.segment_poses.len(), frame.landmark_positions.len())?;
    solve_frame(
        rig,
        map,
        frame,
        identity_prior,
        (init.0.clone(), init.1.to_vec()),
        settings,
        true,
    )
}

fn solve_frame(
    rig: &RigModel,
    map: &RetargetMap,
    frame: &SourceFrame,
    prior: &[f64],
    init: FrameState,
    settings: &IkSettings,
    solve_identity: bool,
) -> Result<(PoseFrame, Vec<f64>, IkReport)> {
    let problem = FrameProblem {
        obj: Objective { rig, map, settings },
        target: frame,
        prior,
        solve_identity,
    };
    let mut init = init;
    init.0.t_ns = frame.t_ns;
    let (s, lm) = minimize(&problem, init, &settings.lm());
    let report = report_for(&problem.obj, frame, &s, prior, lm);
    Ok((s.0, s.1, report))
}

struct IdentityStage<'a> {
    obj: Objective<'a>,
    targets: Vec<&'a SourceFrame>,
    prior: &'a [f64],
}

impl LmProblem for IdentityStage<'_> {
    type State = (Vec<PoseFrame>, Vec<f64>);
    type Lin = ArrowSystem;

    fn cost(&self, s: &Self::State) -> f64 {
        let per = exec::map_indexed(self.targets.len(), |k| self.obj.total(self.targets[k], &s.0[k], &s.1));
        per.iter().sum::<f64>() + self.obj.identity_cost(&s.1, self.prior)
    }

    fn linearize(&self, s: &Self::State) -> ArrowSystem {
        let n = self.obj.rig.frame_cols();
        let nid = s.1.len();
        let parts = exec::map_indexed(self.targets.len(), |k| {
            let mut ne = NormalEquations::new(n + nid);
            self.obj.frame(self.targets[k], &s.0[k], &s.1, Some(&mut ne), true);
            ne
        });
        let mut h_shared = DMatrix::zeros(nid, nid);
        let mut g_shared = DVector::zeros(nid);
        let w = self.obj.settings.identity_reg_weight;
        for m in 0..nid {
            h_shared[(m, m)] += w;
            g_shared[m] += w * (s.1[m] - self.prior[m]);
        }
        let frames = parts
            .into_iter()
            .map(|ne| {
                h_shared += ne.h.view((n, n), (nid, nid));
                g_shared += ne.g.rows(n, nid);
                ArrowBlock {
                    h: ne.h.view((0, 0), (n, n)).into_owned(),
                    coupling: ne.h.view((0, n), (n, nid)).into_owned(),
                    g: ne.g.rows(0, n).into_owned(),
                }
            })
            .collect();
        ArrowSystem {
            frames,
            h_shared,
            g_shared,
        }
    }

    fn apply(&self, s: &Self::State, dx: &DVector<f64>) -> Self::State {
        let n = self.obj.rig.frame_cols();
        let m = s.0.len();
        let frames =
            s.0.iter()
                .enumerate()
                .map(|(k, f)| apply_frame_step(f, &|c| dx[k * n + c]))
                .collect();
        let identity = s.1.iter().enumerate().map(|(i, v)| v + dx[m * n + i]).collect();
        (frames, identity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetargetReport {
    pub identity_stage: LmReport,
    pub identity_frames: Vec<usize>,
    pub mean_landmark_rmse: f64,
    pub max_landmark_rmse: f64,
    pub nonconverged_frames: Vec<usize>,
}

/// Retargets a whole source motion; the result lives in the source frame.
pub fn retarget_sequence(
    rig: &RigModel,
    map: &RetargetMap,
    source: &SourceMotion,
    identity_prior: &[f64],
    settings: &IkSettings,
) -> Result<(MotionSequence, RetargetReport)> {
    settings.validate()?;
    rig.check_identity(identity_prior)?;
    source.validate()?;
    let first = &source.frames[0];
    map.validate(rig, first.segment_poses.len(), first.landmark_positions.len())?;
    let n = source.frames.len();
    let stride = settings.identity_stride;
    let keys: Vec<usize> = (0..n).step_by(stride).collect();

    // identity stage: per-key-frame poses at the prior identity, warm
    // started along the keys, then a joint refinement
    let obj = Objective { rig, map, settings };
    let mut key_frames: Vec<PoseFrame> = Vec::with_capacity(keys.len());
    for (i, &k) in keys.iter().enumerate() {
        let init = if i == 0 {
            kabsch_init(rig, map, &source.frames[k], identity_prior)
        } else {
            key_frames[i - 1].clone()
        };
        let (f, _, _) = solve_frame(
            rig,
            map,
            &source.frames[k],
            identity_prior,
            (init, identity_prior.to_vec()),
            settings,
            false,
        )
        .map_err(|e| e.at_frame(k))?;
        key_frames.push(f);
    }
    let stage = IdentityStage {
        obj,
        targets: keys.iter().map(|&k| &source.frames[k]).collect(),
        prior: identity_prior,
    };
    let ((key_frames, identity), identity_lm) = minimize(&stage, (key_frames, identity_prior.to_vec()), &settings.lm());

    // pose stage with the identity frozen
    let chunks = exec::map_indexed(keys.len(), |c| -> Result<Vec<(PoseFrame, IkReport)>> {
        let start = keys[c];
        let end = (start + stride).min(n);
        let mut out: Vec<(PoseFrame, IkReport)> = Vec::with_capacity(end - start);
        for k in start..end {
            let init = match out.last() {
                Some((f, _)) => f.clone(),
                None => key_frames[c].clone(),
            };
            let (f, _, rep) = solve_frame(
                rig,
                map,
                &source.frames[k],
                &identity,
                (init, identity.clone()),
                settings,
                false,
            )
            .map_err(|e| e.at_frame(k))?;
            out.push((f, rep));
        }
        Ok(out)
    });
    let mut frames = Vec::with_capacity(n);
    let mut rmse = Vec::with_capacity(n);
    let mut nonconverged = Vec::new();
    for chunk in chunks {
        for (f, rep) in chunk? {
            if !rep.lm.converged {
                nonconverged.push(frames.len());
            }
            rmse.push(rep.landmark_rmse);
            frames.push(f);
        }
    }
    if !nonconverged.is_empty() {
        log::warn!("{} frames did not converge during retargeting", nonconverged.len());
    }
    let motion = MotionSequence {
        identity,
        frames,
        rate_hz: source.rate_hz,
    };
    Ok((
        motion,
        RetargetReport {
            identity_stage: identity_lm,
            identity_frames: keys,
            mean_landmark_rmse: rmse.iter().sum::<f64>() / n as f64,
            max_landmark_rmse: rmse.iter().cloned().fold(0.0, f64::max),
            nonconverged_frames: nonconverged,
        },
    ))
}

/// Source landmarks generated by the rig itself (one per rig landmark), with
/// one segment per joint. Used for self-consistency checks.
pub fn rig_source_frame(rig: &RigModel, identity: &[f64], frame: &PoseFrame) -> SourceFrame {
    let kin = Kinematics::of_frame(rig, identity, frame);
    SourceFrame {
        t_ns: frame.t_ns,
        segment_poses: (0..rig.joint_count()).map(|j| kin.transform(j)).collect(),
        landmark_positions: rig
            .landmarks()
            .iter()
            .map(|l| kin.point(l.joint, &Vec3::from(l.offset)).into())
            .collect(),
    }
}

/// One unit-weight correspondence per rig landmark and a light orientation
/// pair per joint.
pub fn identity_map(rig: &RigModel) -> RetargetMap {
    RetargetMap {
        correspondences: (0..rig.landmarks().len())
            .map(|i| Correspondence {
                source: i,
                rig: i,
                weight: 1.0,
            })
            .collect(),
        segment_orientation_pairs: (0..rig.joint_count())
            .map(|j| OrientationPair {
                segment: j,
                joint: j,
                weight: 0.01,
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rig::desk_rig;
    use nalgebra::UnitQuaternion;

    fn some_pose(rig: &RigModel, t_ns: i64, s: f64) -> PoseFrame {
        let mut f = PoseFrame::zero(rig, t_ns);
        f.root = RigidTransform::new(
            UnitQuaternion::from_scaled_axis(Vec3::new(0.05, -0.02, 0.6)),
            Vec3::new(0.3, -0.2, 0.95),
        );
        for (i, v) in f.pose.iter_mut().enumerate() {
            let [lo, hi] = rig.limits()[i];
            *v = (s * ((i * 7 % 11) as f64 / 11.0 - 0.5)).clamp(lo * 0.5, hi * 0.5);
        }
        f
    }

    #[test]
    fn self_consistent_round_trip() {
        let rig = desk_rig();
        let identity = vec![0.02; rig.identity_dim()];
        let truth = some_pose(&rig, 0, 0.5);
        let src = rig_source_frame(&rig, &identity, &truth);
        let map = identity_map(&rig);
        let init = kabsch_init(&rig, &map, &src, &identity);
        let (_, id, rep) =
            solve_ik_frame(&rig, &map, &src, &identity, (&init, &identity), &IkSettings::default()).unwrap();
        assert!(rep.landmark_rmse < 1e-4, "{}", rep.landmark_rmse);
        assert!(id.iter().zip(&identity).all(|(a, b)| (a - b).abs() < 1e-3));
    }

    #[test]
    fn dominant_identity_prior_and_empty_map() {
        let rig = desk_rig();
        let truth = some_pose(&rig, 0, 0.3);
        let src = rig_source_frame(&rig, &vec![0.05; rig.identity_dim()], &truth);
        let prior = vec![-0.01; rig.identity_dim()];
        let settings = IkSettings {
            identity_reg_weight: 1e12,
            ..Default::default()
        };
        let map = identity_map(&rig);
        let init = kabsch_init(&rig, &map, &src, &prior);
        let (_, id, _) = solve_ik_frame(&rig, &map, &src, &prior, (&init, &prior), &settings).unwrap();
        assert!(id.iter().all(|v| (v + 0.01).abs() < 1e-6));

        let empty = RetargetMap::default();
        let start = PoseFrame::zero(&rig, 0);
        let off = vec![0.03; rig.identity_dim()];
        let (f, id, _) = solve_ik_frame(&rig, &empty, &src, &prior, (&start, &off), &IkSettings::default()).unwrap();
        assert!(f.pose.iter().all(|v| v.abs() < 1e-12));
        assert!(f.root.translation.norm() < 1e-12);
        assert!(id.iter().all(|v| (v + 0.01).abs() < 1e-9));
    }

    fn source_of(rig: &RigModel, identity: &[f64], frames: &[PoseFrame]) -> SourceMotion {
        SourceMotion {
            rate_hz: 240.0,
            frames: frames.iter().map(|f| rig_source_frame(rig, identity, f)).collect(),
        }
    }

    #[test]
    fn constant_source_gives_constant_motion() {
        let rig = desk_rig();
        let identity = rig.zero_identity();
        let frames: Vec<PoseFrame> = (0..100)
            .map(|k| {
                let mut f = some_pose(&rig, 0, 0.4);
                f.t_ns = k * 4_166_667;
                f
            })
            .collect();
        let src = source_of(&rig, &identity, &frames);
        let (m, _) = retarget_sequence(&rig, &identity_map(&rig), &src, &identity, &IkSettings::default()).unwrap();
        for f in &m.frames[1..] {
            assert!(f.root.translation_distance_to(&m.frames[0].root) < 1e-6);
            assert!(f.pose.iter().zip(&m.frames[0].pose).all(|(a, b)| (a - b).abs() < 1e-6));
        }
    }

    #[test]
    fn nan_landmark_names_frame() {
        let rig = desk_rig();
        let identity = rig.zero_identity();
        let frames: Vec<PoseFrame> = (0..10).map(|k| PoseFrame::zero(&rig, k * 1000)).collect();
        let mut src = source_of(&rig, &identity, &frames);
        src.frames[7].landmark_positions[3][1] = f64::NAN;
        let err = retarget_sequence(&rig, &identity_map(&rig), &src, &identity, &IkSettings::default()).unwrap_err();
        assert!(matches!(err, Error::AtFrame { frame: 7, .. }), "{err}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let rig = desk_rig();
        let identity = vec![0.02; rig.identity_dim()];
        let truth = some_pose(&rig, 0, 0.5);
        let src = rig_source_frame(&rig, &identity, &truth);
        let map = identity_map(&rig);
        let settings = IkSettings::default();
        let mut start = truth.clone();
        start.pose.iter_mut().for_each(|v| *v += 0.05);
        let problem = FrameProblem {
            obj: Objective {
                rig: &rig,
                map: &map,
                settings: &settings,
            },
            target: &src,
            prior: &identity,
            solve_identity: true,
        };
        let s = (start, vec![0.03; rig.identity_dim()]);
        let DenseSystem(ne) = problem.linearize(&s);
        let h = 1e-6;
        for c in 0..ne.g.len() {
            let mut dx = DVector::zeros(ne.g.len());
            dx[c] = h;
            let cp = problem.cost(&problem.apply(&s, &dx));
            dx[c] = -h;
            let cm = problem.cost(&problem.apply(&s, &dx));
            // cost = |r|^2, so its gradient is 2 J^T r
            let fd = (cp - cm) / (4.0 * h);
            assert!(
                (fd - ne.g[c]).abs() < 1e-6 * (1.0 + fd.abs()),
                "column {c}: {fd} vs {}",
                ne.g[c]
            );
        }
    }
}
