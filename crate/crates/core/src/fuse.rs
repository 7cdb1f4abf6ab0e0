//! Joint optimization of retargeted motion against head and wrist
//! trajectories.
//!
//! Per frame the variables are the root (translation plus a right tangent
//! rotation increment) and all pose DoFs; identity is frozen. The objective
//! sums six residual groups:
//!
//! * tracking: Huber-robust head and wrist position errors,
//! * pose prior: pose DoFs stay near the retargeted ones,
//! * limits: hinge penalties outside the DoF boxes,
//! * smoothness: first differences of root translation and rotation,
//! * gravity: the world up direction seen from the root matches the
//!   retargeted motion's (rotations about gravity are free),
//! * foot: heel displacement between consecutive contact frames, weighted by
//!   `lambda_0 + lambda_alpha * exp(-vel / v_sigma)`.
//!
//! Only root and heel-ancestor DoFs couple neighboring frames, so each
//! Gauss-Newton system is block tridiagonal after eliminating the remaining
//! per-frame DoFs (see [`crate::solver::BlockTridiagonal`]). Long sequences
//! are solved in batches that overlap by one frame; the shared frame is tied
//! to the previous batch's solution by a stiff penalty.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::geom::{quat_log, skew, so3_right_jacobian_inv, Mat3, Trajectory, Vec3};
use crate::quality::{finite_difference_speeds, heel_positions};
use crate::rig::{Kinematics, MotionSequence, PoseFrame, RigModel, COL_POSE, COL_ROOT_R, COL_ROOT_T};
use crate::solver::{minimize, BlockTridiagonal, LmProblem, LmReport, LmSettings, NormalEquations};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContactProvenance {
    Provided,
    DerivedFromVelocity,
}

/// Per-frame `[left, right]` heel contact flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactLabels {
    pub labels: Vec<[bool; 2]>,
    pub provenance: ContactProvenance,
}

impl ContactLabels {
    pub fn new(labels: Vec<[bool; 2]>, provenance: ContactProvenance) -> Self {
        Self { labels, provenance }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn foot(&self, foot: usize) -> Vec<bool> {
        self.labels.iter().map(|l| l[foot]).collect()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            provenance: self.provenance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub lambda_x: f64,
    pub lambda_l: f64,
    pub lambda_smooth: f64,
    pub lambda_g: f64,
    pub lambda_0: f64,
    pub lambda_alpha: f64,
    /// m/s
    pub v_sigma: f64,
    /// Huber scale of the tracking term (m).
    pub delta: f64,
    pub batch_size: usize,
    /// Heel speed (m/s) under which a frame counts as contact when labels
    /// are derived.
    pub eps_v: f64,
    pub seam_weight: f64,
    pub solver: LmSettings,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            lambda_x: 0.01,
            lambda_l: 100.0,
            lambda_smooth: 1.0,
            lambda_g: 1.0,
            lambda_0: 1.0,
            lambda_alpha: 99.0,
            v_sigma: 0.05,
            delta: 0.05,
            batch_size: 2000,
            eps_v: 0.05,
            seam_weight: 1e4,
            solver: LmSettings {
                max_iterations: 30,
                tol_step: 1e-9,
                tol_cost: 1e-9,
                initial_damping: 1e-3,
                damping_floor: 1e-9,
            },
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda_x", self.lambda_x),
            ("lambda_l", self.lambda_l),
            ("lambda_smooth", self.lambda_smooth),
            ("lambda_g", self.lambda_g),
            ("lambda_0", self.lambda_0),
            ("lambda_alpha", self.lambda_alpha),
            ("seam_weight", self.seam_weight),
            ("eps_v", self.eps_v),
        ];
        for (name, v) in weights {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput(format!("{name} must be a non-negative number")));
            }
        }
        if !(self.v_sigma > 0.0) {
            return Err(Error::InvalidInput("v_sigma must be positive".into()));
        }
        if !(self.delta > 0.0) {
            return Err(Error::InvalidInput("delta must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidInput("batch_size must be at least 2".into()));
        }
        Ok(())
    }
}

pub fn adaptive_foot_weight(vel_x: f64, cfg: &FusionConfig) -> Result<f64> {
    if vel_x < 0.0 || vel_x.is_nan() {
        return Err(Error::NegativeVelocity(vel_x));
    }
    Ok(cfg.lambda_0 + cfg.lambda_alpha * (-vel_x / cfg.v_sigma).exp())
}

fn heel_speeds(motion: &MotionSequence, rig: &RigModel) -> [Vec<f64>; 2] {
    let heels = heel_positions(motion, rig);
    let times = motion.times();
    let foot = |i: usize| {
        let p: Vec<Vec3> = heels.iter().map(|h| h[i]).collect();
        finite_difference_speeds(&times, &p)
    };
    [foot(0), foot(1)]
}

/// Contact where the heel speed of `theta_x` is below `eps_v`. A single
/// frame is in contact by convention.
pub fn derive_contacts(theta_x: &MotionSequence, rig: &RigModel, eps_v: f64) -> Result<ContactLabels> {
    theta_x.validate(rig)?;
    let [l, r] = heel_speeds(theta_x, rig);
    Ok(ContactLabels::new(
        l.iter().zip(&r).map(|(a, b)| [*a < eps_v, *b < eps_v]).collect(),
        ContactProvenance::DerivedFromVelocity,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Term {
    Tracking,
    PosePrior,
    Limits,
    Smoothness,
    Gravity,
    Foot,
    Seam,
}

pub const ALL_TERMS: [Term; 7] = [
    Term::Tracking,
    Term::PosePrior,
    Term::Limits,
    Term::Smoothness,
    Term::Gravity,
    Term::Foot,
    Term::Seam,
];

/// Squared residual norms per term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TermLosses {
    pub tracking: f64,
    pub pose_prior: f64,
    pub limits: f64,
    pub smoothness: f64,
    pub gravity: f64,
    pub foot: f64,
    pub seam: f64,
}

impl TermLosses {
    fn slot(&mut self, t: Term) -> &mut f64 {
        match t {
            Term::Tracking => &mut self.tracking,
            Term::PosePrior => &mut self.pose_prior,
            Term::Limits => &mut self.limits,
            Term::Smoothness => &mut self.smoothness,
            Term::Gravity => &mut self.gravity,
            Term::Foot => &mut self.foot,
            Term::Seam => &mut self.seam,
        }
    }

    pub fn get(&self, t: Term) -> f64 {
        let mut c = *self;
        *c.slot(t)
    }

    pub fn total(&self) -> f64 {
        self.tracking + self.pose_prior + self.limits + self.smoothness + self.gravity + self.foot + self.seam
    }

    fn add(&mut self, o: &TermLosses) {
        for t in ALL_TERMS {
            *self.slot(t) += o.get(t);
        }
    }
}

/// Receives residuals. Columns index frame parameters (`6 + dof_count` per
/// frame); pair terms use a second frame offset by one frame width.
trait Sink {
    const JAC: bool;
    fn block3(&mut self, term: Term, r: Vec3, entries: &[(usize, Vec3)]);
    fn scalar(&mut self, term: Term, r: f64, col: usize, d: f64);
}

#[derive(Default)]
struct CostSink(TermLosses);

impl Sink for CostSink {
    const JAC: bool = false;
    fn block3(&mut self, term: Term, r: Vec3, _: &[(usize, Vec3)]) {
        *self.0.slot(term) += r.norm_squared();
    }
    fn scalar(&mut self, term: Term, r: f64, _: usize, _: f64) {
        *self.0.slot(term) += r * r;
    }
}

/// Accumulates into permuted normal equations.
struct NormalSink<'a> {
    ne: NormalEquations,
    map: &'a dyn Fn(usize) -> usize,
    buf: Vec<(usize, Vec3)>,
}

impl Sink for NormalSink<'_> {
    const JAC: bool = true;
    fn block3(&mut self, _: Term, r: Vec3, entries: &[(usize, Vec3)]) {
        self.buf.clear();
        self.buf.extend(entries.iter().map(|&(c, d)| ((self.map)(c), d)));
        self.ne.add_block3(&r, &self.buf);
    }
    fn scalar(&mut self, _: Term, r: f64, col: usize, d: f64) {
        if d == 0.0 {
            self.ne.cost += r * r;
        } else {
            self.ne.add_diag((self.map)(col), d, r);
        }
    }
}

/// One residual row: term, value and sparse Jacobian entries.
type DenseRow = (Term, f64, Vec<(usize, f64)>);

/// Dense residual vector and Jacobian over two frames.
struct DenseSink {
    rows: Vec<DenseRow>,
}

impl Sink for DenseSink {
    const JAC: bool = true;
    fn block3(&mut self, term: Term, r: Vec3, entries: &[(usize, Vec3)]) {
        for i in 0..3 {
            self.rows
                .push((term, r[i], entries.iter().map(|&(c, d)| (c, d[i])).collect()));
        }
    }
    fn scalar(&mut self, term: Term, r: f64, col: usize, d: f64) {
        self.rows.push((term, r, vec![(col, d)]));
    }
}

/// Huber residual `phi(|e|) e` with `|r|^2` equal to the Huber loss, and
/// its Jacobian with respect to `e`.
pub fn huber_residual(e: &Vec3, delta: f64) -> (Vec3, Mat3) {
    let s = e.norm();
    if s <= delta {
        return (*e, Mat3::identity());
    }
    let q = (2.0 * delta * s - delta * delta).sqrt();
    let phi = q / s;
    let dphi = (delta * s - q * q) / (q * s * s);
    (e * phi, Mat3::identity() * phi + e * e.transpose() * (dphi / s))
}

/// Rotation vector taking `a` onto `b` (both unit) and its Jacobian with
/// respect to `a`.
pub fn alignment_residual(a: &Vec3, b: &Vec3) -> (Vec3, Mat3) {
    let c = a.cross(b);
    let s = c.norm();
    let d = a.dot(b);
    let theta = s.atan2(d);
    let nrm = s * s + d * d;
    let dc = -skew(b);
    let (g, gs, gd) = if s > 1e-9 {
        (theta / s, d / nrm / s - theta / (s * s), -1.0 / nrm)
    } else if d > 0.0 {
        (1.0 / d, 0.0, -1.0 / (d * d))
    } else {
        (theta / 1e-9, 0.0, 0.0)
    };
    let mut jac = dc * g + c * b.transpose() * gd;
    if gs != 0.0 {
        let ds = (c.transpose() * dc) / s;
        jac += c * ds * gs;
    }
    (c * g, jac)
}

/// Variable ordering inside a frame block: coupled variables first.
#[derive(Debug, Clone)]
struct Layout {
    n: usize,
    nc: usize,
    /// frame column -> block position
    perm: Vec<usize>,
}

impl Layout {
    fn new(rig: &RigModel) -> Self {
        let n = rig.frame_cols();
        let mut coupled: BTreeSet<usize> = (0..6).collect();
        for heel in rig.named().heels() {
            for &k in rig.chain(heel) {
                if k == heel {
                    continue;
                }
                if let Some(s) = rig.dof_start(k) {
                    coupled.extend((0..rig.joint(k).dofs).map(|d| COL_POSE + s + d));
                }
            }
        }
        let nc = coupled.len();
        let mut perm = vec![usize::MAX; n];
        for (i, &c) in coupled.iter().enumerate() {
            perm[c] = i;
        }
        let mut next = nc;
        for p in perm.iter_mut() {
            if *p == usize::MAX {
                *p = next;
                next += 1;
            }
        }
        Self { n, nc, perm }
    }
}

/// Per-frame data shared by all batches.
struct Context<'a> {
    rig: &'a RigModel,
    cfg: &'a FusionConfig,
    identity: &'a [f64],
    prior: &'a [PoseFrame],
    /// head, left wrist, right wrist
    targets: Vec<[Option<Vec3>; 3]>,
    /// world up seen from the retargeted root
    up_x: Vec<Vec3>,
    /// foot weight for pair `(k, k + 1)`, zero when not both in contact
    foot_w: Vec<[f64; 2]>,
    layout: Layout,
}

const UP: Vec3 = Vec3::new(0.0, 0.0, 1.0);

impl Context<'_> {
    fn frame_terms<S: Sink>(&self, g: usize, f: &PoseFrame, kin: &Kinematics, seam: Option<&PoseFrame>, sink: &mut S) {
        let rig = self.rig;
        let cfg = self.cfg;
        let named = rig.named();
        let joints = [named.head, named.left_wrist, named.right_wrist];
        let mut entries: Vec<(usize, Vec3)> = Vec::new();
        for (i, &j) in joints.iter().enumerate() {
            if let Some(t) = self.targets[g][i] {
                let (r, m) = huber_residual(&(kin.positions[j] - t), cfg.delta);
                entries.clear();
                if S::JAC {
                    kin.for_each_point_column(rig, j, &kin.positions[j], false, |c, d| entries.push((c, m * d)));
                }
                sink.block3(Term::Tracking, r, &entries);
            }
        }
        let sx = cfg.lambda_x.sqrt();
        let sl = cfg.lambda_l.sqrt();
        let prior = &self.prior[g].pose;
        let limits = rig.limits();
        for i in 0..f.pose.len() {
            let c = COL_POSE + i;
            if sx > 0.0 {
                sink.scalar(Term::PosePrior, sx * (f.pose[i] - prior[i]), c, sx);
            }
            if sl > 0.0 {
                let [lo, hi] = limits[i];
                let v = f.pose[i];
                if v > hi {
                    sink.scalar(Term::Limits, sl * (v - hi), c, sl);
                } else if v < lo {
                    sink.scalar(Term::Limits, sl * (lo - v), c, -sl);
                } else {
                    sink.scalar(Term::Limits, 0.0, c, 0.0);
                }
            }
        }
        if cfg.lambda_g > 0.0 {
            let sg = cfg.lambda_g.sqrt();
            let a = kin.rotations[0].transpose() * UP;
            let (r, ja) = alignment_residual(&a, &self.up_x[g]);
            let j = ja * skew(&a) * sg;
            entries.clear();
            if S::JAC {
                for k in 0..3 {
                    entries.push((COL_ROOT_R + k, j.column(k).into()));
                }
            }
            sink.block3(Term::Gravity, r * sg, &entries);
        }
        if let Some(s) = seam {
            let w = cfg.seam_weight.sqrt();
            entries.clear();
            if S::JAC {
                for k in 0..3 {
                    let mut e = Vec3::zeros();
                    e[k] = w;
                    entries.push((COL_ROOT_T + k, e));
                }
            }
            sink.block3(Term::Seam, (f.root.translation - s.root.translation) * w, &entries);
            let phi = quat_log(&(s.root.rotation.inverse() * f.root.rotation));
            entries.clear();
            if S::JAC {
                let j = so3_right_jacobian_inv(&phi) * w;
                for k in 0..3 {
                    entries.push((COL_ROOT_R + k, j.column(k).into()));
                }
            }
            sink.block3(Term::Seam, phi * w, &entries);
            for i in 0..f.pose.len() {
                sink.scalar(Term::Seam, w * (f.pose[i] - s.pose[i]), COL_POSE + i, w);
            }
        }
    }

    /// Terms between frames `g` and `g + 1`; second-frame columns are offset
    /// by one frame width.
    fn pair_terms<S: Sink>(
        &self,
        g: usize,
        f0: &PoseFrame,
        f1: &PoseFrame,
        k0: &Kinematics,
        k1: &Kinematics,
        sink: &mut S,
    ) {
        let n = self.layout.n;
        let cfg = self.cfg;
        let mut entries: Vec<(usize, Vec3)> = Vec::new();
        if cfg.lambda_smooth > 0.0 {
            let w = cfg.lambda_smooth.sqrt();
            if S::JAC {
                for k in 0..3 {
                    let mut e = Vec3::zeros();
                    e[k] = w;
                    entries.push((COL_ROOT_T + k, -e));
                    entries.push((n + COL_ROOT_T + k, e));
                }
            }
            sink.block3(
                Term::Smoothness,
                (f1.root.translation - f0.root.translation) * w,
                &entries,
            );
            let rel = f0.root.rotation.inverse() * f1.root.rotation;
            let phi = quat_log(&rel);
            entries.clear();
            if S::JAC {
                let jr = so3_right_jacobian_inv(&phi) * w;
                let j0 = -jr * rel.to_rotation_matrix().matrix().transpose();
                for k in 0..3 {
                    entries.push((COL_ROOT_R + k, j0.column(k).into()));
                    entries.push((n + COL_ROOT_R + k, jr.column(k).into()));
                }
            }
            sink.block3(Term::Smoothness, phi * w, &entries);
        }
        let heels = self.rig.named().heels();
        for foot in 0..2 {
            let wf = self.foot_w[g][foot];
            if wf <= 0.0 {
                continue;
            }
            let w = wf.sqrt();
            let h = heels[foot];
            entries.clear();
            if S::JAC {
                k0.for_each_point_column(self.rig, h, &k0.positions[h], false, |c, d| {
                    entries.push((c, -d * w));
                });
                k1.for_each_point_column(self.rig, h, &k1.positions[h], false, |c, d| {
                    entries.push((n + c, d * w));
                });
                // the heel's own DoFs have zero arms; dropping them leaves
                // only coupled columns
                entries.retain(|&(c, _)| self.layout.perm[c % n] < self.layout.nc);
            }
            sink.block3(Term::Foot, (k1.positions[h] - k0.positions[h]) * w, &entries);
        }
    }
}

struct Batch<'a> {
    ctx: &'a Context<'a>,
    start: usize,
    seam: Option<PoseFrame>,
}

impl Batch<'_> {
    fn kins(&self, frames: &[PoseFrame]) -> Vec<Kinematics> {
        exec::map_slice(frames, |f| Kinematics::of_frame(self.ctx.rig, self.ctx.identity, f))
    }

    fn losses(&self, frames: &[PoseFrame]) -> TermLosses {
        let kins = self.kins(frames);
        let per = exec::map_indexed(frames.len(), |k| {
            let mut s = CostSink::default();
            let seam = if k == 0 { self.seam.as_ref() } else { None };
            self.ctx.frame_terms(self.start + k, &frames[k], &kins[k], seam, &mut s);
            if k + 1 < frames.len() {
                self.ctx.pair_terms(
                    self.start + k,
                    &frames[k],
                    &frames[k + 1],
                    &kins[k],
                    &kins[k + 1],
                    &mut s,
                );
            }
            s.0
        });
        let mut total = TermLosses::default();
        for t in &per {
            total.add(t);
        }
        total
    }
}

impl LmProblem for Batch<'_> {
    type State = Vec<PoseFrame>;
    type Lin = BlockTridiagonal;

    fn cost(&self, frames: &Vec<PoseFrame>) -> f64 {
        self.losses(frames).total()
    }

    fn linearize(&self, frames: &Vec<PoseFrame>) -> BlockTridiagonal {
        let ctx = self.ctx;
        let lay = &ctx.layout;
        let (n, nc) = (lay.n, lay.nc);
        let kins = self.kins(frames);
        let m = frames.len();
        let parts = exec::map_indexed(m, |k| {
            let map = |c: usize| lay.perm[c];
            let mut fs = NormalSink {
                ne: NormalEquations::new(n),
                map: &map,
                buf: Vec::new(),
            };
            let seam = if k == 0 { self.seam.as_ref() } else { None };
            ctx.frame_terms(self.start + k, &frames[k], &kins[k], seam, &mut fs);
            let pair = (k + 1 < m).then(|| {
                let pmap = |c: usize| if c < n { lay.perm[c] } else { nc + lay.perm[c - n] };
                let mut ps = NormalSink {
                    ne: NormalEquations::new(2 * nc),
                    map: &pmap,
                    buf: Vec::new(),
                };
                ctx.pair_terms(
                    self.start + k,
                    &frames[k],
                    &frames[k + 1],
                    &kins[k],
                    &kins[k + 1],
                    &mut ps,
                );
                ps.ne
            });
            (fs.ne, pair)
        });
        let mut blocks: Vec<NormalEquations> = Vec::with_capacity(m);
        let mut off = Vec::with_capacity(m.saturating_sub(1));
        let mut pending: Option<NormalEquations> = None;
        for (mut ne, pair) in parts {
            if let Some(p) = pending.take() {
                // second half of the previous pair lands on this frame
                let mut v = ne.h.view_mut((0, 0), (nc, nc));
                v += p.h.view((nc, nc), (nc, nc));
                let mut gv = ne.g.rows_mut(0, nc);
                gv += p.g.rows(nc, nc);
            }
            if let Some(p) = pair {
                let mut v = ne.h.view_mut((0, 0), (nc, nc));
                v += p.h.view((0, 0), (nc, nc));
                let mut gv = ne.g.rows_mut(0, nc);
                gv += p.g.rows(0, nc);
                ne.cost += p.cost;
                off.push(p.h.view((0, nc), (nc, nc)).into_owned());
                pending = Some(p);
            }
            blocks.push(ne);
        }
        BlockTridiagonal {
            nc,
            frames: blocks,
            off,
        }
    }

    fn apply(&self, frames: &Vec<PoseFrame>, dx: &DVector<f64>) -> Vec<PoseFrame> {
        let lay = &self.ctx.layout;
        frames
            .iter()
            .enumerate()
            .map(|(k, f)| {
                let d = |c: usize| dx[k * lay.n + lay.perm[c]];
                apply_frame_step(f, &d)
            })
            .collect()
    }
}

/// `root <- root.retract(dt, omega)`, `pose <- pose + dtheta`, with the step
/// indexed by frame column.
pub fn apply_frame_step(f: &PoseFrame, d: &dyn Fn(usize) -> f64) -> PoseFrame {
    let dt = Vec3::new(d(COL_ROOT_T), d(COL_ROOT_T + 1), d(COL_ROOT_T + 2));
    let om = Vec3::new(d(COL_ROOT_R), d(COL_ROOT_R + 1), d(COL_ROOT_R + 2));
    PoseFrame {
        t_ns: f.t_ns,
        root: f.root.retract(&dt, &om),
        pose: f.pose.iter().enumerate().map(|(i, v)| v + d(COL_POSE + i)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub start: usize,
    pub end: usize,
    pub lm: LmReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub initial: TermLosses,
    #[serde(rename = "final")]
    pub final_: TermLosses,
    pub batches: Vec<BatchReport>,
    pub converged: bool,
}

/// Inputs of [`fuse_sequence`]. `head_traj` is the world pose of the head
/// joint (device trajectory composed with the hand-eye transform).
pub struct FusionInputs<'a> {
    pub theta_rigid: &'a MotionSequence,
    pub theta_x: &'a MotionSequence,
    pub head_traj: &'a Trajectory,
    pub wrist_trajs: [&'a Trajectory; 2],
    pub contacts: Option<&'a ContactLabels>,
}

fn check_alignment(a: &MotionSequence, b: &MotionSequence) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::FrameMisalignment(format!(
            "{} rigid frames vs {} retargeted frames",
            a.len(),
            b.len()
        )));
    }
    if let Some(i) = (0..a.len()).find(|&i| a.frames[i].t_ns != b.frames[i].t_ns) {
        return Err(Error::FrameMisalignment(format!("timestamps differ at frame {i}")));
    }
    if a.identity != b.identity {
        return Err(Error::FrameMisalignment("identity differs between inputs".into()));
    }
    Ok(())
}

fn build_context<'a>(inputs: &FusionInputs<'a>, rig: &'a RigModel, cfg: &'a FusionConfig) -> Result<Context<'a>> {
    cfg.validate()?;
    let rigid = inputs.theta_rigid;
    let theta_x = inputs.theta_x;
    rigid.validate(rig)?;
    theta_x.validate(rig)?;
    check_alignment(rigid, theta_x)?;
    let n = rigid.len();
    let trajs = [inputs.head_traj, inputs.wrist_trajs[0], inputs.wrist_trajs[1]];
    let targets = exec::map_slice(&rigid.frames, |f| {
        let mut t = [None; 3];
        for (i, tr) in trajs.iter().enumerate() {
            if tr.covers(f.t_ns) {
                t[i] = tr.interpolate(f.t_ns).ok().map(|p| p.translation);
            }
        }
        t
    });
    let up_x = theta_x.frames.iter().map(|f| f.root.rotation.inverse() * UP).collect();
    let mut foot_w = vec![[0.0; 2]; n.saturating_sub(1)];
    if cfg.lambda_0 > 0.0 || cfg.lambda_alpha > 0.0 {
        let (labels, speeds) = match inputs.contacts {
            Some(c) => {
                if c.len() != n {
                    return Err(Error::FrameMisalignment(format!(
                        "{} contact labels for {n} frames",
                        c.len()
                    )));
                }
                (c.clone(), None)
            }
            None => (
                derive_contacts(theta_x, rig, cfg.eps_v)?,
                Some(heel_speeds(theta_x, rig)),
            ),
        };
        for k in 0..n.saturating_sub(1) {
            for foot in 0..2 {
                if labels.labels[k][foot] && labels.labels[k + 1][foot] {
                    // provided contacts count as stationary
                    let vel = speeds.as_ref().map_or(0.0, |s| s[foot][k].max(s[foot][k + 1]));
                    foot_w[k][foot] = adaptive_foot_weight(vel, cfg)?;
                }
            }
        }
    }
    Ok(Context {
        rig,
        cfg,
        identity: &theta_x.identity,
        prior: &theta_x.frames,
        targets,
        up_x,
        foot_w,
        layout: Layout::new(rig),
    })
}

fn sequence_losses(ctx: &Context, frames: &[PoseFrame]) -> TermLosses {
    Batch {
        ctx,
        start: 0,
        seam: None,
    }
    .losses(frames)
}

/// Refines `theta_rigid` into world motion consistent with the trajectories.
pub fn fuse_sequence(
    inputs: &FusionInputs,
    rig: &RigModel,
    cfg: &FusionConfig,
) -> Result<(MotionSequence, FusionReport)> {
    let ctx = build_context(inputs, rig, cfg)?;
    let rigid = inputs.theta_rigid;
    let n = rigid.len();
    let mut out: Vec<PoseFrame> = rigid.frames.clone();
    let initial = sequence_losses(&ctx, &out);
    let mut batches = Vec::new();
    let mut start = 0usize;
    loop {
        let end = (start + cfg.batch_size - 1).min(n - 1);
        let seam = (start > 0).then(|| out[start].clone());
        let batch = Batch { ctx: &ctx, start, seam };
        let init = out[start..=end].to_vec();
        let (solved, lm) = minimize(&batch, init, &cfg.solver);
        if !lm.converged {
            log::warn!(
                "fusion batch {start}..={end} stopped after {} iterations",
                lm.iterations
            );
        }
        out[start..=end].clone_from_slice(&solved);
        batches.push(BatchReport { start, end, lm });
        if end == n - 1 {
            break;
        }
        start = end;
    }
    let final_ = sequence_losses(&ctx, &out);
    let converged = batches.iter().all(|b| b.lm.converged);
    Ok((
        MotionSequence {
            identity: rigid.identity.clone(),
            frames: out,
            rate_hz: rigid.rate_hz,
        },
        FusionReport {
            initial,
            final_,
            batches,
            converged,
        },
    ))
}

/// A two-frame probe of every residual type, for derivative checks.
pub struct ResidualProbe<'a> {
    pub rig: &'a RigModel,
    pub cfg: &'a FusionConfig,
    pub identity: &'a [f64],
    pub frames: [PoseFrame; 2],
    /// Retargeted frames (pose prior and gravity reference).
    pub prior: [PoseFrame; 2],
    pub targets: [[Option<Vec3>; 3]; 2],
    pub foot_weights: [f64; 2],
    /// Seam reference applied to the first frame.
    pub seam: Option<PoseFrame>,
}

impl ResidualProbe<'_> {
    /// Residuals of one term with their analytic Jacobian over both frames'
    /// parameters (`2 * frame_cols` columns).
    pub fn evaluate(&self, term: Term) -> (DVector<f64>, DMatrix<f64>) {
        let ctx = Context {
            rig: self.rig,
            cfg: self.cfg,
            identity: self.identity,
            prior: &self.prior,
            targets: self.targets.to_vec(),
            up_x: self.prior.iter().map(|f| f.root.rotation.inverse() * UP).collect(),
            foot_w: vec![self.foot_weights],
            layout: Layout::new(self.rig),
        };
        let n = ctx.layout.n;
        let k0 = Kinematics::of_frame(self.rig, self.identity, &self.frames[0]);
        let k1 = Kinematics::of_frame(self.rig, self.identity, &self.frames[1]);
        let mut sink = DenseSink { rows: Vec::new() };
        ctx.frame_terms(0, &self.frames[0], &k0, self.seam.as_ref(), &mut sink);
        let mut second = DenseSink { rows: Vec::new() };
        ctx.frame_terms(1, &self.frames[1], &k1, None, &mut second);
        for (t, r, row) in second.rows {
            sink.rows
                .push((t, r, row.into_iter().map(|(c, d)| (c + n, d)).collect()));
        }
        ctx.pair_terms(0, &self.frames[0], &self.frames[1], &k0, &k1, &mut sink);
        let rows: Vec<_> = sink.rows.into_iter().filter(|r| r.0 == term).collect();
        let mut r = DVector::zeros(rows.len());
        let mut j = DMatrix::zeros(rows.len(), 2 * n);
        for (i, (_, v, entries)) in rows.iter().enumerate() {
            r[i] = *v;
            for &(c, d) in entries {
                j[(i, c)] += d;
            }
        }
        (r, j)
    }
}

#[cfg(test)]
mod tests;
