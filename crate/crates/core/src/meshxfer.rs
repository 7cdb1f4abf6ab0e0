//! Cross-rig motion conversion through surface correspondences.
//!
//! A target-topology vertex is tied to a source triangle by barycentric
//! coordinates. Posed source meshes are re-topologized through these ties
//! and the target rig's parameters are fitted to the result by minimizing a
//! mean squared vertex loss plus a smooth-L1 edge loss.
//!
//! Fitting runs in three stages: a shared identity with poses on a few
//! diverse frames, then per-frame root only, then per-frame root and pose
//! alternated with identity refinement. Every stage uses Adam with step
//! rejection, so each stage's loss trace never increases.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Error, Result};
use crate::exec;
use crate::fuse::apply_frame_step;
use crate::geom::{kabsch, Vec3};
use crate::io::{read_json, write_json};
use crate::rig::{Kinematics, MotionSequence, PoseFrame, RestPose, RigModel, COL_POSE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaryEntry {
    pub tri: usize,
    pub bary: [f64; 3],
}

/// One entry per target vertex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SurfaceCorrespondence {
    pub entries: Vec<BaryEntry>,
}

impl SurfaceCorrespondence {
    pub fn validate(&self, source_faces: usize) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            if e.tri >= source_faces {
                return Err(Error::InvalidInput(format!(
                    "entry {i}: triangle {} out of range",
                    e.tri
                )));
            }
            let s: f64 = e.bary.iter().sum();
            if e.bary.iter().any(|b| !(*b >= 0.0)) || (s - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidInput(format!(
                    "entry {i}: invalid barycentric coordinates"
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }
}

/// Closest point of triangle `abc` to `p` as barycentric coordinates.
pub fn closest_point_barycentric(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> [f64; 3] {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return [1.0, 0.0, 0.0];
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return [0.0, 1.0, 0.0];
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return [1.0 - v, v, 0.0];
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return [0.0, 0.0, 1.0];
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return [1.0 - w, 0.0, w];
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return [0.0, 1.0 - w, w];
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    [1.0 - v - w, v, w]
}

fn bary_point(v: &[Vec3], f: &[usize; 3], b: &[f64; 3]) -> Vec3 {
    v[f[0]] * b[0] + v[f[1]] * b[1] + v[f[2]] * b[2]
}

/// For every target vertex, the closest point on the source surface.
/// Degenerate source triangles are skipped.
pub fn build_correspondence(
    source_vertices: &[Vec3],
    source_faces: &[[usize; 3]],
    target_vertices: &[Vec3],
) -> Result<SurfaceCorrespondence> {
    for (i, f) in source_faces.iter().enumerate() {
        if f.iter().any(|&v| v >= source_vertices.len()) {
            return Err(Error::InvalidInput(format!(
                "source face {i} references a missing vertex"
            )));
        }
    }
    let valid: Vec<usize> = (0..source_faces.len())
        .filter(|&i| {
            let [a, b, c] = source_faces[i].map(|v| source_vertices[v]);
            let area2 = (b - a).cross(&(c - a)).norm();
            let scale = (b - a).norm_squared().max((c - a).norm_squared()).max(1e-300);
            area2 > 1e-12 * scale
        })
        .collect();
    if valid.len() < source_faces.len() {
        log::warn!(
            "skipped {} degenerate source triangles",
            source_faces.len() - valid.len()
        );
    }
    if valid.is_empty() {
        return Err(Error::InvalidInput("source mesh has no usable triangles".into()));
    }
    let entries = exec::map_slice(target_vertices, |p| {
        let mut best = (f64::INFINITY, 0usize, [1.0, 0.0, 0.0]);
        for &i in &valid {
            let f = &source_faces[i];
            let b = closest_point_barycentric(
                p,
                &source_vertices[f[0]],
                &source_vertices[f[1]],
                &source_vertices[f[2]],
            );
            let d = (bary_point(source_vertices, f, &b) - p).norm_squared();
            if d < best.0 {
                best = (d, i, b);
            }
        }
        BaryEntry {
            tri: best.1,
            bary: best.2,
        }
    });
    Ok(SurfaceCorrespondence { entries })
}

/// Target-topology vertices interpolated from a posed source mesh.
pub fn retopologize(
    source_posed: &[Vec3],
    source_faces: &[[usize; 3]],
    corr: &SurfaceCorrespondence,
) -> Result<Vec<Vec3>> {
    corr.validate(source_faces.len())?;
    corr.entries
        .iter()
        .map(|e| {
            let f = &source_faces[e.tri];
            if f.iter().any(|&v| v >= source_posed.len()) {
                return Err(Error::InvalidInput(
                    "posed mesh is smaller than the source topology".into(),
                ));
            }
            Ok(bary_point(source_posed, f, &e.bary))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub lambda_e: f64,
    pub sparse_frames: usize,
    /// Iteration caps of the three stages.
    pub stage_iterations: [usize; 3],
    /// Pose / identity alternations in the last stage.
    pub refinement_rounds: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub growth: f64,
    pub shrink: f64,
    pub min_learning_rate: f64,
    /// Stop when the gradient norm falls below this.
    pub grad_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda_e: 1.0,
            sparse_frames: 5,
            stage_iterations: [600, 200, 1500],
            refinement_rounds: 2,
            learning_rate: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            growth: 1.2,
            shrink: 0.5,
            min_learning_rate: 1e-12,
            grad_tol: 1e-12,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_e >= 0.0) || !self.lambda_e.is_finite() {
            return Err(Error::InvalidInput("lambda_e must be non-negative".into()));
        }
        if self.sparse_frames == 0 || self.refinement_rounds == 0 {
            return Err(Error::InvalidInput(
                "sparse frame count and refinement rounds must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.growth >= 1.0)
            || !(self.shrink > 0.0 && self.shrink < 1.0)
        {
            return Err(Error::InvalidInput("invalid optimizer schedule".into()));
        }
        Ok(())
    }
}

const EDGE_EPS: f64 = 1e-8;

/// `Σ_c sqrt(r_c² + ε) − sqrt(ε)`: zero at zero and differentiable.
fn smooth_l1(r: &Vec3) -> f64 {
    r.iter().map(|x| (x * x + EDGE_EPS).sqrt() - EDGE_EPS.sqrt()).sum()
}

fn smooth_l1_grad(r: &Vec3) -> Vec3 {
    r.map(|x| x / (x * x + EDGE_EPS).sqrt())
}

/// Per-frame losses: mean squared vertex distance and mean edge term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeshLoss {
    pub vertex: f64,
    pub edge: f64,
}

impl MeshLoss {
    pub fn total(&self, lambda_e: f64) -> f64 {
        self.vertex + lambda_e * self.edge
    }
}

pub fn mesh_loss(rig: &RigModel, x: &[Vec3], target: &[Vec3]) -> MeshLoss {
    let nv = x.len() as f64;
    let vertex = x.iter().zip(target).map(|(a, b)| (a - b).norm_squared()).sum::<f64>() / nv;
    let edges = rig.edges();
    let edge = if edges.is_empty() {
        0.0
    } else {
        edges
            .iter()
            .map(|&[i, j]| smooth_l1(&((x[i] - x[j]) - (target[i] - target[j]))))
            .sum::<f64>()
            / edges.len() as f64
    };
    MeshLoss { vertex, edge }
}

/// d loss / d vertex position.
fn vertex_gradients(rig: &RigModel, x: &[Vec3], target: &[Vec3], lambda_e: f64) -> Vec<Vec3> {
    let nv = x.len() as f64;
    let mut g: Vec<Vec3> = x.iter().zip(target).map(|(a, b)| (a - b) * (2.0 / nv)).collect();
    let edges = rig.edges();
    if lambda_e > 0.0 && !edges.is_empty() {
        let s = lambda_e / edges.len() as f64;
        for &[i, j] in edges {
            let ge = smooth_l1_grad(&((x[i] - x[j]) - (target[i] - target[j]))) * s;
            g[i] += ge;
            g[j] -= ge;
        }
    }
    g
}

/// Which parameter blocks a frame optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Free {
    Root,
    RootPose,
}

/// Loss and gradient for one frame. The gradient has `6 + dofs` entries
/// (root translation, right rotation increment, pose) followed by identity
/// entries when `with_identity` is set.
fn frame_loss_grad(
    rig: &RigModel,
    identity: &[f64],
    frame: &PoseFrame,
    target: &[Vec3],
    lambda_e: f64,
    with_identity: bool,
) -> (f64, DVector<f64>) {
    let kin = Kinematics::of_frame(rig, identity, frame);
    let rest = RestPose::new(rig, identity);
    let x = kin.skin(rig, &rest);
    let loss = mesh_loss(rig, &x, target).total(lambda_e);
    let gv = vertex_gradients(rig, &x, target, lambda_e);
    let n = rig.frame_cols() + if with_identity { rig.identity_dim() } else { 0 };
    let mut grad = DVector::zeros(n);
    for (v, g) in gv.iter().enumerate() {
        kin.for_each_vertex_column(rig, &rest, v, with_identity, |c, d| grad[c] += g.dot(&d));
    }
    (loss, grad)
}

fn frame_loss(rig: &RigModel, identity: &[f64], frame: &PoseFrame, target: &[Vec3], lambda_e: f64) -> f64 {
    let kin = Kinematics::of_frame(rig, identity, frame);
    let x = kin.skin(rig, &RestPose::new(rig, identity));
    mesh_loss(rig, &x, target).total(lambda_e)
}

struct Adam {
    m: DVector<f64>,
    v: DVector<f64>,
    t: i32,
    lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamTrace {
    pub losses: Vec<f64>,
    pub converged: bool,
}

/// Adam with step rejection over an abstract parameter update. `eval`
/// returns loss and gradient; `loss` alone; `apply` builds the candidate.
fn adam_minimize<S: Clone>(
    init: S,
    dim: usize,
    iterations: usize,
    cfg: &FitConfig,
    eval: impl Fn(&S) -> (f64, DVector<f64>),
    loss: impl Fn(&S) -> f64,
    apply: impl Fn(&S, &DVector<f64>) -> S,
) -> (S, AdamTrace) {
    let mut opt = Adam {
        m: DVector::zeros(dim),
        v: DVector::zeros(dim),
        t: 0,
        lr: cfg.learning_rate,
    };
    let mut state = init;
    let (mut cur, mut grad) = eval(&state);
    let mut trace = AdamTrace {
        losses: vec![cur],
        converged: false,
    };
    for _ in 0..iterations {
        if grad.norm() <= cfg.grad_tol || cur == 0.0 {
            trace.converged = true;
            break;
        }
        opt.t += 1;
        opt.m = &opt.m * cfg.beta1 + &grad * (1.0 - cfg.beta1);
        opt.v = &opt.v * cfg.beta2 + grad.component_mul(&grad) * (1.0 - cfg.beta2);
        let mh = &opt.m / (1.0 - cfg.beta1.powi(opt.t));
        let vh = &opt.v / (1.0 - cfg.beta2.powi(opt.t));
        let dir = mh.zip_map(&vh, |m, v| m / (v.sqrt() + 1e-12));
        let mut accepted = false;
        while opt.lr >= cfg.min_learning_rate {
            let cand = apply(&state, &(&dir * -opt.lr));
            let l = loss(&cand);
            if l <= cur {
                state = cand;
                accepted = true;
                opt.lr = (opt.lr * cfg.growth).min(cfg.learning_rate);
                break;
            }
            opt.lr *= cfg.shrink;
            // a rejected direction is also evidence the moments are stale
            opt.m *= 0.0;
        }
        if !accepted {
            trace.converged = true;
            break;
        }
        let (l, g) = eval(&state);
        cur = l;
        grad = g;
        trace.losses.push(cur);
    }
    (state, trace)
}

/// Rigid fit of the zero-pose skinned rig to `target`.
fn kabsch_root(rig: &RigModel, identity: &[f64], target: &[Vec3], t_ns: i64) -> PoseFrame {
    let mut f = PoseFrame::zero(rig, t_ns);
    let rest = skin_rest(rig, identity);
    if let Some(t) = kabsch(&rest, target, None) {
        f.root = t;
    }
    f
}

fn skin_rest(rig: &RigModel, identity: &[f64]) -> Vec<Vec3> {
    let f = PoseFrame::zero(rig, 0);
    Kinematics::of_frame(rig, identity, &f).skin(rig, &RestPose::new(rig, identity))
}

/// Greedy farthest-point frame selection. Frames are compared by mean
/// vertex distance after rigid alignment to the rest mesh; the seed is the
/// frame farthest from rest. Ties go to the lowest index.
pub fn select_sparse_frames(rig: &RigModel, targets: &[Vec<Vec3>], count: usize) -> Vec<usize> {
    let rest = skin_rest(rig, &rig.zero_identity());
    let aligned: Vec<Vec<Vec3>> = exec::map_slice(targets, |t| match kabsch(t, &rest, None) {
        Some(g) => t.iter().map(|p| g.transform_point(p)).collect(),
        None => t.clone(),
    });
    let dist = |a: &[Vec3], b: &[Vec3]| a.iter().zip(b).map(|(p, q)| (p - q).norm()).sum::<f64>() / a.len() as f64;
    let mut first = 0;
    let mut best = f64::NEG_INFINITY;
    for (i, a) in aligned.iter().enumerate() {
        let d = dist(a, &rest);
        if d > best {
            best = d;
            first = i;
        }
    }
    let take = count.min(targets.len());
    let mut chosen = vec![first];
    let mut min_d: Vec<f64> = aligned.iter().map(|a| dist(a, &aligned[first])).collect();
    while chosen.len() < take {
        let mut pick = None;
        for i in 0..aligned.len() {
            if !chosen.contains(&i) && pick.is_none_or(|p: usize| min_d[i] > min_d[p]) {
                pick = Some(i);
            }
        }
        let p = pick.expect("unchosen frame exists");
        chosen.push(p);
        for i in 0..aligned.len() {
            min_d[i] = min_d[i].min(dist(&aligned[i], &aligned[p]));
        }
    }
    chosen
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub selected_frames: Vec<usize>,
    /// Mean per-frame loss after each accepted step, per stage.
    pub stage_traces: [Vec<f64>; 3],
    pub final_loss: MeshLoss,
    pub vertex_rmse: f64,
    pub nonconverged_frames: Vec<usize>,
}

/// Fits the target rig to per-frame target-topology vertex lists.
pub fn fit_parameters(
    rig: &RigModel,
    targets: &[Vec<Vec3>],
    times: &[i64],
    rate_hz: f64,
    cfg: &FitConfig,
) -> Result<(MotionSequence, FitReport)> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(Error::InvalidInput("no target frames".into()));
    }
    dim_check("frame timestamps", targets.len(), times.len())?;
    let nv = rig.template().len();
    for (k, t) in targets.iter().enumerate() {
        dim_check("target vertex count", nv, t.len()).map_err(|e| e.at_frame(k))?;
    }
    let nf = targets.len();
    let ncol = rig.frame_cols();
    let nid = rig.identity_dim();
    let lam = cfg.lambda_e;

    // stage 1: shared identity with poses on diverse frames
    let sel = select_sparse_frames(rig, targets, cfg.sparse_frames);
    let ns = sel.len();
    let init: (Vec<PoseFrame>, Vec<f64>) = (
        sel.iter()
            .map(|&k| kabsch_root(rig, &rig.zero_identity(), &targets[k], times[k]))
            .collect(),
        rig.zero_identity(),
    );
    let (s1, trace1) = adam_minimize(
        init,
        ns * ncol + nid,
        cfg.stage_iterations[0],
        cfg,
        |s| {
            let parts = exec::map_indexed(ns, |i| frame_loss_grad(rig, &s.1, &s.0[i], &targets[sel[i]], lam, true));
            let mut g = DVector::zeros(ns * ncol + nid);
            let mut l = 0.0;
            for (i, (li, gi)) in parts.into_iter().enumerate() {
                l += li;
                g.rows_mut(i * ncol, ncol).copy_from(&gi.rows(0, ncol));
                let mut gid = g.rows_mut(ns * ncol, nid);
                gid += gi.rows(ncol, nid);
            }
            (l / ns as f64, g / ns as f64)
        },
        |s| {
            exec::map_indexed(ns, |i| frame_loss(rig, &s.1, &s.0[i], &targets[sel[i]], lam))
                .iter()
                .sum::<f64>()
                / ns as f64
        },
        |s, d| {
            let frames =
                s.0.iter()
                    .enumerate()
                    .map(|(i, f)| apply_frame_step(f, &|c| d[i * ncol + c]))
                    .collect();
            let id = s.1.iter().enumerate().map(|(m, v)| v + d[ns * ncol + m]).collect();
            (frames, id)
        },
    );
    let mut identity = s1.1;

    // stage 2: per-frame root only
    let stage2 = exec::map_indexed(nf, |k| {
        let init = kabsch_root(rig, &identity, &targets[k], times[k]);
        fit_frame(
            rig,
            &identity,
            init,
            &targets[k],
            cfg,
            Free::Root,
            cfg.stage_iterations[1],
        )
    });
    let trace2 = merge_traces(stage2.iter().map(|(_, t)| &t.losses));
    let mut frames: Vec<PoseFrame> = stage2.into_iter().map(|(f, _)| f).collect();

    // stage 3: per-frame root and pose, alternated with identity refinement
    let mut trace3: Vec<f64> = Vec::new();
    let mut converged = vec![true; nf];
    let per_round = cfg.stage_iterations[2] / cfg.refinement_rounds;
    for _ in 0..cfg.refinement_rounds {
        let res = exec::map_indexed(nf, |k| {
            fit_frame(
                rig,
                &identity,
                frames[k].clone(),
                &targets[k],
                cfg,
                Free::RootPose,
                per_round,
            )
        });
        let t = merge_traces(res.iter().map(|(_, t)| &t.losses));
        for (k, (f, tr)) in res.into_iter().enumerate() {
            converged[k] = tr.converged;
            frames[k] = f;
        }
        append_trace(&mut trace3, &t);
        let (id, tr) = adam_minimize(
            identity.clone(),
            nid,
            per_round / 4 + 1,
            cfg,
            |id| {
                let parts = exec::map_indexed(nf, |k| frame_loss_grad(rig, id, &frames[k], &targets[k], lam, true));
                let mut g = DVector::zeros(nid);
                let mut l = 0.0;
                for (li, gi) in parts {
                    l += li;
                    g += gi.rows(ncol, nid);
                }
                (l / nf as f64, g / nf as f64)
            },
            |id| {
                exec::map_indexed(nf, |k| frame_loss(rig, id, &frames[k], &targets[k], lam))
                    .iter()
                    .sum::<f64>()
                    / nf as f64
            },
            |id, d| id.iter().enumerate().map(|(m, v)| v + d[m]).collect(),
        );
        identity = id;
        append_trace(&mut trace3, &tr.losses);
    }

    let losses = exec::map_indexed(nf, |k| {
        let kin = Kinematics::of_frame(rig, &identity, &frames[k]);
        let x = kin.skin(rig, &RestPose::new(rig, &identity));
        let sq: f64 = x.iter().zip(&targets[k]).map(|(a, b)| (a - b).norm_squared()).sum();
        (mesh_loss(rig, &x, &targets[k]), sq)
    });
    let mut final_loss = MeshLoss::default();
    let mut sq = 0.0;
    for (l, s) in &losses {
        final_loss.vertex += l.vertex / nf as f64;
        final_loss.edge += l.edge / nf as f64;
        sq += s;
    }
    let nonconverged: Vec<usize> = (0..nf).filter(|&k| !converged[k]).collect();
    if !nonconverged.is_empty() {
        log::warn!(
            "{} frames hit the iteration cap during mesh fitting",
            nonconverged.len()
        );
    }
    let motion = MotionSequence {
        identity,
        frames,
        rate_hz,
    };
    Ok((
        motion,
        FitReport {
            selected_frames: sel,
            stage_traces: [trace1.losses, trace2, trace3],
            final_loss,
            vertex_rmse: (sq / (nf * nv) as f64).sqrt(),
            nonconverged_frames: nonconverged,
        },
    ))
}

fn fit_frame(
    rig: &RigModel,
    identity: &[f64],
    init: PoseFrame,
    target: &[Vec3],
    cfg: &FitConfig,
    free: Free,
    iterations: usize,
) -> (PoseFrame, AdamTrace) {
    let ncol = rig.frame_cols();
    let dim = if free == Free::Root { 6 } else { ncol };
    adam_minimize(
        init,
        dim,
        iterations,
        cfg,
        |f| {
            let (l, g) = frame_loss_grad(rig, identity, f, target, cfg.lambda_e, false);
            (l, g.rows(0, dim).into_owned())
        },
        |f| frame_loss(rig, identity, f, target, cfg.lambda_e),
        |f, d| apply_frame_step(f, &|c| if c < dim { d[c] } else { 0.0 }),
    )
}

/// Mean over independent traces, holding each at its last value.
fn merge_traces<'a>(traces: impl Iterator<Item = &'a Vec<f64>>) -> Vec<f64> {
    let traces: Vec<&Vec<f64>> = traces.collect();
    let len = traces.iter().map(|t| t.len()).max().unwrap_or(0);
    (0..len)
        .map(|i| traces.iter().map(|t| t[i.min(t.len() - 1)]).sum::<f64>() / traces.len() as f64)
        .collect()
}

/// Appends `t`, dropping its first value when it repeats the current end.
fn append_trace(trace: &mut Vec<f64>, t: &[f64]) {
    let skip = usize::from(!trace.is_empty() && !t.is_empty());
    trace.extend_from_slice(&t[skip..]);
}

/// Residual blocks of the conversion loss for derivative checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshTerm {
    /// `x_v − t_v` per vertex.
    Vertex,
    /// `(x_i − x_j) − (t_i − t_j)` per edge.
    Edge,
}

/// Residuals and analytic Jacobian over `[root, pose, identity]` columns.
pub fn mesh_residuals(
    rig: &RigModel,
    identity: &[f64],
    frame: &PoseFrame,
    target: &[Vec3],
    term: MeshTerm,
) -> (DVector<f64>, DMatrix<f64>) {
    let kin = Kinematics::of_frame(rig, identity, frame);
    let rest = RestPose::new(rig, identity);
    let x = kin.skin(rig, &rest);
    let n = rig.frame_cols() + rig.identity_dim();
    let nv = x.len();
    let mut jv = DMatrix::zeros(3 * nv, n);
    for v in 0..nv {
        kin.for_each_vertex_column(rig, &rest, v, true, |c, d| {
            for a in 0..3 {
                jv[(3 * v + a, c)] += d[a];
            }
        });
    }
    match term {
        MeshTerm::Vertex => {
            let mut r = DVector::zeros(3 * nv);
            for v in 0..nv {
                r.fixed_rows_mut::<3>(3 * v).copy_from(&(x[v] - target[v]));
            }
            (r, jv)
        }
        MeshTerm::Edge => {
            let edges = rig.edges();
            let mut r = DVector::zeros(3 * edges.len());
            let mut j = DMatrix::zeros(3 * edges.len(), n);
            for (e, &[a, b]) in edges.iter().enumerate() {
                r.fixed_rows_mut::<3>(3 * e)
                    .copy_from(&((x[a] - x[b]) - (target[a] - target[b])));
                let d = jv.rows(3 * a, 3) - jv.rows(3 * b, 3);
                j.rows_mut(3 * e, 3).copy_from(&d);
            }
            (r, j)
        }
    }
}

/// Applies a step over `[root, pose, identity]` columns.
pub fn apply_mesh_step(rig: &RigModel, frame: &PoseFrame, identity: &[f64], d: &DVector<f64>) -> (PoseFrame, Vec<f64>) {
    let ncol = rig.frame_cols();
    let f = apply_frame_step(frame, &|c| d[c]);
    let id = identity.iter().enumerate().map(|(m, v)| v + d[ncol + m]).collect();
    (f, id)
}

/// Loss gradient over `[root, pose, identity]` columns.
pub fn mesh_loss_gradient(
    rig: &RigModel,
    identity: &[f64],
    frame: &PoseFrame,
    target: &[Vec3],
    lambda_e: f64,
) -> (f64, DVector<f64>) {
    frame_loss_grad(rig, identity, frame, target, lambda_e, true)
}

/// Pose DoF columns start here in gradients and Jacobians.
pub const MESH_COL_POSE: usize = COL_POSE;
