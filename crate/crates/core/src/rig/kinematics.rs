use crate::error::Result;
use crate::geom::{euler_xyz, Mat3, RigidTransform, Vec3};

use super::{PoseFrame, RigModel, COL_POSE, COL_ROOT_R, COL_ROOT_T};

/// World-space joint frames for one pose, plus the quantities the
/// chain-rule Jacobians need.
#[derive(Debug, Clone)]
pub struct Kinematics {
    pub rotations: Vec<Mat3>,
    pub positions: Vec<Vec3>,
    /// World axis of every pose DoF, passing through its joint.
    pub dof_axes: Vec<Vec3>,
    /// `R_parent · direction` per joint (zero for the root): the world
    /// displacement of a subtree per unit of bone length.
    pub bone_dirs: Vec<Vec3>,
}

impl Kinematics {
    /// Unchecked FK; callers validate dimensions.
    pub fn compute(rig: &RigModel, identity: &[f64], root: &RigidTransform, pose: &[f64]) -> Self {
        let n = rig.joint_count();
        let mut rotations = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(n);
        let mut bone_dirs = Vec::with_capacity(n);
        let mut dof_axes = vec![Vec3::zeros(); rig.dof_count()];
        rotations.push(root.rotation_matrix());
        positions.push(root.translation);
        bone_dirs.push(Vec3::zeros());
        for i in 1..n {
            let p = rig.parent(i).unwrap();
            let rp = rotations[p];
            let dir = rp * rig.direction(i);
            let pos = positions[p] + dir * rig.bone_length(i, identity);
            let rot = match rig.dof_start(i) {
                Some(s) => {
                    let (a, b, c) = (pose[s], pose[s + 1], pose[s + 2]);
                    let rx = euler_xyz(a, 0.0, 0.0);
                    let rxy = rx * euler_xyz(0.0, b, 0.0);
                    dof_axes[s] = rp.column(0).into();
                    dof_axes[s + 1] = rp * rx.column(1);
                    dof_axes[s + 2] = rp * rxy.column(2);
                    rp * euler_xyz(a, b, c)
                }
                None => rp,
            };
            rotations.push(rot);
            positions.push(pos);
            bone_dirs.push(dir);
        }
        Self {
            rotations,
            positions,
            dof_axes,
            bone_dirs,
        }
    }

    pub fn of_frame(rig: &RigModel, identity: &[f64], frame: &PoseFrame) -> Self {
        Self::compute(rig, identity, &frame.root, &frame.pose)
    }

    pub fn transform(&self, j: usize) -> RigidTransform {
        RigidTransform::from_matrix(&self.rotations[j], self.positions[j])
    }

    /// World position of a point fixed in joint `j`'s frame.
    pub fn point(&self, j: usize, local: &Vec3) -> Vec3 {
        self.rotations[j] * local + self.positions[j]
    }

    /// Calls `f(col, d point / d col)` for every parameter that moves a world
    /// point rigidly attached to joint `joint`. Columns follow the layout in
    /// [`super::COL_POSE`]; identity columns start at `6 + dof_count` and are
    /// only visited when `with_identity` is set.
    pub fn for_each_point_column(
        &self,
        rig: &RigModel,
        joint: usize,
        point: &Vec3,
        with_identity: bool,
        mut f: impl FnMut(usize, Vec3),
    ) {
        for a in 0..3 {
            let mut e = Vec3::zeros();
            e[a] = 1.0;
            f(COL_ROOT_T + a, e);
        }
        let arm = point - self.positions[0];
        for a in 0..3 {
            let axis: Vec3 = self.rotations[0].column(a).into();
            f(COL_ROOT_R + a, axis.cross(&arm));
        }
        let chain = rig.chain(joint);
        for &k in chain {
            if let Some(s) = rig.dof_start(k) {
                let arm = point - self.positions[k];
                for d in 0..3 {
                    f(COL_POSE + s + d, self.dof_axes[s + d].cross(&arm));
                }
            }
        }
        if with_identity {
            let base = COL_POSE + rig.dof_count();
            for m in 0..rig.identity_dim() {
                let mut acc = Vec3::zeros();
                let mut any = false;
                for &k in chain {
                    let c = rig.joint(k).length_coeffs[m];
                    if c != 0.0 {
                        acc += self.bone_dirs[k] * c;
                        any = true;
                    }
                }
                if any {
                    f(base + m, acc);
                }
            }
        }
    }

    /// Skinned position of template vertex `v`.
    pub fn skin_vertex(&self, rig: &RigModel, rest: &RestPose, v: usize) -> Vec3 {
        let v0 = rig.template()[v];
        let mut out = Vec3::zeros();
        for &(j, w) in &rig.skinning()[v] {
            out += w * (self.rotations[j] * (v0 - rest.positions[j]) + self.positions[j]);
        }
        out
    }

    pub fn skin(&self, rig: &RigModel, rest: &RestPose) -> Vec<Vec3> {
        (0..rig.template().len())
            .map(|v| self.skin_vertex(rig, rest, v))
            .collect()
    }

    /// Like [`Self::for_each_point_column`] for a skinned vertex. Columns may
    /// repeat; callers accumulate.
    pub fn for_each_vertex_column(
        &self,
        rig: &RigModel,
        rest: &RestPose,
        v: usize,
        with_identity: bool,
        mut f: impl FnMut(usize, Vec3),
    ) {
        let v0 = rig.template()[v];
        let id_base = COL_POSE + rig.dof_count();
        for &(j, w) in &rig.skinning()[v] {
            if w == 0.0 {
                continue;
            }
            let x = self.rotations[j] * (v0 - rest.positions[j]) + self.positions[j];
            self.for_each_point_column(rig, j, &x, with_identity, |c, d| f(c, d * w));
            if with_identity {
                // the rest transform moves with identity too
                for m in 0..rig.identity_dim() {
                    let mut acc = Vec3::zeros();
                    let mut any = false;
                    for &k in rig.chain(j) {
                        let c = rig.joint(k).length_coeffs[m];
                        if c != 0.0 {
                            acc += rig.direction(k) * c;
                            any = true;
                        }
                    }
                    if any {
                        f(id_base + m, -(self.rotations[j] * acc) * w);
                    }
                }
            }
        }
    }
}

/// Joint positions at zero pose with an identity root. Rest rotations are all
/// identity, so positions fully describe the rest transforms.
#[derive(Debug, Clone)]
pub struct RestPose {
    pub positions: Vec<Vec3>,
}

impl RestPose {
    pub fn new(rig: &RigModel, identity: &[f64]) -> Self {
        let n = rig.joint_count();
        let mut positions = vec![Vec3::zeros(); n];
        for i in 1..n {
            let p = rig.parent(i).unwrap();
            positions[i] = positions[p] + rig.direction(i) * rig.bone_length(i, identity);
        }
        Self { positions }
    }
}

/// Per-joint `world_from_joint` transforms.
pub fn forward_kinematics(rig: &RigModel, identity: &[f64], frame: &PoseFrame) -> Result<Vec<RigidTransform>> {
    rig.check_identity(identity)?;
    rig.check_pose(&frame.pose)?;
    let kin = Kinematics::of_frame(rig, identity, frame);
    Ok((0..rig.joint_count()).map(|j| kin.transform(j)).collect())
}

/// Linear blend skinning of the template.
pub fn skin_mesh(rig: &RigModel, identity: &[f64], frame: &PoseFrame) -> Result<Vec<Vec3>> {
    rig.check_identity(identity)?;
    rig.check_pose(&frame.pose)?;
    let kin = Kinematics::of_frame(rig, identity, frame);
    let rest = RestPose::new(rig, identity);
    Ok(kin.skin(rig, &rest))
}
