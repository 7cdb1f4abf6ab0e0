//! Parametric kinematic body model.
//!
//! A rig is a topologically ordered joint tree. Each non-root joint sits at a
//! rest offset from its parent whose direction is fixed and whose length is an
//! affine function of the identity parameters (`base + coeffs · identity`).
//! Joints with rotational degrees of freedom rotate by intrinsic XYZ Euler
//! angles after the offset is applied. The root joint takes its pose directly
//! from the frame's `world_from_root` transform.
//!
//! Surface vertices are attached to joints by linear blend skinning against
//! rest transforms recomputed for the current identity, so bone-length changes
//! never distort the template at zero pose.

mod desk;
mod kinematics;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Error, Result};
use crate::geom::{RigidTransform, Vec3};
use crate::quality::CollisionPrimitive;

pub use desk::{desk_rig, desk_rig_with_mesh, MeshLayout, DESK_IDENTITY_GROUPS};
pub use kinematics::{forward_kinematics, skin_mesh, Kinematics, RestPose};

/// Column layout of per-frame Jacobians: root translation, root rotation
/// (right tangent increment), pose DoFs, then optionally identity parameters.
pub const COL_ROOT_T: usize = 0;
pub const COL_ROOT_R: usize = 3;
pub const COL_POSE: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    pub parent: Option<usize>,
    /// Unit direction of the rest offset, in the parent's frame.
    pub direction: [f64; 3],
    pub base_length: f64,
    /// Length coefficients over the identity parameters.
    pub length_coeffs: Vec<f64>,
    /// Rotational DoFs: 0 (rigid) or 3 (XYZ Euler).
    pub dofs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSpec {
    pub joint: usize,
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedJointSpec {
    pub root: String,
    pub head: String,
    pub left_wrist: String,
    pub right_wrist: String,
    pub left_heel: String,
    pub right_heel: String,
    pub left_toe: String,
    pub right_toe: String,
}

/// On-disk rig description. [`RigModel`] wraps it with validated caches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigData {
    pub name: String,
    pub identity_dim: usize,
    pub joints: Vec<JointSpec>,
    /// `[min, max]` per pose DoF.
    pub limits: Vec<[f64; 2]>,
    pub landmarks: Vec<LandmarkSpec>,
    pub named_joints: NamedJointSpec,
    pub template: Vec<[f64; 3]>,
    /// Per vertex `(joint, weight)` pairs.
    pub skinning: Vec<Vec<(usize, f64)>>,
    pub edges: Vec<[usize; 2]>,
    #[serde(default)]
    pub faces: Vec<[usize; 3]>,
    #[serde(default)]
    pub collision: Vec<CollisionPrimitive>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape_coeffs_beta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NamedJoints {
    pub root: usize,
    pub head: usize,
    pub left_wrist: usize,
    pub right_wrist: usize,
    pub left_heel: usize,
    pub right_heel: usize,
    pub left_toe: usize,
    pub right_toe: usize,
}

impl NamedJoints {
    pub fn heels(&self) -> [usize; 2] {
        [self.left_heel, self.right_heel]
    }

    pub fn wrists(&self) -> [usize; 2] {
        [self.left_wrist, self.right_wrist]
    }
}

#[derive(Debug, Clone)]
pub struct RigModel {
    data: RigData,
    directions: Vec<Vec3>,
    dof_start: Vec<Option<usize>>,
    dof_count: usize,
    /// Ancestors-or-self of each joint, root excluded, root-most first.
    chains: Vec<Vec<usize>>,
    named: NamedJoints,
    template: Vec<Vec3>,
}

impl RigModel {
    /// Validates every invariant eagerly; errors name the offending element.
    pub fn from_data(data: RigData) -> Result<Self> {
        let n = data.joints.len();
        if n == 0 {
            return Err(Error::InvariantViolation("rig has no joints".into()));
        }
        let mut roots = 0;
        for (i, j) in data.joints.iter().enumerate() {
            match j.parent {
                None => {
                    roots += 1;
                    if i != 0 {
                        return Err(Error::InvariantViolation(format!(
                            "joint '{}' ({i}) is a root but only joint 0 may be",
                            j.name
                        )));
                    }
                    if j.dofs != 0 {
                        return Err(Error::InvariantViolation(format!(
                            "root joint '{}' must not carry rotational dofs",
                            j.name
                        )));
                    }
                }
                Some(p) if p >= i => {
                    return Err(Error::InvariantViolation(format!(
                        "joint '{}' ({i}) has parent {p}: parents must precede children (cyclic or unordered hierarchy)",
                        j.name
                    )));
                }
                Some(_) => {}
            }
            if j.dofs != 0 && j.dofs != 3 {
                return Err(Error::InvariantViolation(format!(
                    "joint '{}' has {} dofs; only 0 or 3 are supported",
                    j.name, j.dofs
                )));
            }
            if j.length_coeffs.len() != data.identity_dim {
                return Err(Error::InvariantViolation(format!(
                    "joint '{}' has {} length coefficients, identity_dim is {}",
                    j.name,
                    j.length_coeffs.len(),
                    data.identity_dim
                )));
            }
            let d = Vec3::from(j.direction);
            if j.parent.is_some() && (d.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::InvariantViolation(format!(
                    "joint '{}' rest direction is not unit length",
                    j.name
                )));
            }
            if !j.base_length.is_finite() || j.length_coeffs.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvariantViolation(format!(
                    "joint '{}' has non-finite length parameters",
                    j.name
                )));
            }
        }
        if roots != 1 {
            return Err(Error::InvariantViolation(format!(
                "rig must have exactly one root, found {roots}"
            )));
        }

        let mut dof_start = vec![None; n];
        let mut dof_count = 0;
        for (i, j) in data.joints.iter().enumerate() {
            if j.dofs == 3 {
                dof_start[i] = Some(dof_count);
                dof_count += 3;
            }
        }
        if data.limits.len() != dof_count {
            return Err(Error::InvariantViolation(format!(
                "rig has {dof_count} pose dofs but {} limits",
                data.limits.len()
            )));
        }
        for (k, l) in data.limits.iter().enumerate() {
            if !(l[0] <= l[1]) {
                return Err(Error::InvariantViolation(format!(
                    "limit for dof {k} has min {} > max {}",
                    l[0], l[1]
                )));
            }
        }

        let mut chains: Vec<Vec<usize>> = vec![Vec::new(); n];
        for i in 1..n {
            let p = data.joints[i].parent.unwrap();
            let mut c = chains[p].clone();
            c.push(i);
            chains[i] = c;
        }

        for (k, lm) in data.landmarks.iter().enumerate() {
            if lm.joint >= n {
                return Err(Error::InvariantViolation(format!(
                    "landmark {k} references missing joint {}",
                    lm.joint
                )));
            }
        }

        let by_name: HashMap<&str, usize> = data
            .joints
            .iter()
            .enumerate()
            .map(|(i, j)| (j.name.as_str(), i))
            .collect();
        let resolve = |role: &str, name: &str| -> Result<usize> {
            by_name
                .get(name)
                .copied()
                .ok_or_else(|| Error::InvariantViolation(format!("named joint {role} = '{name}' does not exist")))
        };
        let nj = &data.named_joints;
        let named = NamedJoints {
            root: resolve("root", &nj.root)?,
            head: resolve("head", &nj.head)?,
            left_wrist: resolve("left_wrist", &nj.left_wrist)?,
            right_wrist: resolve("right_wrist", &nj.right_wrist)?,
            left_heel: resolve("left_heel", &nj.left_heel)?,
            right_heel: resolve("right_heel", &nj.right_heel)?,
            left_toe: resolve("left_toe", &nj.left_toe)?,
            right_toe: resolve("right_toe", &nj.right_toe)?,
        };
        if named.root != 0 {
            return Err(Error::InvariantViolation("named root must be joint 0".into()));
        }

        let nv = data.template.len();
        if data.skinning.len() != nv {
            return Err(Error::InvariantViolation(format!(
                "{} skinning entries for {nv} template vertices",
                data.skinning.len()
            )));
        }
        for (v, ws) in data.skinning.iter().enumerate() {
            if ws.is_empty() {
                return Err(Error::InvariantViolation(format!("vertex {v} has no skinning weights")));
            }
            let mut sum = 0.0;
            for &(j, w) in ws {
                if j >= n {
                    return Err(Error::InvariantViolation(format!(
                        "vertex {v} skinned to missing joint {j}"
                    )));
                }
                if !(w >= 0.0) {
                    return Err(Error::InvariantViolation(format!(
                        "vertex {v} has negative skinning weight {w}"
                    )));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvariantViolation(format!(
                    "vertex {v} skinning weights sum to {sum}, expected 1"
                )));
            }
        }
        for (k, e) in data.edges.iter().enumerate() {
            if e[0] >= nv || e[1] >= nv || e[0] == e[1] {
                return Err(Error::InvariantViolation(format!("edge {k} {:?} is invalid", e)));
            }
        }
        for (k, f) in data.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= nv) {
                return Err(Error::InvariantViolation(format!(
                    "face {k} {:?} references a missing vertex",
                    f
                )));
            }
        }
        for (k, c) in data.collision.iter().enumerate() {
            c.validate(n)
                .map_err(|e| Error::InvariantViolation(format!("collision primitive {k}: {e}")))?;
        }
        if let Some(beta) = &data.shape_coeffs_beta {
            if beta.iter().any(|b| !b.is_finite()) {
                return Err(Error::InvariantViolation("non-finite shape coefficient".into()));
            }
        }

        let directions = data.joints.iter().map(|j| Vec3::from(j.direction)).collect();
        let template = data.template.iter().map(|&p| Vec3::from(p)).collect();
        Ok(Self {
            data,
            directions,
            dof_start,
            dof_count,
            chains,
            named,
            template,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
        let data: RigData = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()).in_file(path))?;
        Self::from_data(data).map_err(|e| e.in_file(path))
    }

    pub fn data(&self) -> &RigData {
        &self.data
    }

    pub fn name(&self) -> &str {
        &self.data.name
    }

    pub fn joint_count(&self) -> usize {
        self.data.joints.len()
    }

    pub fn joint(&self, i: usize) -> &JointSpec {
        &self.data.joints[i]
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.data.joints.iter().position(|j| j.name == name)
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.data.joints[i].parent
    }

    pub fn identity_dim(&self) -> usize {
        self.data.identity_dim
    }

    pub fn dof_count(&self) -> usize {
        self.dof_count
    }

    /// First pose-DoF index of joint `i`, if it rotates.
    pub fn dof_start(&self, i: usize) -> Option<usize> {
        self.dof_start[i]
    }

    /// Columns of a frame Jacobian without identity: 6 + pose DoFs.
    pub fn frame_cols(&self) -> usize {
        COL_POSE + self.dof_count
    }

    pub fn chain(&self, i: usize) -> &[usize] {
        &self.chains[i]
    }

    pub fn direction(&self, i: usize) -> &Vec3 {
        &self.directions[i]
    }

    pub fn named(&self) -> &NamedJoints {
        &self.named
    }

    pub fn limits(&self) -> &[[f64; 2]] {
        &self.data.limits
    }

    pub fn landmarks(&self) -> &[LandmarkSpec] {
        &self.data.landmarks
    }

    pub fn template(&self) -> &[Vec3] {
        &self.template
    }

    pub fn skinning(&self) -> &[Vec<(usize, f64)>] {
        &self.data.skinning
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.data.edges
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.data.faces
    }

    pub fn collision(&self) -> &[CollisionPrimitive] {
        &self.data.collision
    }

    /// Rest offset length of joint `i` for the given identity.
    pub fn bone_length(&self, i: usize, identity: &[f64]) -> f64 {
        let j = &self.data.joints[i];
        j.base_length + j.length_coeffs.iter().zip(identity).map(|(c, x)| c * x).sum::<f64>()
    }

    /// True when `ancestor` is `joint` or one of its ancestors.
    pub fn is_ancestor_or_self(&self, ancestor: usize, joint: usize) -> bool {
        ancestor == 0 || self.chains[joint].contains(&ancestor)
    }

    pub fn check_identity(&self, identity: &[f64]) -> Result<()> {
        dim_check("identity parameters", self.identity_dim(), identity.len())
    }

    pub fn check_pose(&self, pose: &[f64]) -> Result<()> {
        dim_check("pose dofs", self.dof_count, pose.len())
    }

    pub fn zero_identity(&self) -> Vec<f64> {
        vec![0.0; self.identity_dim()]
    }

    pub fn zero_pose(&self) -> Vec<f64> {
        vec![0.0; self.dof_count]
    }
}

/// One frame of motion: root transform plus pose DoFs.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseFrame {
    pub t_ns: i64,
    pub root: RigidTransform,
    pub pose: Vec<f64>,
}

impl PoseFrame {
    pub fn zero(rig: &RigModel, t_ns: i64) -> Self {
        Self {
            t_ns,
            root: RigidTransform::identity(),
            pose: rig.zero_pose(),
        }
    }
}

/// A motion: shared identity and timestamped frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub identity: Vec<f64>,
    pub frames: Vec<PoseFrame>,
    pub rate_hz: f64,
}

impl MotionSequence {
    pub fn validate(&self, rig: &RigModel) -> Result<()> {
        rig.check_identity(&self.identity)?;
        if self.frames.is_empty() {
            return Err(Error::InvalidInput("motion has no frames".into()));
        }
        if !(self.rate_hz > 0.0) {
            return Err(Error::InvalidInput("motion rate must be positive".into()));
        }
        for (i, f) in self.frames.iter().enumerate() {
            rig.check_pose(&f.pose).map_err(|e| e.at_frame(i))?;
            if i > 0 && f.t_ns <= self.frames[i - 1].t_ns {
                return Err(Error::InvalidInput(format!(
                    "motion timestamps not strictly increasing at frame {i}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn times(&self) -> Vec<i64> {
        self.frames.iter().map(|f| f.t_ns).collect()
    }
}
