//! The bundled 22-joint desk rig.
//!
//! Axes: x forward, y left, z up; the pelvis is the root. Every non-root
//! joint has three XYZ Euler DoFs (63 pose DoFs) and ten identity parameters
//! add length deltas (meters) to grouped bones. The surface is a set of
//! low-poly tubes around the bones, authored at the zero identity.

use std::f64::consts::PI;

use crate::geom::Vec3;
use crate::quality::CollisionPrimitive;

use super::{JointSpec, LandmarkSpec, NamedJointSpec, RigData, RigModel};

/// Names of the identity parameters, in order.
pub const DESK_IDENTITY_GROUPS: [&str; 10] = [
    "spine",
    "neck",
    "head",
    "shoulder_width",
    "upper_arm",
    "forearm",
    "hip_width",
    "thigh",
    "shin",
    "foot",
];

/// Tube layout of the rig surface.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshLayout {
    /// Ring positions as fractions of each bone.
    pub rings: Vec<f64>,
    pub ring_vertices: usize,
    /// Angular phase of the first vertex of each ring (radians).
    pub phase: f64,
}

impl MeshLayout {
    pub fn source() -> Self {
        Self {
            rings: vec![0.2, 0.5, 0.8],
            ring_vertices: 6,
            phase: 0.0,
        }
    }

    /// A different topology over the same bones, used as a conversion target.
    pub fn target() -> Self {
        Self {
            rings: vec![0.3, 0.55, 0.75],
            ring_vertices: 5,
            phase: 0.4,
        }
    }
}

struct J {
    name: &'static str,
    parent: Option<usize>,
    dir: [f64; 3],
    len: f64,
    group: Option<(usize, f64)>,
    limits: [[f64; 2]; 3],
    radius: f64,
}

const WIDE: [f64; 2] = [-1.2, 1.2];

fn joints() -> Vec<J> {
    let unit = |v: [f64; 3]| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    let spine_lim = [[-0.6, 0.6], [-0.6, 0.6], [-0.6, 0.6]];
    let mut out = vec![
        J {
            name: "pelvis",
            parent: None,
            dir: [0.0, 0.0, 1.0],
            len: 0.0,
            group: None,
            limits: [WIDE; 3],
            radius: 0.0,
        },
        J {
            name: "spine1",
            parent: Some(0),
            dir: [0.0, 0.0, 1.0],
            len: 0.10,
            group: Some((0, 1.0 / 3.0)),
            limits: spine_lim,
            radius: 0.11,
        },
        J {
            name: "spine2",
            parent: Some(1),
            dir: [0.0, 0.0, 1.0],
            len: 0.12,
            group: Some((0, 1.0 / 3.0)),
            limits: spine_lim,
            radius: 0.12,
        },
        J {
            name: "spine3",
            parent: Some(2),
            dir: [0.0, 0.0, 1.0],
            len: 0.12,
            group: Some((0, 1.0 / 3.0)),
            limits: spine_lim,
            radius: 0.12,
        },
        J {
            name: "neck",
            parent: Some(3),
            dir: [0.0, 0.0, 1.0],
            len: 0.14,
            group: Some((1, 1.0)),
            limits: [[-0.8, 0.8]; 3],
            radius: 0.05,
        },
        J {
            name: "head",
            parent: Some(4),
            dir: [0.0, 0.0, 1.0],
            len: 0.10,
            group: Some((2, 1.0)),
            limits: [[-0.8, 0.8]; 3],
            radius: 0.06,
        },
    ];
    for (side, s) in [("l", 1.0), ("r", -1.0)] {
        let arm: [J; 4] = [
            J {
                name: if side == "l" { "l_clavicle" } else { "r_clavicle" },
                parent: Some(3),
                dir: [0.0, s, 0.0],
                len: 0.03,
                group: None,
                limits: [[-0.3, 0.3]; 3],
                radius: 0.0,
            },
            J {
                name: if side == "l" { "l_shoulder" } else { "r_shoulder" },
                parent: None,
                dir: [0.0, s, 0.0],
                len: 0.17,
                group: Some((3, 1.0)),
                limits: [[-2.5, 2.5]; 3],
                radius: 0.05,
            },
            J {
                name: if side == "l" { "l_elbow" } else { "r_elbow" },
                parent: None,
                dir: [0.0, 0.0, -1.0],
                len: 0.28,
                group: Some((4, 1.0)),
                limits: [[-2.5, 2.5], [-2.5, 2.5], [-2.5, 2.5]],
                radius: 0.045,
            },
            J {
                name: if side == "l" { "l_wrist" } else { "r_wrist" },
                parent: None,
                dir: [0.0, 0.0, -1.0],
                len: 0.25,
                group: Some((5, 1.0)),
                limits: [[-0.6, 0.6], [-2.6, 0.3], [-1.6, 1.6]],
                radius: 0.04,
            },
        ];
        push_chain(&mut out, arm, 3);
    }
    for (side, s) in [("l", 1.0), ("r", -1.0)] {
        let leg: [J; 4] = [
            J {
                name: if side == "l" { "l_hip" } else { "r_hip" },
                parent: Some(0),
                dir: unit([0.0, 0.09 * s, -0.08]),
                len: 0.12,
                group: Some((6, 1.0)),
                limits: [[-0.8, 0.8], [-2.0, 0.9], [-0.9, 0.9]],
                radius: 0.08,
            },
            J {
                name: if side == "l" { "l_knee" } else { "r_knee" },
                parent: None,
                dir: [0.0, 0.0, -1.0],
                len: 0.42,
                group: Some((7, 1.0)),
                limits: [[-0.3, 0.3], [-0.1, 2.4], [-0.3, 0.3]],
                radius: 0.065,
            },
            J {
                name: if side == "l" { "l_heel" } else { "r_heel" },
                parent: None,
                dir: [0.0, 0.0, -1.0],
                len: 0.42,
                group: Some((8, 1.0)),
                limits: [[-0.4, 0.4], [-0.9, 0.9], [-0.4, 0.4]],
                radius: 0.05,
            },
            J {
                name: if side == "l" { "l_toe" } else { "r_toe" },
                parent: None,
                dir: unit([1.0, 0.0, -0.35]),
                len: 0.16,
                group: Some((9, 1.0)),
                limits: [[-0.8, 0.8]; 3],
                radius: 0.035,
            },
        ];
        push_chain(&mut out, leg, 0);
    }
    out
}

fn push_chain(out: &mut Vec<J>, chain: [J; 4], attach: usize) {
    for (k, mut j) in chain.into_iter().enumerate() {
        j.parent = Some(if k == 0 { attach } else { out.len() - 1 });
        out.push(j);
    }
}

fn ring_basis(d: &Vec3) -> (Vec3, Vec3) {
    let helper = if d.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = d.cross(&helper).normalize();
    let w = d.cross(&u);
    (u, w)
}

/// Desk rig with the default (source) surface layout.
pub fn desk_rig() -> RigModel {
    desk_rig_with_mesh(&MeshLayout::source())
}

pub fn desk_rig_with_mesh(layout: &MeshLayout) -> RigModel {
    let js = joints();
    let nid = DESK_IDENTITY_GROUPS.len();
    let mut joints_out = Vec::new();
    let mut limits = Vec::new();
    for j in &js {
        let mut coeffs = vec![0.0; nid];
        if let Some((g, c)) = j.group {
            coeffs[g] = c;
        }
        let dofs = if j.parent.is_some() { 3 } else { 0 };
        if dofs == 3 {
            limits.extend_from_slice(&j.limits);
        }
        joints_out.push(JointSpec {
            name: j.name.to_string(),
            parent: j.parent,
            direction: j.dir,
            base_length: j.len,
            length_coeffs: coeffs,
            dofs,
        });
    }

    let idx = |name: &str| js.iter().position(|j| j.name == name).unwrap();
    let lm = |joint: &str, offset: [f64; 3]| LandmarkSpec {
        joint: idx(joint),
        offset,
    };
    let landmarks = vec![
        lm("pelvis", [0.0, 0.12, 0.02]),
        lm("pelvis", [0.0, -0.12, 0.02]),
        lm("spine3", [0.10, 0.0, 0.05]),
        lm("neck", [-0.05, 0.0, 0.0]),
        lm("head", [0.0, 0.0, 0.12]),
        lm("head", [0.10, 0.0, 0.05]),
        lm("l_shoulder", [0.0, 0.0, 0.03]),
        lm("r_shoulder", [0.0, 0.0, 0.03]),
        lm("l_elbow", [-0.03, 0.0, 0.0]),
        lm("r_elbow", [-0.03, 0.0, 0.0]),
        lm("l_wrist", [0.0, 0.0, -0.06]),
        lm("r_wrist", [0.0, 0.0, -0.06]),
        lm("l_knee", [0.05, 0.0, 0.0]),
        lm("r_knee", [0.05, 0.0, 0.0]),
        lm("l_heel", [-0.04, 0.0, -0.05]),
        lm("r_heel", [-0.04, 0.0, -0.05]),
    ];

    // rest positions at the zero identity
    let mut rest = vec![Vec3::zeros(); js.len()];
    for i in 1..js.len() {
        let p = js[i].parent.unwrap();
        rest[i] = rest[p] + Vec3::from(js[i].dir) * js[i].len;
    }

    let mut template = Vec::new();
    let mut skinning = Vec::new();
    let mut edges = Vec::new();
    let mut faces = Vec::new();
    let nr = layout.ring_vertices;
    for (c, j) in js.iter().enumerate() {
        let Some(p) = j.parent else { continue };
        if j.radius <= 0.0 {
            continue;
        }
        let d = Vec3::from(j.dir);
        let (u, w) = ring_basis(&d);
        let first = template.len();
        for &s in &layout.rings {
            let center = rest[p] + d * (j.len * s);
            let wc = if s > 0.6 { 0.5 * (s - 0.6) / 0.4 } else { 0.0 };
            for k in 0..nr {
                let ang = layout.phase + 2.0 * PI * k as f64 / nr as f64;
                let pt = center + (u * ang.cos() + w * ang.sin()) * j.radius;
                template.push([pt.x, pt.y, pt.z]);
                if wc > 0.0 {
                    skinning.push(vec![(p, 1.0 - wc), (c, wc)]);
                } else {
                    skinning.push(vec![(p, 1.0)]);
                }
            }
        }
        for r in 0..layout.rings.len() {
            let ring = first + r * nr;
            for k in 0..nr {
                let a = ring + k;
                let b = ring + (k + 1) % nr;
                edges.push([a, b]);
                if r + 1 < layout.rings.len() {
                    let a2 = a + nr;
                    let b2 = b + nr;
                    edges.push([a, a2]);
                    edges.push([b, a2]);
                    faces.push([a, b, a2]);
                    faces.push([b, b2, a2]);
                }
            }
        }
    }

    let cap = |joint: &str, a: [f64; 3], b: [f64; 3], r: f64| CollisionPrimitive {
        joint: idx(joint),
        a,
        b,
        radius: r,
        taper: None,
    };
    let collision = vec![
        cap("spine1", [0.0, 0.0, 0.0], [0.0, 0.0, 0.12], 0.11),
        cap("spine3", [0.0, 0.0, 0.0], [0.0, 0.0, 0.12], 0.12),
        cap("head", [0.0, 0.0, 0.03], [0.0, 0.0, 0.10], 0.09),
        cap("l_shoulder", [0.0, 0.0, -0.03], [0.0, 0.0, -0.25], 0.045),
        cap("r_shoulder", [0.0, 0.0, -0.03], [0.0, 0.0, -0.25], 0.045),
        cap("l_elbow", [0.0, 0.0, -0.03], [0.0, 0.0, -0.20], 0.04),
        cap("r_elbow", [0.0, 0.0, -0.03], [0.0, 0.0, -0.20], 0.04),
        cap("l_hip", [0.0, 0.0, -0.05], [0.0, 0.0, -0.38], 0.06),
        cap("r_hip", [0.0, 0.0, -0.05], [0.0, 0.0, -0.38], 0.06),
        cap("l_knee", [0.0, 0.0, -0.03], [0.0, 0.0, -0.38], 0.05),
        cap("r_knee", [0.0, 0.0, -0.03], [0.0, 0.0, -0.38], 0.05),
    ];

    let data = RigData {
        name: if layout == &MeshLayout::source() {
            "desk22".into()
        } else {
            "desk22-target".into()
        },
        identity_dim: nid,
        joints: joints_out,
        limits,
        landmarks,
        named_joints: NamedJointSpec {
            root: "pelvis".into(),
            head: "head".into(),
            left_wrist: "l_wrist".into(),
            right_wrist: "r_wrist".into(),
            left_heel: "l_heel".into(),
            right_heel: "r_heel".into(),
            left_toe: "l_toe".into(),
            right_toe: "r_toe".into(),
        },
        template,
        skinning,
        edges,
        faces,
        collision,
        shape_coeffs_beta: None,
    };
    RigModel::from_data(data).expect("desk rig is valid")
}
