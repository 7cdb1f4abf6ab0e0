//! Multi-sensor egocentric body-motion fusion and scene geometry.
//!
//! The crate is organized as a pipeline:
//!
//! * [`geom`] rigid transforms, timestamped trajectories and the pinhole camera.
//! * [`rig`] the parametric skeleton: forward kinematics, skinning, Jacobians.
//! * [`ident`] ridge regression from subject height to identity parameters.
//! * [`retarget`] inverse-kinematics retargeting of source motion onto the rig.
//! * [`align`] hand-eye calibration and rigid head-pinned alignment.
//! * [`fuse`] the joint trajectory/motion optimization with a block-tridiagonal
//!   Levenberg-Marquardt solver.
//! * [`quality`] wrist distance, self-penetration and foot-sliding metrics.
//! * [`meshxfer`] cross-rig motion conversion through surface correspondences.
//! * [`scene`] oriented boxes: visibility, 2D boxes, exact 3D IoU and transfer.
//! * [`synth`] and [`pipeline`] the synthetic scenario generator and the
//!   end-to-end driver used by the CLI and the acceptance suite.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod align;
pub mod error;
pub mod exec;
pub mod fuse;
pub mod geom;
pub mod ident;
pub mod io;
pub mod meshxfer;
pub mod pipeline;
pub mod quality;
pub mod retarget;
pub mod rig;
pub mod scene;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
