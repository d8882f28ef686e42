//! Calibration and joint-angle tracking for dynamic camera clusters: a
//! static camera plus a camera carried by an L-joint actuated mechanism.
//!
//! The static-to-dynamic transform is modeled as
//! `T^{d:s} = T(τ_d) · A_1(θ_1) ⋯ A_L(θ_L) · T(τ_s)` with classic DH links.
//! [`calibration`] estimates the chain (and, without encoders, every
//! snapshot's joint angles) from fiducial-target observations in both
//! cameras; [`tracker`] then recovers joint angles frame by frame from
//! landmark reprojections.

pub mod calibration;
pub mod camera;
pub mod chain;
pub mod error;
pub mod geometry;
pub mod io;
pub mod kinematics;
pub mod measurement;
pub mod simulator;
pub mod solver;
pub mod tracker;

pub use camera::{CameraIntrinsics, PixelPoint};
pub use error::{Error, Result};
pub use geometry::{Pose6, RigidTransform};
pub use kinematics::{DhLink, JointState, KinematicModel};
