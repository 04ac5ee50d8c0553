//! Map-centric continuous-time LiDAR SLAM on synthetic data.
//!
//! The crate is organized the way the pipeline runs:
//!
//! - [`lie`]: SE(3)/SO(3) exponential, logarithm, Jacobians and interpolation.
//! - [`trajectory`]: densely sampled trajectories and the cubic B-spline
//!   correction layer applied by left multiplication.
//! - [`local_mapping`]: surfel, map-prior and IMU residuals and the damped
//!   Gauss-Newton window optimizer.
//! - [`surfel_map`]: sparse ellipsoid and dense disc surfels with an octree index.
//! - [`fusion`]: beam noise, two-gate matching, normal-inverse-Wishart fusion
//!   and active/inactive temporal fusion.
//! - [`deformation`]: embedded deformation graph and its optimization.
//! - [`localization`]: combined point-to-plane/point-to-point registration and
//!   sequential SE(3) pose fusion.
//! - [`simulation`]: deterministic scenario generators and brute-force oracles.
//! - [`io`] and [`experiments`]: file formats and the experiment runners used
//!   by the `ctmap` binary.

pub mod deformation;
pub mod experiments;
pub mod fusion;
pub mod io;
pub mod lie;
pub mod linalg;
pub mod local_mapping;
pub mod localization;
pub mod simulation;
pub mod surfel_map;
pub mod trajectory;

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Vec6 = nalgebra::Vector6<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
pub type Mat6 = nalgebra::Matrix6<f64>;

pub use lie::{exp_se3, interp_pose, left_jacobian_inv_se3, log_se3, LieError, Pose, Twist};
pub use trajectory::{ControlGrid, Trajectory};

/// Standard gravity used by the IMU model, pointing down the world z axis.
pub const GRAVITY: f64 = 9.80665;

pub fn gravity_vector() -> Vec3 {
    Vec3::new(0.0, 0.0, -GRAVITY)
}
