//! Deterministic scenario generators.
//!
//! All generators are pure functions of their configuration and seed; random
//! numbers come from per-subsystem ChaCha8 streams (see [`rng`]).

pub mod features;
pub mod misalign;
pub mod motion;
pub mod oracles;
pub mod places;
pub mod rng;
pub mod scenes;

pub use features::{gen_surfel_scene, Feature, FeatureScene};
pub use misalign::{gen_misalignment, MisalignProtocol, Misalignment};
pub use motion::{gen_trajectory_and_imu, MotionProfile, ScriptSegment, SimConfig, SimRun};
pub use places::{gen_place, PlaceConfig, PlaceScene};
pub use scenes::{gen_bent_map, gen_plane_scans, BentMap, BentMapConfig, PlaneScanConfig};

use thiserror::Error;

use crate::trajectory::TrajectoryError;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scene volume is empty")]
    EmptyVolume,
    #[error("invalid simulation config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}
