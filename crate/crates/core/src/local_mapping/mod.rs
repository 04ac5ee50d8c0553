//! Local-window trajectory refinement.
//!
//! Four residual families constrain the trajectory inside a window: surfel
//! pairs observed at two times, sensor points tied to an existing world map,
//! and accelerometer / gyroscope readings compared against finite-difference
//! derivatives of the trajectory. [`optimize_window`] solves for a correction
//! grid, IMU biases and a time lag with damped Gauss-Newton.
//!
//! Perturbations follow the left convention used throughout the crate: a
//! rotation perturbation `phi` acts as `R <- exp(phi) R`.

mod model;
mod solver;

pub use model::{Model, PoseJacobian};
pub use solver::{optimize_window, window_jacobian, IterationRecord, OptimizationReport, Termination};

use thiserror::Error;

use crate::lie::so3;
use crate::trajectory::{
    compose_correction, interpolate, CorrectionBasis, ControlGrid, Interpolation, Trajectory,
    TrajectoryError, UpdateMode,
};
use crate::{gravity_vector, Vec3};

/// Default whitening scales.
pub const SIGMA_SURFEL: f64 = 0.02;
pub const SIGMA_PRIOR: f64 = 0.02;
pub const SIGMA_ACCEL: f64 = 0.05;
pub const SIGMA_GYRO: f64 = 0.005;

#[derive(Debug, Error)]
pub enum LocalMappingError {
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("{residuals} scalar residuals cannot constrain {knots} knots (need {required})")]
    Unobservable {
        residuals: usize,
        knots: usize,
        required: usize,
    },
    #[error("window {length} s exceeds configured maximum {max} s")]
    WindowTooLong { length: f64, max: f64 },
    #[error("normal equations are rank deficient (null-space dimension {null_dim})")]
    DegenerateGeometry { null_dim: usize },
    #[error("cost did not decrease after {retries} damping retries")]
    NoProgress {
        retries: usize,
        best: Box<(OptState, Trajectory)>,
    },
    #[error("invalid input: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfelPairConstraint {
    pub u_a: Vec3,
    pub tau_a: f64,
    pub u_b: Vec3,
    pub tau_b: f64,
    pub normal: Vec3,
}

impl SurfelPairConstraint {
    pub fn new(u_a: Vec3, tau_a: f64, u_b: Vec3, tau_b: f64, normal: Vec3) -> Result<Self, LocalMappingError> {
        check_unit(&normal)?;
        if tau_a == tau_b {
            return Err(LocalMappingError::Invalid("surfel pair with equal timestamps".into()));
        }
        Ok(SurfelPairConstraint { u_a, tau_a, u_b, tau_b, normal })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapPriorConstraint {
    /// World-frame map point.
    pub u_m: Vec3,
    /// Sensor-frame observation.
    pub u_c: Vec3,
    pub tau_c: f64,
    pub normal: Vec3,
}

impl MapPriorConstraint {
    pub fn new(u_m: Vec3, u_c: Vec3, tau_c: f64, normal: Vec3) -> Result<Self, LocalMappingError> {
        check_unit(&normal)?;
        Ok(MapPriorConstraint { u_m, u_c, tau_c, normal })
    }
}

fn check_unit(n: &Vec3) -> Result<(), LocalMappingError> {
    if (n.norm() - 1.0).abs() > 1e-9 {
        return Err(LocalMappingError::Invalid(format!("normal norm {}", n.norm())));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub tau: f64,
    /// Specific force in the body frame (m/s^2).
    pub accel: Vec3,
    /// Angular rate in the body frame (rad/s).
    pub gyro: Vec3,
}

#[derive(Clone, Debug, Default)]
pub struct Constraints {
    pub pairs: Vec<SurfelPairConstraint>,
    pub priors: Vec<MapPriorConstraint>,
}

impl Constraints {
    pub fn len(&self) -> usize {
        self.pairs.len() + self.priors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub grid: ControlGrid,
    pub accel_bias: Vec3,
    pub gyro_bias: Vec3,
    pub time_lag: f64,
}

impl OptState {
    pub fn zero(grid: ControlGrid) -> Self {
        OptState {
            grid,
            accel_bias: Vec3::zeros(),
            gyro_bias: Vec3::zeros(),
            time_lag: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum JacobianMethod {
    #[default]
    Analytic,
    CentralDifference,
}

/// Trajectory parameterization being optimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Parameterization {
    /// Corrections blended by `basis` and composed onto the discrete
    /// trajectory, reset to zero after every accepted step.
    Composition { basis: CorrectionBasis, update: UpdateMode },
    /// The trajectory is the spline of absolute control points with this many
    /// knots (pads included); the discrete samples only seed the fit.
    SplineDirect { knots: usize },
}

impl Default for Parameterization {
    fn default() -> Self {
        Parameterization::Composition {
            basis: CorrectionBasis::CubicBSpline,
            update: UpdateMode::Se3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct Whitening {
    pub surfel: f64,
    pub prior: f64,
    pub accel: f64,
    pub gyro: f64,
    /// Cauchy scale in units of sigma, applied to surfel and prior residuals.
    pub cauchy_sigmas: f64,
}

impl Default for Whitening {
    fn default() -> Self {
        Whitening {
            surfel: SIGMA_SURFEL,
            prior: SIGMA_PRIOR,
            accel: SIGMA_ACCEL,
            gyro: SIGMA_GYRO,
            cauchy_sigmas: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LocalMappingConfig {
    pub max_window: f64,
    pub knot_step: f64,
    pub parameterization: Parameterization,
    pub interpolation: Interpolation,
    pub jacobian: JacobianMethod,
    pub whitening: Whitening,
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub cost_tolerance: f64,
    pub max_damping_retries: usize,
    pub estimate_biases: bool,
    pub estimate_time_lag: bool,
    /// Largest magnitude any bias component may take.
    pub bias_bound: f64,
    /// Largest time lag magnitude; IMU samples closer than this (plus one
    /// stencil step) to the window ends are left out.
    pub max_time_lag: f64,
}

impl Default for LocalMappingConfig {
    fn default() -> Self {
        LocalMappingConfig {
            max_window: 5.0,
            knot_step: 0.1,
            parameterization: Parameterization::default(),
            interpolation: Interpolation::Manifold,
            jacobian: JacobianMethod::Analytic,
            whitening: Whitening::default(),
            max_iterations: 50,
            step_tolerance: 1e-8,
            cost_tolerance: 1e-10,
            max_damping_retries: 5,
            estimate_biases: true,
            estimate_time_lag: true,
            bias_bound: 1.0,
            max_time_lag: 0.02,
        }
    }
}

/// Pose at `tau` after composing the grid's correction onto each sample and
/// interpolating between corrected samples.
pub fn corrected_pose(
    traj: &Trajectory,
    grid: &ControlGrid,
    tau: f64,
    basis: CorrectionBasis,
    update: UpdateMode,
    interpolation: Interpolation,
) -> Result<crate::Pose, TrajectoryError> {
    let (k, alpha) = traj.bracket(tau)?;
    let fix = |i: usize| -> Result<crate::Pose, TrajectoryError> {
        let c = grid.correction_with(traj.times()[i], basis)?;
        Ok(compose_correction(c.rotation(), c.translation(), &traj.poses()[i], update))
    };
    let a = fix(k)?;
    if traj.len() == 1 || alpha == 0.0 {
        return Ok(a);
    }
    let b = fix(k + 1)?;
    if alpha == 1.0 {
        return Ok(b);
    }
    interpolate(&a, &b, alpha, interpolation)
}

fn corrected_default(traj: &Trajectory, grid: &ControlGrid, tau: f64) -> Result<crate::Pose, TrajectoryError> {
    corrected_pose(
        traj,
        grid,
        tau,
        CorrectionBasis::CubicBSpline,
        UpdateMode::Se3,
        Interpolation::Manifold,
    )
}

/// `n^T [(R_a u_a + t_a) - (R_b u_b + t_b)]` on the corrected trajectory.
pub fn residual_surfel_pair(
    c: &SurfelPairConstraint,
    traj: &Trajectory,
    grid: &ControlGrid,
) -> Result<f64, TrajectoryError> {
    let pa = corrected_default(traj, grid, c.tau_a)?;
    let pb = corrected_default(traj, grid, c.tau_b)?;
    Ok(c.normal.dot(&(pa.transform_point(&c.u_a) - pb.transform_point(&c.u_b))))
}

/// `n^T [u_m - (R u_c + t)]`; the map point is never transformed.
pub fn residual_map_prior(
    c: &MapPriorConstraint,
    traj: &Trajectory,
    grid: &ControlGrid,
) -> Result<f64, TrajectoryError> {
    let p = corrected_default(traj, grid, c.tau_c)?;
    Ok(c.normal.dot(&(c.u_m - p.transform_point(&c.u_c))))
}

/// Accelerometer and gyroscope residuals `(e_accel, e_gyro)`.
///
/// The accelerometer residual is `a - R^T (d2t - g) + b_a`, the gyroscope
/// residual `w - log(R(tau)^T R(tau + h)) / h + b_w`, with `h` the trajectory
/// sample interval and the IMU timestamp shifted by the time lag.
pub fn residual_imu(
    s: &ImuSample,
    traj: &Trajectory,
    grid: &ControlGrid,
    state: &OptState,
) -> Result<(Vec3, Vec3), TrajectoryError> {
    let h = traj.period();
    let tau = s.tau + state.time_lag;
    let pose = |t: f64| corrected_default(traj, grid, t);
    let p0 = pose(tau)?;
    let pm = pose(tau - h)?;
    let pp = pose(tau + h)?;
    Ok(imu_residual_from_poses(s, &pm, &p0, &pp, h, &state.accel_bias, &state.gyro_bias)?)
}

pub(crate) fn imu_residual_from_poses(
    s: &ImuSample,
    pm: &crate::Pose,
    p0: &crate::Pose,
    pp: &crate::Pose,
    h: f64,
    accel_bias: &Vec3,
    gyro_bias: &Vec3,
) -> Result<(Vec3, Vec3), crate::LieError> {
    let acc = (pp.translation() - p0.translation() * 2.0 + pm.translation()) / (h * h);
    let ea = s.accel - p0.rotation().transpose() * (acc - gravity_vector()) + accel_bias;
    let omega = so3::log(&(p0.rotation().transpose() * pp.rotation()))? / h;
    let eg = s.gyro - omega + gyro_bias;
    Ok((ea, eg))
}
