//! Pose evaluation and first-order sensitivities for the two trajectory
//! parameterizations.
//!
//! A [`PoseJacobian`] maps each contributing knot's parameters
//! `(c_r, c_t)` to the pose perturbation `(phi, dt)`, where the perturbed
//! pose is `(exp(phi) R, t + dt)`.

use crate::lie::{self, exp_se3, hat, left_jacobian_se3, log_se3, so3, Pose, Twist};
use crate::trajectory::{
    apply_correction_with, CorrectionBasis, ControlGrid, Interpolation, Knot, Trajectory,
    TrajectoryError, UpdateMode,
};
use crate::{Mat3, Mat6, Vec3, Vec6};

use super::Parameterization;

pub type PoseJacobian = Vec<(usize, Mat6)>;

#[derive(Clone, Debug)]
struct Segment {
    xi: Twist,
    jinv: Mat6,
    ad: Mat6,
    ad_inv: Mat6,
    theta: Vec3,
    jinv3: Mat3,
}

/// Current trajectory estimate together with the grid that perturbs it.
#[derive(Clone, Debug)]
pub struct Model {
    param: Parameterization,
    interpolation: Interpolation,
    traj: Trajectory,
    grid: ControlGrid,
    segments: Vec<Segment>,
}

fn block(a: &Mat3, b: &Mat3, c: &Mat3, d: &Mat3) -> Mat6 {
    let mut m = Mat6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(a);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(b);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(c);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(d);
    m
}

/// `(phi, dt)` to left twist `(phi, rho)` at a pose with translation `t`.
fn to_twist(t: &Vec3) -> Mat6 {
    block(&Mat3::identity(), &Mat3::zeros(), &hat(t), &Mat3::identity())
}

fn from_twist(t: &Vec3) -> Mat6 {
    block(&Mat3::identity(), &Mat3::zeros(), &(-hat(t)), &Mat3::identity())
}

impl Model {
    /// Composition model around `traj` with a zero grid of spacing `step`.
    pub fn composition(
        traj: Trajectory,
        step: f64,
        param: Parameterization,
        interpolation: Interpolation,
    ) -> Result<Self, TrajectoryError> {
        let grid = ControlGrid::covering(traj.start(), traj.end(), step)?;
        Self::with_grid(traj, grid, param, interpolation)
    }

    /// Direct spline model fitted to `seed` by least squares on the samples.
    pub fn spline_direct(seed: &Trajectory, knots: usize) -> Result<Self, TrajectoryError> {
        let mut grid = ControlGrid::with_knot_count(seed.start(), seed.end(), knots)?;
        fit_grid(&mut grid, seed)?;
        Self::with_grid(
            seed.clone(),
            grid,
            Parameterization::SplineDirect { knots },
            Interpolation::Manifold,
        )
    }

    fn with_grid(
        traj: Trajectory,
        grid: ControlGrid,
        param: Parameterization,
        interpolation: Interpolation,
    ) -> Result<Self, TrajectoryError> {
        let segments = match param {
            Parameterization::Composition { .. } => build_segments(&traj)?,
            Parameterization::SplineDirect { .. } => Vec::new(),
        };
        Ok(Model {
            param,
            interpolation,
            traj,
            grid,
            segments,
        })
    }

    pub fn parameterization(&self) -> Parameterization {
        self.param
    }

    pub fn knot_count(&self) -> usize {
        self.grid.len()
    }

    pub fn grid(&self) -> &ControlGrid {
        &self.grid
    }

    pub fn period(&self) -> f64 {
        self.traj.period()
    }

    /// Interval on which poses can be evaluated.
    pub fn support(&self) -> (f64, f64) {
        match self.param {
            Parameterization::Composition { .. } => (self.traj.start(), self.traj.end()),
            Parameterization::SplineDirect { .. } => {
                let (a, b) = self.grid.support();
                (a.max(self.traj.start()), b.min(self.traj.end()))
            }
        }
    }

    /// The represented trajectory at the sample timestamps.
    pub fn trajectory(&self) -> Result<Trajectory, TrajectoryError> {
        match self.param {
            Parameterization::Composition { .. } => Ok(self.traj.clone()),
            Parameterization::SplineDirect { .. } => {
                let poses = self
                    .traj
                    .times()
                    .iter()
                    .map(|&t| self.pose(t))
                    .collect::<Result<Vec<_>, _>>()?;
                self.traj.with_poses(poses)
            }
        }
    }

    /// Model after adding `delta` (six values per knot, `(c_r, c_t)`).
    pub fn apply_step(&self, delta: &[Vec6]) -> Result<Model, TrajectoryError> {
        match self.param {
            Parameterization::Composition { basis, update } => {
                let mut grid = self.grid.clone();
                grid.reset();
                for (k, d) in grid.knots_mut().iter_mut().zip(delta) {
                    k.cr = d.fixed_rows::<3>(0).into();
                    k.ct = d.fixed_rows::<3>(3).into();
                }
                let traj = apply_correction_with(&self.traj, &grid, basis, update)?;
                grid.reset();
                Self::with_grid(traj, grid, self.param, self.interpolation)
            }
            Parameterization::SplineDirect { .. } => {
                let mut grid = self.grid.clone();
                for (k, d) in grid.knots_mut().iter_mut().zip(delta) {
                    k.cr += Vec3::from(d.fixed_rows::<3>(0));
                    k.ct += Vec3::from(d.fixed_rows::<3>(3));
                }
                Ok(Model {
                    grid,
                    ..self.clone()
                })
            }
        }
    }

    pub fn pose(&self, tau: f64) -> Result<Pose, TrajectoryError> {
        match self.param {
            Parameterization::Composition { .. } => {
                let (k, alpha) = self.traj.bracket(tau)?;
                Ok(self.interpolated(k, alpha))
            }
            Parameterization::SplineDirect { .. } => {
                let (t, r) = self.grid.blend(tau, CorrectionBasis::CubicBSpline)?;
                Ok(Pose::from_parts(so3::exp(&r), t))
            }
        }
    }

    fn interpolated(&self, k: usize, alpha: f64) -> Pose {
        let a = &self.traj.poses()[k];
        if alpha == 0.0 || k + 1 >= self.traj.len() {
            return *a;
        }
        let seg = &self.segments[k];
        match self.interpolation {
            Interpolation::Manifold => {
                a.compose(&exp_se3(&seg.xi.scaled(alpha)).expect("finite twist"))
            }
            Interpolation::Euclidean => {
                let b = &self.traj.poses()[k + 1];
                Pose::from_parts(
                    a.rotation() * so3::exp(&(seg.theta * alpha)),
                    a.translation() * (1.0 - alpha) + b.translation() * alpha,
                )
            }
        }
    }

    /// Pose at `tau` and its sensitivity to the knot parameters.
    pub fn pose_jacobian(&self, tau: f64) -> Result<(Pose, PoseJacobian), TrajectoryError> {
        match self.param {
            Parameterization::Composition { basis, update } => {
                let (k, alpha) = self.traj.bracket(tau)?;
                let pose = self.interpolated(k, alpha);
                let mut jac: PoseJacobian = Vec::with_capacity(8);
                if alpha == 0.0 || k + 1 >= self.traj.len() {
                    self.push_sample(&mut jac, k, &Mat6::identity(), basis, update)?;
                    return Ok((pose, jac));
                }
                let (ja, jb) = self.interpolation_maps(k, alpha, &pose);
                self.push_sample(&mut jac, k, &ja, basis, update)?;
                self.push_sample(&mut jac, k + 1, &jb, basis, update)?;
                Ok((pose, jac))
            }
            Parameterization::SplineDirect { .. } => {
                let (first, w) = self.grid.weights(tau, CorrectionBasis::CubicBSpline)?;
                let (t, r) = self.grid.blend(tau, CorrectionBasis::CubicBSpline)?;
                let jl = so3::left_jacobian(&r);
                let mut jac = Vec::with_capacity(4);
                for (j, wj) in w.iter().enumerate() {
                    if *wj != 0.0 {
                        jac.push((
                            first + j,
                            block(&(jl * *wj), &Mat3::zeros(), &Mat3::zeros(), &(Mat3::identity() * *wj)),
                        ));
                    }
                }
                Ok((Pose::from_parts(so3::exp(&r), t), jac))
            }
        }
    }

    /// Maps from the `(phi, dt)` perturbations of samples `k` and `k+1` to the
    /// perturbation of the interpolated pose.
    fn interpolation_maps(&self, k: usize, alpha: f64, pose: &Pose) -> (Mat6, Mat6) {
        let seg = &self.segments[k];
        let a = &self.traj.poses()[k];
        let b = &self.traj.poses()[k + 1];
        match self.interpolation {
            Interpolation::Manifold => {
                let jl = left_jacobian_se3(&seg.xi.scaled(alpha)).expect("finite twist");
                let m = seg.ad * (jl * seg.jinv) * seg.ad_inv * alpha;
                let q = from_twist(pose.translation());
                (
                    q * (Mat6::identity() - m) * to_twist(a.translation()),
                    q * m * to_twist(b.translation()),
                )
            }
            Interpolation::Euclidean => {
                let ra = a.rotation();
                let n = ra * so3::left_jacobian(&(seg.theta * alpha)) * seg.jinv3 * ra.transpose() * alpha;
                (
                    block(
                        &(Mat3::identity() - n),
                        &Mat3::zeros(),
                        &Mat3::zeros(),
                        &(Mat3::identity() * (1.0 - alpha)),
                    ),
                    block(&n, &Mat3::zeros(), &Mat3::zeros(), &(Mat3::identity() * alpha)),
                )
            }
        }
    }

    fn push_sample(
        &self,
        jac: &mut PoseJacobian,
        k: usize,
        outer: &Mat6,
        basis: CorrectionBasis,
        update: UpdateMode,
    ) -> Result<(), TrajectoryError> {
        let tau = self.traj.times()[k];
        let (first, w) = self.grid.weights(tau, basis)?;
        let g = match update {
            UpdateMode::Se3 => {
                let t = self.traj.poses()[k].translation();
                block(&Mat3::identity(), &Mat3::zeros(), &(-hat(t)), &Mat3::identity())
            }
            UpdateMode::So3R3 => Mat6::identity(),
        };
        let base = outer * g;
        for (j, wj) in w.iter().enumerate() {
            if *wj == 0.0 {
                continue;
            }
            let idx = first + j;
            let m = base * *wj;
            match jac.iter_mut().find(|(i, _)| *i == idx) {
                Some((_, acc)) => *acc += m,
                None => jac.push((idx, m)),
            }
        }
        Ok(())
    }
}

fn build_segments(traj: &Trajectory) -> Result<Vec<Segment>, TrajectoryError> {
    let poses = traj.poses();
    let mut out = Vec::with_capacity(poses.len().saturating_sub(1));
    for w in poses.windows(2) {
        let rel = w[0].inverse().compose(&w[1]);
        let xi = log_se3(&rel)?;
        let theta = so3::log(rel.rotation())?;
        out.push(Segment {
            jinv: lie::left_jacobian_inv_se3(&xi)?,
            ad: w[0].adjoint(),
            ad_inv: w[0].inverse().adjoint(),
            jinv3: so3::left_jacobian_inv(&theta),
            theta,
            xi,
        });
    }
    Ok(out)
}

/// Least-squares fit of absolute control points to the sample translations
/// and rotation vectors.
fn fit_grid(grid: &mut ControlGrid, seed: &Trajectory) -> Result<(), TrajectoryError> {
    let n = grid.len();
    let mut ata = nalgebra::DMatrix::<f64>::zeros(n, n);
    let mut atb = nalgebra::DMatrix::<f64>::zeros(n, 6);
    let mut prev: Option<Vec3> = None;
    for (tau, pose) in seed.iter() {
        let (first, w) = grid.weights(tau, CorrectionBasis::CubicBSpline)?;
        let mut r = so3::log(pose.rotation())?;
        // Keep the rotation-vector path continuous across the log branch cut.
        if let Some(p) = prev {
            let angle = r.norm();
            if angle > 1e-12 {
                let axis = r / angle;
                let alt = axis * (angle - 2.0 * std::f64::consts::PI);
                if (alt - p).norm() < (r - p).norm() {
                    r = alt;
                }
            }
        }
        prev = Some(r);
        let row = [r.x, r.y, r.z, pose.translation().x, pose.translation().y, pose.translation().z];
        for a in 0..4 {
            for b in 0..4 {
                ata[(first + a, first + b)] += w[a] * w[b];
            }
            for (c, v) in row.iter().enumerate() {
                atb[(first + a, c)] += w[a] * v;
            }
        }
    }
    for i in 0..n {
        ata[(i, i)] += 1e-9;
    }
    let sol = ata
        .cholesky()
        .ok_or_else(|| TrajectoryError::Invalid("spline fit is singular".into()))?
        .solve(&atb);
    for (i, k) in grid.knots_mut().iter_mut().enumerate() {
        *k = Knot {
            cr: Vec3::new(sol[(i, 0)], sol[(i, 1)], sol[(i, 2)]),
            ct: Vec3::new(sol[(i, 3)], sol[(i, 4)], sol[(i, 5)]),
        };
    }
    Ok(())
}
