//! Continuous-time trajectory as a dense pose sequence, and the uniform cubic
//! B-spline correction that is composed onto it.
//!
//! A correction grid holds Euclidean control points `(c_t, c_r)`. The segment
//! `[tau_k, tau_k+1)` blends knots `k-1 ..= k+2`; the blended rotation vector
//! is mapped through `exp` and the blended translation used as is. The grid is
//! padded with one knot before the first and one after the last covered
//! timestamp so every sample in the window has full support.

use thiserror::Error;

use crate::lie::{self, interp_pose, so3, LieError, Pose};
use crate::{Mat3, Vec3};

/// Default trajectory rate.
pub const DEFAULT_RATE_HZ: f64 = 100.0;
/// Allowed relative deviation of any sample spacing from the nominal period.
pub const SPACING_TOLERANCE: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("timestamp {tau} outside [{start}, {end}]")]
    OutOfRange { tau: f64, start: f64, end: f64 },
    #[error("timestamp {tau} has no spline support in the control grid")]
    MissingSupport { tau: f64 },
    #[error("control grid does not cover {} timestamps (first {first})", .timestamps.len(), first = .timestamps.first().copied().unwrap_or(f64::NAN))]
    Uncovered { timestamps: Vec<f64> },
    #[error("invalid trajectory: {0}")]
    Invalid(String),
    #[error(transparent)]
    Lie(#[from] LieError),
}

/// How a pose between two samples is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum Interpolation {
    /// Translation interpolated linearly, rotation along the SO(3) geodesic.
    Euclidean,
    /// Geodesic on SE(3): `T_k exp(alpha log(T_k^-1 T_k+1))`.
    #[default]
    Manifold,
}

/// How a correction `(R_c, t_c)` is composed onto a pose `(R, t)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum UpdateMode {
    /// `(R_c R, R_c t + t_c)`.
    #[default]
    Se3,
    /// `(R_c R, t + t_c)`.
    So3R3,
}

/// Blending used to spread control points over time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum CorrectionBasis {
    #[default]
    CubicBSpline,
    /// Piecewise-linear between neighboring knots.
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    poses: Vec<Pose>,
    rate: f64,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, poses: Vec<Pose>, rate: f64) -> Result<Self, TrajectoryError> {
        if times.len() != poses.len() {
            return Err(TrajectoryError::Invalid(format!(
                "{} timestamps for {} poses",
                times.len(),
                poses.len()
            )));
        }
        if times.is_empty() {
            return Err(TrajectoryError::Invalid("no samples".into()));
        }
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(TrajectoryError::Invalid(format!("rate {rate}")));
        }
        let period = 1.0 / rate;
        for w in times.windows(2) {
            let dt = w[1] - w[0];
            if dt <= 0.0 {
                return Err(TrajectoryError::Invalid(format!(
                    "timestamps not strictly increasing at {}",
                    w[1]
                )));
            }
            if ((dt - period) / period).abs() > SPACING_TOLERANCE {
                return Err(TrajectoryError::Invalid(format!(
                    "spacing {dt} at {} deviates from period {period}",
                    w[0]
                )));
            }
        }
        Ok(Trajectory { times, poses, rate })
    }

    /// Samples at `t0 + k / rate`.
    pub fn uniform(t0: f64, rate: f64, poses: Vec<Pose>) -> Result<Self, TrajectoryError> {
        let times = (0..poses.len()).map(|k| t0 + k as f64 / rate).collect();
        Trajectory::new(times, poses, rate)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn period(&self) -> f64 {
        1.0 / self.rate
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &Pose)> {
        self.times.iter().copied().zip(self.poses.iter())
    }

    /// Same timestamps with replaced poses.
    pub fn with_poses(&self, poses: Vec<Pose>) -> Result<Self, TrajectoryError> {
        if poses.len() != self.poses.len() {
            return Err(TrajectoryError::Invalid("pose count changed".into()));
        }
        Ok(Trajectory {
            times: self.times.clone(),
            poses,
            rate: self.rate,
        })
    }

    /// Bracketing sample index `k` and ratio `alpha` with
    /// `tau = tau_k + alpha (tau_k+1 - tau_k)`. At the last sample returns
    /// the final segment with `alpha = 1`.
    pub fn bracket(&self, tau: f64) -> Result<(usize, f64), TrajectoryError> {
        let (start, end) = (self.start(), self.end());
        if !(tau >= start && tau <= end) {
            return Err(TrajectoryError::OutOfRange { tau, start, end });
        }
        if self.times.len() == 1 {
            return Ok((0, 0.0));
        }
        let upper = self.times.partition_point(|&t| t <= tau);
        let k = upper.saturating_sub(1).min(self.times.len() - 2);
        let (ta, tb) = (self.times[k], self.times[k + 1]);
        Ok((k, ((tau - ta) / (tb - ta)).clamp(0.0, 1.0)))
    }

    /// Pose at `tau` by on-manifold interpolation.
    pub fn sample(&self, tau: f64) -> Result<Pose, TrajectoryError> {
        self.sample_with(tau, Interpolation::Manifold)
    }

    pub fn sample_with(&self, tau: f64, mode: Interpolation) -> Result<Pose, TrajectoryError> {
        let (k, alpha) = self.bracket(tau)?;
        if self.times.len() == 1 || alpha == 0.0 {
            return Ok(self.poses[k]);
        }
        if alpha == 1.0 {
            return Ok(self.poses[k + 1]);
        }
        interpolate(&self.poses[k], &self.poses[k + 1], alpha, mode)
    }
}

/// Interpolates between two poses with the chosen scheme.
pub fn interpolate(a: &Pose, b: &Pose, alpha: f64, mode: Interpolation) -> Result<Pose, TrajectoryError> {
    match mode {
        Interpolation::Manifold => Ok(interp_pose(a, b, alpha)?),
        Interpolation::Euclidean => {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(LieError::OutOfRange { alpha }.into());
            }
            let rel = so3::log(&(a.rotation().transpose() * b.rotation()))?;
            let r = a.rotation() * so3::exp(&(rel * alpha));
            let t = a.translation() * (1.0 - alpha) + b.translation() * alpha;
            Ok(Pose::from_parts(r, t))
        }
    }
}

/// Composes the correction `(rc, tc)` onto `pose`.
pub fn compose_correction(rc: &Mat3, tc: &Vec3, pose: &Pose, mode: UpdateMode) -> Pose {
    let r = rc * pose.rotation();
    let t = match mode {
        UpdateMode::Se3 => rc * pose.translation() + tc,
        UpdateMode::So3R3 => pose.translation() + tc,
    };
    Pose::from_parts(r, t)
}

/// Uniform cubic B-spline weights for `t` in `[0, 1]` on knots `k-1 ..= k+2`.
///
/// These are the columns of the 4x4 basis matrix read against the control
/// points from `k+2` down to `k-1`, which is the pairing that makes adjacent
/// segments join with C2 continuity.
pub fn bspline_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let s = 1.0 - t;
    [
        s * s * s / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// First and second time derivatives of [`bspline_weights`] with respect to `t`.
pub fn bspline_weight_derivatives(t: f64) -> ([f64; 4], [f64; 4]) {
    let t2 = t * t;
    let s = 1.0 - t;
    (
        [
            -0.5 * s * s,
            (9.0 * t2 - 12.0 * t) / 6.0,
            (-9.0 * t2 + 6.0 * t + 3.0) / 6.0,
            0.5 * t2,
        ],
        [s, 3.0 * t - 2.0, -3.0 * t + 1.0, t],
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Knot {
    /// Translational control point (m).
    pub ct: Vec3,
    /// Rotational control point (rad, rotation vector).
    pub cr: Vec3,
}

/// Uniformly spaced correction control points. Knot `i` sits at
/// `origin + i * step`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlGrid {
    origin: f64,
    step: f64,
    knots: Vec<Knot>,
}

impl ControlGrid {
    /// Zero grid supporting `[start, end]` with spacing `step`, padded by one
    /// knot at each end.
    pub fn covering(start: f64, end: f64, step: f64) -> Result<Self, TrajectoryError> {
        if !(step > 0.0 && end >= start) {
            return Err(TrajectoryError::Invalid(format!(
                "grid over [{start}, {end}] with step {step}"
            )));
        }
        let segments = (((end - start) / step) - 1e-9).ceil().max(1.0) as usize;
        Ok(ControlGrid {
            origin: start - step,
            step,
            knots: vec![Knot::default(); segments + 3],
        })
    }

    /// Zero grid with exactly `count` knots (including the two pads) spread
    /// over `[start, end]`.
    pub fn with_knot_count(start: f64, end: f64, count: usize) -> Result<Self, TrajectoryError> {
        if count < 4 || end <= start {
            return Err(TrajectoryError::Invalid(format!(
                "{count} knots over [{start}, {end}]"
            )));
        }
        let step = (end - start) / (count - 3) as f64;
        Ok(ControlGrid {
            origin: start - step,
            step,
            knots: vec![Knot::default(); count],
        })
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn origin(&self) -> f64 {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn knots(&self) -> &[Knot] {
        &self.knots
    }

    pub fn knots_mut(&mut self) -> &mut [Knot] {
        &mut self.knots
    }

    pub fn knot_time(&self, i: usize) -> f64 {
        self.origin + i as f64 * self.step
    }

    /// First covered and last covered timestamp.
    pub fn support(&self) -> (f64, f64) {
        (self.knot_time(1), self.knot_time(self.knots.len() - 2))
    }

    pub fn reset(&mut self) {
        self.knots.iter_mut().for_each(|k| *k = Knot::default());
    }

    pub fn is_zero(&self) -> bool {
        self.knots.iter().all(|k| k.ct == Vec3::zeros() && k.cr == Vec3::zeros())
    }

    /// Segment index `k` and normalized offset `t` in `[0, 1]`.
    fn segment(&self, tau: f64) -> Result<(usize, f64), TrajectoryError> {
        let n = self.knots.len();
        if n < 4 {
            return Err(TrajectoryError::MissingSupport { tau });
        }
        let (lo, hi) = self.support();
        let eps = 1e-9 * self.step;
        if !(tau >= lo - eps && tau <= hi + eps) {
            return Err(TrajectoryError::MissingSupport { tau });
        }
        let u = (tau - self.origin) / self.step;
        let k = (u.floor() as usize).clamp(1, n - 3);
        Ok((k, (u - k as f64).clamp(0.0, 1.0)))
    }

    /// Index of the first contributing knot and the four blending weights.
    pub fn weights(&self, tau: f64, basis: CorrectionBasis) -> Result<(usize, [f64; 4]), TrajectoryError> {
        let (k, t) = self.segment(tau)?;
        Ok(match basis {
            CorrectionBasis::CubicBSpline => (k - 1, bspline_weights(t)),
            CorrectionBasis::Linear => (k, [1.0 - t, t, 0.0, 0.0]),
        })
    }

    /// Blended `(translation, rotation vector)` at `tau`.
    pub fn blend(&self, tau: f64, basis: CorrectionBasis) -> Result<(Vec3, Vec3), TrajectoryError> {
        let (first, w) = self.weights(tau, basis)?;
        let mut t = Vec3::zeros();
        let mut r = Vec3::zeros();
        for (j, wj) in w.iter().enumerate() {
            if *wj != 0.0 {
                let knot = &self.knots[first + j];
                t += knot.ct * *wj;
                r += knot.cr * *wj;
            }
        }
        Ok((t, r))
    }

    pub fn correction_with(&self, tau: f64, basis: CorrectionBasis) -> Result<Pose, TrajectoryError> {
        let (t, r) = self.blend(tau, basis)?;
        Ok(Pose::from_parts(so3::exp(&r), t))
    }
}

/// Cubic B-spline correction `dT(tau) = (exp([r_tau]x), t_tau)`.
pub fn bspline_correction(grid: &ControlGrid, tau: f64) -> Result<Pose, TrajectoryError> {
    grid.correction_with(tau, CorrectionBasis::CubicBSpline)
}

/// `T'_k = dT(tau_k) T_k` for every sample.
pub fn apply_correction(traj: &Trajectory, grid: &ControlGrid) -> Result<Trajectory, TrajectoryError> {
    apply_correction_with(traj, grid, CorrectionBasis::CubicBSpline, UpdateMode::Se3)
}

pub fn apply_correction_with(
    traj: &Trajectory,
    grid: &ControlGrid,
    basis: CorrectionBasis,
    mode: UpdateMode,
) -> Result<Trajectory, TrajectoryError> {
    let mut uncovered = Vec::new();
    let mut poses = Vec::with_capacity(traj.len());
    for (tau, pose) in traj.iter() {
        match grid.correction_with(tau, basis) {
            Ok(c) => poses.push(compose_correction(c.rotation(), c.translation(), pose, mode)),
            Err(TrajectoryError::MissingSupport { .. }) => uncovered.push(tau),
            Err(e) => return Err(e),
        }
    }
    if !uncovered.is_empty() {
        return Err(TrajectoryError::Uncovered { timestamps: uncovered });
    }
    traj.with_poses(poses)
}

/// Per-sample translation RMS and rotation-angle RMS between two
/// trajectories with identical timestamps.
pub fn rms_errors(estimate: &Trajectory, truth: &Trajectory) -> (f64, f64) {
    let n = estimate.len().min(truth.len()).max(1) as f64;
    let mut st = 0.0;
    let mut sr = 0.0;
    for (a, b) in estimate.poses().iter().zip(truth.poses()) {
        st += (a.translation() - b.translation()).norm_squared();
        let ang = lie::rotation_angle(&(a.rotation() * b.rotation().transpose()));
        sr += ang * ang;
    }
    ((st / n).sqrt(), (sr / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{exp_se3, log_se3, Twist};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, scale: f64) -> Pose {
        let mut v = || rng.random_range(-scale..scale);
        Pose::from_rotation_vector(Vec3::new(v(), v(), v()), Vec3::new(v(), v(), v()))
    }

    fn random_trajectory(rng: &mut ChaCha8Rng, n: usize) -> Trajectory {
        let mut poses = vec![random_pose(rng, 0.5)];
        for _ in 1..n {
            let step = random_pose(rng, 0.05);
            poses.push(poses.last().unwrap().compose(&step));
        }
        Trajectory::uniform(0.0, 100.0, poses).unwrap()
    }

    #[test]
    fn sample_hits_knots_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let traj = random_trajectory(&mut rng, 20);
        for (tau, pose) in traj.iter() {
            assert_eq!(traj.sample(tau).unwrap(), *pose);
        }
    }

    #[test]
    fn sample_two_point_translation() {
        let traj = Trajectory::new(
            vec![0.0, 1.0],
            vec![Pose::identity(), Pose::from_translation(Vec3::new(1.0, 0.0, 0.0))],
            1.0,
        )
        .unwrap();
        let p = traj.sample(0.25).unwrap();
        assert!((p.translation() - Vec3::new(0.25, 0.0, 0.0)).norm() < 1e-15);
        assert!(matches!(
            traj.sample(1.5),
            Err(TrajectoryError::OutOfRange { .. })
        ));
    }

    #[test]
    fn sample_lies_on_geodesic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let traj = random_trajectory(&mut rng, 50);
        for _ in 0..200 {
            let tau = rng.random_range(traj.start()..traj.end());
            let (k, alpha) = traj.bracket(tau).unwrap();
            let a = traj.poses()[k];
            let b = traj.poses()[k + 1];
            let lhs = log_se3(&a.inverse().compose(&traj.sample(tau).unwrap())).unwrap();
            let rhs = log_se3(&a.inverse().compose(&b)).unwrap().scaled(alpha);
            assert!((lhs.0 - rhs.0).norm() < 1e-9);
        }
    }

    #[test]
    fn rejects_irregular_spacing() {
        let poses = vec![Pose::identity(); 3];
        assert!(Trajectory::new(vec![0.0, 0.01, 0.025], poses.clone(), 100.0).is_err());
        assert!(Trajectory::new(vec![0.0, 0.01, 0.01], poses, 100.0).is_err());
    }

    #[test]
    fn partition_of_unity() {
        for i in 0..=1000 {
            let t = i as f64 / 1000.0;
            let s: f64 = bspline_weights(t).iter().sum();
            assert!((s - 1.0).abs() <= 4.0 * f64::EPSILON);
        }
    }

    #[test]
    fn single_knot_at_segment_start() {
        let mut grid = ControlGrid::covering(0.0, 1.0, 0.1).unwrap();
        let k = 3;
        grid.knots_mut()[k].ct = Vec3::new(1.0, 0.0, 0.0);
        let tau = grid.knot_time(k);
        let c = bspline_correction(&grid, tau).unwrap();
        assert!((c.translation().x - 4.0 / 6.0).abs() < 1e-15);
        let (first, w) = grid.weights(tau, CorrectionBasis::CubicBSpline).unwrap();
        assert_eq!(first, k - 1);
        assert!((w[0] - 1.0 / 6.0).abs() < 1e-15 && w[3].abs() < 1e-15);
    }

    #[test]
    fn zero_grid_is_identity() {
        let grid = ControlGrid::covering(0.0, 2.0, 0.1).unwrap();
        for i in 0..=200 {
            assert_eq!(bspline_correction(&grid, i as f64 * 0.01).unwrap(), Pose::identity());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let traj = random_trajectory(&mut rng, 100);
        let grid = ControlGrid::covering(traj.start(), traj.end(), 0.1).unwrap();
        assert_eq!(apply_correction(&traj, &grid).unwrap(), traj);
    }

    #[test]
    fn constant_translation_grid() {
        let traj = Trajectory::uniform(0.0, 100.0, vec![Pose::identity(); 101]).unwrap();
        let mut grid = ControlGrid::covering(0.0, 1.0, 0.1).unwrap();
        for k in grid.knots_mut() {
            k.ct = Vec3::new(0.1, 0.0, 0.0);
        }
        let out = apply_correction(&traj, &grid).unwrap();
        for p in out.poses() {
            assert!((p.translation() - Vec3::new(0.1, 0.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn correction_is_left_composed() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let traj = random_trajectory(&mut rng, 60);
        let mut grid = ControlGrid::covering(traj.start(), traj.end(), 0.1).unwrap();
        for k in grid.knots_mut() {
            k.ct = Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.02);
            k.cr = Vec3::new(0.01, rng.random_range(-0.05..0.05), -0.02);
        }
        let out = apply_correction(&traj, &grid).unwrap();
        for (tau, pose) in traj.iter() {
            let expect = bspline_correction(&grid, tau).unwrap().compose(pose);
            let got = out.sample(tau).unwrap();
            assert!((got.to_matrix() - expect.to_matrix()).norm() < 1e-9);
        }
    }

    #[test]
    fn uncovered_timestamps_reported() {
        let traj = Trajectory::uniform(0.0, 100.0, vec![Pose::identity(); 101]).unwrap();
        let grid = ControlGrid::covering(0.0, 0.5, 0.1).unwrap();
        match apply_correction(&traj, &grid) {
            Err(TrajectoryError::Uncovered { timestamps }) => {
                assert!(!timestamps.is_empty());
                assert!(timestamps.iter().all(|&t| t > 0.5));
            }
            other => panic!("expected uncovered error, got {other:?}"),
        }
    }

    #[test]
    fn correction_is_c2_across_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut grid = ControlGrid::covering(0.0, 2.0, 0.25).unwrap();
        for k in grid.knots_mut() {
            k.ct = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0);
        }
        let f = |tau: f64| grid.blend(tau, CorrectionBasis::CubicBSpline).unwrap().0;
        // One-sided second-order stencils stay inside a single cubic piece, so
        // their truncation error is far below the continuity tolerance.
        let (h1, h) = (1e-5, 1e-3);
        for i in 2..8 {
            let b = grid.knot_time(i);
            let f0 = f(b);
            let d1l = (f0 * 3.0 - f(b - h1) * 4.0 + f(b - 2.0 * h1)) / (2.0 * h1);
            let d1r = (-f0 * 3.0 + f(b + h1) * 4.0 - f(b + 2.0 * h1)) / (2.0 * h1);
            let (m1, m2, m3) = (f(b - h), f(b - 2.0 * h), f(b - 3.0 * h));
            let (p1, p2, p3) = (f(b + h), f(b + 2.0 * h), f(b + 3.0 * h));
            let d2l = (f0 * 2.0 - m1 * 5.0 + m2 * 4.0 - m3) / (h * h);
            let d2r = (f0 * 2.0 - p1 * 5.0 + p2 * 4.0 - p3) / (h * h);
            assert!((d1l - d1r).norm() / d1l.norm().max(1.0) < 1e-6);
            assert!((d2l - d2r).norm() / d2l.norm().max(1.0) < 1e-6);
        }
    }

    #[test]
    fn weight_derivatives_match_differences() {
        let h = 1e-6;
        for i in 1..10 {
            let t = i as f64 / 10.0;
            let (d1, d2) = bspline_weight_derivatives(t);
            let wp = bspline_weights(t + h);
            let wm = bspline_weights(t - h);
            let w0 = bspline_weights(t);
            for j in 0..4 {
                assert!(((wp[j] - wm[j]) / (2.0 * h) - d1[j]).abs() < 1e-8);
                assert!(((wp[j] - 2.0 * w0[j] + wm[j]) / (h * h) - d2[j]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn euclidean_and_manifold_agree_for_pure_translation() {
        let a = Pose::identity();
        let b = exp_se3(&Twist::new(Vec3::zeros(), Vec3::new(0.3, -0.1, 0.2))).unwrap();
        let e = interpolate(&a, &b, 0.3, Interpolation::Euclidean).unwrap();
        let m = interpolate(&a, &b, 0.3, Interpolation::Manifold).unwrap();
        assert!((e.to_matrix() - m.to_matrix()).norm() < 1e-15);
    }
}
