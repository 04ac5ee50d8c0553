//! Ground-truth motion, IMU synthesis and dead-reckoned initial trajectories.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::lie::{exp_se3, so3, Pose, Twist};
use crate::local_mapping::ImuSample;
use crate::trajectory::{Trajectory, TrajectoryError};
use crate::{gravity_vector, Vec3};

use super::rng::{normal3, stream, Stream};
use super::SimError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptSegment {
    pub duration: f64,
    /// Body-frame linear velocity (m/s).
    pub velocity: [f64; 3],
    /// Body-frame angular velocity (rad/s).
    pub angular_velocity: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum MotionProfile {
    /// Low-frequency sinusoids scaled to the speed envelope, plus a
    /// small vibration component.
    #[default]
    Sinusoid,
    /// Sum of random band-limited sinusoids per axis.
    RandomWalk,
    /// Piecewise-constant body twists.
    Scripted { segments: Vec<ScriptSegment> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    /// Window length (s).
    pub window: f64,
    /// IMU and trajectory rate (Hz).
    pub imu_rate: f64,
    pub n_features: usize,
    /// Fraction of features tied to the world map instead of paired.
    pub prior_fraction: f64,
    pub accel_bias: [f64; 3],
    pub gyro_bias: [f64; 3],
    pub accel_noise: f64,
    pub gyro_noise: f64,
    /// Isotropic noise of each sensor-frame feature observation (m).
    pub feature_noise: f64,
    /// Sensor-to-feature distance range (m).
    pub feature_range: [f64; 2],
    /// Minimum time separation of the two observations in a surfel pair (s).
    pub min_pair_gap: f64,
    pub motion: MotionProfile,
    pub linear_speed: f64,
    pub angular_speed: f64,
    pub vibration_hz: f64,
    /// Vibration amplitude in translation (m) and rotation (rad).
    pub vibration_translation: f64,
    pub vibration_rotation: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            window: 5.0,
            imu_rate: 100.0,
            n_features: 1000,
            prior_fraction: 0.3,
            accel_bias: [0.03, -0.02, 0.02],
            gyro_bias: [1.0e-3, -1.5e-3, 1.0e-3],
            accel_noise: 0.05,
            gyro_noise: 0.005,
            feature_noise: 0.01,
            feature_range: [2.0, 8.0],
            min_pair_gap: 0.2,
            motion: MotionProfile::Sinusoid,
            linear_speed: 0.9,
            angular_speed: 0.7,
            vibration_hz: 5.0,
            vibration_translation: 0.005,
            vibration_rotation: 0.002,
        }
    }
}

impl SimConfig {
    pub fn noise_free(mut self) -> Self {
        self.accel_bias = [0.0; 3];
        self.gyro_bias = [0.0; 3];
        self.accel_noise = 0.0;
        self.gyro_noise = 0.0;
        self.feature_noise = 0.0;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.window > 0.0 && self.imu_rate > 0.0) {
            return Err(SimError::Invalid(format!(
                "window {} s and rate {} Hz must be positive",
                self.window, self.imu_rate
            )));
        }
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        (self.window * self.imu_rate).round() as usize + 1
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Wave {
    pub amplitude: f64,
    pub omega: f64,
    pub phase: f64,
}

impl Wave {
    fn eval(&self, t: f64) -> f64 {
        self.amplitude * (self.omega * t + self.phase).sin()
    }
}

/// Closed-form ground-truth motion.
#[derive(Clone, Debug)]
pub enum Motion {
    Waves {
        translation: [Vec<Wave>; 3],
        rotation: [Vec<Wave>; 3],
    },
    Scripted {
        starts: Vec<(f64, Pose)>,
        segments: Vec<ScriptSegment>,
    },
}

impl Motion {
    pub fn new(cfg: &SimConfig) -> Self {
        let mut rng = stream(cfg.seed, Stream::Trajectory);
        let vib = |rng: &mut rand_chacha::ChaCha8Rng, amp: f64| Wave {
            amplitude: amp,
            omega: TAU * cfg.vibration_hz,
            phase: rng.random_range(0.0..TAU),
        };
        match &cfg.motion {
            MotionProfile::Sinusoid => {
                let axis_speed = cfg.linear_speed / 3f64.sqrt();
                let axis_rate = cfg.angular_speed / 3f64.sqrt();
                let mut translation: [Vec<Wave>; 3] = Default::default();
                let mut rotation: [Vec<Wave>; 3] = Default::default();
                for axis in 0..3 {
                    let f = rng.random_range(0.45..0.75);
                    translation[axis].push(Wave {
                        amplitude: axis_speed / (TAU * f),
                        omega: TAU * f,
                        phase: rng.random_range(0.0..TAU),
                    });
                    translation[axis].push(vib(&mut rng, cfg.vibration_translation));
                    let g = rng.random_range(0.45..0.75);
                    rotation[axis].push(Wave {
                        amplitude: axis_rate / (TAU * g),
                        omega: TAU * g,
                        phase: rng.random_range(0.0..TAU),
                    });
                    rotation[axis].push(vib(&mut rng, cfg.vibration_rotation));
                }
                Motion::Waves { translation, rotation }
            }
            MotionProfile::RandomWalk => {
                let mut translation: [Vec<Wave>; 3] = Default::default();
                let mut rotation: [Vec<Wave>; 3] = Default::default();
                let parts = 4.0f64;
                for axis in 0..3 {
                    for _ in 0..4 {
                        let f = rng.random_range(0.1..1.0);
                        translation[axis].push(Wave {
                            amplitude: cfg.linear_speed / (3f64.sqrt() * parts * TAU * f),
                            omega: TAU * f,
                            phase: rng.random_range(0.0..TAU),
                        });
                        let g = rng.random_range(0.1..1.0);
                        rotation[axis].push(Wave {
                            amplitude: cfg.angular_speed / (3f64.sqrt() * parts * TAU * g),
                            omega: TAU * g,
                            phase: rng.random_range(0.0..TAU),
                        });
                    }
                }
                Motion::Waves { translation, rotation }
            }
            MotionProfile::Scripted { segments } => {
                let mut starts = Vec::with_capacity(segments.len());
                let mut t = 0.0;
                let mut pose = Pose::identity();
                for s in segments {
                    starts.push((t, pose));
                    pose = pose.compose(&segment_motion(s, s.duration));
                    t += s.duration;
                }
                Motion::Scripted {
                    starts,
                    segments: segments.clone(),
                }
            }
        }
    }

    pub fn pose(&self, tau: f64) -> Pose {
        match self {
            Motion::Waves { translation, rotation } => {
                let sum = |waves: &[Wave]| waves.iter().map(|w| w.eval(tau)).sum::<f64>();
                let t = Vec3::new(sum(&translation[0]), sum(&translation[1]), sum(&translation[2]));
                let r = Vec3::new(sum(&rotation[0]), sum(&rotation[1]), sum(&rotation[2]));
                Pose::from_parts(so3::exp(&r), t)
            }
            Motion::Scripted { starts, segments } => {
                if segments.is_empty() {
                    return Pose::identity();
                }
                let i = starts
                    .partition_point(|(t0, _)| *t0 <= tau)
                    .saturating_sub(1)
                    .min(segments.len() - 1);
                let (t0, p0) = starts[i];
                p0.compose(&segment_motion(&segments[i], tau - t0))
            }
        }
    }
}

fn segment_motion(s: &ScriptSegment, dt: f64) -> Pose {
    let xi = Twist::new(Vec3::from(s.angular_velocity) * dt, Vec3::from(s.velocity) * dt);
    exp_se3(&xi).expect("finite script twist")
}

/// Simulated window: truth, IMU stream and dead-reckoned initial guess.
#[derive(Clone, Debug)]
pub struct SimRun {
    pub truth: Trajectory,
    pub imu: Vec<ImuSample>,
    pub init: Trajectory,
    pub motion: Motion,
}

/// Builds the ground truth, synthesizes IMU samples with the optimizer's own
/// finite-difference operators, and integrates them into the initial guess.
///
/// The accelerometer reads `R^T (d2t - g) - b_a + noise` and the gyroscope
/// `log(R_k^T R_k+1) / h - b_w + noise`, so the residuals vanish at the true
/// trajectory and true biases. Integration starts from the true pose and
/// velocity.
pub fn gen_trajectory_and_imu(cfg: &SimConfig) -> Result<SimRun, SimError> {
    cfg.validate()?;
    let motion = Motion::new(cfg);
    let n = cfg.sample_count();
    let h = 1.0 / cfg.imu_rate;
    // Samples -1 ..= n so every IMU sample has a full stencil.
    let ext: Vec<Pose> = (0..n + 2).map(|i| motion.pose((i as f64 - 1.0) * h)).collect();
    let mut noise = stream(cfg.seed, Stream::ImuNoise);
    let ba = Vec3::from(cfg.accel_bias);
    let bw = Vec3::from(cfg.gyro_bias);
    let mut imu = Vec::with_capacity(n);
    for k in 0..n {
        let (pm, p0, pp) = (&ext[k], &ext[k + 1], &ext[k + 2]);
        let acc = (pp.translation() - p0.translation() * 2.0 + pm.translation()) / (h * h);
        let accel = p0.rotation().transpose() * (acc - gravity_vector()) - ba + normal3(&mut noise, cfg.accel_noise);
        let omega = so3::log(&(p0.rotation().transpose() * pp.rotation())).map_err(TrajectoryError::from)? / h;
        let gyro = omega - bw + normal3(&mut noise, cfg.gyro_noise);
        imu.push(ImuSample {
            tau: k as f64 * h,
            accel,
            gyro,
        });
    }
    let truth = Trajectory::uniform(0.0, cfg.imu_rate, ext[1..=n].to_vec())?;
    let init = dead_reckon(&ext[0], &ext[1], &imu, h)?;
    Ok(SimRun {
        truth,
        imu,
        init,
        motion,
    })
}

/// Integrates IMU samples from the pose at `-h` and `0`.
pub fn dead_reckon(before: &Pose, start: &Pose, imu: &[ImuSample], h: f64) -> Result<Trajectory, SimError> {
    let mut poses = Vec::with_capacity(imu.len());
    let mut prev_t = *before.translation();
    let mut r = *start.rotation();
    let mut t = *start.translation();
    poses.push(*start);
    for s in imu.iter().take(imu.len().saturating_sub(1)) {
        let next_t = t * 2.0 - prev_t + (r * s.accel + gravity_vector()) * (h * h);
        let next_r = r * so3::exp(&(s.gyro * h));
        prev_t = t;
        t = next_t;
        r = next_r;
        poses.push(Pose::from_parts(r, t));
    }
    Ok(Trajectory::uniform(imu.first().map_or(0.0, |s| s.tau), 1.0 / h, poses)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::rms_errors;

    #[test]
    fn noise_free_integration_matches_truth() {
        let cfg = SimConfig::default().noise_free();
        let run = gen_trajectory_and_imu(&cfg).unwrap();
        let (et, er) = rms_errors(&run.init, &run.truth);
        assert!(et < 1e-6 && er < 1e-6, "{et} {er}");
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SimConfig { seed: 11, ..SimConfig::default() };
        let a = gen_trajectory_and_imu(&cfg).unwrap();
        let b = gen_trajectory_and_imu(&cfg).unwrap();
        assert_eq!(a.imu, b.imu);
        assert_eq!(a.init, b.init);
    }

    #[test]
    fn default_noise_drifts_by_decimeters() {
        let mut drifts = Vec::new();
        for seed in 0..5 {
            let cfg = SimConfig { seed, ..SimConfig::default() };
            let run = gen_trajectory_and_imu(&cfg).unwrap();
            let last = run.init.len() - 1;
            drifts.push((run.init.poses()[last].translation() - run.truth.poses()[last].translation()).norm());
        }
        drifts.sort_by(f64::total_cmp);
        assert!(drifts[2] > 0.05 && drifts[2] < 1.5, "{drifts:?}");
    }

    #[test]
    fn sinusoid_respects_envelope() {
        let cfg = SimConfig::default();
        let run = gen_trajectory_and_imu(&cfg).unwrap();
        let h = 1.0 / cfg.imu_rate;
        for w in run.truth.poses().windows(2) {
            let v = (w[1].translation() - w[0].translation()).norm() / h;
            assert!(v < 1.1 * cfg.linear_speed + 0.2);
            assert!(crate::lie::rotation_angle(w[1].rotation()) < 1.2);
        }
    }

    #[test]
    fn scripted_profile_integrates_twists() {
        let cfg = SimConfig {
            motion: MotionProfile::Scripted {
                segments: vec![
                    ScriptSegment { duration: 1.0, velocity: [1.0, 0.0, 0.0], angular_velocity: [0.0; 3] },
                    ScriptSegment { duration: 1.0, velocity: [0.0; 3], angular_velocity: [0.0, 0.0, 0.5] },
                ],
            },
            window: 2.0,
            ..SimConfig::default()
        };
        let m = Motion::new(&cfg);
        assert!((m.pose(1.0).translation() - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((crate::lie::rotation_angle(m.pose(2.0).rotation()) - 0.5).abs() < 1e-12);
    }
}
