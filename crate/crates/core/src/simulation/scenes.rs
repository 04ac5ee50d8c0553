//! Map-level scenarios: repeated scans of a noisy plane and a two-pass
//! sparse map whose second pass is rigidly offset.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::fusion::{point_noise, NoiseModel};
use crate::lie::Pose;
use crate::linalg::cholesky_lower;
use crate::surfel_map::{ScanPoint, SparseSurfel};
use crate::{Mat3, Vec3};

use super::rng::{normal3, stream, substream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlaneScanConfig {
    /// Half side of the square patch of the plane z = 0 (m).
    pub half_size: f64,
    /// Sensor height above the plane (m).
    pub height: f64,
    /// Horizontal spread of sensor origins between scans (m).
    pub origin_spread: f64,
    pub n_scans: usize,
    pub points_per_scan: usize,
    pub scan_interval: f64,
}

impl Default for PlaneScanConfig {
    fn default() -> Self {
        Self {
            half_size: 0.5,
            height: 3.0,
            origin_spread: 1.0,
            n_scans: 10,
            points_per_scan: 12_000,
            scan_interval: 0.1,
        }
    }
}

/// Scans of the plane z = 0 with per-point beam noise drawn from the noise
/// model. Each scan comes from its own sensor origin.
pub fn gen_plane_scans(cfg: &PlaneScanConfig, model: &NoiseModel, seed: u64) -> Vec<Vec<ScanPoint>> {
    (0..cfg.n_scans)
        .map(|k| {
            let mut rng = substream(seed, Stream::Sensor, k as u64);
            let mut noise = substream(seed, Stream::FeatureNoise, k as u64);
            let s = cfg.origin_spread;
            let origin = Vec3::new(rng.random_range(-s..=s), rng.random_range(-s..=s), cfg.height);
            let h = cfg.half_size;
            (0..cfg.points_per_scan)
                .map(|_| {
                    let truth = Vec3::new(rng.random_range(-h..=h), rng.random_range(-h..=h), 0.0);
                    let q = point_noise(&origin, &truth, &Vec3::z(), model);
                    let (l, _) = cholesky_lower(&q);
                    ScanPoint {
                        position: truth + l * normal3(&mut noise, 1.0),
                        time: k as f64 * cfg.scan_interval,
                        origin,
                        colour: [0.5; 3],
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BentMapConfig {
    pub surfels_per_pass: usize,
    /// Half side of the square room whose walls are traversed (m).
    pub room_half: f64,
    pub pass_duration: f64,
    /// Time between the start of the first and the second pass (s).
    pub revisit_delay: f64,
    /// Rotation vector and translation of the second-pass drift.
    pub drift_rotation: [f64; 3],
    pub drift_translation: [f64; 3],
    pub position_noise: f64,
}

impl Default for BentMapConfig {
    fn default() -> Self {
        Self {
            surfels_per_pass: 400,
            room_half: 6.0,
            pass_duration: 40.0,
            revisit_delay: 100.0,
            drift_rotation: [0.0, 0.0, 0.05],
            drift_translation: [0.3, -0.2, 0.1],
            position_noise: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BentMap {
    pub first_pass: Vec<SparseSurfel>,
    pub second_pass: Vec<SparseSurfel>,
    /// Maps second-pass coordinates onto the first pass.
    pub correction: Pose,
}

impl BentMapConfig {
    pub fn drift(&self) -> Pose {
        Pose::from_rotation_vector(Vec3::from(self.drift_rotation), Vec3::from(self.drift_translation))
    }
}

fn wall_point(s: f64, half: f64, height: f64) -> (Vec3, Vec3) {
    let side = ((s * 4.0).floor() as usize).min(3);
    let u = s * 4.0 - side as f64;
    let a = -half + 2.0 * half * u;
    match side {
        0 => (Vec3::new(a, -half, height), Vec3::y()),
        1 => (Vec3::new(half, a, height), -Vec3::x()),
        2 => (Vec3::new(-a, half, height), -Vec3::y()),
        _ => (Vec3::new(-half, -a, height), Vec3::x()),
    }
}

/// Two laps around a room's walls. The second lap is expressed in a frame
/// drifted by the configured rigid motion, so `correction` realigns it.
pub fn gen_bent_map(cfg: &BentMapConfig, seed: u64) -> BentMap {
    let mut rng = stream(seed, Stream::Scene);
    let drift = cfg.drift();
    let correction = drift.inverse();
    let mut lap = |offset: f64, frame: &Pose| -> Vec<SparseSurfel> {
        (0..cfg.surfels_per_pass)
            .map(|i| {
                let s = (i as f64 + rng.random::<f64>()) / cfg.surfels_per_pass as f64;
                let (p, n) = wall_point(s, cfg.room_half, rng.random_range(0.0..2.5));
                let p = p + normal3(&mut rng, cfg.position_noise);
                SparseSurfel {
                    centroid: frame.transform_point(&p),
                    covariance: frame.rotation() * Mat3::from_diagonal(&Vec3::new(0.01, 0.01, 1e-6)) * frame.rotation().transpose(),
                    count: 20,
                    level: 0,
                    timestamp: offset + s * cfg.pass_duration,
                    normal: frame.rotate(&n),
                    planarity: 1.0,
                    degenerate: false,
                }
            })
            .collect()
    };
    let first_pass = lap(0.0, &Pose::identity());
    let second_pass = lap(cfg.revisit_delay, &drift);
    BentMap {
        first_pass,
        second_pass,
        correction,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plane_scans_are_deterministic() {
        let cfg = PlaneScanConfig {
            n_scans: 2,
            points_per_scan: 50,
            ..PlaneScanConfig::default()
        };
        let a = gen_plane_scans(&cfg, &NoiseModel::default(), 3);
        let b = gen_plane_scans(&cfg, &NoiseModel::default(), 3);
        assert_eq!(a.len(), 2);
        assert!(a.iter().zip(&b).all(|(x, y)| x.iter().zip(y).all(|(p, q)| p.position == q.position)));
    }

    #[test]
    fn correction_realigns_second_lap() {
        let cfg = BentMapConfig::default();
        let m = gen_bent_map(&cfg, 1);
        let on_wall = |p: &Vec3| (p.x.abs().max(p.y.abs()) - cfg.room_half).abs() < 1e-9;
        assert!(m.first_pass.iter().all(|s| on_wall(&s.centroid)));
        assert!(m.second_pass.iter().any(|s| !on_wall(&s.centroid)));
        assert!(m.second_pass.iter().all(|s| on_wall(&m.correction.transform_point(&s.centroid))));
        assert!(m.second_pass[0].timestamp >= cfg.revisit_delay);
    }
}
