//! Random planar features observed along a simulated window.

use rand::Rng;

use crate::lie::Pose;
use crate::local_mapping::{Constraints, MapPriorConstraint, SurfelPairConstraint};
use crate::trajectory::Trajectory;
use crate::Vec3;

use super::motion::SimConfig;
use super::rng::{normal3, stream, unit3, Stream};
use super::SimError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Feature {
    pub world: Vec3,
    pub normal: Vec3,
    /// Observation times; a single time means the feature is a map anchor.
    pub times: [f64; 2],
    pub anchored: bool,
}

#[derive(Clone, Debug)]
pub struct FeatureScene {
    pub features: Vec<Feature>,
    pub constraints: Constraints,
}

/// Features scattered around the sensor path. A `prior_fraction` share are
/// anchored to the world map; the rest are seen twice at different times.
/// Sensor poses come from interpolating `truth`, so noise-free observations
/// have exactly zero residual on it.
pub fn gen_surfel_scene(cfg: &SimConfig, truth: &Trajectory) -> Result<FeatureScene, SimError> {
    cfg.validate()?;
    let [near, far] = cfg.feature_range;
    if !(far > near && near >= 0.0) {
        return Err(SimError::EmptyVolume);
    }
    let mut rng = stream(cfg.seed, Stream::Scene);
    let mut noise = stream(cfg.seed, Stream::FeatureNoise);
    let observe = |pose: &Pose, p: &Vec3, noise: &mut rand_chacha::ChaCha8Rng| {
        pose.inverse().transform_point(&(p + normal3(noise, cfg.feature_noise)))
    };
    let h = 1.0 / cfg.imu_rate;
    let mut features = Vec::with_capacity(cfg.n_features);
    let mut constraints = Constraints::default();
    let n_anchor = (cfg.n_features as f64 * cfg.prior_fraction).round() as usize;
    for i in 0..cfg.n_features {
        let anchored = i < n_anchor;
        // Timestamps stay a few samples inside the window so interpolation
        // brackets always exist.
        let ta = rng.random_range(2.0 * h..cfg.window - 2.0 * h);
        let tb = if anchored {
            ta
        } else {
            loop {
                let t = rng.random_range(2.0 * h..cfg.window - 2.0 * h);
                if (t - ta).abs() >= cfg.min_pair_gap {
                    break t;
                }
            }
        };
        let pa = truth.sample(ta)?;
        let world = pa.translation() + unit3(&mut rng) * rng.random_range(near..far);
        let normal = unit3(&mut rng);
        if anchored {
            let u_m = world + normal3(&mut noise, cfg.feature_noise);
            let u_c = observe(&pa, &world, &mut noise);
            constraints
                .priors
                .push(MapPriorConstraint::new(u_m, u_c, ta, normal).map_err(|e| SimError::Invalid(e.to_string()))?);
        } else {
            let pb = truth.sample(tb)?;
            let u_a = observe(&pa, &world, &mut noise);
            let u_b = observe(&pb, &world, &mut noise);
            constraints.pairs.push(
                SurfelPairConstraint::new(u_a, ta, u_b, tb, normal).map_err(|e| SimError::Invalid(e.to_string()))?,
            );
        }
        features.push(Feature {
            world,
            normal,
            times: [ta, tb],
            anchored,
        });
    }
    Ok(FeatureScene { features, constraints })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::local_mapping::{residual_map_prior, residual_surfel_pair};
    use crate::simulation::motion::gen_trajectory_and_imu;
    use crate::trajectory::ControlGrid;

    #[test]
    fn noise_free_observations_back_project() {
        let cfg = SimConfig { n_features: 200, ..SimConfig::default().noise_free() };
        let run = gen_trajectory_and_imu(&cfg).unwrap();
        let scene = gen_surfel_scene(&cfg, &run.truth).unwrap();
        let grid = ControlGrid::covering(0.0, cfg.window, 0.1).unwrap();
        for c in &scene.constraints.pairs {
            assert!(residual_surfel_pair(c, &run.truth, &grid).unwrap().abs() < 1e-12);
        }
        for c in &scene.constraints.priors {
            assert!(residual_map_prior(c, &run.truth, &grid).unwrap().abs() < 1e-12);
        }
        assert_eq!(scene.constraints.priors.len(), 60);
    }

    #[test]
    fn empty_volume_is_rejected() {
        let cfg = SimConfig { feature_range: [3.0, 3.0], ..SimConfig::default() };
        let run = gen_trajectory_and_imu(&cfg).unwrap();
        assert!(matches!(gen_surfel_scene(&cfg, &run.truth), Err(SimError::EmptyVolume)));
    }

    #[test]
    fn seed_determinism() {
        let cfg = SimConfig { n_features: 50, seed: 3, ..SimConfig::default() };
        let run = gen_trajectory_and_imu(&cfg).unwrap();
        let a = gen_surfel_scene(&cfg, &run.truth).unwrap();
        let b = gen_surfel_scene(&cfg, &run.truth).unwrap();
        assert_eq!(a.features, b.features);
    }
}
