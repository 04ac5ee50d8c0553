//! Planar places observed in two misaligned maps, with a feature provider
//! that corrupts ground-truth correspondences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::lie::Pose;
use crate::linalg::any_orthogonal;
use crate::localization::{CorrespondenceProvider, FeaturePair, Place, PlanarPoint};
use crate::Vec3;

use super::rng::{normal3, substream, unit3, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlaceConfig {
    pub n_patches: usize,
    pub points_per_patch: usize,
    /// Half side of the cube holding patch centres (m).
    pub half_extent: f64,
    /// Half side of each square patch (m).
    pub patch_half_size: f64,
    /// Distance between consecutive place centres (m).
    pub spacing: f64,
    /// Standard deviation of surfel noise along the normal (m).
    pub surfel_noise: f64,
    pub n_features: usize,
    pub outlier_fraction: f64,
    /// Per-axis standard deviation of feature jitter (m).
    pub feature_jitter: f64,
}

impl Default for PlaceConfig {
    fn default() -> Self {
        Self {
            n_patches: 8,
            points_per_patch: 60,
            half_extent: 5.0,
            patch_half_size: 1.5,
            spacing: 30.0,
            surfel_noise: 0.005,
            n_features: 60,
            outlier_fraction: 0.3,
            feature_jitter: 0.05 / 3.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PlaceScene {
    pub reference: Vec<PlanarPoint>,
    pub source: Vec<PlanarPoint>,
    pub features: Vec<FeaturePair>,
}

impl CorrespondenceProvider for PlaceScene {
    fn feature_pairs(&self) -> Vec<FeaturePair> {
        self.features.clone()
    }
}

impl Place for PlaceScene {
    fn source(&self) -> &[PlanarPoint] {
        &self.source
    }

    fn reference(&self) -> &[PlanarPoint] {
        &self.reference
    }
}

struct Patch {
    center: Vec3,
    normal: Vec3,
    u: Vec3,
    v: Vec3,
}

impl Patch {
    fn sample<R: Rng>(&self, rng: &mut R, half: f64) -> Vec3 {
        self.center + self.u * rng.random_range(-half..=half) + self.v * rng.random_range(-half..=half)
    }
}

/// Place `index` of session `seed`. `truth` maps source coordinates into the
/// reference frame; source and reference surfels are independent samples of
/// the same patches.
pub fn gen_place(cfg: &PlaceConfig, seed: u64, index: usize, truth: &Pose) -> PlaceScene {
    let mut rng = substream(seed, Stream::Scene, index as u64);
    let mut noise = substream(seed, Stream::FeatureNoise, index as u64);
    let mut corr = substream(seed, Stream::Correspondences, index as u64);
    let origin = Vec3::new(cfg.spacing * index as f64, 0.0, 0.0);
    let mut patches = vec![Patch {
        center: origin - Vec3::z() * cfg.half_extent,
        normal: Vec3::z(),
        u: Vec3::x(),
        v: Vec3::y(),
    }];
    for _ in 1..cfg.n_patches {
        let normal = unit3(&mut rng);
        let u = any_orthogonal(&normal);
        let center = origin + Vec3::from_fn(|_, _| rng.random_range(-cfg.half_extent..=cfg.half_extent));
        patches.push(Patch {
            center,
            normal,
            u,
            v: normal.cross(&u),
        });
    }
    let inv = truth.inverse();
    let mut reference = Vec::new();
    let mut source = Vec::new();
    for patch in &patches {
        let half = if patch.normal == Vec3::z() { cfg.half_extent } else { cfg.patch_half_size };
        for _ in 0..cfg.points_per_patch {
            let p = patch.sample(&mut rng, half) + patch.normal * (cfg.surfel_noise * super::rng::normal(&mut noise));
            reference.push(PlanarPoint {
                position: p,
                normal: patch.normal,
            });
            let q = patch.sample(&mut rng, half) + patch.normal * (cfg.surfel_noise * super::rng::normal(&mut noise));
            source.push(PlanarPoint {
                position: inv.transform_point(&q),
                normal: inv.rotate(&patch.normal),
            });
        }
    }
    let features = (0..cfg.n_features)
        .map(|_| {
            let patch = &patches[corr.random_range(0..patches.len())];
            let p = patch.sample(&mut corr, cfg.patch_half_size);
            let source = inv.transform_point(&(p + normal3(&mut noise, cfg.feature_jitter)));
            if corr.random::<f64>() < cfg.outlier_fraction {
                let wrong = origin + Vec3::from_fn(|_, _| corr.random_range(-cfg.half_extent..=cfg.half_extent));
                FeaturePair {
                    reference: wrong,
                    source,
                    outlier: true,
                }
            } else {
                FeaturePair {
                    reference: p,
                    source,
                    outlier: false,
                }
            }
        })
        .collect();
    PlaceScene {
        reference,
        source,
        features,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_consistent() {
        let truth = Pose::from_rotation_vector(Vec3::new(0.1, -0.2, 1.0), Vec3::new(3.0, -2.0, 1.0));
        let a = gen_place(&PlaceConfig::default(), 4, 2, &truth);
        let b = gen_place(&PlaceConfig::default(), 4, 2, &truth);
        assert_eq!(a.source, b.source);
        assert_eq!(a.features, b.features);
        let cfg = PlaceConfig {
            surfel_noise: 0.0,
            feature_jitter: 0.0,
            ..PlaceConfig::default()
        };
        let c = gen_place(&cfg, 4, 2, &truth);
        for f in c.features.iter().filter(|f| !f.outlier) {
            assert!((truth.transform_point(&f.source) - f.reference).norm() < 1e-12);
        }
        let outliers = c.features.iter().filter(|f| f.outlier).count();
        assert!(outliers > 5 && outliers < 35);
    }
}
