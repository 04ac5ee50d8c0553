//! Random initial misalignments for localization robustness studies.

use serde::{Deserialize, Serialize};

use crate::lie::Pose;
use crate::Vec3;

use super::rng::{normal, stream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MisalignProtocol {
    pub name: &'static str,
    /// Rotation std about z (degrees).
    pub sigma_theta_z: f64,
    /// Rotation std about x and y (degrees).
    pub sigma_theta_xy: f64,
    /// Translation std along z (m); x and y use half of it.
    pub sigma_t: f64,
    pub n_places: usize,
    pub n_repeats: usize,
}

impl MisalignProtocol {
    pub const fn easy() -> Self {
        Self::preset("easy", 10.0, 1.0, 0.5)
    }

    pub const fn medium() -> Self {
        Self::preset("medium", 50.0, 5.0, 5.0)
    }

    pub const fn hard() -> Self {
        Self::preset("hard", 100.0, 20.0, 50.0)
    }

    pub const fn identity() -> Self {
        Self::preset("identity", 0.0, 0.0, 0.0)
    }

    const fn preset(name: &'static str, z: f64, xy: f64, t: f64) -> Self {
        MisalignProtocol {
            name,
            sigma_theta_z: z,
            sigma_theta_xy: xy,
            sigma_t: t,
            n_places: 10,
            n_repeats: 50,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "easy" => Some(Self::easy()),
            "medium" => Some(Self::medium()),
            "hard" => Some(Self::hard()),
            "identity" => Some(Self::identity()),
            _ => None,
        }
    }

    /// Per-axis translation standard deviations.
    pub fn translation_sigmas(&self) -> Vec3 {
        Vec3::new(self.sigma_t * 0.5, self.sigma_t * 0.5, self.sigma_t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Misalignment {
    /// Sampled rotation vector components (degrees).
    pub rotation_deg: Vec3,
    pub translation: Vec3,
    pub pose: Pose,
}

/// `count` misalignments; rotation vectors draw `(x, y, z)` from
/// `N(0, (s_xy, s_xy, s_z))` degrees.
pub fn gen_misalignment(p: &MisalignProtocol, seed: u64, count: usize) -> Vec<Misalignment> {
    let mut rng = stream(seed, Stream::Misalignment);
    let ts = p.translation_sigmas();
    (0..count)
        .map(|_| {
            let rotation_deg = Vec3::new(
                normal(&mut rng) * p.sigma_theta_xy,
                normal(&mut rng) * p.sigma_theta_xy,
                normal(&mut rng) * p.sigma_theta_z,
            );
            let translation = Vec3::new(normal(&mut rng) * ts.x, normal(&mut rng) * ts.y, normal(&mut rng) * ts.z);
            Misalignment {
                rotation_deg,
                translation,
                pose: Pose::from_rotation_vector(rotation_deg.map(f64::to_radians), translation),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigmas_give_identity() {
        for m in gen_misalignment(&MisalignProtocol::identity(), 1, 20) {
            assert_eq!(m.pose, Pose::identity());
        }
    }

    #[test]
    fn empirical_moments_match() {
        let p = MisalignProtocol::medium();
        let draws = gen_misalignment(&p, 5, 10_000);
        let std = |f: &dyn Fn(&Misalignment) -> f64| {
            let v: Vec<f64> = draws.iter().map(f).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        };
        let rel = |got: f64, want: f64| ((got - want) / want).abs();
        assert!(rel(std(&|m| m.rotation_deg.z), p.sigma_theta_z) < 0.1);
        assert!(rel(std(&|m| m.rotation_deg.x), p.sigma_theta_xy) < 0.1);
        assert!(rel(std(&|m| m.translation.z), p.sigma_t) < 0.1);
        assert!(rel(std(&|m| m.translation.x), p.sigma_t / 2.0) < 0.1);
    }

    #[test]
    fn hard_dominates_easy() {
        let med = |p: &MisalignProtocol| {
            let mut v: Vec<f64> = gen_misalignment(p, 9, 501).iter().map(|m| m.translation.norm()).collect();
            v.sort_by(f64::total_cmp);
            v[250]
        };
        assert!(med(&MisalignProtocol::hard()) > med(&MisalignProtocol::easy()));
    }
}
