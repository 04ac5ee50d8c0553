//! Beam noise, surfel matching, normal-inverse-Wishart fusion and colour.

mod temporal;

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{any_orthogonal, cholesky_lower, clamp_psd, sorted_eigen, symmetrize};
use crate::surfel_map::{DenseSurfel, SurfelMap};
use crate::{Mat3, Vec3};

pub use temporal::{
    icp_point_to_plane, temporal_fusion_step, DeformationTrigger, GlobalMap, IcpResult, LocalMap, StepMetrics, TemporalConfig,
};

/// Measurement dimension of a surfel point.
pub const N_Z: f64 = 3.0;

/// Observation count at which a surfel is promoted to stable.
pub const STABLE_OBSERVATIONS: u32 = 3;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("destination surfel has {dof} degrees of freedom; more than 4 are needed")]
    IllDefinedExtent { dof: f64 },
    #[error("measurement has no points")]
    EmptyMeasurement,
    #[error("invalid fusion input: {0}")]
    Invalid(String),
}

/// Range-dependent LiDAR noise parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Beam radius standard deviation (m).
    pub sigma_r: f64,
    /// Depth standard deviation at zero range (m).
    pub sigma_d0: f64,
    /// Depth standard deviation growth per meter of range.
    pub sigma_d_per_m: f64,
    /// Beam divergence (rad) driving the incidence-angle term.
    pub beam_divergence: f64,
    /// Incidence angles at or beyond this are treated as grazing.
    pub grazing_cutoff: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_r: 0.003,
            sigma_d0: 0.008,
            sigma_d_per_m: 0.0005,
            beam_divergence: 0.003,
            grazing_cutoff: FRAC_PI_2 - 1e-3,
        }
    }
}

impl NoiseModel {
    pub fn depth_sigma(&self, range: f64) -> f64 {
        self.sigma_d0 + self.sigma_d_per_m * range.abs()
    }
}

/// Beam-frame noise and the rotations taking it to the world frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamNoise {
    pub sigma_r2: f64,
    pub sigma_d2: f64,
    pub sigma_i2: f64,
    pub world_from_lidar: Mat3,
    pub lidar_from_beam: Mat3,
}

impl BeamNoise {
    pub fn beam_covariance(&self) -> Mat3 {
        Mat3::from_diagonal(&Vec3::new(self.sigma_r2, self.sigma_r2, self.sigma_i2 + self.sigma_d2))
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        let variances = [self.sigma_r2, self.sigma_d2, self.sigma_i2];
        if variances.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(FusionError::Invalid("beam variances must be finite and non-negative".into()));
        }
        for r in [&self.world_from_lidar, &self.lidar_from_beam] {
            if (r.transpose() * r - Mat3::identity()).abs().max() > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
                return Err(FusionError::Invalid("beam rotations must be orthonormal".into()));
            }
        }
        Ok(())
    }
}

pub fn beam_noise_world(bn: &BeamNoise) -> Mat3 {
    let r = bn.world_from_lidar * bn.lidar_from_beam;
    symmetrize(&(r * bn.beam_covariance() * r.transpose()))
}

/// Rotation whose third column is the unit beam direction `dir`.
pub fn beam_frame(dir: &Vec3) -> Mat3 {
    let z = dir.normalize();
    let x = any_orthogonal(&z);
    let y = z.cross(&x);
    Mat3::from_columns(&[x, y, z])
}

/// Incidence-angle variance; the flag reports a grazing-angle clamp.
pub fn incidence_variance(angle: f64, range: f64, model: &NoiseModel) -> (f64, bool) {
    let a = angle.abs();
    let clamped = a >= model.grazing_cutoff;
    let a = a.min(model.grazing_cutoff);
    ((range * a.tan() * model.beam_divergence).powi(2), clamped)
}

/// World-frame noise of a point seen from `origin` on a surface with `normal`.
pub fn point_noise(origin: &Vec3, point: &Vec3, normal: &Vec3, model: &NoiseModel) -> Mat3 {
    let ray = point - origin;
    let range = ray.norm();
    if range < 1e-9 {
        let s = model.sigma_d0.max(model.sigma_r).powi(2);
        return Mat3::identity() * s;
    }
    let dir = ray / range;
    let angle = dir.dot(normal).abs().min(1.0).acos();
    let (sigma_i2, _) = incidence_variance(angle, range, model);
    beam_noise_world(&BeamNoise {
        sigma_r2: model.sigma_r.powi(2),
        sigma_d2: model.depth_sigma(range).powi(2),
        sigma_i2,
        world_from_lidar: Mat3::identity(),
        lidar_from_beam: beam_frame(&dir),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchParams {
    /// In-plane resolution threshold (m).
    pub theta_r: f64,
    /// Along-normal Mahalanobis threshold.
    pub theta_d: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            theta_r: 0.02,
            theta_d: 3.0,
        }
    }
}

/// In-plane and along-normal distance of `dst` from `src` in the source
/// tangent plane, and the combined along-normal standard deviation.
pub fn match_geometry(src: &DenseSurfel, dst: &DenseSurfel) -> (f64, f64, f64) {
    let delta = dst.position - src.position;
    let d = src.normal.dot(&delta).abs();
    let r = (delta - src.normal * src.normal.dot(&delta)).norm();
    let var = src.normal.dot(&(src.position_cov * src.normal)) + dst.normal.dot(&(dst.position_cov * dst.normal));
    (r, d, var.max(0.0).sqrt())
}

/// True when `dst` passes both the resolution and the Mahalanobis gate.
pub fn passes_gates(src: &DenseSurfel, dst: &DenseSurfel, params: &MatchParams) -> bool {
    let (r, d, sigma) = match_geometry(src, dst);
    if !(r < params.theta_r) {
        return false;
    }
    if sigma > 0.0 {
        d / sigma < params.theta_d
    } else {
        d == 0.0 && params.theta_d > 0.0
    }
}

/// Map surfels accepted by both gates, ascending by id. The candidate radius
/// covers every centroid that could pass, so the result is exact.
pub fn match_surfel(src: &DenseSurfel, map: &SurfelMap, params: &MatchParams) -> Vec<u64> {
    let src_var = src.normal.dot(&(src.position_cov * src.normal)).max(0.0);
    let lambda_max = sorted_eigen(&src.position_cov).0[2].max(0.0);
    let reach = (params.theta_r.powi(2) + params.theta_d.powi(2) * (src_var + map.position_variance_bound())).sqrt();
    let radius = params.theta_r.max(3.0 * lambda_max.sqrt()).max(reach) * (1.0 + 1e-9);
    map.query_radius(&src.position, radius)
        .into_iter()
        .filter(|&id| map.get(id).is_some_and(|dst| passes_gates(src, dst, params)))
        .collect()
}

/// Summary of a batch of points to be fused into a surfel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measurement {
    pub mean: Vec3,
    /// Scatter about `mean` (not normalized).
    pub scatter: Mat3,
    pub count: usize,
    pub noise: Mat3,
    pub time: f64,
}

impl Measurement {
    /// Treats a freshly extracted surfel as one measurement of its points.
    pub fn from_surfel(s: &DenseSurfel) -> Self {
        Self {
            mean: s.position,
            scatter: s.scatter,
            count: s.dof.round().max(1.0) as usize,
            noise: s.beam_noise,
            time: s.timestamp,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FusionFlags {
    pub regularized: bool,
    pub clamped: bool,
    pub ambiguous_normal: bool,
}

fn inverse_lower(l: &Mat3) -> Mat3 {
    l.solve_lower_triangular(&Mat3::identity()).unwrap_or_else(Mat3::identity)
}

/// One normal-inverse-Wishart update with a noisy point batch. Square roots
/// are lower Cholesky factors.
pub fn fuse_surfel(dst: &DenseSurfel, meas: &Measurement) -> Result<(DenseSurfel, FusionFlags), FusionError> {
    if !(dst.dof > N_Z + 1.0) {
        return Err(FusionError::IllDefinedExtent { dof: dst.dof });
    }
    if meas.count == 0 {
        return Err(FusionError::EmptyMeasurement);
    }
    let mut flags = FusionFlags::default();
    let n = meas.count as f64;
    let sigma = symmetrize(&dst.position_cov);
    let x_hat = symmetrize(&(dst.scatter / (dst.dof - N_Z - 1.0)));
    let y = symmetrize(&(x_hat + meas.noise));
    let s = symmetrize(&(sigma + y / n));
    let (ls, reg_s) = cholesky_lower(&s);
    let (ly, reg_y) = cholesky_lower(&y);
    let (lx, _) = cholesky_lower(&x_hat);
    flags.regularized = reg_s || reg_y;
    let s_inv = {
        let li = inverse_lower(&ls);
        li.transpose() * li
    };
    let k = sigma * s_inv;
    let innovation = meas.mean - dst.position;
    let mean = dst.position + k * innovation;
    let (sigma_new, c1) = clamp_psd(&(sigma - k * sigma));
    let nn = innovation * innovation.transpose();
    let a = lx * inverse_lower(&ls);
    let b = lx * inverse_lower(&ly);
    let n_bar = a * nn * a.transpose();
    let y_bar = b * meas.scatter * b.transpose();
    let (scatter, c2) = clamp_psd(&(dst.scatter + n_bar + y_bar));
    flags.clamped = c1 || c2;

    let mut out = dst.clone();
    out.position = mean;
    out.position_cov = sigma_new;
    out.scatter = scatter;
    out.dof = dst.dof + n;
    out.obs_count = dst.obs_count.saturating_add(1);
    out.timestamp = dst.timestamp.max(meas.time);
    out.stable = out.obs_count >= STABLE_OBSERVATIONS;
    let (normal, ambiguous) = extract_normal(&out.scatter, &dst.normal);
    out.normal = normal;
    flags.ambiguous_normal = ambiguous;
    Ok((out, flags))
}

/// Eigenvector of the smallest eigenvalue of `scatter`, sign-matched to
/// `previous`. When the two smallest eigenvalues coincide the previous
/// normal is kept and the flag is set.
pub fn extract_normal(scatter: &Mat3, previous: &Vec3) -> (Vec3, bool) {
    let (values, vectors) = sorted_eigen(scatter);
    let scale = values.abs().max().max(f64::MIN_POSITIVE);
    if (values[1] - values[0]).abs() <= 1e-9 * scale {
        return (*previous, true);
    }
    let mut n: Vec3 = vectors.column(0).into_owned().normalize();
    if n.dot(previous) < 0.0 {
        n = -n;
    }
    (n, false)
}

/// Inputs of the colour confidence sigmoid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColourCue {
    /// Pixel distance from the optical center.
    pub r: f64,
    pub r_th: f64,
    /// Depths at the center pixel and its down, up, left and right neighbors.
    pub depths: [f64; 5],
    pub e: f64,
    pub f: f64,
    pub g: f64,
    pub w: f64,
}

impl ColourCue {
    pub fn new(r: f64, r_th: f64, depths: [f64; 5]) -> Result<Self, FusionError> {
        if !(r_th > 0.0) || depths.iter().any(|d| !(*d > 0.0)) || !(r >= 0.0) {
            return Err(FusionError::Invalid("colour cue needs r >= 0, r_th > 0 and positive depths".into()));
        }
        Ok(Self {
            r,
            r_th,
            depths,
            e: 1.0,
            f: 1.0,
            g: 1.0,
            w: 4.0,
        })
    }
}

pub fn colour_uncertainty(cue: &ColourCue) -> f64 {
    let mean = cue.depths.iter().sum::<f64>() / 5.0;
    let std = (cue.depths.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
    let alpha_r = cue.e * (cue.r / cue.r_th) - 0.5;
    let alpha_v = cue.f * std - 0.5;
    let alpha_d = cue.g * cue.depths[0] - 0.5;
    let s = 1.0 / (1.0 + (-cue.w * (alpha_r + alpha_v + alpha_d)).exp());
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
}

/// Precision-weighted colour and the combined uncertainty.
pub fn fuse_colour(dst: [f64; 3], sigma_d: f64, src: [f64; 3], sigma_s: f64) -> ([f64; 3], f64) {
    let (wd, ws) = (1.0 / sigma_d, 1.0 / sigma_s);
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = (dst[i] * wd + src[i] * ws) / (wd + ws);
    }
    (out, 1.0 / (wd + ws))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::so3;

    fn surfel(position: Vec3, normal: Vec3) -> DenseSurfel {
        DenseSurfel {
            position,
            normal,
            position_cov: Mat3::identity() * 1e-6,
            scatter: Mat3::from_diagonal(&Vec3::new(1e-3, 1e-3, 1e-8)),
            dof: 10.0,
            obs_count: 1,
            timestamp: 0.0,
            radius: 0.02,
            colour: [0.2, 0.4, 0.6],
            colour_sigma: 0.1,
            stable: false,
            beam_noise: Mat3::identity() * 1e-5,
        }
    }

    #[test]
    fn beam_noise_identity_and_trace() {
        let bn = BeamNoise {
            sigma_r2: 1e-5,
            sigma_d2: 4e-5,
            sigma_i2: 1e-6,
            world_from_lidar: Mat3::identity(),
            lidar_from_beam: Mat3::identity(),
        };
        assert_eq!(beam_noise_world(&bn), bn.beam_covariance());
        let rotated = BeamNoise {
            world_from_lidar: so3::exp(&Vec3::new(0.3, -1.0, 0.2)),
            lidar_from_beam: so3::exp(&Vec3::new(-0.5, 0.1, 2.0)),
            ..bn
        };
        assert!(rotated.validate().is_ok());
        let q = beam_noise_world(&rotated);
        assert!((q.trace() - bn.beam_covariance().trace()).abs() < 1e-18);
        let values = sorted_eigen(&q).0;
        assert!((values - Vec3::new(1e-5, 1e-5, 4.1e-5)).abs().max() < 1e-15);
    }

    #[test]
    fn incidence_variance_shape() {
        let m = NoiseModel::default();
        assert_eq!(incidence_variance(0.0, 5.0, &m).0, 0.0);
        let a = incidence_variance(0.4, 3.0, &m).0;
        let b = incidence_variance(0.4, 6.0, &m).0;
        assert!((b / a - 4.0).abs() < 1e-12);
        let mut last = -1.0;
        for i in 0..100 {
            let v = incidence_variance(i as f64 * 0.0155, 4.0, &m).0;
            assert!(v > last);
            last = v;
        }
        assert!(incidence_variance(FRAC_PI_2, 4.0, &m).1);
    }

    #[test]
    fn hand_evaluated_wishart_update() {
        let dst = DenseSurfel {
            position: Vec3::zeros(),
            normal: Vec3::z(),
            position_cov: Mat3::identity(),
            scatter: Mat3::identity(),
            dof: 5.0,
            ..surfel(Vec3::zeros(), Vec3::z())
        };
        let meas = Measurement {
            mean: Vec3::x(),
            scatter: Mat3::zeros(),
            count: 1,
            noise: Mat3::identity(),
            time: 0.0,
        };
        let (out, flags) = fuse_surfel(&dst, &meas).unwrap();
        assert!((out.position - Vec3::new(1.0 / 3.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((out.position_cov - Mat3::identity() * (2.0 / 3.0)).abs().max() < 1e-12);
        assert_eq!(out.dof, 6.0);
        let expected = Mat3::identity() + Vec3::x() * Vec3::x().transpose() / 3.0;
        assert!((out.scatter - expected).abs().max() < 1e-12);
        assert!(!flags.regularized);
    }

    #[test]
    fn zero_innovation_still_shrinks() {
        let dst = surfel(Vec3::new(1.0, 2.0, 3.0), Vec3::z());
        let meas = Measurement {
            mean: dst.position,
            scatter: Mat3::zeros(),
            count: 4,
            noise: Mat3::identity() * 1e-5,
            time: 1.0,
        };
        let (out, _) = fuse_surfel(&dst, &meas).unwrap();
        assert_eq!(out.position, dst.position);
        assert!(out.position_cov.trace() < dst.position_cov.trace());
    }

    #[test]
    fn gates() {
        let p = MatchParams::default();
        let a = surfel(Vec3::zeros(), Vec3::z());
        assert!(passes_gates(&a, &a, &p));
        let far = surfel(Vec3::new(1.5 * p.theta_r, 0.0, 0.0), Vec3::z());
        assert!(!passes_gates(&a, &far, &p));
        let map = SurfelMap::from_surfels([a.clone(), far]);
        assert_eq!(match_surfel(&a, &map, &p), vec![0]);
    }

    #[test]
    fn normal_extraction() {
        let (n, amb) = extract_normal(&Mat3::from_diagonal(&Vec3::new(1.0, 1.0, 1e-6)), &Vec3::z());
        assert!(!amb && (n - Vec3::z()).norm() < 1e-12);
        let (n, amb) = extract_normal(&Mat3::identity(), &Vec3::x());
        assert!(amb && n == Vec3::x());
    }

    #[test]
    fn colour_rules() {
        let (c, s) = fuse_colour([0.0, 0.2, 1.0], 0.5, [1.0, 0.4, 0.0], 0.5);
        assert!((c[0] - 0.5).abs() < 1e-15 && (c[1] - 0.3).abs() < 1e-15 && (c[2] - 0.5).abs() < 1e-15);
        assert_eq!(s, 0.25);
        let (c, _) = fuse_colour([0.1, 0.2, 0.3], 0.5, [1.0, 1.0, 1.0], 1e300);
        assert!((c[0] - 0.1).abs() < 1e-12);
        let cue = ColourCue::new(0.5, 1.0, [1.0; 5]).unwrap();
        assert!((colour_uncertainty(&cue) - 0.5).abs() < 1e-15);
        let sharp = ColourCue { w: 1e6, ..ColourCue::new(2.0, 1.0, [2.0; 5]).unwrap() };
        assert!(colour_uncertainty(&sharp) > 1.0 - 1e-12);
    }
}
