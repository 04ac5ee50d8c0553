//! Misalignment estimation for global loop closure: combined
//! point-to-plane/point-to-point registration and sequential SE(3) fusion.

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::{exp_se3, hat, left_jacobian_inv_se3, log_se3, so3, LieError, Pose, Twist};
use crate::surfel_map::SurfelIndex;
use crate::{Mat6, Vec3};

/// 0.99 quantile of the chi-square distribution with six degrees of freedom.
pub const CHI2_6_99: f64 = 16.811893829770927;

#[derive(Debug, Error)]
pub enum LocalizationError {
    #[error("only {0} correspondences; at least 10 are needed")]
    InsufficientOverlap(usize),
    #[error("fusion normal matrix is singular")]
    DegenerateFusion,
    #[error("estimate is flagged unreliable")]
    Unreliable,
    #[error(transparent)]
    Lie(#[from] LieError),
}

/// Surfel centroid with its unit normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanarPoint {
    pub position: Vec3,
    pub normal: Vec3,
}

/// Matched 3D feature; `outlier` is ground truth known only in simulation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeaturePair {
    pub reference: Vec3,
    pub source: Vec3,
    pub outlier: bool,
}

/// Supplies feature correspondences between a source and a reference map.
pub trait CorrespondenceProvider {
    fn feature_pairs(&self) -> Vec<FeaturePair>;
}

impl CorrespondenceProvider for Vec<FeaturePair> {
    fn feature_pairs(&self) -> Vec<FeaturePair> {
        self.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    pub use_surfels: bool,
    pub use_features: bool,
    pub max_iterations: usize,
    /// Weight of the normal difference in the surfel matching metric (m).
    pub beta: f64,
    /// Cauchy scale of the point-to-plane residuals (m).
    pub surfel_scale: f64,
    /// Final Cauchy scale of the feature residuals (m).
    pub feature_scale: f64,
    /// Per-iteration shrink factor of the annealed feature scale.
    pub anneal: f64,
    pub step_tolerance: f64,
    /// Point-to-plane residual below which a surfel pair counts as inlier (m).
    pub inlier_distance: f64,
    /// Minimum surfel inlier fraction for a reliable estimate.
    pub min_inlier_fraction: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            use_surfels: true,
            use_features: true,
            max_iterations: 60,
            beta: 0.5,
            surfel_scale: 0.1,
            feature_scale: 0.05,
            anneal: 0.7,
            step_tolerance: 1e-8,
            inlier_distance: 0.05,
            min_inlier_fraction: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentEstimate {
    /// Maps source coordinates into the reference frame.
    pub pose: Pose,
    /// Covariance of a left twist perturbation, (rotation, translation).
    pub covariance: Mat6,
    pub inlier_fraction: f64,
    pub place: usize,
    pub reliable: bool,
    pub iterations: usize,
}

fn cauchy_weight(r: f64, c: f64) -> f64 {
    1.0 / (1.0 + (r / c).powi(2))
}

struct Matcher<'a> {
    reference: &'a [PlanarPoint],
    index: SurfelIndex,
    beta: f64,
}

impl<'a> Matcher<'a> {
    fn new(reference: &'a [PlanarPoint], beta: f64) -> Self {
        let center = reference.iter().map(|p| p.position).sum::<Vec3>() / reference.len().max(1) as f64;
        let mut index = SurfelIndex::new(center, 16.0, 16);
        for (i, p) in reference.iter().enumerate() {
            index.insert(i as u64, p.position);
        }
        Self { reference, index, beta }
    }

    fn metric(&self, q: &PlanarPoint, j: usize) -> f64 {
        let r = &self.reference[j];
        ((r.position - q.position).norm_squared() + self.beta.powi(2) * (r.normal - q.normal).norm_squared()).sqrt()
    }

    /// Nearest reference point in the joint position/normal metric.
    fn nearest(&self, q: &PlanarPoint) -> Option<usize> {
        let (first, _) = self.index.nearest(&q.position)?;
        let bound = self.metric(q, first as usize);
        self.index
            .query_radius(&q.position, bound * (1.0 + 1e-12))
            .into_iter()
            .map(|j| (j as usize, self.metric(q, j as usize)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|(j, _)| j)
    }
}

/// Jacobian of `n·(p_r - p')` with respect to a left perturbation of the
/// pose that produced `p'`.
fn plane_row(p: &Vec3, n: &Vec3) -> Vector6<f64> {
    let mut j = Vector6::zeros();
    j.fixed_rows_mut::<3>(0).copy_from(&(-p.cross(n)));
    j.fixed_rows_mut::<3>(3).copy_from(&(-n));
    j
}

/// Robust Gauss-Newton registration of `source` onto `reference` starting
/// from `init`. Surfel pairs are re-matched every iteration; feature pairs
/// are fixed. The feature kernel is annealed from the initial residual scale.
pub fn combined_registration(
    provider: &dyn CorrespondenceProvider,
    source: &[PlanarPoint],
    reference: &[PlanarPoint],
    init: Pose,
    place: usize,
    cfg: &RegistrationConfig,
) -> Result<AlignmentEstimate, LocalizationError> {
    let features = if cfg.use_features { provider.feature_pairs() } else { Vec::new() };
    let n_surfel = if cfg.use_surfels && !reference.is_empty() { source.len() } else { 0 };
    if n_surfel + features.len() < 10 {
        return Err(LocalizationError::InsufficientOverlap(n_surfel + features.len()));
    }
    let matcher = Matcher::new(reference, cfg.beta);
    let mut pose = init;
    let mut scale = if features.is_empty() {
        cfg.feature_scale
    } else {
        let mut r: Vec<f64> = features.iter().map(|f| (f.reference - pose.transform_point(&f.source)).norm()).collect();
        r.sort_by(f64::total_cmp);
        r[r.len() / 2].max(cfg.feature_scale)
    };
    let mut converged = false;
    let mut iterations = 0;
    let mut h = Matrix6::<f64>::zeros();
    let mut weighted_sq = 0.0;
    let mut rows = 0usize;
    for _ in 0..cfg.max_iterations {
        iterations += 1;
        h = Matrix6::zeros();
        let mut g = Vector6::<f64>::zeros();
        weighted_sq = 0.0;
        rows = 0;
        if n_surfel > 0 {
            for s in source {
                let q = PlanarPoint {
                    position: pose.transform_point(&s.position),
                    normal: pose.rotate(&s.normal),
                };
                let Some(j) = matcher.nearest(&q) else { continue };
                let r = &reference[j];
                let e = r.normal.dot(&(r.position - q.position));
                let w = cauchy_weight(e, cfg.surfel_scale);
                let jac = plane_row(&q.position, &r.normal);
                h += jac * jac.transpose() * w;
                g += jac * (w * e);
                weighted_sq += w * e * e;
                rows += 1;
            }
        }
        for f in &features {
            let p = pose.transform_point(&f.source);
            let e = f.reference - p;
            let w = cauchy_weight(e.norm(), scale);
            let mut jac = nalgebra::Matrix3x6::<f64>::zeros();
            jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(&p));
            jac.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-nalgebra::Matrix3::identity()));
            h += jac.transpose() * jac * w;
            g += jac.transpose() * e * w;
            weighted_sq += w * e.norm_squared();
            rows += 3;
        }
        let damped = h + Matrix6::identity() * (1e-9 * h.trace().max(1e-12));
        let Some(delta) = damped.cholesky().map(|c| c.solve(&(-g))) else {
            break;
        };
        pose = exp_se3(&Twist(delta))?.compose(&pose);
        let annealed = scale <= cfg.feature_scale;
        scale = (scale * cfg.anneal).max(cfg.feature_scale);
        if delta.norm() < cfg.step_tolerance && annealed {
            converged = true;
            break;
        }
    }

    let mut inliers = 0usize;
    for s in source.iter().take(n_surfel) {
        let q = PlanarPoint {
            position: pose.transform_point(&s.position),
            normal: pose.rotate(&s.normal),
        };
        if let Some(j) = matcher.nearest(&q) {
            let r = &reference[j];
            if r.normal.dot(&(r.position - q.position)).abs() < cfg.inlier_distance && r.normal.dot(&q.normal) > 0.9 {
                inliers += 1;
            }
        }
    }
    let inlier_fraction = if n_surfel > 0 {
        inliers as f64 / n_surfel as f64
    } else {
        let good = features
            .iter()
            .filter(|f| (f.reference - pose.transform_point(&f.source)).norm() < 3.0 * cfg.feature_scale)
            .count();
        good as f64 / features.len().max(1) as f64
    };
    let dof = rows.saturating_sub(6).max(1) as f64;
    let variance = (weighted_sq / dof).max(1e-12);
    let covariance = h
        .try_inverse()
        .map(|inv| (inv + inv.transpose()) * 0.5 * variance)
        .unwrap_or_else(|| Mat6::identity() * 1e6);
    Ok(AlignmentEstimate {
        pose,
        covariance,
        inlier_fraction,
        place,
        reliable: converged && inlier_fraction >= cfg.min_inlier_fraction,
        iterations,
    })
}

fn spd_inverse6(m: &Mat6) -> Option<Mat6> {
    let s = (m + m.transpose()) * 0.5;
    s.cholesky().map(|c| c.inverse())
}

/// Fuses a new estimate into the current one by iterated Gauss-Newton on
/// the sum of Mahalanobis twist errors.
pub fn sequential_fuse(current: &AlignmentEstimate, new: &AlignmentEstimate) -> Result<AlignmentEstimate, LocalizationError> {
    fuse_many(&[current, new]).map(|(pose, covariance)| AlignmentEstimate {
        pose,
        covariance,
        inlier_fraction: current.inlier_fraction.min(new.inlier_fraction),
        place: new.place,
        reliable: current.reliable && new.reliable,
        iterations: current.iterations + new.iterations,
    })
}

/// Joint minimizer of the twist errors of all `estimates`, starting from
/// the first one, and its covariance.
pub fn fuse_many(estimates: &[&AlignmentEstimate]) -> Result<(Pose, Mat6), LocalizationError> {
    let infos: Vec<Mat6> = estimates
        .iter()
        .map(|e| spd_inverse6(&e.covariance).ok_or(LocalizationError::DegenerateFusion))
        .collect::<Result<_, _>>()?;
    let mut pose = estimates.first().ok_or(LocalizationError::DegenerateFusion)?.pose;
    let mut a = Mat6::zeros();
    for _ in 0..=10 {
        a = Mat6::zeros();
        let mut b = Vector6::<f64>::zeros();
        for (e, info) in estimates.iter().zip(&infos) {
            let xi = log_se3(&pose.compose(&e.pose.inverse()))?;
            let jinv = left_jacobian_inv_se3(&xi)?;
            a += jinv.transpose() * info * jinv;
            b += jinv.transpose() * info * xi.0;
        }
        let a_inv = spd_inverse6(&a).ok_or(LocalizationError::DegenerateFusion)?;
        let step = -(a_inv * b);
        if step.norm() < 1e-10 {
            return Ok((pose, a_inv));
        }
        pose = exp_se3(&Twist(step))?.compose(&pose);
    }
    let a_inv = spd_inverse6(&a).ok_or(LocalizationError::DegenerateFusion)?;
    Ok((pose, a_inv))
}

/// Mahalanobis distance squared between two estimates under their summed
/// covariance.
pub fn gate_distance(a: &AlignmentEstimate, b: &AlignmentEstimate) -> Result<f64, LocalizationError> {
    let xi = log_se3(&a.pose.compose(&b.pose.inverse()))?;
    let s = spd_inverse6(&(a.covariance + b.covariance)).ok_or(LocalizationError::DegenerateFusion)?;
    Ok(xi.0.dot(&(s * xi.0)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub sigma_stop: f64,
    pub max_places: usize,
    pub gate: f64,
    pub registration: RegistrationConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            sigma_stop: 1e-4,
            max_places: 10,
            gate: CHI2_6_99,
            registration: RegistrationConfig::default(),
        }
    }
}

/// Data observed at one candidate place.
pub trait Place: CorrespondenceProvider {
    fn source(&self) -> &[PlanarPoint];
    fn reference(&self) -> &[PlanarPoint];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Accepted,
    Rejected,
    Unreliable,
    Failed,
}

impl Decision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Decision::Accepted => "accepted",
            Decision::Rejected => "rejected",
            Decision::Unreliable => "unreliable",
            Decision::Failed => "failed",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionRow {
    pub place: usize,
    pub estimate: Option<Pose>,
    pub inlier: f64,
    pub decision: Decision,
    /// Trace of the fused covariance after this place.
    pub trace_cov: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionOutcome {
    /// Running fused estimate, if any place was accepted.
    pub fused: Option<AlignmentEstimate>,
    /// True when the fused covariance met the stopping threshold.
    pub success: bool,
    pub rows: Vec<SessionRow>,
}

/// Registers at successive places, gating each estimate against the running
/// fusion and stopping once the fused covariance is small enough.
pub fn localization_session(places: &[&dyn Place], init: Pose, cfg: &SessionConfig) -> SessionOutcome {
    let mut fused: Option<AlignmentEstimate> = None;
    let mut rows = Vec::new();
    for (k, place) in places.iter().take(cfg.max_places).enumerate() {
        let start = fused.as_ref().map_or(init, |f| f.pose);
        let est = match combined_registration(*place, place.source(), place.reference(), start, k, &cfg.registration) {
            Ok(e) => e,
            Err(err) => {
                log::debug!("place {k}: registration failed: {err}");
                rows.push(SessionRow {
                    place: k,
                    estimate: None,
                    inlier: 0.0,
                    decision: Decision::Failed,
                    trace_cov: fused.as_ref().map_or(f64::INFINITY, |f| f.covariance.trace()),
                });
                continue;
            }
        };
        let decision = if !est.reliable {
            Decision::Unreliable
        } else {
            match &fused {
                None => {
                    fused = Some(est.clone());
                    Decision::Accepted
                }
                Some(f) => match gate_distance(f, &est) {
                    Ok(d) if d < cfg.gate => match sequential_fuse(f, &est) {
                        Ok(next) => {
                            fused = Some(next);
                            Decision::Accepted
                        }
                        Err(_) => Decision::Failed,
                    },
                    _ => Decision::Rejected,
                },
            }
        };
        let trace_cov = fused.as_ref().map_or(f64::INFINITY, |f| f.covariance.trace());
        rows.push(SessionRow {
            place: k,
            estimate: Some(est.pose),
            inlier: est.inlier_fraction,
            decision,
            trace_cov,
        });
        if trace_cov < cfg.sigma_stop {
            return SessionOutcome {
                fused,
                success: true,
                rows,
            };
        }
    }
    SessionOutcome {
        fused,
        success: false,
        rows,
    }
}

/// Translation and rotation error of `est` against `truth`.
pub fn pose_errors(est: &Pose, truth: &Pose) -> (f64, f64) {
    let et = (est.translation() - truth.translation()).norm();
    let er = so3::log(&(est.rotation() * truth.rotation().transpose())).map_or(std::f64::consts::PI, |v| v.norm());
    (et, er)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn estimate(pose: Pose, cov: Mat6) -> AlignmentEstimate {
        AlignmentEstimate {
            pose,
            covariance: cov,
            inlier_fraction: 1.0,
            place: 0,
            reliable: true,
            iterations: 1,
        }
    }

    #[test]
    fn identical_estimates_halve_covariance() {
        let p = Pose::from_rotation_vector(Vec3::new(0.1, -0.2, 0.3), Vec3::new(1.0, 2.0, -1.0));
        let cov = Mat6::from_diagonal(&Vector6::new(1e-4, 2e-4, 3e-4, 1e-3, 2e-3, 3e-3));
        let out = sequential_fuse(&estimate(p, cov), &estimate(p, cov)).unwrap();
        assert!((out.covariance - cov * 0.5).abs().max() < 1e-15);
        assert!(pose_errors(&out.pose, &p).0 < 1e-12);
    }

    #[test]
    fn uninformative_measurement_is_ignored() {
        let a = Pose::from_rotation_vector(Vec3::new(0.1, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0));
        let b = Pose::from_rotation_vector(Vec3::new(0.0, 0.2, 0.0), Vec3::new(0.0, 1.0, 0.0));
        let out = sequential_fuse(&estimate(a, Mat6::identity() * 1e-4), &estimate(b, Mat6::identity() * 1e12)).unwrap();
        let (et, er) = pose_errors(&out.pose, &a);
        assert!(et < 1e-9 && er < 1e-9);
    }

    #[test]
    fn fused_pose_moves_towards_new_estimate() {
        let a = Pose::identity();
        let b = Pose::from_translation(Vec3::new(0.2, 0.0, 0.0));
        let out = sequential_fuse(&estimate(a, Mat6::identity() * 1e-4), &estimate(b, Mat6::identity() * 1e-4)).unwrap();
        assert!((out.pose.translation().x - 0.1).abs() < 1e-9);
    }
}
