//! Brute-force reference implementations used to check the fast paths.
//! Everything here favours obviousness over speed.

use std::collections::HashMap;

use nalgebra::{Matrix4, Matrix6, Vector6};

use crate::fusion::MatchParams;
use crate::lie::{exp_se3, log_se3, Pose, Twist};
use crate::surfel_map::{DenseSurfel, SurfelMap};
use crate::{Mat3, Mat6, Vec3};

/// Ids of every map surfel passing both match gates, by direct evaluation.
pub fn exhaustive_matches(src: &DenseSurfel, map: &SurfelMap, params: &MatchParams) -> Vec<u64> {
    let n = src.normal;
    let mut out: Vec<u64> = map
        .iter()
        .filter(|(_, dst)| {
            let delta = dst.position - src.position;
            let along = n.dot(&delta);
            let r = (delta - n * along).norm();
            let var = (n.transpose() * src.position_cov * n)[0] + (dst.normal.transpose() * dst.position_cov * dst.normal)[0];
            let sigma = var.max(0.0).sqrt();
            let d = along.abs();
            r < params.theta_r && if sigma > 0.0 { d / sigma < params.theta_d } else { d == 0.0 }
        })
        .map(|(id, _)| id)
        .collect();
    out.sort_unstable();
    out
}

/// Ids within `r` of `p` (inclusive), ascending.
pub fn linear_radius(points: &[(u64, Vec3)], p: &Vec3, r: f64) -> Vec<u64> {
    let mut out: Vec<u64> = points.iter().filter(|(_, q)| (q - p).norm_squared() <= r * r).map(|(i, _)| *i).collect();
    out.sort_unstable();
    out
}

/// Nearest id and distance, smallest id on ties.
pub fn linear_nearest(points: &[(u64, Vec3)], p: &Vec3) -> Option<(u64, f64)> {
    points
        .iter()
        .map(|(i, q)| (*i, (q - p).norm_squared()))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, d)| (i, d.sqrt()))
}

/// Pose minimizing the sum of squared Mahalanobis twist errors
/// `log(T T_n^-1)` over all estimates, by Gauss-Newton with
/// central-difference Jacobians.
pub fn batch_pose_fusion(estimates: &[(Pose, Mat6)]) -> Pose {
    let infos: Vec<Mat6> = estimates.iter().map(|(_, c)| c.try_inverse().expect("invertible covariance")).collect();
    let residual = |t: &Pose, n: usize| log_se3(&t.compose(&estimates[n].0.inverse())).expect("finite pose").0;
    let mut pose = estimates[0].0;
    let h = 1e-6;
    for _ in 0..100 {
        let mut a = Matrix6::<f64>::zeros();
        let mut b = Vector6::<f64>::zeros();
        for (n, info) in infos.iter().enumerate() {
            let r0 = residual(&pose, n);
            let mut jac = Matrix6::<f64>::zeros();
            for k in 0..6 {
                let mut e = Vector6::<f64>::zeros();
                e[k] = h;
                let plus = residual(&exp_se3(&Twist(e)).unwrap().compose(&pose), n);
                let minus = residual(&exp_se3(&Twist(-e)).unwrap().compose(&pose), n);
                jac.set_column(k, &((plus - minus) / (2.0 * h)));
            }
            a += jac.transpose() * info * jac;
            b += jac.transpose() * info * r0;
        }
        let step = -a.lu().solve(&b).expect("nonsingular normal matrix");
        pose = exp_se3(&Twist(step)).unwrap().compose(&pose);
        if step.norm() < 1e-13 {
            break;
        }
    }
    pose
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelMoments {
    pub key: (i64, i64, i64),
    pub mean: Vec3,
    /// Sample covariance with n - 1 normalization.
    pub covariance: Mat3,
    pub count: usize,
}

/// Per-voxel mean and covariance by hashing then two passes over members.
/// Sorted by key.
pub fn voxel_moments(points: &[Vec3], size: f64, min_points: usize) -> Vec<VoxelMoments> {
    let mut groups: HashMap<(i64, i64, i64), Vec<Vec3>> = HashMap::new();
    for p in points {
        let key = ((p.x / size).floor() as i64, (p.y / size).floor() as i64, (p.z / size).floor() as i64);
        groups.entry(key).or_default().push(*p);
    }
    let mut out: Vec<VoxelMoments> = groups
        .into_iter()
        .filter(|(_, v)| v.len() >= min_points.max(2))
        .map(|(key, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<Vec3>() / n;
            let covariance = v.iter().map(|p| (p - mean) * (p - mean).transpose()).sum::<Mat3>() / (n - 1.0);
            VoxelMoments {
                key,
                mean,
                covariance,
                count: v.len(),
            }
        })
        .collect();
    out.sort_by_key(|m| m.key);
    out
}

/// Matrix exponential of the 4x4 twist matrix by scaling and squaring a
/// 30-term Taylor series.
pub fn exp_series(xi: &Twist) -> Matrix4<f64> {
    let w = xi.rotation();
    let v = xi.translation();
    let mut m = Matrix4::<f64>::zeros();
    m[(0, 1)] = -w.z;
    m[(0, 2)] = w.y;
    m[(1, 0)] = w.z;
    m[(1, 2)] = -w.x;
    m[(2, 0)] = -w.y;
    m[(2, 1)] = w.x;
    m[(0, 3)] = v.x;
    m[(1, 3)] = v.y;
    m[(2, 3)] = v.z;
    let norm = m.abs().max();
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let a = m / 2f64.powi(squarings as i32);
    let mut term = Matrix4::<f64>::identity();
    let mut sum = Matrix4::<f64>::identity();
    for k in 1..30 {
        term = term * a / k as f64;
        sum += term;
    }
    for _ in 0..squarings {
        sum = sum * sum;
    }
    sum
}

/// Total least-squares plane through `points` as (unit normal, offset) with
/// `normal . p = offset`, and the signed residual of every point.
pub fn plane_fit_residuals(points: &[Vec3]) -> (Vec3, f64, Vec<f64>) {
    let n = points.len().max(1) as f64;
    let mean = points.iter().sum::<Vec3>() / n;
    let centred = nalgebra::DMatrix::from_fn(points.len(), 3, |i, j| points[i][j] - mean[j]);
    let svd = centred.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors");
    let smallest = (0..3).min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b])).unwrap_or(2);
    let normal = Vec3::new(v_t[(smallest, 0)], v_t[(smallest, 1)], v_t[(smallest, 2)]).normalize();
    let offset = normal.dot(&mean);
    let residuals = points.iter().map(|p| normal.dot(p) - offset).collect();
    (normal, offset, residuals)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_exp_of_zero_is_identity() {
        assert_eq!(exp_series(&Twist::zero()), Matrix4::identity());
    }

    #[test]
    fn plane_fit_recovers_plane() {
        let pts: Vec<Vec3> = (0..20).map(|i| Vec3::new(i as f64 * 0.3, (i * i % 7) as f64, 2.0)).collect();
        let (n, d, r) = plane_fit_residuals(&pts);
        assert!((n.z.abs() - 1.0).abs() < 1e-12);
        assert!((d.abs() - 2.0).abs() < 1e-12);
        assert!(r.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn batch_fusion_of_one_estimate_is_identity_map() {
        let p = Pose::from_rotation_vector(Vec3::new(0.3, 0.1, -0.2), Vec3::new(1.0, 2.0, 3.0));
        let out = batch_pose_fusion(&[(p, Mat6::identity())]);
        assert!((out.to_matrix() - p.to_matrix()).abs().max() < 1e-12);
    }
}
