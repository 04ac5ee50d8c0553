//! SE(3) / SO(3) algebra.
//!
//! Twists are ordered `(rotation, translation)`: the first three entries are a
//! rotation vector in radians, the last three a translation in meters. All
//! Jacobians in this module use the *left* perturbation convention
//! `T <- exp(delta) * T`, so `left_jacobian_inv_se3(xi)` is the matrix `J^-1`
//! with `log(exp(delta) * exp(xi)) ~= xi + J^-1(xi) * delta`.

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3, Vector6};
use thiserror::Error;

use crate::{Mat3, Mat6, Vec3, Vec6};

/// Below this angle the closed forms are replaced by their Taylor expansions.
pub const TAYLOR_ANGLE: f64 = 1e-8;
/// Below this angle the third-order Jacobian coefficients switch to series
/// evaluation; their closed forms lose all precision to cancellation long
/// before `TAYLOR_ANGLE`.
const SERIES_ANGLE: f64 = 0.1;
/// Largest rotation angle accepted by the logarithm.
pub const LOG_ANGLE_LIMIT: f64 = std::f64::consts::PI - 1e-6;
/// Compositions between polar re-projections of the rotation block.
pub const REORTHONORMALIZE_EVERY: u16 = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LieError {
    #[error("invalid argument: non-finite entries")]
    NonFinite,
    #[error("ambiguous logarithm: rotation angle {angle} is at or near pi")]
    AmbiguousLogarithm { angle: f64 },
    #[error("interpolation ratio {alpha} outside [0, 1]")]
    OutOfRange { alpha: f64 },
}

/// Element of se(3), ordered `(rotation, translation)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist(pub Vec6);

impl Twist {
    pub fn new(rotation: Vec3, translation: Vec3) -> Self {
        Twist(Vector6::new(
            rotation.x,
            rotation.y,
            rotation.z,
            translation.x,
            translation.y,
            translation.z,
        ))
    }

    pub fn zero() -> Self {
        Twist(Vec6::zeros())
    }

    pub fn rotation(&self) -> Vec3 {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn translation(&self) -> Vec3 {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn angle(&self) -> f64 {
        self.rotation().norm()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Twist(self.0 * s)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec6> for Twist {
    fn from(v: Vec6) -> Self {
        Twist(v)
    }
}

/// Rigid transform `x -> R x + t`.
///
/// The rotation is kept as a 3x3 matrix. Every composition increments a chain
/// counter and the rotation is projected back onto SO(3) once the counter hits
/// [`REORTHONORMALIZE_EVERY`].
#[derive(Clone, Copy, Debug)]
pub struct Pose {
    rotation: Mat3,
    translation: Vec3,
    chain: u16,
}

impl PartialEq for Pose {
    fn eq(&self, other: &Self) -> bool {
        self.rotation == other.rotation && self.translation == other.translation
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            chain: 0,
        }
    }

    /// Builds a pose from a rotation that is already orthonormal (not checked).
    pub fn from_parts(rotation: Mat3, translation: Vec3) -> Self {
        Pose {
            rotation,
            translation,
            chain: 0,
        }
    }

    /// Builds a pose, projecting `rotation` onto SO(3).
    pub fn from_parts_projected(rotation: Mat3, translation: Vec3) -> Self {
        Pose::from_parts(project_to_so3(&rotation), translation)
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Pose::from_parts(Mat3::identity(), translation)
    }

    pub fn from_rotation_vector(rotation: Vec3, translation: Vec3) -> Self {
        Pose::from_parts(so3::exp(&rotation), translation)
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Rotation vector of the rotation block.
    pub fn rotation_vector(&self) -> Result<Vec3, LieError> {
        so3::log(&self.rotation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
            chain: self.chain,
        }
    }

    /// `self * other`.
    pub fn compose(&self, other: &Pose) -> Self {
        let chain = self.chain.max(other.chain).saturating_add(1);
        let rotation = self.rotation * other.rotation;
        let translation = self.rotation * other.translation + self.translation;
        if chain >= REORTHONORMALIZE_EVERY {
            Pose {
                rotation: project_to_so3(&rotation),
                translation,
                chain: 0,
            }
        } else {
            Pose {
                rotation,
                translation,
                chain,
            }
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `max(|R R^T - I|_F, |det R - 1|)`.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.rotation * self.rotation.transpose() - Mat3::identity()).norm();
        e.max((self.rotation.determinant() - 1.0).abs())
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite())
    }

    /// Adjoint in `(rotation, translation)` ordering:
    /// `exp(Ad_T xi) = T exp(xi) T^-1`.
    pub fn adjoint(&self) -> Mat6 {
        let mut ad = Mat6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(hat(&self.translation) * self.rotation));
        ad
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl<'a> std::ops::Mul<&'a Pose> for &'a Pose {
    type Output = Pose;
    fn mul(self, rhs: &'a Pose) -> Pose {
        self.compose(rhs)
    }
}

/// Skew-symmetric matrix with `hat(a) * b == a x b`.
pub fn hat(v: &Vec3) -> Mat3 {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`] on the antisymmetric part.
pub fn vee(m: &Mat3) -> Vec3 {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Closest rotation in Frobenius norm (polar factor).
pub fn project_to_so3(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Mat3::identity(),
    };
    let mut d = Mat3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

/// Scalar coefficients shared by the SO(3)/SE(3) closed forms.
struct Coeffs {
    /// sin(t)/t
    a: f64,
    /// (1 - cos t)/t^2
    b: f64,
    /// (t - sin t)/t^3
    c: f64,
}

impl Coeffs {
    fn new(theta: f64) -> Self {
        let t2 = theta * theta;
        if theta < TAYLOR_ANGLE {
            return Coeffs {
                a: 1.0 - t2 / 6.0,
                b: 0.5 - t2 / 24.0,
                c: 1.0 / 6.0 - t2 / 120.0,
            };
        }
        let half = 0.5 * theta;
        let sh = half.sin();
        let a = theta.sin() / theta;
        let b = 2.0 * sh * sh / t2;
        let c = if theta < SERIES_ANGLE {
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2 * t2 * t2 / 362880.0
        } else {
            (theta - theta.sin()) / (t2 * theta)
        };
        Coeffs { a, b, c }
    }
}

pub mod so3 {
    use super::*;

    pub fn exp(phi: &Vec3) -> Mat3 {
        let theta = phi.norm();
        let k = Coeffs::new(theta);
        let w = hat(phi);
        Mat3::identity() + w * k.a + w * w * k.b
    }

    /// Rotation vector of `r`. Fails within 1e-6 of pi where the axis sign is
    /// ambiguous.
    pub fn log(r: &Mat3) -> Result<Vec3, LieError> {
        if !r.iter().all(|v| v.is_finite()) {
            return Err(LieError::NonFinite);
        }
        let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let s = vee(r);
        let sin = s.norm();
        let theta = sin.atan2(cos);
        if theta > LOG_ANGLE_LIMIT {
            return Err(LieError::AmbiguousLogarithm { angle: theta });
        }
        if theta < TAYLOR_ANGLE {
            return Ok(s * (1.0 + theta * theta / 6.0));
        }
        if cos > -0.7 {
            return Ok(s * (theta / sin));
        }
        // Near pi the antisymmetric part is tiny; recover the axis from the
        // symmetric part (1 - cos) a a^T instead.
        let sym = (r + r.transpose()) * 0.5 - Mat3::identity() * cos;
        let one_minus_cos = 1.0 - cos;
        let i = (0..3)
            .max_by(|&i, &j| sym[(i, i)].total_cmp(&sym[(j, j)]))
            .unwrap_or(0);
        let ai = (sym[(i, i)] / one_minus_cos).max(0.0).sqrt();
        let mut axis: Vec3 = sym.column(i) / (one_minus_cos * ai);
        if axis.dot(&s) < 0.0 {
            axis = -axis;
        }
        Ok(axis.normalize() * theta)
    }

    /// Left Jacobian `J(phi)`: `exp(phi + d) ~= exp(J d) exp(phi)`.
    pub fn left_jacobian(phi: &Vec3) -> Mat3 {
        let k = Coeffs::new(phi.norm());
        let w = hat(phi);
        Mat3::identity() + w * k.b + w * w * k.c
    }

    pub fn left_jacobian_inv(phi: &Vec3) -> Mat3 {
        let theta = phi.norm();
        let w = hat(phi);
        Mat3::identity() - w * 0.5 + w * w * inv_coeff(theta)
    }

    /// `(1 - (t/2) cot(t/2)) / t^2`.
    pub(super) fn inv_coeff(theta: f64) -> f64 {
        let t2 = theta * theta;
        if theta < SERIES_ANGLE {
            1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0 + t2 * t2 * t2 / 1209600.0
        } else {
            let half = 0.5 * theta;
            (1.0 - half * half.cos() / half.sin()) / t2
        }
    }
}

fn check_finite(xi: &Twist) -> Result<(), LieError> {
    if xi.is_finite() {
        Ok(())
    } else {
        Err(LieError::NonFinite)
    }
}

pub fn exp_se3(xi: &Twist) -> Result<Pose, LieError> {
    check_finite(xi)?;
    let phi = xi.rotation();
    Ok(Pose::from_parts(
        so3::exp(&phi),
        so3::left_jacobian(&phi) * xi.translation(),
    ))
}

pub fn log_se3(pose: &Pose) -> Result<Twist, LieError> {
    if !pose.is_finite() {
        return Err(LieError::NonFinite);
    }
    let phi = so3::log(pose.rotation())?;
    let rho = so3::left_jacobian_inv(&phi) * pose.translation();
    Ok(Twist::new(phi, rho))
}

/// Coupling block `Q(phi, rho)` of the SE(3) left Jacobian.
fn q_block(phi: &Vec3, rho: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let t2 = theta * theta;
    let (c1, c2, c3) = if theta < SERIES_ANGLE {
        (
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2 * t2 * t2 / 362880.0,
            1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0 - t2 * t2 * t2 / 3628800.0,
            1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0 - t2 * t2 * t2 / 9979200.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta),
        )
    };
    let p = hat(phi);
    let r = hat(rho);
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    let pp = p * p;
    r * 0.5 + (pr + rp + prp) * c1 + (pp * r + rp * p - prp * 3.0) * c2 + (prp * p + pp * r * p) * c3
}

/// Left Jacobian of SE(3) in `(rotation, translation)` ordering.
pub fn left_jacobian_se3(xi: &Twist) -> Result<Mat6, LieError> {
    check_finite(xi)?;
    let phi = xi.rotation();
    let j = so3::left_jacobian(&phi);
    let q = q_block(&phi, &xi.translation());
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&q);
    Ok(out)
}

/// Inverse left Jacobian of SE(3); identity at `xi = 0`.
pub fn left_jacobian_inv_se3(xi: &Twist) -> Result<Mat6, LieError> {
    check_finite(xi)?;
    let phi = xi.rotation();
    let j_inv = so3::left_jacobian_inv(&phi);
    let q = q_block(&phi, &xi.translation());
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(-(j_inv * q * j_inv)));
    Ok(out)
}

/// Geodesic interpolation `a * exp(alpha * log(a^-1 b))`.
pub fn interp_pose(a: &Pose, b: &Pose, alpha: f64) -> Result<Pose, LieError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LieError::OutOfRange { alpha });
    }
    if alpha == 0.0 {
        return Ok(*a);
    }
    if alpha == 1.0 {
        return Ok(*b);
    }
    let rel = log_se3(&a.inverse().compose(b))?;
    Ok(a.compose(&exp_se3(&rel.scaled(alpha))?))
}

/// Rotation angle of `r` in `[0, pi]`, valid everywhere (no ambiguity check).
pub fn rotation_angle(r: &Mat3) -> f64 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    vee(r).norm().atan2(cos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn series_exp(xi: &Twist) -> Matrix4<f64> {
        let mut m = Matrix4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(&xi.rotation()));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&xi.translation());
        let mut term = Matrix4::identity();
        let mut sum = Matrix4::identity();
        for k in 1..20 {
            term = term * m / k as f64;
            sum += term;
        }
        sum
    }

    #[test]
    fn exp_identity_and_pure_translation() {
        let p = exp_se3(&Twist::zero()).unwrap();
        assert_eq!(p, Pose::identity());
        let p = exp_se3(&Twist::new(Vec3::zeros(), Vec3::new(1.0, 2.0, 3.0))).unwrap();
        assert_eq!(*p.rotation(), Mat3::identity());
        assert_eq!(*p.translation(), Vec3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn exp_quarter_turn_matches_series() {
        let xi = Twist::new(Vec3::new(FRAC_PI_2, 0.0, 0.0), Vec3::zeros());
        let p = exp_se3(&xi).unwrap();
        let s = series_exp(&xi);
        assert!((p.to_matrix() - s).norm() < 1e-12);
        assert!((p.rotate(&Vec3::y()) - Vec3::z()).norm() < 1e-15);
    }

    #[test]
    fn exp_rejects_non_finite() {
        let xi = Twist::new(Vec3::new(f64::NAN, 0.0, 0.0), Vec3::zeros());
        assert_eq!(exp_se3(&xi), Err(LieError::NonFinite));
    }

    #[test]
    fn log_identity_and_translation() {
        assert_eq!(log_se3(&Pose::identity()).unwrap(), Twist::zero());
        let t = log_se3(&Pose::from_translation(Vec3::new(0.5, -1.0, 2.0))).unwrap();
        assert_eq!(t.rotation(), Vec3::zeros());
        assert_eq!(t.translation(), Vec3::new(0.5, -1.0, 2.0));
    }

    #[test]
    fn log_near_pi_is_ambiguous() {
        let p = Pose::from_rotation_vector(Vec3::new(0.0, 0.0, PI - 1e-9), Vec3::zeros());
        assert!(matches!(
            log_se3(&p),
            Err(LieError::AmbiguousLogarithm { .. })
        ));
    }

    #[test]
    fn log_large_angle_branch() {
        let phi = Vec3::new(0.3, -2.2, 1.7).normalize() * 3.1;
        let r = so3::exp(&phi);
        let back = so3::log(&r).unwrap();
        assert!((back - phi).norm() < 1e-9, "{}", (back - phi).norm());
    }

    #[test]
    fn jacobian_at_zero_is_identity() {
        assert_eq!(left_jacobian_inv_se3(&Twist::zero()).unwrap(), Mat6::identity());
        assert_eq!(left_jacobian_se3(&Twist::zero()).unwrap(), Mat6::identity());
    }

    #[test]
    fn series_and_closed_form_agree_at_switch() {
        for &theta in &[SERIES_ANGLE * 0.999, SERIES_ANGLE * 1.001] {
            let phi = Vec3::new(1.0, 2.0, -0.5).normalize() * theta;
            let xi = Twist::new(phi, Vec3::new(0.3, -0.2, 0.9));
            let j = left_jacobian_se3(&xi).unwrap();
            let ji = left_jacobian_inv_se3(&xi).unwrap();
            assert!((j * ji - Mat6::identity()).norm() < 1e-13);
        }
    }

    #[test]
    fn interp_endpoints_and_midpoint() {
        let a = Pose::identity();
        let b = Pose::from_translation(Vec3::new(2.0, 0.0, 0.0));
        assert_eq!(interp_pose(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interp_pose(&a, &b, 1.0).unwrap(), b);
        let m = interp_pose(&a, &b, 0.5).unwrap();
        assert!((m.translation() - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn interp_rotation_third() {
        let b = Pose::from_rotation_vector(Vec3::new(0.0, 0.0, FRAC_PI_2), Vec3::zeros());
        let m = interp_pose(&Pose::identity(), &b, 1.0 / 3.0).unwrap();
        let expect = so3::exp(&Vec3::new(0.0, 0.0, PI / 6.0));
        assert!((m.rotation() - expect).norm() < 1e-12);
    }

    #[test]
    fn interp_rejects_out_of_range() {
        let a = Pose::identity();
        assert_eq!(
            interp_pose(&a, &a, 1.5),
            Err(LieError::OutOfRange { alpha: 1.5 })
        );
        assert!(interp_pose(&a, &a, -0.1).is_err());
    }

    #[test]
    fn adjoint_conjugates_exp() {
        let t = Pose::from_rotation_vector(Vec3::new(0.2, -0.4, 0.9), Vec3::new(1.0, -2.0, 0.5));
        let xi = Twist::new(Vec3::new(0.1, 0.05, -0.2), Vec3::new(0.3, 0.1, -0.4));
        let lhs = exp_se3(&Twist(t.adjoint() * xi.0)).unwrap();
        let rhs = t.compose(&exp_se3(&xi).unwrap()).compose(&t.inverse());
        assert!((lhs.to_matrix() - rhs.to_matrix()).norm() < 1e-12);
    }

    #[test]
    fn long_composition_chain_stays_orthonormal() {
        let step = Pose::from_rotation_vector(Vec3::new(0.013, -0.007, 0.021), Vec3::new(0.01, 0.0, 0.0));
        let mut acc = Pose::identity();
        for _ in 0..10_000 {
            acc = acc.compose(&step);
        }
        assert!(acc.orthonormality_error() < 1e-9);
    }
}
