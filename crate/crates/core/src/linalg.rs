//! Small dense helpers for 3x3 symmetric matrices.

use nalgebra::{Cholesky, SymmetricEigen};

use crate::{Mat3, Vec3};

pub fn symmetrize(m: &Mat3) -> Mat3 {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues ascending with matching eigenvector columns.
pub fn sorted_eigen(m: &Mat3) -> (Vec3, Mat3) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut values = Vec3::zeros();
    let mut vectors = Mat3::zeros();
    for (k, &i) in idx.iter().enumerate() {
        values[k] = eig.eigenvalues[i];
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Symmetrizes and clamps negative eigenvalues to zero. Returns whether a
/// clamp was needed.
pub fn clamp_psd(m: &Mat3) -> (Mat3, bool) {
    let s = symmetrize(m);
    let (values, vectors) = sorted_eigen(&s);
    if values[0] >= 0.0 {
        return (s, false);
    }
    let clamped = values.map(|v| v.max(0.0));
    (
        symmetrize(&(vectors * Mat3::from_diagonal(&clamped) * vectors.transpose())),
        true,
    )
}

pub fn is_psd(m: &Mat3, tol: f64) -> bool {
    let asym = (m - m.transpose()).abs().max();
    asym <= tol.abs().max(1e-12) * m.abs().max().max(1.0) && sorted_eigen(m).0[0] >= tol
}

/// Lower Cholesky factor. Adds `1e-12 * I` (and retries with growing jitter)
/// if the matrix is not numerically positive definite; the flag reports it.
pub fn cholesky_lower(m: &Mat3) -> (Mat3, bool) {
    let s = symmetrize(m);
    if let Some(c) = Cholesky::new(s) {
        return (c.l(), false);
    }
    let mut jitter = 1e-12;
    loop {
        if let Some(c) = Cholesky::new(s + Mat3::identity() * jitter) {
            return (c.l(), true);
        }
        jitter *= 10.0;
        if jitter > 1.0 {
            return (Mat3::identity() * 1e-6, true);
        }
    }
}

/// Inverse with the same regularization policy as [`cholesky_lower`].
pub fn spd_inverse(m: &Mat3) -> (Mat3, bool) {
    let s = symmetrize(m);
    if let Some(c) = Cholesky::new(s) {
        return (c.inverse(), false);
    }
    let mut jitter = 1e-12;
    loop {
        if let Some(c) = Cholesky::new(s + Mat3::identity() * jitter) {
            return (c.inverse(), true);
        }
        jitter *= 10.0;
    }
}

/// Sample mean and scatter `sum (x - mean)(x - mean)^T`.
pub fn mean_and_scatter<'a, I>(points: I) -> Option<(Vec3, Mat3, usize)>
where
    I: IntoIterator<Item = &'a Vec3> + Clone,
{
    let mut n = 0usize;
    let mut sum = Vec3::zeros();
    for p in points.clone() {
        sum += p;
        n += 1;
    }
    if n == 0 {
        return None;
    }
    let mean = sum / n as f64;
    let mut scatter = Mat3::zeros();
    for p in points {
        let d = p - mean;
        scatter += d * d.transpose();
    }
    Some((mean, symmetrize(&scatter), n))
}

/// Unit vector orthogonal to `n`.
pub fn any_orthogonal(n: &Vec3) -> Vec3 {
    let a = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    n.cross(&a).normalize()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_sorted_ascending() {
        let m = Mat3::from_diagonal(&Vec3::new(3.0, 1.0, 2.0));
        let (v, e) = sorted_eigen(&m);
        assert_eq!(v, Vec3::new(1.0, 2.0, 3.0));
        assert!((e.column(0).abs() - Vec3::y()).norm() < 1e-12);
    }

    #[test]
    fn clamp_removes_negative_eigenvalue() {
        let m = Mat3::from_diagonal(&Vec3::new(1.0, -1e-3, 2.0));
        let (c, flagged) = clamp_psd(&m);
        assert!(flagged);
        assert!(sorted_eigen(&c).0[0] >= 0.0);
    }

    #[test]
    fn cholesky_regularizes_singular() {
        let m = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, 0.0));
        let (l, flagged) = cholesky_lower(&m);
        assert!(flagged);
        assert!((l * l.transpose() - m).norm() < 1e-5);
    }

    #[test]
    fn scatter_of_cube_corners() {
        let pts: Vec<Vec3> = (0..8)
            .map(|i| Vec3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64))
            .collect();
        let (mean, scatter, n) = mean_and_scatter(pts.iter()).unwrap();
        assert_eq!(n, 8);
        assert_eq!(mean, Vec3::new(0.5, 0.5, 0.5));
        assert!((scatter - Mat3::identity() * 2.0).norm() < 1e-12);
    }
}
