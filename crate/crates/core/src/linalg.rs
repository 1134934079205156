//! Eigen-decomposition of small symmetric positive semidefinite matrices
//! with high relative accuracy.
//!
//! Controllability Gramians at short horizons are strongly graded (entries
//! span many orders of magnitude), so a plain QR-based eigen-solver loses
//! the small eigenvalues in roundoff from the large ones. Factoring
//! `W = L L^T` and running one-sided Jacobi on `L^T` recovers every
//! eigenvalue to nearly full relative precision when `W` is a diagonal
//! scaling of a well-conditioned matrix.

use nalgebra::{Matrix3, Vector3};

/// Eigenvalues (ascending) and matching unit eigenvectors as columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Eigen3 {
    pub values: Vector3<f64>,
    pub vectors: Matrix3<f64>,
}

/// Eigen-decomposition of a symmetric PSD matrix. Falls back to the
/// standard symmetric solver when the Cholesky factorization fails
/// (singular or indefinite input).
pub fn psd_eigen(w: &Matrix3<f64>) -> Eigen3 {
    let sym = 0.5 * (w + w.transpose());
    match sym.cholesky() {
        Some(chol) => jacobi_on_factor(chol.l().transpose()),
        None => {
            let e = sym.symmetric_eigen();
            sorted(e.eigenvalues, e.eigenvectors)
        }
    }
}

/// One-sided Jacobi on `g`: `g^T g` has eigenvalues = squared column norms
/// after orthogonalization, eigenvectors = accumulated right rotations.
fn jacobi_on_factor(mut g: Matrix3<f64>) -> Eigen3 {
    let mut v = Matrix3::<f64>::identity();
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..2 {
            for q in (p + 1)..3 {
                let alpha = g.column(p).norm_squared();
                let beta = g.column(q).norm_squared();
                let gamma = g.column(p).dot(&g.column(q));
                if gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for m in [&mut g, &mut v] {
                    for r in 0..3 {
                        let (a, b) = (m[(r, p)], m[(r, q)]);
                        m[(r, p)] = c * a - s * b;
                        m[(r, q)] = s * a + c * b;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let values = Vector3::from_fn(|i, _| g.column(i).norm_squared());
    sorted(values, v)
}

fn sorted(values: Vector3<f64>, vectors: Matrix3<f64>) -> Eigen3 {
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    Eigen3 {
        values: Vector3::from_fn(|i, _| values[idx[i]]),
        vectors: Matrix3::from_columns(&[vectors.column(idx[0]), vectors.column(idx[1]), vectors.column(idx[2])]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reconstructs_random_spd() {
        let a = Matrix3::new(4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0);
        let e = psd_eigen(&a);
        let rebuilt = e.vectors * Matrix3::from_diagonal(&e.values) * e.vectors.transpose();
        assert!((rebuilt - a).norm() < 1e-12);
        let reference = a.symmetric_eigen().eigenvalues;
        let mut r: Vec<f64> = reference.iter().copied().collect();
        r.sort_by(f64::total_cmp);
        for i in 0..3 {
            assert!((e.values[i] - r[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn graded_matrix_small_eigenvalue_is_accurate() {
        // D A D with D = diag(1, 1e-5, 1e-10): det = det(A) * 1e-30.
        let a = Matrix3::new(2.0, 0.7, 0.3, 0.7, 1.5, 0.4, 0.3, 0.4, 1.0);
        let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1e-5, 1e-10));
        let w = d * a * d;
        let e = psd_eigen(&w);
        let det = e.values.iter().product::<f64>();
        let expected = a.determinant() * 1e-30;
        assert!(((det - expected) / expected).abs() < 1e-10, "det {det} vs {expected}");
    }

    #[test]
    fn singular_input_falls_back() {
        let w = Matrix3::from_diagonal(&Vector3::new(2.0, 0.0, 0.0));
        let e = psd_eigen(&w);
        assert_eq!(e.values[2], 2.0);
        assert!(e.values[0].abs() < 1e-15);
    }
}
