//! Small dense symmetric eigenvalue routines.
//!
//! The matrices handled here (Gram matrices of the identifier regressor and
//! the critic gain block) have at most a few tens of rows, so a cyclic Jacobi
//! sweep is fast enough and needs no external solver.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Allowed asymmetry `max |A_ij - A_ji|` before a matrix is rejected.
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Off-diagonal Frobenius norm at which Jacobi sweeps stop.
pub const OFF_DIAGONAL_TOL: f64 = 1e-10;

const MAX_SWEEPS: usize = 100;

fn check_symmetric(a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::Domain(format!(
            "matrix must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let (x, y) = (a[(i, j)], a[(j, i)]);
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::Domain("matrix has non-finite entries".into()));
            }
            if (x - y).abs() > SYMMETRY_TOL {
                return Err(Error::Domain(format!(
                    "matrix is not symmetric: |A[{i},{j}] - A[{j},{i}]| = {:e}",
                    (x - y).abs()
                )));
            }
        }
        if !a[(i, i)].is_finite() {
            return Err(Error::Domain("matrix has non-finite entries".into()));
        }
    }
    Ok(())
}

fn off_diagonal_norm(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// All eigenvalues of a symmetric matrix, ascending, by cyclic Jacobi rotations.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_symmetric(a)?;
    let n = a.nrows();
    // symmetrize so rounding in the input does not bias the rotations
    let mut m = DMatrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));

    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&m) <= OFF_DIAGONAL_TOL {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = m[(k, p)];
                    let akq = m[(k, q)];
                    m[(k, p)] = c * akp - s * akq;
                    m[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[(p, k)];
                    let aqk = m[(q, k)];
                    m[(p, k)] = c * apk - s * aqk;
                    m[(q, k)] = s * apk + c * aqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
            }
        }
    }

    let mut eig: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    eig.sort_by(|a, b| a.total_cmp(b));
    Ok(eig)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eig_sym(a: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() == 0 {
        return Err(Error::Domain("empty matrix has no eigenvalues".into()));
    }
    Ok(sym_eigenvalues(a)?[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_unit_min_eigenvalue() {
        let a = DMatrix::<f64>::identity(4, 4);
        assert!((min_eig_sym(&a).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn diagonal_min_is_smallest_entry() {
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.1, 2.0, 3.0, 5.0]));
        assert!((min_eig_sym(&a).unwrap() - 0.1).abs() < 1e-14);
    }

    #[test]
    fn rank_one_gram_is_singular() {
        let phi = nalgebra::DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let a = &phi * phi.transpose();
        assert!(min_eig_sym(&a).unwrap().abs() < 1e-10);
        let eig = sym_eigenvalues(&a).unwrap();
        assert!((eig[3] - phi.norm_squared()).abs() < 1e-10);
    }

    #[test]
    fn rejects_asymmetric() {
        let mut a = DMatrix::<f64>::identity(3, 3);
        a[(0, 2)] = 1e-3;
        assert!(matches!(min_eig_sym(&a), Err(Error::Domain(_))));
    }

    #[test]
    fn matches_closed_form_2x2() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let eig = sym_eigenvalues(&a).unwrap();
        assert!((eig[0] - 1.0).abs() < 1e-12);
        assert!((eig[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn agrees_with_nalgebra_on_random_spd() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for n in 1..9 {
            let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let a = &b * b.transpose();
            let ours = min_eig_sym(&a).unwrap();
            let theirs = a.clone().symmetric_eigen().eigenvalues.min();
            assert!((ours - theirs).abs() < 1e-9, "n={n}: {ours} vs {theirs}");
        }
    }
}
