//! Symmetric-matrix helpers: principal PSD square root with an eigenvalue
//! clamp that separates Monte-Carlo jitter from genuine indefiniteness.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Inputs must be symmetric to this (scale-adjusted) entrywise tolerance.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Relative eigenvalue clamp: values in [-tol_eig, 0) with
/// tol_eig = EIG_CLAMP_REL * ||A||_F are treated as zero.
pub const EIG_CLAMP_REL: f64 = 1e-8;

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (a + a.transpose())
}

pub fn check_symmetric(a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "expected square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let scale = 1.0 + a.amax();
    let skew = (a - a.transpose()).amax();
    if skew > SYMMETRY_TOL * scale {
        return Err(Error::InvalidInput(format!(
            "matrix not symmetric: max asymmetry {skew:.3e} exceeds {:.3e}",
            SYMMETRY_TOL * scale
        )));
    }
    Ok(())
}

/// Principal symmetric PSD square root.
///
/// Eigenvalues in [-tol_eig, 0) are clamped to zero; anything below -tol_eig
/// is a hard failure carrying the offending eigenpair.
pub fn psd_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    psd_sqrt_clamped(a, 0.0)
}

/// As `psd_sqrt`, widening the clamp band by `extra_tol` (used when the
/// input is a Monte-Carlo estimate with known statistical error).
pub fn psd_sqrt_clamped(a: &DMatrix<f64>, extra_tol: f64) -> Result<DMatrix<f64>> {
    check_symmetric(a)?;
    let sym = symmetrize(a);
    let tol = EIG_CLAMP_REL * sym.norm() + extra_tol;
    let eig = sym.symmetric_eigen();
    if let Some((i, &lambda)) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.total_cmp(b))
    {
        if lambda < -tol {
            return Err(Error::NotPsd {
                eigenvalue: lambda,
                tol,
                eigenvector: eig.eigenvectors.column(i).iter().copied().collect(),
            });
        }
    }
    let sqrt_vals: DVector<f64> = eig.eigenvalues.map(|l| if l > 0.0 { l.sqrt() } else { 0.0 });
    let s = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose();
    Ok(symmetrize(&s))
}

/// Smallest eigenvalue of a (symmetrized) square matrix.
pub fn min_symmetric_eigenvalue(a: &DMatrix<f64>) -> Result<f64> {
    check_symmetric(a)?;
    let eig = symmetrize(a).symmetric_eigen();
    Ok(eig.eigenvalues.min())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(state: &mut u64) -> f64 {
        *state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((*state >> 11) as f64) / (1u64 << 53) as f64 * 2.0 - 1.0
    }

    fn random_gram(n: usize, state: &mut u64) -> DMatrix<f64> {
        let g = DMatrix::from_fn(n, n, |_, _| lcg(state));
        &g * g.transpose()
    }

    #[test]
    fn identity_and_diagonal() {
        let i4 = DMatrix::<f64>::identity(4, 4);
        assert_eq!(psd_sqrt(&i4).unwrap(), i4);
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let s = psd_sqrt(&a).unwrap();
        assert!((s[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((s[(1, 1)] - 3.0).abs() < 1e-12);
        assert!(s[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn gram_reconstruction() {
        let mut state = 11u64;
        for n in 1..=8 {
            for _ in 0..20 {
                let a = random_gram(n, &mut state);
                let s = psd_sqrt(&a).unwrap();
                assert!((&s * &s - &a).norm() <= 1e-10, "n={n}");
            }
        }
    }

    #[test]
    fn idempotent_on_psd_roots() {
        let mut state = 5u64;
        for _ in 0..20 {
            let s = psd_sqrt(&random_gram(5, &mut state)).unwrap();
            let again = psd_sqrt(&(&s * &s)).unwrap();
            assert!((again - &s).norm() < 1e-9);
        }
    }

    #[test]
    fn rejects_indefinite_with_eigenpair() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        match psd_sqrt(&a) {
            Err(Error::NotPsd {
                eigenvalue,
                eigenvector,
                ..
            }) => {
                assert!((eigenvalue + 1.0).abs() < 1e-12);
                assert_eq!(eigenvector.len(), 2);
                assert!(eigenvector[1].abs() > 0.9);
            }
            other => panic!("expected NotPsd, got {other:?}"),
        }
    }

    #[test]
    fn clamps_jitter_scale_negatives() {
        // eigenvalue -1e-12 against norm ~2: inside the clamp band
        let mut a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, -1e-12]));
        let s = psd_sqrt(&a).unwrap();
        assert!((s[(0, 0)] - 2.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(s[(1, 1)], 0.0);
        // widen the band explicitly for larger statistical noise
        a[(1, 1)] = -1e-4;
        assert!(psd_sqrt(&a).is_err());
        assert!(psd_sqrt_clamped(&a, 1e-3).is_ok());
    }

    #[test]
    fn rejects_asymmetric() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(psd_sqrt(&a).is_err());
        assert!(check_symmetric(&a).is_err());
    }

    #[test]
    fn min_eigenvalue_reported() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, -0.5, 1.0]));
        assert!((min_symmetric_eigenvalue(&a).unwrap() + 0.5).abs() < 1e-12);
    }
}
