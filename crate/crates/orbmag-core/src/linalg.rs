//! Thin safe wrappers over the two LAPACK routines the crate needs.
//!
//! nalgebra's `DMatrix` stores column-major contiguous data, which is exactly
//! LAPACK's layout, so matrices are passed through without copying or
//! transposition. Only two routines are bound:
//!
//! * `zheev` — full eigendecomposition of a complex Hermitian matrix (used for
//!   every fiber Hamiltonian solve); backward-stable with residuals at the
//!   1e−13·‖H‖ level, which the sum-rule and dual-path tolerances rely on.
//! * `zgesv` — LU solve with multiple right-hand sides (used to form truncated
//!   resolvents (h(k)−ξ)⁻¹ in the matrix-contour oracle).

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

// LAPACK Fortran symbols from the system OpenBLAS.
extern "C" {
    fn zheev_(
        jobz: *const u8,
        uplo: *const u8,
        n: *const i32,
        a: *mut Complex64,
        lda: *const i32,
        w: *mut f64,
        work: *mut Complex64,
        lwork: *const i32,
        rwork: *mut f64,
        info: *mut i32,
    );

    fn zgesv_(
        n: *const i32,
        nrhs: *const i32,
        a: *mut Complex64,
        lda: *const i32,
        ipiv: *mut i32,
        b: *mut Complex64,
        ldb: *const i32,
        info: *mut i32,
    );
}

/// Eigendecomposition of a Hermitian matrix: ascending eigenvalues and the
/// matrix of eigenvectors (columns).
pub fn eigh(h: &DMatrix<Complex64>) -> Result<(Vec<f64>, DMatrix<Complex64>)> {
    let n = h.nrows();
    assert_eq!(n, h.ncols(), "eigh requires a square matrix");
    let ni = n as i32;
    let mut a = h.clone();
    let mut w = vec![0.0f64; n];
    let mut rwork = vec![0.0f64; (3 * n).max(1)];
    let mut info: i32 = 0;

    // Workspace query, then the real call.
    let mut work_query = [Complex64::new(0.0, 0.0)];
    let lwork_query: i32 = -1;
    unsafe {
        zheev_(
            b"V".as_ptr(),
            b"L".as_ptr(),
            &ni,
            a.as_mut_slice().as_mut_ptr(),
            &ni,
            w.as_mut_ptr(),
            work_query.as_mut_ptr(),
            &lwork_query,
            rwork.as_mut_ptr(),
            &mut info,
        );
    }
    let lwork = work_query[0].re as i32;
    let mut work = vec![Complex64::new(0.0, 0.0); lwork.max(1) as usize];
    unsafe {
        zheev_(
            b"V".as_ptr(),
            b"L".as_ptr(),
            &ni,
            a.as_mut_slice().as_mut_ptr(),
            &ni,
            w.as_mut_ptr(),
            work.as_mut_ptr(),
            &lwork,
            rwork.as_mut_ptr(),
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::EigensolverFailed(f64::NAN, f64::NAN, f64::NAN));
    }
    Ok((w, a))
}

/// Eigenvalues only (ascending) of a Hermitian matrix; cheaper than [`eigh`]
/// when eigenvectors are not needed.
pub fn eigh_values(h: &DMatrix<Complex64>) -> Result<Vec<f64>> {
    let n = h.nrows();
    assert_eq!(n, h.ncols(), "eigh_values requires a square matrix");
    let ni = n as i32;
    let mut a = h.clone();
    let mut w = vec![0.0f64; n];
    let mut rwork = vec![0.0f64; (3 * n).max(1)];
    let mut info: i32 = 0;
    let mut work_query = [Complex64::new(0.0, 0.0)];
    let lwork_query: i32 = -1;
    unsafe {
        zheev_(
            b"N".as_ptr(),
            b"L".as_ptr(),
            &ni,
            a.as_mut_slice().as_mut_ptr(),
            &ni,
            w.as_mut_ptr(),
            work_query.as_mut_ptr(),
            &lwork_query,
            rwork.as_mut_ptr(),
            &mut info,
        );
    }
    let lwork = work_query[0].re as i32;
    let mut work = vec![Complex64::new(0.0, 0.0); lwork.max(1) as usize];
    unsafe {
        zheev_(
            b"N".as_ptr(),
            b"L".as_ptr(),
            &ni,
            a.as_mut_slice().as_mut_ptr(),
            &ni,
            w.as_mut_ptr(),
            work.as_mut_ptr(),
            &lwork,
            rwork.as_mut_ptr(),
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::EigensolverFailed(f64::NAN, f64::NAN, f64::NAN));
    }
    Ok(w)
}

/// Solve A·X = B for X (general complex A, LU with partial pivoting).
pub fn solve_linear(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>) -> Result<DMatrix<Complex64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "solve_linear requires a square matrix");
    assert_eq!(n, b.nrows(), "dimension mismatch");
    let ni = n as i32;
    let nrhs = b.ncols() as i32;
    let mut lu = a.clone();
    let mut x = b.clone();
    let mut ipiv = vec![0i32; n];
    let mut info: i32 = 0;
    unsafe {
        zgesv_(
            &ni,
            &nrhs,
            lu.as_mut_slice().as_mut_ptr(),
            &ni,
            ipiv.as_mut_ptr(),
            x.as_mut_slice().as_mut_ptr(),
            &ni,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Cache(format!("zgesv failed with info = {info}")));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigh_recovers_hermitian_spectrum() {
        let n = 6;
        let mut h = DMatrix::<Complex64>::zeros(n, n);
        for i in 0..n {
            h[(i, i)] = Complex64::new(i as f64 - 2.0, 0.0);
        }
        h[(0, 3)] = Complex64::new(0.3, 0.7);
        h[(3, 0)] = Complex64::new(0.3, -0.7);
        h[(1, 4)] = Complex64::new(-0.2, 0.1);
        h[(4, 1)] = Complex64::new(-0.2, -0.1);
        let (w, v) = eigh(&h).unwrap();
        for j in 0..n {
            let col = v.column(j);
            let r = (&h * col - col * Complex64::new(w[j], 0.0)).norm();
            assert!(r < 1e-13, "residual {r} at {j}");
        }
        for j in 1..n {
            assert!(w[j] >= w[j - 1]);
        }
        let gram = v.adjoint() * &v;
        for i in 0..n {
            for j in 0..n {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - Complex64::new(expect, 0.0)).norm() < 1e-13);
            }
        }
    }

    #[test]
    fn solve_linear_roundtrip() {
        let n = 5;
        let mut a = DMatrix::<Complex64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = Complex64::new(
                    ((i * 7 + j * 3) % 11) as f64 / 11.0,
                    ((i * 5 + j) % 7) as f64 / 7.0,
                );
            }
            a[(i, i)] += Complex64::new(4.0, 0.0);
        }
        let b = DMatrix::<Complex64>::identity(n, n);
        let x = solve_linear(&a, &b).unwrap();
        let resid = (&a * &x - &b).norm();
        assert!(resid < 1e-12, "residual {resid}");
    }
}
