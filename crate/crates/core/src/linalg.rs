//! Dense linear-algebra helpers for the synthesis and analysis layers: a real
//! Bartels-Stewart Lyapunov solver, symmetric eigenvalue ranges, spectral
//! norms, and the matrix exponential.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Solves the continuous Lyapunov equation `Aᵀ X + X A + Q = 0` for X.
///
/// Requires that no two eigenvalues of A sum to zero (in particular any
/// Hurwitz A qualifies). Uses the real Schur form of A and block
/// back-substitution over its 1x1 / 2x2 diagonal blocks, then symmetrizes.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n, "A must be square");
    assert_eq!((q.nrows(), q.ncols()), (n, n), "Q must match A");
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let schur = a.clone().schur();
    let (u, t) = schur.unpack();
    // Tᵀ Y + Y T = -Q~ with Q~ = Uᵀ Q U, then X = U Y Uᵀ.
    let q_t = u.transpose() * q * &u;

    // Diagonal block boundaries of the quasi-triangular T.
    let mut blocks: Vec<(usize, usize)> = Vec::new();
    let mut k = 0;
    while k < n {
        let size = if k + 1 < n && t[(k + 1, k)] != 0.0 { 2 } else { 1 };
        blocks.push((k, size));
        k += size;
    }

    let mut y = DMatrix::<f64>::zeros(n, n);
    for (bi, &(i0, p)) in blocks.iter().enumerate() {
        for (bj, &(j0, qs)) in blocks.iter().enumerate() {
            // RHS = -Q~_IJ - sum_{K<I} T_KIᵀ Y_KJ - sum_{K<J} Y_IK T_KJ.
            let mut rhs = -q_t.view((i0, j0), (p, qs)).clone_owned();
            for &(k0, ks) in &blocks[..bi] {
                let t_ki = t.view((k0, i0), (ks, p));
                let y_kj = y.view((k0, j0), (ks, qs));
                rhs -= t_ki.transpose() * y_kj;
            }
            for &(k0, ks) in &blocks[..bj] {
                let y_ik = y.view((i0, k0), (p, ks));
                let t_kj = t.view((k0, j0), (ks, qs));
                rhs -= y_ik * t_kj;
            }
            // Solve T_IIᵀ Z + Z T_JJ = rhs via the small Kronecker system.
            let m = t.view((i0, i0), (p, p)).transpose();
            let nn = t.view((j0, j0), (qs, qs)).clone_owned();
            let dim = p * qs;
            let mut sys = DMatrix::<f64>::zeros(dim, dim);
            // vec(MZ) = (I x M) vec(Z); vec(ZN) = (Nᵀ x I) vec(Z), columns stacked.
            for c in 0..qs {
                for r in 0..p {
                    let row = c * p + r;
                    for cc in 0..p {
                        sys[(row, c * p + cc)] += m[(r, cc)];
                    }
                    for cc in 0..qs {
                        sys[(row, cc * p + r)] += nn[(cc, c)];
                    }
                }
            }
            let rhs_vec = DVector::from_iterator(dim, rhs.iter().copied());
            let sol = sys.lu().solve(&rhs_vec).ok_or_else(|| {
                Error::Synthesis("Lyapunov equation is singular (eigenvalue sum near zero)".into())
            })?;
            for c in 0..qs {
                for r in 0..p {
                    y[(i0 + r, j0 + c)] = sol[c * p + r];
                }
            }
        }
    }
    let x = &u * y * u.transpose();
    Ok(symmetrize(&x))
}

/// Returns (X + Xᵀ) / 2.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalue range (min, max) of a symmetric matrix.
pub fn symmetric_eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = m.clone().symmetric_eigen();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for l in eig.eigenvalues.iter() {
        lo = lo.min(*l);
        hi = hi.max(*l);
    }
    (lo, hi)
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().max()
}

/// Largest real part over the eigenvalues of a (not necessarily symmetric) matrix.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Matrix exponential e^A.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.exp()
}
