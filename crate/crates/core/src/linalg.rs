//! Dense symmetric eigendecomposition, SVD-based Moore-Penrose pseudoinverse,
//! and the low-rank gain route the predictor relies on.
//!
//! The eigen and SVD routines are Jacobi methods implemented here rather than
//! delegated: the covariance matrices this crate inverts are rank-deficient
//! by construction, and the general-purpose SVD in the matrix library loses
//! accuracy exactly there (reconstruction errors around 1e-1 on some PSD
//! rank-2 inputs). Cyclic Jacobi is slower but accurate to machine precision
//! at the small dimensions used throughout.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A matrix validated to be symmetric (relative tolerance 1e-12).
#[derive(Clone, Debug)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::InvalidMatrix("not square".into()));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix("non-finite entries".into()));
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        let asym = (&m - m.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::InvalidMatrix(format!(
                "asymmetry {asym:.3e} exceeds tolerance at scale {scale:.3e}"
            )));
        }
        Ok(SymMatrix(m))
    }

    /// Symmetrize first, then wrap. For matrices symmetric by construction
    /// where floating-point products introduced harmless asymmetry.
    pub fn symmetrized(m: DMatrix<f64>) -> Result<Self> {
        let s = 0.5 * (&m + m.transpose());
        SymMatrix::new(s)
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }
}

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted descending,
/// eigenvectors orthonormal (columns).
#[derive(Clone, Debug)]
pub struct SymEig {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

/// Cyclic Jacobi eigendecomposition. Converges quadratically; the sweep
/// count is generous for the dimensions seen here (a few hundred at most).
pub fn sym_eig(m: &SymMatrix) -> SymEig {
    let mut a = m.0.clone();
    let n = a.nrows();
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = a.amax().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                off = off.max(a[(i, j)].abs());
            }
        }
        if off <= 1e-16 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-18 * scale {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = DVector::from_fn(n, |i, _| a[(idx[i], idx[i])]);
    let vectors = DMatrix::from_fn(n, n, |r, c| v[(r, idx[c])]);
    SymEig { values, vectors }
}

/// Thin singular value decomposition `A = U diag(sigma) V'` with
/// nonnegative singular values sorted descending.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub sigma: DVector<f64>,
    pub v: DMatrix<f64>,
}

/// One-sided Jacobi (Hestenes) SVD: rotate column pairs until mutually
/// orthogonal. High relative accuracy, including for rank-deficient input.
pub fn svd(a: &DMatrix<f64>) -> Result<Svd> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidMatrix("non-finite entries".into()));
    }
    if a.nrows() < a.ncols() {
        let t = svd(&a.transpose())?;
        return Ok(Svd { u: t.v, sigma: t.sigma, v: t.u });
    }
    let (m, n) = a.shape();
    let mut u = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let eps = f64::EPSILON;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for k in 0..m {
                    let up = u[(k, p)];
                    let uq = u[(k, q)];
                    alpha += up * up;
                    beta += uq * uq;
                    gamma += up * uq;
                }
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..m {
                    let up = u[(k, p)];
                    let uq = u[(k, q)];
                    u[(k, p)] = c * up - s * uq;
                    u[(k, q)] = s * up + c * uq;
                }
                for k in 0..n {
                    let vp = v[(k, p)];
                    let vq = v[(k, q)];
                    v[(k, p)] = c * vp - s * vq;
                    v[(k, q)] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma = DVector::zeros(n);
    for j in 0..n {
        let norm = u.column(j).norm();
        sigma[j] = norm;
        if norm > 0.0 {
            for k in 0..m {
                u[(k, j)] /= norm;
            }
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));
    let u = DMatrix::from_fn(m, n, |r, c| u[(r, idx[c])]);
    let v = DMatrix::from_fn(n, n, |r, c| v[(r, idx[c])]);
    let sigma = DVector::from_fn(n, |i, _| sigma[idx[i]]);
    Ok(Svd { u, sigma, v })
}

/// Symmetric square root of a positive definite matrix.
pub fn sym_sqrt(m: &SymMatrix) -> Result<DMatrix<f64>> {
    let eig = sym_eig(m);
    if eig.values.iter().any(|&l| l <= 0.0) {
        return Err(Error::InvalidMatrix("matrix is not positive definite".into()));
    }
    let d = DMatrix::from_diagonal(&eig.values.map(f64::sqrt));
    Ok(&eig.vectors * d * eig.vectors.transpose())
}

/// Inverse of the symmetric square root of a positive definite matrix.
pub fn sym_sqrt_inv(m: &SymMatrix) -> Result<DMatrix<f64>> {
    let eig = sym_eig(m);
    if eig.values.iter().any(|&l| l <= 0.0) {
        return Err(Error::InvalidMatrix("matrix is not positive definite".into()));
    }
    let d = DMatrix::from_diagonal(&eig.values.map(|l| 1.0 / l.sqrt()));
    Ok(&eig.vectors * d * eig.vectors.transpose())
}

/// Moore-Penrose pseudoinverse with the numerical rank that produced it.
#[derive(Clone, Debug)]
pub struct Pseudoinverse {
    pub matrix: DMatrix<f64>,
    pub source_rank: usize,
}

impl Pseudoinverse {
    /// Residuals of the four Penrose conditions against `source`, each
    /// normalized by the scale of its left-hand side's exact value.
    pub fn penrose_residuals(&self, source: &DMatrix<f64>) -> [f64; 4] {
        let a = source;
        let x = &self.matrix;
        let ax = a * x;
        let xa = x * a;
        let scale_a = a.amax().max(f64::MIN_POSITIVE);
        let scale_x = x.amax().max(f64::MIN_POSITIVE);
        [
            (&ax * a - a).amax() / scale_a,
            (&xa * x - x).amax() / scale_x,
            (ax.transpose() - &ax).amax() / ax.amax().max(f64::MIN_POSITIVE),
            (xa.transpose() - &xa).amax() / xa.amax().max(f64::MIN_POSITIVE),
        ]
    }
}

/// Default spectral cutoff: max(rows, cols) * machine epsilon.
pub fn default_rank_tol(rows: usize, cols: usize) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON
}

/// SVD-based pseudoinverse. Singular values below `rank_tol * sigma_max`
/// are treated as zero.
pub fn pinv(m: &DMatrix<f64>, rank_tol: Option<f64>) -> Result<Pseudoinverse> {
    let tol = rank_tol.unwrap_or_else(|| default_rank_tol(m.nrows(), m.ncols()));
    let dec = svd(m)?;
    let smax = dec.sigma.max();
    let cutoff = tol * smax;
    let mut rank = 0;
    let inv_s = DVector::from_fn(dec.sigma.len(), |i, _| {
        let s = dec.sigma[i];
        if s > cutoff && s > 0.0 {
            rank += 1;
            1.0 / s
        } else {
            0.0
        }
    });
    let matrix = &dec.v * DMatrix::from_diagonal(&inv_s) * dec.u.transpose();
    Ok(Pseudoinverse { matrix, source_rank: rank })
}

/// Least-squares solve through column-pivoted QR, with a numerical rank
/// check on the pivoted diagonal. Errors when the design does not determine
/// all unknowns.
pub fn lsq_solve(a: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let n = a.ncols();
    if a.nrows() < n {
        return Err(Error::UnderdeterminedFit { rank: a.nrows(), unknowns: n });
    }
    let qr = a.clone().col_piv_qr();
    let r = qr.r();
    let rmax = (0..n).map(|i| r[(i, i)].abs()).fold(0.0f64, f64::max);
    let cutoff = default_rank_tol(a.nrows(), n) * rmax;
    let rank = (0..n).filter(|&i| r[(i, i)].abs() > cutoff).count();
    if rank < n {
        return Err(Error::UnderdeterminedFit { rank, unknowns: n });
    }
    let z = qr.q().transpose() * y;
    let mut w = r
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::InvalidMatrix("triangular solve failed".into()))?;
    qr.p().inv_permute_rows(&mut w);
    Ok(w)
}

/// Gain kernel of the predictor: the pseudoinverse of C S C' (with S the
/// positive diagonal diag(s_diag)) computed through the factor side. With
/// `T = C S^{1/2}` and its SVD `U diag(sigma) V'`, the pseudoinverse is
/// `U diag(sigma^{-2}) U'`, so the spectral work happens at the p+q scale
/// and the numerical rank is decided on sigma rather than sigma squared.
/// Exact for any column rank of C.
pub fn blup_gain(c: &DMatrix<f64>, s_diag: &DVector<f64>) -> Result<DMatrix<f64>> {
    if c.ncols() != s_diag.len() {
        return Err(Error::InvalidInput(format!(
            "C has {} columns but S has {} entries",
            c.ncols(),
            s_diag.len()
        )));
    }
    if s_diag.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(Error::InvalidVariance(
            "variance diagonal must be strictly positive".into(),
        ));
    }
    if c.ncols() == 0 {
        return Ok(DMatrix::zeros(c.nrows(), c.nrows()));
    }
    let s_half = DMatrix::from_diagonal(&s_diag.map(f64::sqrt));
    let cs = c * s_half; // N1 x (p+q), columns scaled by sqrt(S)
    let dec = svd(&cs)?;
    let smax = dec.sigma.max();
    // The result pseudo-inverts the squared spectrum, so the rank decision
    // happens at the square root of the eigenvalue-scale tolerance; this
    // keeps the effective rank aligned with pinv of C S C' itself.
    let cutoff = default_rank_tol(cs.nrows(), cs.ncols()).sqrt() * smax;
    let inv_s2 = DVector::from_fn(dec.sigma.len(), |i, _| {
        let s = dec.sigma[i];
        if s > cutoff && s > 0.0 {
            1.0 / (s * s)
        } else {
            0.0
        }
    });
    Ok(&dec.u * DMatrix::from_diagonal(&inv_s2) * dec.u.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn svd_reconstructs_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for trial in 0..30 {
            let (m, n) = (rng.random_range(2..12), rng.random_range(2..12));
            let r = rng.random_range(1..=m.min(n));
            let a = random_matrix(&mut rng, m, r) * random_matrix(&mut rng, r, n);
            let dec = svd(&a).unwrap();
            let recon = &dec.u * DMatrix::from_diagonal(&dec.sigma) * dec.v.transpose();
            let scale = a.amax().max(1e-300);
            assert!(
                (recon - &a).amax() < 1e-12 * scale,
                "trial {trial}: reconstruction failed"
            );
            let iu = dec.u.transpose() * &dec.u;
            // Columns with zero singular value are not normalized; check the
            // leading r columns only.
            for i in 0..r {
                for j in 0..r {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((iu[(i, j)] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pinv_identity_and_diagonal() {
        let id = DMatrix::<f64>::identity(4, 4);
        let p = pinv(&id, None).unwrap();
        assert_relative_eq!((&p.matrix - &id).amax(), 0.0, epsilon = 1e-14);
        assert_eq!(p.source_rank, 4);

        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0]));
        let p = pinv(&d, None).unwrap();
        assert_relative_eq!(p.matrix[(0, 0)], 0.5, epsilon = 1e-14);
        assert_relative_eq!(p.matrix[(1, 1)], 0.0, epsilon = 1e-14);
        assert_eq!(p.source_rank, 1);
    }

    #[test]
    fn pinv_rank_deficient_penrose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let left = random_matrix(&mut rng, 8, 3);
        let right = random_matrix(&mut rng, 3, 5);
        let m = left * right; // 8x5, rank 3
        let p = pinv(&m, None).unwrap();
        assert_eq!(p.source_rank, 3);
        for r in p.penrose_residuals(&m) {
            assert!(r < 1e-9, "penrose residual {r}");
        }
    }

    #[test]
    fn pinv_rejects_non_finite() {
        let mut m = DMatrix::<f64>::zeros(2, 2);
        m[(0, 0)] = f64::NAN;
        assert!(matches!(pinv(&m, None), Err(Error::InvalidMatrix(_))));
    }

    #[test]
    fn sym_eig_sorted_and_reconstructs() {
        let d = SymMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 2.0])))
            .unwrap();
        let e = sym_eig(&d);
        assert_eq!(e.values.as_slice(), &[3.0, 2.0, 1.0]);

        let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let rank1 = SymMatrix::symmetrized(&v * v.transpose()).unwrap();
        let e = sym_eig(&rank1);
        assert_relative_eq!(e.values[0], v.norm_squared(), epsilon = 1e-12);
        assert_relative_eq!(e.values[1], 0.0, epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let raw = random_matrix(&mut rng, 10, 10);
        let m = SymMatrix::symmetrized(raw).unwrap();
        let e = sym_eig(&m);
        let rebuilt = &e.vectors * DMatrix::from_diagonal(&e.values) * e.vectors.transpose();
        assert!((rebuilt - m.as_matrix()).norm() < 1e-9);
    }

    #[test]
    fn sym_matrix_rejects_asymmetry() {
        let mut m = DMatrix::<f64>::identity(3, 3);
        m[(0, 1)] = 0.5;
        assert!(matches!(SymMatrix::new(m), Err(Error::InvalidMatrix(_))));
    }

    #[test]
    fn gain_orthonormal_projection() {
        // C with orthonormal columns and S = I yields the projector C C'.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let raw = random_matrix(&mut rng, 6, 2);
        let q = raw.qr().q();
        let s = DVector::from_element(2, 1.0);
        let g = blup_gain(&q, &s).unwrap();
        assert!((&g - &q * q.transpose()).amax() < 1e-10);
    }

    #[test]
    fn gain_rank_one_closed_form() {
        let c = DMatrix::from_column_slice(4, 1, &[1.0, -0.5, 2.0, 0.25]);
        let s = DVector::from_vec(vec![1.7]);
        let g = blup_gain(&c, &s).unwrap();
        let norm2 = c.column(0).norm_squared();
        let expected = (&c * c.transpose()) / (s[0] * norm2 * norm2);
        assert!((g - expected).amax() < 1e-12);
    }

    #[test]
    fn gain_matches_direct_pseudoinverse_with_collinear_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for trial in 0..20 {
            let n = rng.random_range(4..10);
            let pq = rng.random_range(2..5);
            let mut c = random_matrix(&mut rng, n, pq);
            if trial % 2 == 0 {
                let dup = 2.0 * c.column(0).into_owned();
                c.set_column(1, &dup);
            }
            let s = DVector::from_fn(pq, |_, _| rng.random_range(0.1..4.0));
            let g = blup_gain(&c, &s).unwrap();
            let big = &c * DMatrix::from_diagonal(&s) * c.transpose();
            let direct = pinv(&big, None).unwrap().matrix;
            let scale = direct.amax().max(1.0);
            assert!(
                (&g - &direct).amax() < 1e-8 * scale,
                "trial {trial}: gain route deviates {:.3e}",
                (&g - &direct).amax()
            );
        }
    }

    #[test]
    fn gain_rejects_nonpositive_variance() {
        let c = DMatrix::<f64>::identity(3, 2);
        let s = DVector::from_vec(vec![1.0, 0.0]);
        assert!(matches!(blup_gain(&c, &s), Err(Error::InvalidVariance(_))));
    }

    #[test]
    fn sym_sqrt_squares_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let raw = random_matrix(&mut rng, 5, 5);
        let spd = SymMatrix::symmetrized(&raw * raw.transpose() + DMatrix::identity(5, 5)).unwrap();
        let half = sym_sqrt(&spd).unwrap();
        assert!((&half * &half - spd.as_matrix()).amax() < 1e-10);
        let half_inv = sym_sqrt_inv(&spd).unwrap();
        assert!((&half * &half_inv - DMatrix::identity(5, 5)).amax() < 1e-10);
    }
}
