//! Model estimation from historical curves: per-curve regression splines
//! followed by functional PCA on the fitted coefficients.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{sym_eig, sym_sqrt, sym_sqrt_inv, SymMatrix};
use crate::spline::{SplineFunction, SplineSpace};

/// One discretely sampled curve: strictly increasing times in [0, T] with a
/// value for each, tagged by an opaque day label.
#[derive(Clone, Debug)]
pub struct CurveSample {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub day_id: String,
}

impl CurveSample {
    pub fn new(times: Vec<f64>, values: Vec<f64>, day_id: impl Into<String>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::InvalidInput(format!(
                "times ({}) and values ({}) differ in length",
                times.len(),
                values.len()
            )));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("times must be strictly increasing".into()));
        }
        Ok(CurveSample { times, values, day_id: day_id.into() })
    }

    /// The sub-sample with times at or before `cut`.
    pub fn before(&self, cut: f64) -> CurveSample {
        let n = self.times.iter().take_while(|&&t| t <= cut).count();
        CurveSample {
            times: self.times[..n].to_vec(),
            values: self.values[..n].to_vec(),
            day_id: self.day_id.clone(),
        }
    }

    /// The sub-sample with times at or after `from`.
    pub fn from_time(&self, from: f64) -> CurveSample {
        let skip = self.times.iter().take_while(|&&t| t < from).count();
        CurveSample {
            times: self.times[skip..].to_vec(),
            values: self.values[skip..].to_vec(),
            day_id: self.day_id.clone(),
        }
    }
}

/// The estimated functional model over the full segment.
///
/// Curves are `b(t)' (mu + A h + B e)` with `h ~ (0, diag(l))` the factor
/// scores, `e ~ (0, diag(sigma))` the structured noise scores, and the
/// columns of `[A | B]` orthonormal in the Gram inner product. `sigma2` is
/// the leftover variance per discarded PCA direction; the ridge path uses it
/// as its iid noise level.
#[derive(Clone, Debug)]
pub struct CurveModel {
    pub space: SplineSpace,
    pub mu: DVector<f64>,
    pub a: DMatrix<f64>,
    pub l_diag: DVector<f64>,
    pub b: DMatrix<f64>,
    pub sigma_diag: DVector<f64>,
    pub sigma2: f64,
}

impl CurveModel {
    pub fn new(
        space: SplineSpace,
        mu: DVector<f64>,
        a: DMatrix<f64>,
        l_diag: DVector<f64>,
        b: DMatrix<f64>,
        sigma_diag: DVector<f64>,
        sigma2: f64,
    ) -> Result<Self> {
        let model = CurveModel { space, mu, a, l_diag, b, sigma_diag, sigma2 };
        model.validate()?;
        Ok(model)
    }

    pub fn n_factors(&self) -> usize {
        self.a.ncols()
    }

    pub fn n_noise(&self) -> usize {
        self.b.ncols()
    }

    fn validate(&self) -> Result<()> {
        let n = self.space.dim();
        let (p, q) = (self.n_factors(), self.n_noise());
        if self.mu.len() != n || self.a.nrows() != n || self.b.nrows() != n {
            return Err(Error::InvalidInput("model dimensions disagree with space".into()));
        }
        if self.l_diag.len() != p || self.sigma_diag.len() != q {
            return Err(Error::InvalidInput("variance lengths disagree with loadings".into()));
        }
        if p + q > n {
            return Err(Error::InvalidInput(format!("p + q = {} exceeds N = {n}", p + q)));
        }
        if p == 0 {
            return Err(Error::DegenerateModel("at least one factor is required".into()));
        }
        if self.l_diag.iter().any(|&l| l <= 0.0)
            || self.l_diag.as_slice().windows(2).any(|w| w[0] < w[1])
        {
            return Err(Error::DegenerateModel(
                "factor variances must be positive and descending".into(),
            ));
        }
        if self.sigma_diag.iter().any(|&s| s <= 0.0)
            || self.sigma_diag.as_slice().windows(2).any(|w| w[0] < w[1])
        {
            return Err(Error::DegenerateModel(
                "noise variances must be positive and descending".into(),
            ));
        }
        if self.sigma2 < 0.0 {
            return Err(Error::InvalidVariance("sigma2 must be nonnegative".into()));
        }
        // W-orthonormality of [A | B].
        let w = self.space.gram_matrix();
        let c = self.loadings();
        let gram = c.transpose() * w * &c;
        let dev = (&gram - DMatrix::identity(p + q, p + q)).amax();
        if dev > 1e-8 {
            return Err(Error::InvalidInput(format!(
                "loadings are not W-orthonormal (deviation {dev:.3e})"
            )));
        }
        Ok(())
    }

    /// [A | B] as one N x (p+q) matrix.
    pub fn loadings(&self) -> DMatrix<f64> {
        let n = self.space.dim();
        let (p, q) = (self.n_factors(), self.n_noise());
        let mut c = DMatrix::zeros(n, p + q);
        c.columns_mut(0, p).copy_from(&self.a);
        c.columns_mut(p, q).copy_from(&self.b);
        c
    }

    /// diag(L, Sigma) as a vector.
    pub fn score_variances(&self) -> DVector<f64> {
        let mut s = DVector::zeros(self.n_factors() + self.n_noise());
        s.rows_mut(0, self.n_factors()).copy_from(&self.l_diag);
        s.rows_mut(self.n_factors(), self.n_noise()).copy_from(&self.sigma_diag);
        s
    }

    pub fn mean_function(&self) -> SplineFunction {
        SplineFunction::new(self.space.clone(), self.mu.clone()).expect("mu matches space")
    }
}

/// Least-squares fit of a sampled curve in the given spline space.
pub fn fit_regression_spline(sample: &CurveSample, space: &SplineSpace) -> Result<SplineFunction> {
    let n = space.dim();
    if sample.times.len() < n {
        return Err(Error::UnderdeterminedFit { rank: sample.times.len(), unknowns: n });
    }
    let x = space.design_matrix(&sample.times)?;
    let y = DVector::from_column_slice(&sample.values);
    let coeffs = crate::linalg::lsq_solve(&x, &y)?;
    SplineFunction::new(space.clone(), coeffs)
}

/// Functional PCA on fitted coefficients (rows of `coeff_matrix`), performed
/// in the Gram inner product so the recovered factor functions are
/// orthonormal as functions. The first `p` components become the factor
/// loadings, the next `q` the noise loadings, and the mean of the remaining
/// eigenvalues is reported as the leftover variance.
pub fn functional_pca(
    coeff_matrix: &DMatrix<f64>,
    space: &SplineSpace,
    p: usize,
    q: usize,
) -> Result<CurveModel> {
    let m = coeff_matrix.nrows();
    let n = space.dim();
    if coeff_matrix.ncols() != n {
        return Err(Error::InvalidInput(format!(
            "coefficient matrix has {} columns, space dimension is {n}",
            coeff_matrix.ncols()
        )));
    }
    if m < 2 {
        return Err(Error::InvalidInput("need at least two curves".into()));
    }
    if p < 1 || p + q > (m - 1).min(n) {
        return Err(Error::InvalidInput(format!(
            "need 1 <= p and p + q <= min(m-1, N); got p={p}, q={q}, m={m}, N={n}"
        )));
    }

    let mu = DVector::from_fn(n, |j, _| coeff_matrix.column(j).mean());
    let mut centered = coeff_matrix.clone();
    for i in 0..m {
        for j in 0..n {
            centered[(i, j)] -= mu[j];
        }
    }
    let cov = centered.transpose() * &centered / (m as f64 - 1.0);

    let w = SymMatrix::symmetrized(space.gram_matrix())?;
    let w_half = sym_sqrt(&w)?;
    let w_half_inv = sym_sqrt_inv(&w)?;
    let whitened = SymMatrix::symmetrized(&w_half * cov * &w_half)?;
    let eig = sym_eig(&whitened);

    if eig.values.rows(0, p + q).iter().any(|&l| l <= 0.0) {
        return Err(Error::DegenerateModel(format!(
            "retained eigenvalue(s) not positive: leading {} eigenvalues are {:?}",
            p + q,
            eig.values.rows(0, p + q).as_slice()
        )));
    }

    let loadings = &w_half_inv * eig.vectors.columns(0, p + q);
    let a = loadings.columns(0, p).into_owned();
    let b = loadings.columns(p, q).into_owned();
    let l_diag = eig.values.rows(0, p).into_owned();
    let sigma_diag = eig.values.rows(p, q).into_owned();
    let rest = eig.values.rows(p + q, n - p - q);
    let sigma2 = if rest.is_empty() {
        0.0
    } else {
        (rest.iter().map(|&l| l.max(0.0)).sum::<f64>() / rest.len() as f64).max(0.0)
    };

    CurveModel::new(space.clone(), mu, a, l_diag, b, sigma_diag, sigma2)
}

/// Dimension choice by cumulative explained variance: `p` components to reach
/// `threshold`, then enough further components to reach (1 + threshold) / 2.
pub fn select_dimensions(eigenvalues: &[f64], threshold: f64) -> Result<(usize, usize)> {
    if !(0.0..1.0).contains(&threshold) || threshold <= 0.0 {
        return Err(Error::InvalidInput(format!("threshold {threshold} not in (0,1)")));
    }
    let clipped: Vec<f64> = eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidInput("no positive eigenvalue".into()));
    }
    let higher = 0.5 * (1.0 + threshold);
    let mut cum = 0.0;
    let mut p = clipped.len();
    for (i, &l) in clipped.iter().enumerate() {
        cum += l;
        if cum / total >= threshold {
            p = i + 1;
            break;
        }
    }
    let mut cum2 = clipped[..p].iter().sum::<f64>();
    let mut q = 0;
    while cum2 / total < higher && p + q < clipped.len() {
        cum2 += clipped[p + q];
        q += 1;
    }
    log::debug!("dimension selection: p={p}, q={q} at thresholds {threshold}/{higher}");
    Ok((p, q))
}

/// How the training curves are turned into a model.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct FitSettings {
    /// Spline order (4 = cubic).
    pub order: usize,
    /// Number of equal-width spans over the day; 0 picks one span per four
    /// observation intervals.
    pub spans: usize,
    pub dims: DimSelect,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub enum DimSelect {
    /// Explicit factor and noise dimensions.
    Fixed { p: usize, q: usize },
    /// Cumulative-explained-variance thresholds.
    Threshold(f64),
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings { order: 4, spans: 0, dims: DimSelect::Threshold(0.90) }
    }
}

impl FitSettings {
    pub fn space_for(&self, domain: (f64, f64), n_points: usize) -> Result<SplineSpace> {
        let spans = if self.spans > 0 {
            self.spans
        } else {
            (n_points / 4).max(1)
        };
        SplineSpace::uniform(domain.0, domain.1, spans, self.order)
    }
}

/// Fit every curve by regression spline and run functional PCA. Returns the
/// model and the m x N coefficient matrix of the per-curve fits.
pub fn fit_curve_set(
    curves: &[CurveSample],
    space: &SplineSpace,
    dims: &DimSelect,
) -> Result<(CurveModel, DMatrix<f64>)> {
    if curves.len() < 2 {
        return Err(Error::InvalidInput("need at least two training curves".into()));
    }
    let m = curves.len();
    let n = space.dim();
    let mut coeffs = DMatrix::zeros(m, n);
    for (i, c) in curves.iter().enumerate() {
        let f = fit_regression_spline(c, space)?;
        coeffs.row_mut(i).copy_from_slice(f.coefficients.as_slice());
    }
    let (p, q) = match dims {
        DimSelect::Fixed { p: p_req, q: q_req } => {
            let cap = (m - 1).min(n);
            let p = (*p_req).min(cap).max(1);
            let q = (*q_req).min(cap - p);
            if (p, q) != (*p_req, *q_req) {
                log::warn!("requested dimensions truncated to p={p}, q={q} (m={m}, N={n})");
            }
            (p, q)
        }
        DimSelect::Threshold(th) => {
            // Eigenvalues of the whitened coefficient covariance.
            let mu = DVector::from_fn(n, |j, _| coeffs.column(j).mean());
            let mut centered = coeffs.clone();
            for i in 0..m {
                for j in 0..n {
                    centered[(i, j)] -= mu[j];
                }
            }
            let cov = centered.transpose() * &centered / (m as f64 - 1.0);
            let w = SymMatrix::symmetrized(space.gram_matrix())?;
            let w_half = sym_sqrt(&w)?;
            let whitened = SymMatrix::symmetrized(&w_half * cov * w_half.transpose())?;
            let eig = sym_eig(&whitened);
            let (p, q) = select_dimensions(eig.values.as_slice(), *th)?;
            let cap = (m - 1).min(n);
            (p.min(cap).max(1), q.min(cap.saturating_sub(p)))
        }
    };
    let model = functional_pca(&coeffs, space, p, q)?;
    Ok((model, coeffs))
}

const MODEL_FORMAT_HEADER: &str = "curvecast-model v1";

impl CurveModel {
    /// Write the model in the versioned plain-text format. Every float is
    /// printed with 17 significant digits so reading it back is exact.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let fmt = |v: f64| format!("{v:.16e}");
        writeln!(out, "{MODEL_FORMAT_HEADER}")?;
        writeln!(out, "order {}", self.space.order())?;
        let knots = self.space.knot_vector().knots();
        write!(out, "knots {}", knots.len())?;
        for v in knots {
            write!(out, " {}", fmt(*v))?;
        }
        writeln!(out)?;
        let write_vec = |out: &mut W, name: &str, v: &DVector<f64>| -> Result<()> {
            write!(out, "{name} {}", v.len())?;
            for x in v.iter() {
                write!(out, " {}", fmt(*x))?;
            }
            writeln!(out)?;
            Ok(())
        };
        let write_mat = |out: &mut W, name: &str, m: &DMatrix<f64>| -> Result<()> {
            write!(out, "{name} {} {}", m.nrows(), m.ncols())?;
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    write!(out, " {}", fmt(m[(r, c)]))?;
                }
            }
            writeln!(out)?;
            Ok(())
        };
        write_vec(out, "mu", &self.mu)?;
        write_mat(out, "A", &self.a)?;
        write_vec(out, "L", &self.l_diag)?;
        write_mat(out, "B", &self.b)?;
        write_vec(out, "Sigma", &self.sigma_diag)?;
        writeln!(out, "sigma2 {}", fmt(self.sigma2))?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<CurveModel> {
        let mut lines = input.lines();
        let mut next_line = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Parse("unexpected end of model file".into()))?
                .map_err(Error::from)
        };
        let header = next_line()?;
        if header.trim() != MODEL_FORMAT_HEADER {
            return Err(Error::Parse(format!("unknown model header '{}'", header.trim())));
        }
        let parse_f64 = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::Parse(format!("bad float '{s}'")))
        };
        let parse_usize = |s: &str| -> Result<usize> {
            s.parse::<usize>().map_err(|_| Error::Parse(format!("bad integer '{s}'")))
        };

        let order_line = next_line()?;
        let mut it = order_line.split_whitespace();
        if it.next() != Some("order") {
            return Err(Error::Parse("expected 'order'".into()));
        }
        let order = parse_usize(it.next().ok_or_else(|| Error::Parse("missing order".into()))?)?;

        let read_tagged = |line: String, tag: &str| -> Result<Vec<String>> {
            let mut parts = line.split_whitespace().map(str::to_owned);
            match parts.next() {
                Some(t) if t == tag => Ok(parts.collect()),
                other => Err(Error::Parse(format!("expected '{tag}', found {other:?}"))),
            }
        };

        let knot_fields = read_tagged(next_line()?, "knots")?;
        let n_knots = parse_usize(&knot_fields[0])?;
        if knot_fields.len() != n_knots + 1 {
            return Err(Error::Parse("knot count mismatch".into()));
        }
        let knots = knot_fields[1..].iter().map(|s| parse_f64(s)).collect::<Result<Vec<_>>>()?;
        let space = SplineSpace::new(crate::spline::KnotVector::new(knots, order)?);

        let read_vec = |line: String, tag: &str| -> Result<DVector<f64>> {
            let fields = read_tagged(line, tag)?;
            let len = parse_usize(&fields[0])?;
            if fields.len() != len + 1 {
                return Err(Error::Parse(format!("{tag} length mismatch")));
            }
            Ok(DVector::from_vec(
                fields[1..].iter().map(|s| parse_f64(s)).collect::<Result<Vec<_>>>()?,
            ))
        };
        let read_mat = |line: String, tag: &str| -> Result<DMatrix<f64>> {
            let fields = read_tagged(line, tag)?;
            let rows = parse_usize(&fields[0])?;
            let cols = parse_usize(&fields[1])?;
            if fields.len() != rows * cols + 2 {
                return Err(Error::Parse(format!("{tag} size mismatch")));
            }
            let vals = fields[2..].iter().map(|s| parse_f64(s)).collect::<Result<Vec<_>>>()?;
            Ok(DMatrix::from_row_slice(rows, cols, &vals))
        };

        let mu = read_vec(next_line()?, "mu")?;
        let a = read_mat(next_line()?, "A")?;
        let l_diag = read_vec(next_line()?, "L")?;
        let b = read_mat(next_line()?, "B")?;
        let sigma_diag = read_vec(next_line()?, "Sigma")?;
        let sigma2_fields = read_tagged(next_line()?, "sigma2")?;
        let sigma2 = parse_f64(&sigma2_fields[0])?;

        CurveModel::new(space, mu, a, l_diag, b, sigma_diag, sigma2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn space() -> SplineSpace {
        SplineSpace::uniform(0.0, 1.0, 3, 4).unwrap()
    }

    #[test]
    fn regression_spline_recovers_in_space_function() {
        let s = space();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let truth = DVector::from_fn(s.dim(), |_, _| rng.random_range(-1.0..1.0));
        let f = SplineFunction::new(s.clone(), truth.clone()).unwrap();
        let times: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let values = f.eval_many(&times).unwrap();
        let sample = CurveSample::new(times, values, "d").unwrap();
        let fitted = fit_regression_spline(&sample, &s).unwrap();
        assert!((fitted.coefficients - truth).amax() < 1e-10);
    }

    #[test]
    fn regression_spline_constant_gives_constant_coefficients() {
        let s = space();
        let times: Vec<f64> = (0..=12).map(|i| i as f64 / 12.0).collect();
        let values = vec![3.25; times.len()];
        let sample = CurveSample::new(times, values, "d").unwrap();
        let fitted = fit_regression_spline(&sample, &s).unwrap();
        assert!(fitted.coefficients.iter().all(|&c| (c - 3.25).abs() < 1e-10));
    }

    #[test]
    fn regression_spline_matches_normal_equations() {
        let s = space();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let times: Vec<f64> = (0..=30).map(|i| i as f64 / 30.0).collect();
        let values: Vec<f64> =
            times.iter().map(|&t| 2.0 * t - 1.0 + 0.1 * rng.random_range(-1.0..1.0)).collect();
        let sample = CurveSample::new(times.clone(), values.clone(), "d").unwrap();
        let fitted = fit_regression_spline(&sample, &s).unwrap();

        // Independent normal-equations solve.
        let x = s.design_matrix(&times).unwrap();
        let y = DVector::from_column_slice(&values);
        let xtx = x.transpose() * &x;
        let xty = x.transpose() * y;
        let ne = xtx.lu().solve(&xty).unwrap();
        assert!((fitted.coefficients - ne).amax() < 1e-10);
    }

    #[test]
    fn regression_spline_underdetermined_errors() {
        let s = space();
        let times: Vec<f64> = (0..3).map(|i| i as f64 / 3.0).collect();
        let sample = CurveSample::new(times, vec![0.0; 3], "d").unwrap();
        assert!(matches!(
            fit_regression_spline(&sample, &s),
            Err(Error::UnderdeterminedFit { .. })
        ));
    }

    #[test]
    fn pca_rejects_zero_variance() {
        let s = space();
        let row = DVector::from_element(s.dim(), 1.0);
        let mut coeffs = DMatrix::zeros(5, s.dim());
        for i in 0..5 {
            coeffs.row_mut(i).copy_from_slice(row.as_slice());
        }
        assert!(matches!(
            functional_pca(&coeffs, &s, 1, 0),
            Err(Error::DegenerateModel(_))
        ));
    }

    #[test]
    fn pca_identity_covariance_recovers_gram_eigenvalues() {
        let s = space();
        let n = s.dim();
        let m = 40_000;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let coeffs = DMatrix::from_fn(m, n, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let model = functional_pca(&coeffs, &s, 2, 1).unwrap();
        let w = SymMatrix::symmetrized(s.gram_matrix()).unwrap();
        let w_eigs = sym_eig(&w).values;
        // With identity coefficient covariance the whitened covariance is W.
        assert_relative_eq!(model.l_diag[0], w_eigs[0], max_relative = 0.05);
        assert_relative_eq!(model.l_diag[1], w_eigs[1], max_relative = 0.05);
        assert_relative_eq!(model.sigma_diag[0], w_eigs[2], max_relative = 0.05);
    }

    #[test]
    fn select_dimensions_rules() {
        let (p, _q) = select_dimensions(&[10.0, 1e-4, 1e-5], 0.9).unwrap();
        assert_eq!(p, 1);
        let (p, q) = select_dimensions(&[1.0, 1.0, 1.0, 1.0], 0.75).unwrap();
        assert_eq!(p, 3);
        assert_eq!(q, 1); // (1 + 0.75) / 2 = 0.875 needs the fourth as well
        assert!(select_dimensions(&[0.0, -1.0], 0.9).is_err());
    }

    #[test]
    fn model_file_round_trips_exactly() {
        let s = space();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let m = 30;
        let coeffs = DMatrix::from_fn(m, s.dim(), |_, j| {
            j as f64 + rng.random_range(-1.0..1.0)
        });
        let model = functional_pca(&coeffs, &s, 2, 1).unwrap();
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        let back = CurveModel::read_from(std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(model.space, back.space);
        assert_eq!(model.mu, back.mu);
        assert_eq!(model.a, back.a);
        assert_eq!(model.l_diag, back.l_diag);
        assert_eq!(model.b, back.b);
        assert_eq!(model.sigma_diag, back.sigma_diag);
        assert_eq!(model.sigma2, back.sigma2);
    }
}
