//! Seeded synthetic models, curve samplers, and the brute-force oracles the
//! test suite checks the predictor against.
//!
//! Randomness protocol: every sampler takes an explicit `u64` seed, expands
//! it through `ChaCha8Rng::seed_from_u64`, and draws normal variates from
//! `rand_distr::StandardNormal` (the ziggurat sampler). Draws are consumed
//! in a fixed documented order, so identical seeds reproduce identical
//! output regardless of platform.

use chrono::{Datelike, NaiveDate};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::estimate::{CurveModel, CurveSample};
use crate::harness::panel::{ClockTime, CurvePanel, PanelDay};
use crate::linalg::{sym_eig, sym_sqrt, sym_sqrt_inv, SymMatrix};
use crate::predict::CovarianceForm;
use crate::spline::{Side, SplineSpace};

/// A ground-truth Gaussian model plus observation noise and a seed.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub model: CurveModel,
    pub obs_noise_sd: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(model: CurveModel, obs_noise_sd: f64, seed: u64) -> Result<Self> {
        if obs_noise_sd < 0.0 {
            return Err(Error::InvalidVariance("observation noise sd must be >= 0".into()));
        }
        Ok(SyntheticSpec { model, obs_noise_sd, seed })
    }
}

/// A random model with W-orthonormal loadings and well-separated variances.
///
/// Draw order per seed: mean coefficients (N), then the N x (p+q) raw loading
/// matrix column by column, then variance jitter.
pub fn random_model(space: &SplineSpace, p: usize, q: usize, seed: u64) -> Result<CurveModel> {
    random_model_scaled(space, p, q, seed, 1.0, 100.0)
}

/// As [`random_model`] with explicit factor scale (sd of the leading factor)
/// and mean level.
pub fn random_model_scaled(
    space: &SplineSpace,
    p: usize,
    q: usize,
    seed: u64,
    factor_scale: f64,
    mean_level: f64,
) -> Result<CurveModel> {
    let n = space.dim();
    if p < 1 || p + q > n {
        return Err(Error::InvalidInput(format!(
            "need 1 <= p and p + q <= N; got p={p}, q={q}, N={n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Smooth-ish random mean: level plus a small random walk in coefficients.
    let mut mu = DVector::zeros(n);
    let mut walk = 0.0;
    for j in 0..n {
        walk += 0.3 * factor_scale * rng.sample::<f64, _>(StandardNormal);
        mu[j] = mean_level + walk;
    }
    let raw = DMatrix::from_fn(n, p + q, |_, _| rng.sample::<f64, _>(StandardNormal));
    // Orthonormalize in the W inner product: QR of W^{1/2} raw, map back.
    let w = SymMatrix::symmetrized(space.gram_matrix())?;
    let w_half = sym_sqrt(&w)?;
    let w_half_inv = sym_sqrt_inv(&w)?;
    let q_mat = (w_half * raw).qr().q();
    let loadings = w_half_inv * q_mat;

    let mut l_diag = DVector::zeros(p);
    for i in 0..p {
        let jitter: f64 = rng.random_range(0.0..0.2);
        l_diag[i] = factor_scale * factor_scale * 0.5f64.powi(i as i32) * (1.0 + jitter);
    }
    // Keep the ordering strict despite jitter.
    for i in 1..p {
        if l_diag[i] >= l_diag[i - 1] {
            l_diag[i] = 0.9 * l_diag[i - 1];
        }
    }
    // Noise variances decay below the factors but keep a floor so the
    // observed covariance never becomes numerically singular.
    let noise_base = 0.05 * 0.5f64.powi(p as i32);
    let mut sigma_diag = DVector::zeros(q);
    for i in 0..q {
        sigma_diag[i] =
            factor_scale * factor_scale * (noise_base * 0.6f64.powi(i as i32)).max(0.02);
    }
    let sigma2 = 0.01 * factor_scale * factor_scale * noise_base.max(0.02);
    CurveModel::new(
        space.clone(),
        mu,
        loadings.columns(0, p).into_owned(),
        l_diag,
        loadings.columns(p, q).into_owned(),
        sigma_diag,
        sigma2,
    )
}

/// As [`random_model_scaled`], but the leading factor loadings span the
/// given coefficient columns (W-orthonormalized in order, so column j of
/// `leading` shapes factor j). Useful for panels whose dominant factors are
/// known shapes such as a day-level scale and a tilt.
pub fn model_with_leading_loadings(
    space: &SplineSpace,
    leading: &DMatrix<f64>,
    p: usize,
    q: usize,
    seed: u64,
    factor_scale: f64,
    mean_level: f64,
) -> Result<CurveModel> {
    let n = space.dim();
    let r = leading.ncols();
    if leading.nrows() != n || r > p {
        return Err(Error::InvalidInput(
            "leading loadings must be N x r with r <= p".into(),
        ));
    }
    let base = random_model_scaled(space, p, q, seed, factor_scale, mean_level)?;
    let mut raw = DMatrix::zeros(n, p + q);
    raw.columns_mut(0, r).copy_from(leading);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c65_6164);
    for j in r..p + q {
        for i in 0..n {
            raw[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let w = SymMatrix::symmetrized(space.gram_matrix())?;
    let w_half = sym_sqrt(&w)?;
    let w_half_inv = sym_sqrt_inv(&w)?;
    let q_mat = (w_half * raw).qr().q();
    let loadings = w_half_inv * q_mat;
    CurveModel::new(
        space.clone(),
        base.mu,
        loadings.columns(0, p).into_owned(),
        base.l_diag,
        loadings.columns(p, q).into_owned(),
        base.sigma_diag,
        base.sigma2,
    )
}

/// Draw `m` coefficient vectors `mu + A h + B e` as rows. One row consumes
/// p + q normals, factors first.
pub fn sample_coefficients(spec: &SyntheticSpec, m: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    sample_coefficients_with(spec, m, &mut rng)
}

pub fn sample_coefficients_with(
    spec: &SyntheticSpec,
    m: usize,
    rng: &mut impl Rng,
) -> DMatrix<f64> {
    let model = &spec.model;
    let n = model.space.dim();
    let (p, q) = (model.n_factors(), model.n_noise());
    let mut rows = DMatrix::zeros(m, n);
    for i in 0..m {
        let mut coeff = model.mu.clone();
        for j in 0..p {
            let h: f64 = rng.sample(StandardNormal);
            coeff += model.a.column(j) * (h * model.l_diag[j].sqrt());
        }
        for j in 0..q {
            let e: f64 = rng.sample(StandardNormal);
            coeff += model.b.column(j) * (e * model.sigma_diag[j].sqrt());
        }
        rows.row_mut(i).copy_from_slice(coeff.as_slice());
    }
    rows
}

/// How sampled curves are laid out as a day panel.
#[derive(Clone, Debug)]
pub struct PanelLayout {
    pub start_date: NaiveDate,
    pub weekdays_only: bool,
    pub day_start: ClockTime,
    pub interval_minutes: u32,
    pub n_intervals: usize,
}

impl PanelLayout {
    /// Observation times (interval ends) on the model's time axis.
    pub fn times(&self) -> Vec<f64> {
        (1..=self.n_intervals).map(|j| (j as u32 * self.interval_minutes) as f64).collect()
    }

    pub fn dates(&self, m: usize) -> Vec<NaiveDate> {
        let mut out = Vec::with_capacity(m);
        let mut d = self.start_date;
        while out.len() < m {
            let wd = d.weekday().number_from_monday();
            if !self.weekdays_only || wd <= 5 {
                out.push(d);
            }
            d = d.succ_opt().expect("date overflow");
        }
        out
    }
}

/// Sample `m` curves and discretize them: N(0, obs_noise_sd^2) is added at
/// every interval end. Returns the latent coefficients alongside the panel.
/// Negative observations are clamped to zero (counts cannot go below it);
/// choose the mean level high enough that this never fires in calibration
/// studies.
pub fn sample_panel(
    spec: &SyntheticSpec,
    m: usize,
    layout: &PanelLayout,
) -> Result<(DMatrix<f64>, CurvePanel)> {
    let times = layout.times();
    let (a, b) = spec.model.space.domain();
    let horizon = (layout.n_intervals as u32 * layout.interval_minutes) as f64;
    if a != 0.0 || (b - horizon).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "panel layout spans [0, {horizon}] but the model domain is [{a}, {b}]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let coeffs = sample_coefficients_with(spec, m, &mut rng);
    let dates = layout.dates(m);
    let mut days = Vec::with_capacity(m);
    let mut clamped = 0usize;
    for i in 0..m {
        let f = crate::spline::SplineFunction::new(
            spec.model.space.clone(),
            coeffs.row(i).transpose(),
        )?;
        let mut values = f.eval_many(&times)?;
        for v in &mut values {
            if spec.obs_noise_sd > 0.0 {
                *v += spec.obs_noise_sd * rng.sample::<f64, _>(StandardNormal);
            }
            if *v < 0.0 {
                *v = 0.0;
                clamped += 1;
            }
        }
        let sample = CurveSample::new(times.clone(), values, dates[i].to_string())?;
        days.push(PanelDay { date: dates[i], sample });
    }
    if clamped > 0 {
        log::warn!("sample_panel clamped {clamped} negative observations to zero");
    }
    let end = ClockTime(layout.day_start.0 + layout.n_intervals as u32 * layout.interval_minutes);
    let panel = CurvePanel::new(days, layout.interval_minutes, (layout.day_start, end))?;
    Ok((coeffs, panel))
}

/// Discrete multivariate predictor applied directly to the coefficient
/// Gaussian: `mu2 + R21 pinv(R11) (y1 - mu1)` with the blocks assembled from
/// the restricted loadings. Independent of the gain route under test.
pub fn discrete_blup_oracle(
    model: &CurveModel,
    cut: f64,
    y1_coeffs: &DVector<f64>,
    form: CovarianceForm,
) -> Result<DVector<f64>> {
    let (_, r1) = model.space.restriction_matrix(cut, Side::Left)?;
    let (_, r2) = model.space.restriction_matrix(cut, Side::Right)?;
    let mu1 = &r1 * &model.mu;
    let mu2 = &r2 * &model.mu;
    let a1 = &r1 * &model.a;
    let a2 = &r2 * &model.a;
    let b1 = &r1 * &model.b;
    let b2 = &r2 * &model.b;
    let l = DMatrix::from_diagonal(&model.l_diag);
    let s = DMatrix::from_diagonal(&model.sigma_diag);
    let r11 = &a1 * &l * a1.transpose() + &b1 * &s * b1.transpose();
    let r21 = match form {
        CovarianceForm::Signal => &a2 * &l * a1.transpose(),
        CovarianceForm::Observed => &a2 * &l * a1.transpose() + &b2 * &s * b1.transpose(),
    };
    // Pseudoinverse through the eigendecomposition of the symmetric block,
    // a different route than the factor-sided one under test.
    let eig = sym_eig(&SymMatrix::symmetrized(r11)?);
    let lmax = eig.values[0].max(0.0);
    let cutoff = crate::linalg::default_rank_tol(eig.values.len(), eig.values.len()) * lmax;
    let inv = DMatrix::from_diagonal(&eig.values.map(|l| if l > cutoff { 1.0 / l } else { 0.0 }));
    let r11_pinv = &eig.vectors * inv * eig.vectors.transpose();
    Ok(mu2 + r21 * r11_pinv * (y1_coeffs - mu1))
}

/// Kernel-regression estimate of the conditional law of the continuation on
/// a grid, plus Monte Carlo standard errors.
#[derive(Clone, Debug)]
pub struct McConditional {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub mean_se: Vec<f64>,
    pub variance: Vec<f64>,
    pub variance_se: Vec<f64>,
    pub effective_sample_size: f64,
    pub bandwidth: f64,
}

/// Estimate `E[X2(t) | Y1 = y1]` and `Var(X2(t) | Y1 = y1)` on `grid` by
/// Nadaraya-Watson weighting of joint draws, with distances measured after
/// projecting the left coefficients onto the span of the left loadings.
///
/// Shares no linear algebra with the predictor: conditioning happens through
/// the kernel weights, not through any covariance inverse.
pub fn mc_conditional(
    spec: &SyntheticSpec,
    cut: f64,
    y1_coeffs: &DVector<f64>,
    n: usize,
    bandwidth: Option<f64>,
    grid: &[f64],
) -> Result<McConditional> {
    if n < 10_000 {
        return Err(Error::InvalidInput("need at least 10000 draws".into()));
    }
    let model = &spec.model;
    let (_, r1) = model.space.restriction_matrix(cut, Side::Left)?;
    let (right_space, r2) = model.space.restriction_matrix(cut, Side::Right)?;
    let mu1 = &r1 * &model.mu;
    let a1 = &r1 * &model.a;
    let b1 = &r1 * &model.b;
    let (p, q) = (model.n_factors(), model.n_noise());

    // Orthonormal basis of span(A1 | B1) for the projection.
    let mut c = DMatrix::zeros(a1.nrows(), p + q);
    c.columns_mut(0, p).copy_from(&a1);
    c.columns_mut(p, q).copy_from(&b1);
    let qbasis = c.clone().qr().q();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6d63_636f_6e64); // distinct stream
    // Scores: h then e per draw, exactly as sample_coefficients.
    let mut scores = DMatrix::zeros(n, p + q);
    for i in 0..n {
        for j in 0..p {
            scores[(i, j)] = rng.sample::<f64, _>(StandardNormal) * model.l_diag[j].sqrt();
        }
        for j in 0..q {
            scores[(i, p + j)] =
                rng.sample::<f64, _>(StandardNormal) * model.sigma_diag[j].sqrt();
        }
    }
    // Projected left coordinates of each draw and of the query point.
    let proj = &scores * (c.transpose() * &qbasis); // n x (p+q): Q'(A1 h + B1 e) rows
    let query = qbasis.transpose() * (y1_coeffs - &mu1);

    let bw = match bandwidth {
        Some(h) if h > 0.0 => h,
        Some(h) => return Err(Error::InvalidInput(format!("bandwidth {h} must be > 0"))),
        None => {
            // Half the mean nearest-neighbour spacing on a deterministic
            // subsample; the full n x n scan would be wasteful.
            let sub = n.min(2000);
            let mut total = 0.0;
            for i in 0..sub {
                let mut best = f64::INFINITY;
                for j in 0..sub {
                    if i != j {
                        let d2 = (proj.row(i) - proj.row(j)).norm_squared();
                        if d2 < best {
                            best = d2;
                        }
                    }
                }
                total += best.sqrt();
            }
            0.5 * total / sub as f64
        }
    };

    let mut weights = DVector::zeros(n);
    for i in 0..n {
        let d2 = (proj.row(i).transpose() - &query).norm_squared();
        weights[i] = (-0.5 * d2 / (bw * bw)).exp();
    }
    let wsum = weights.sum();
    let w2sum = weights.iter().map(|w| w * w).sum::<f64>();
    let ess = if w2sum > 0.0 { wsum * wsum / w2sum } else { 0.0 };
    if ess < 100.0 {
        return Err(Error::UnreliableEstimate { ess, min: 100.0 });
    }

    // Right-segment values of each draw on the grid. The continuation target
    // is the smooth part only, so noise scores do not load.
    let basis = right_space.design_matrix(grid)?; // g x N2
    let mu2 = &r2 * &model.mu;
    let a2 = &r2 * &model.a;
    let mut c2 = DMatrix::zeros(a2.nrows(), p + q);
    c2.columns_mut(0, p).copy_from(&a2);
    let x2_values = &scores * c2.transpose() * basis.transpose(); // n x g
    let mean_curve = basis * &mu2; // g

    let g = grid.len();
    let mut mean = vec![0.0; g];
    let mut mean_se = vec![0.0; g];
    let mut variance = vec![0.0; g];
    let mut variance_se = vec![0.0; g];
    for t in 0..g {
        let mut acc = 0.0;
        for i in 0..n {
            acc += weights[i] * (mean_curve[t] + x2_values[(i, t)]);
        }
        let m1 = acc / wsum;
        let mut var_acc = 0.0;
        for i in 0..n {
            let d = mean_curve[t] + x2_values[(i, t)] - m1;
            var_acc += weights[i] * d * d;
        }
        let v = var_acc / wsum;
        mean[t] = m1;
        mean_se[t] = (v / ess).sqrt();
        variance[t] = v;
        // Relative error of a variance estimate is about sqrt(2 / ess).
        variance_se[t] = v * (2.0 / ess).sqrt();
    }

    Ok(McConditional {
        grid: grid.to_vec(),
        mean,
        mean_se,
        variance,
        variance_se,
        effective_sample_size: ess,
        bandwidth: bw,
    })
}
