//! Simultaneous confidence bands for predicted continuations.
//!
//! The construction runs in two steps: a critical value makes the band hold
//! jointly on a finite grid (one point per Lagrange node per knot span), and
//! the per-span Lagrange envelope extends it to every point in between,
//! exploiting that trajectories are polynomials within a span. A faster
//! cross-validated variant calibrates band constants against held-out curves
//! instead.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimate::{fit_curve_set, fit_regression_spline, CurveSample, FitSettings};
use crate::linalg::{sym_eig, SymMatrix};
use crate::predict::{
    run_predictor, segment, CovarianceForm, Prediction, PredictorChoice, SegmentedModel,
};
use crate::spline::{lagrange_weights, Side, SplineFunction, SplineSpace};

/// Lagrange nodes of one knot span.
#[derive(Clone, Debug)]
pub struct SpanNodes {
    pub left: f64,
    pub right: f64,
    pub nodes: Vec<f64>,
    /// Index of each node in the flattened grid.
    pub grid_idx: Vec<usize>,
}

/// The evaluation grid on the right segment: every break of the knot vector
/// plus k-2 equally spaced points inside each span, so that each span holds
/// exactly k Lagrange nodes (spans share their endpoints).
#[derive(Clone, Debug)]
pub struct BandGrid {
    pub points: Vec<f64>,
    pub spans: Vec<SpanNodes>,
    pub order: usize,
}

pub fn build_grid(right_space: &SplineSpace) -> BandGrid {
    let k = right_space.order();
    let breaks = right_space.breaks();
    let mut points: Vec<f64> = Vec::new();
    let mut spans = Vec::with_capacity(breaks.len() - 1);
    for w in breaks.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let n_nodes = k.max(2);
        let mut nodes = Vec::with_capacity(n_nodes);
        let mut grid_idx = Vec::with_capacity(n_nodes);
        for j in 0..n_nodes {
            let t = if j == n_nodes - 1 {
                hi
            } else {
                lo + (hi - lo) * j as f64 / (n_nodes - 1) as f64
            };
            let idx = if points.last().is_some_and(|&p| p == t) {
                points.len() - 1
            } else {
                points.push(t);
                points.len() - 1
            };
            nodes.push(t);
            grid_idx.push(idx);
        }
        spans.push(SpanNodes { left: lo, right: hi, nodes, grid_idx });
    }
    BandGrid { points, spans, order: k }
}

/// Pointwise conditional standard deviations on the grid.
pub fn grid_sds(grid: &BandGrid, pred: &Prediction) -> Result<Vec<f64>> {
    grid.points.iter().map(|&t| pred.sd_at(t)).collect()
}

fn grid_covariance(seg: &SegmentedModel, grid: &BandGrid) -> Result<DMatrix<f64>> {
    let basis = seg.right_space.design_matrix(&grid.points)?;
    let cov = seg.conditional_covariance(CovarianceForm::Signal);
    let m = &basis * cov * basis.transpose();
    Ok(0.5 * (&m + m.transpose()))
}

/// Low-rank factor of a PSD grid covariance together with pointwise sds.
/// Points with (numerically) zero variance get an empty row; callers exclude
/// them from standardized maxima.
fn standardized_factor(cov: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<bool>)> {
    let g = cov.nrows();
    let eig = sym_eig(&SymMatrix::symmetrized(cov.clone())?);
    let lmax = eig.values[0].max(0.0);
    let cut = lmax * 1e-12;
    let r = eig.values.iter().filter(|&&l| l > cut).count();
    let mut factor = DMatrix::zeros(g, r);
    for j in 0..r {
        factor.set_column(j, &(eig.vectors.column(j) * eig.values[j].sqrt()));
    }
    let sd_floor = lmax.sqrt() * 1e-9;
    let mut live = vec![false; g];
    for (a, flag) in live.iter_mut().enumerate() {
        let sd = factor.row(a).norm();
        if sd > sd_floor {
            *flag = true;
            let inv = 1.0 / sd;
            for j in 0..r {
                factor[(a, j)] *= inv;
            }
        } else {
            log::debug!("grid point {a} has zero conditional variance; excluded");
        }
    }
    Ok((factor, live))
}

fn empirical_upper_quantile(sorted: &[f64], delta: f64) -> f64 {
    let n = sorted.len();
    let k = ((1.0 - delta) * n as f64).ceil() as usize;
    sorted[k.clamp(1, n) - 1]
}

/// Monte Carlo critical value: the (1-delta) quantile of the maximum of the
/// standardized |Gaussian| over the grid points, for an arbitrary PSD grid
/// covariance. Deterministic for a fixed seed.
pub fn mc_critical_value(
    cov: &DMatrix<f64>,
    delta: f64,
    n_sims: usize,
    seed: u64,
) -> Result<f64> {
    if !(0.0..1.0).contains(&delta) || delta <= 0.0 {
        return Err(Error::InvalidInput(format!("delta {delta} not in (0,1)")));
    }
    if n_sims == 0 {
        return Err(Error::InvalidInput("need at least one simulation".into()));
    }
    let (factor, live) = standardized_factor(cov)?;
    if !live.iter().any(|&l| l) {
        return Ok(0.0);
    }
    let r = factor.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut maxima = Vec::with_capacity(n_sims);
    let mut z = DVector::zeros(r);
    for _ in 0..n_sims {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let vals = &factor * &z;
        let m = vals
            .iter()
            .zip(&live)
            .filter(|(_, &l)| l)
            .map(|(v, _)| v.abs())
            .fold(0.0f64, f64::max);
        maxima.push(m);
    }
    maxima.sort_by(f64::total_cmp);
    Ok(empirical_upper_quantile(&maxima, delta))
}

/// Critical value making the band hold simultaneously over the whole grid.
pub fn critical_value_global(
    seg: &SegmentedModel,
    grid: &BandGrid,
    delta: f64,
    n_sims: usize,
    seed: u64,
) -> Result<f64> {
    let cov = grid_covariance(seg, grid)?;
    mc_critical_value(&cov, delta, n_sims, seed)
}

/// Per-span critical values, maximized over spans so the local band stays
/// continuous across breaks. Uses the same draws as the global value for a
/// given seed.
pub fn critical_value_local(
    seg: &SegmentedModel,
    grid: &BandGrid,
    delta: f64,
    n_sims: usize,
    seed: u64,
) -> Result<f64> {
    if !(0.0..1.0).contains(&delta) || delta <= 0.0 {
        return Err(Error::InvalidInput(format!("delta {delta} not in (0,1)")));
    }
    if n_sims == 0 {
        return Err(Error::InvalidInput("need at least one simulation".into()));
    }
    let cov = grid_covariance(seg, grid)?;
    let (factor, live) = standardized_factor(&cov)?;
    if !live.iter().any(|&l| l) {
        return Ok(0.0);
    }
    let r = factor.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut span_maxima: Vec<Vec<f64>> = vec![Vec::with_capacity(n_sims); grid.spans.len()];
    let mut z = DVector::zeros(r);
    for _ in 0..n_sims {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let vals = &factor * &z;
        for (s, span) in grid.spans.iter().enumerate() {
            let m = span
                .grid_idx
                .iter()
                .filter(|&&i| live[i])
                .map(|&i| vals[i].abs())
                .fold(0.0f64, f64::max);
            span_maxima[s].push(m);
        }
    }
    let mut worst = 0.0f64;
    for (s, mut maxima) in span_maxima.into_iter().enumerate() {
        if grid.spans[s].grid_idx.iter().all(|&i| !live[i]) {
            continue;
        }
        maxima.sort_by(f64::total_cmp);
        worst = worst.max(empirical_upper_quantile(&maxima, delta));
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BandKind {
    Global,
    Local,
    CvGlobal,
    CvLocal,
}

#[derive(Clone, Debug)]
enum BandForm {
    /// Per-span Lagrange envelope over node standard deviations.
    Lagrange { spans: Vec<SpanNodes>, node_sds: Vec<Vec<f64>> },
    /// Smooth width function (cross-validated bands) with a positive floor:
    /// near-degenerate directions would otherwise put zeros in calibration
    /// denominators.
    SplineWidth { d_hat: SplineFunction, floor: f64 },
}

/// A confidence band around a predicted continuation, evaluable anywhere on
/// the right segment. Upper and lower bounds are continuous; at interior
/// breaks both adjoining spans give the same value because they share the
/// break as a Lagrange node.
#[derive(Clone, Debug)]
pub struct Band {
    pub kind: BandKind,
    pub level: f64,
    pub critical_value: f64,
    mean: SplineFunction,
    form: BandForm,
}

impl Band {
    /// Half-width at `t` (critical value already applied).
    pub fn half_width_at(&self, t: f64) -> Result<f64> {
        match &self.form {
            BandForm::Lagrange { spans, node_sds } => {
                let idx = spans
                    .iter()
                    .position(|s| s.left <= t && t <= s.right)
                    .ok_or_else(|| {
                        let lo = spans.first().map_or(0.0, |s| s.left);
                        let hi = spans.last().map_or(0.0, |s| s.right);
                        Error::OutsideDomain { point: t, start: lo, end: hi }
                    })?;
                let span = &spans[idx];
                let ell = lagrange_weights(&span.nodes, t)?;
                let d: f64 = ell
                    .iter()
                    .zip(&node_sds[idx])
                    .map(|(l, sd)| l.abs() * sd)
                    .sum();
                Ok(self.critical_value * d)
            }
            BandForm::SplineWidth { d_hat, floor } => {
                Ok(self.critical_value * d_hat.eval(t)?.max(*floor))
            }
        }
    }

    pub fn bounds_at(&self, t: f64) -> Result<(f64, f64)> {
        let m = self.mean.eval(t)?;
        let h = self.half_width_at(t)?;
        Ok((m - h, m + h))
    }

    pub fn lower(&self, t: f64) -> Result<f64> {
        Ok(self.bounds_at(t)?.0)
    }

    pub fn upper(&self, t: f64) -> Result<f64> {
        Ok(self.bounds_at(t)?.1)
    }
}

/// Wrap a prediction in the Lagrange envelope band `mean +- z * D(t)`, where
/// per span `D(t) = sum_j |ell_j(t)| sd(t_ij)`.
pub fn envelope(
    grid: &BandGrid,
    pred: &Prediction,
    z: f64,
    kind: BandKind,
    level: f64,
) -> Result<Band> {
    if z < 0.0 {
        return Err(Error::InvalidInput(format!("critical value {z} must be >= 0")));
    }
    let sds = grid_sds(grid, pred)?;
    let node_sds = grid
        .spans
        .iter()
        .map(|s| s.grid_idx.iter().map(|&i| sds[i]).collect())
        .collect();
    Ok(Band {
        kind,
        level,
        critical_value: z,
        mean: pred.mean.clone(),
        form: BandForm::Lagrange { spans: grid.spans.clone(), node_sds },
    })
}

/// Cross-validated band constants plus the smooth width function fitted on
/// the full data.
#[derive(Clone, Debug)]
pub struct CvBands {
    pub c_global: f64,
    pub c_local: f64,
    pub d_hat: SplineFunction,
    /// Lower clamp applied to the width function, shared by calibration and
    /// band evaluation.
    pub width_floor: f64,
    pub grid: BandGrid,
    pub per_fold_global: Vec<f64>,
    pub per_fold_local: Vec<f64>,
}

impl CvBands {
    pub fn band(&self, pred: &Prediction, kind: BandKind, level: f64) -> Result<Band> {
        let c = match kind {
            BandKind::CvGlobal => self.c_global,
            BandKind::CvLocal => self.c_local,
            _ => {
                return Err(Error::InvalidInput(
                    "cross-validated bands only produce cv kinds".into(),
                ))
            }
        };
        Ok(Band {
            kind,
            level,
            critical_value: c,
            mean: pred.mean.clone(),
            form: BandForm::SplineWidth { d_hat: self.d_hat.clone(), floor: self.width_floor },
        })
    }
}

/// Width floor: a small fraction of the largest grid sd. A rank-deficient
/// conditional law can have zero sd at isolated points; unclamped, those
/// would turn calibration ratios infinite.
fn width_floor_of(sds: &[f64]) -> f64 {
    1e-3 * sds.iter().copied().fold(0.0f64, f64::max)
}

/// The conditional variance is identically zero whenever the latent
/// dimension p + q does not exceed the left-segment dimension: a noiseless
/// functional observation then pins down every score. Widths calibrated
/// against numerically-zero sds would be meaningless, so fail loudly.
fn check_width_scale(sds: &[f64], seg: &SegmentedModel) -> Result<()> {
    let max_sd = sds.iter().copied().fold(0.0f64, f64::max);
    let marginal = (0..seg.x_cov_22.nrows())
        .map(|i| seg.x_cov_22[(i, i)].max(0.0).sqrt())
        .fold(0.0f64, f64::max);
    if max_sd <= 1e-6 * marginal.max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateModel(format!(
            "conditional variance vanishes on the grid (p + q = {} <= left dimension {}); \
             increase the noise dimension q",
            seg.full.n_factors() + seg.full.n_noise(),
            seg.left_space.dim()
        )));
    }
    Ok(())
}

/// Smooth width function: a regression spline over the grid of pointwise
/// conditional sds, in the same order and knot sequence as the right space.
fn fit_width_spline(
    right_space: &SplineSpace,
    grid: &BandGrid,
    sds: &[f64],
) -> Result<SplineFunction> {
    let sample = CurveSample::new(grid.points.clone(), sds.to_vec(), "width")?;
    fit_regression_spline(&sample, right_space)
}

fn median(sorted: &mut [f64]) -> f64 {
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Calibrate band constants by K-fold cross-validation: per fold, fit the
/// model on the other folds, predict each held-out curve from its own
/// beginning, and find the smallest band multiple covering a 1-delta
/// fraction — everywhere on the grid for the global constant, pointwise for
/// the local one. The reported constants are the medians across folds.
pub fn cv_bands(
    curves: &[CurveSample],
    settings: &FitSettings,
    choice: PredictorChoice,
    cut: f64,
    delta: f64,
    k_folds: usize,
) -> Result<CvBands> {
    if k_folds < 2 {
        return Err(Error::InvalidInput("need at least two folds".into()));
    }
    if curves.len() < k_folds {
        return Err(Error::InvalidInput(format!(
            "{} curves cannot fill {k_folds} folds",
            curves.len()
        )));
    }
    if !(0.0..1.0).contains(&delta) || delta <= 0.0 {
        return Err(Error::InvalidInput(format!("delta {delta} not in (0,1)")));
    }
    let n_points = curves[0].times.len();
    let domain = (0.0, *curves[0].times.last().unwrap());
    let space = settings.space_for(domain, n_points)?;

    let mut per_fold_global = Vec::with_capacity(k_folds);
    let mut per_fold_local = Vec::with_capacity(k_folds);
    for fold in 0..k_folds {
        let held: Vec<&CurveSample> =
            curves.iter().enumerate().filter(|(i, _)| i % k_folds == fold).map(|(_, c)| c).collect();
        let train: Vec<CurveSample> = curves
            .iter()
            .enumerate()
            .filter(|(i, _)| i % k_folds != fold)
            .map(|(_, c)| c.clone())
            .collect();
        if held.is_empty() || train.len() < 2 {
            return Err(Error::InfeasibleFold { fold, size: held.len(), level: 1.0 - delta });
        }
        let (model, _) = fit_curve_set(&train, &space, &settings.dims)?;
        let seg = segment(&model, cut)?;
        let grid = build_grid(&seg.right_space);
        let mu1_fn = SplineFunction::new(seg.left_space.clone(), seg.mu1.clone())?;
        let width_pred = run_predictor(&seg, &mu1_fn, choice)?;
        let sds = grid_sds(&grid, &width_pred)?;
        check_width_scale(&sds, &seg)?;
        let d_hat = fit_width_spline(&seg.right_space, &grid, &sds)?;
        let floor = width_floor_of(&sds);
        let d_vals: Vec<f64> = grid
            .points
            .iter()
            .map(|&t| d_hat.eval(t).map(|v| v.max(floor)))
            .collect::<Result<_>>()?;

        // Per held-out curve: worst standardized residual over the grid.
        let mut per_curve_max = Vec::with_capacity(held.len());
        let mut per_point: Vec<Vec<f64>> = vec![Vec::with_capacity(held.len()); grid.points.len()];
        for curve in &held {
            let full_fit = fit_regression_spline(curve, &space)?;
            let observed = full_fit.restrict(cut, Side::Right)?;
            let y1 = fit_regression_spline(&curve.before(cut), &seg.left_space)?;
            let pred = run_predictor(&seg, &y1, choice)?;
            let mut worst = 0.0f64;
            for (i, &t) in grid.points.iter().enumerate() {
                let resid = (observed.eval(t)? - pred.mean.eval(t)?).abs();
                let ratio = resid / d_vals[i];
                per_point[i].push(ratio);
                worst = worst.max(ratio);
            }
            per_curve_max.push(worst);
        }
        let n_held = per_curve_max.len();
        let rank = (((1.0 - delta) * n_held as f64).floor() as usize + 1).min(n_held);
        per_curve_max.sort_by(f64::total_cmp);
        per_fold_global.push(per_curve_max[rank - 1]);
        let mut local_c = 0.0f64;
        for ratios in per_point.iter_mut() {
            ratios.sort_by(f64::total_cmp);
            local_c = local_c.max(ratios[rank - 1]);
        }
        per_fold_local.push(local_c);
    }

    // Width function from the full data.
    let (model, _) = fit_curve_set(curves, &space, &settings.dims)?;
    let seg = segment(&model, cut)?;
    let grid = build_grid(&seg.right_space);
    let mu1_fn = SplineFunction::new(seg.left_space.clone(), seg.mu1.clone())?;
    let width_pred = run_predictor(&seg, &mu1_fn, choice)?;
    let sds = grid_sds(&grid, &width_pred)?;
    check_width_scale(&sds, &seg)?;
    let d_hat = fit_width_spline(&seg.right_space, &grid, &sds)?;
    let width_floor = width_floor_of(&sds);

    let c_global = median(&mut per_fold_global.clone());
    let c_local = median(&mut per_fold_local.clone());
    Ok(CvBands {
        c_global,
        c_local,
        d_hat,
        width_floor,
        grid,
        per_fold_global,
        per_fold_local,
    })
}

fn phi_bar(normal: &Normal, a: f64) -> f64 {
    1.0 - normal.cdf(a)
}

/// P(Z1 > a, Z2 > a) for standard bivariate normal with correlation rho,
/// by one-dimensional quadrature over the conditional tail.
fn bivariate_orthant(normal: &Normal, a: f64, rho: f64) -> f64 {
    if rho >= 1.0 - 1e-12 {
        return phi_bar(normal, a);
    }
    if rho <= -1.0 + 1e-12 {
        // Z2 = -Z1: both exceed a only if a < 0.
        return if a < 0.0 { 1.0 - 2.0 * normal.cdf(-a.abs()) } else { 0.0 };
    }
    let denom = (1.0 - rho * rho).sqrt();
    let f = |x: f64| normal.pdf(x) * phi_bar(normal, (a - rho * x) / denom);
    crate::quad::integrate(f, a, a + 12.0, 16, 48)
}

/// P(|Z1| <= a, |Z2| > a) for consecutive grid points with correlation rho.
fn pair_term(normal: &Normal, a: f64, rho: f64) -> f64 {
    let both = 2.0 * (bivariate_orthant(normal, a, rho) + bivariate_orthant(normal, a, -rho));
    (2.0 * phi_bar(normal, a) - both).max(0.0)
}

/// Deterministic upper bound on the critical value from the telescoping
/// inequality over consecutive grid points: the smallest `a` with
/// `P(|Z(t_1)|>a) + sum_pairs P(|Z(t_j)|<=a, |Z(t_j+1)|>a) <= delta`,
/// found by bisection to 1e-6.
pub fn inequality_bound(delta: f64, consecutive_correlations: &[f64]) -> Result<f64> {
    if !(0.0..1.0).contains(&delta) || delta <= 0.0 {
        return Err(Error::InvalidInput(format!("delta {delta} not in (0,1)")));
    }
    if consecutive_correlations.iter().any(|r| !(-1.0..=1.0).contains(r)) {
        return Err(Error::InvalidInput("correlations must lie in [-1, 1]".into()));
    }
    let normal = Normal::standard();
    let rhs = |a: f64| -> f64 {
        let mut total = 2.0 * phi_bar(&normal, a);
        for &rho in consecutive_correlations {
            total += pair_term(&normal, a, rho);
        }
        total
    };
    let mut lo = 0.0f64;
    let mut hi = 10.0f64;
    if rhs(hi) > delta {
        return Err(Error::InvalidInput("bound does not reach delta by a = 10".into()));
    }
    while hi - lo > 1e-6 {
        let mid = 0.5 * (lo + hi);
        if rhs(mid) <= delta {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
