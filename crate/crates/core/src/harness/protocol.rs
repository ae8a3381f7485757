//! The evaluation protocol: per test day, train on a trailing window, fit the
//! day's beginning, predict the rest, and score against the realized counts.

use rayon::prelude::*;

use crate::bands::{cv_bands, BandKind};
use crate::error::{Error, Result};
use crate::estimate::{fit_curve_set, fit_regression_spline, CurveSample, DimSelect, FitSettings};
use crate::predict::{run_predictor, segment, PredictorChoice};
use crate::spline::{SplineFunction, SplineSpace};

use super::panel::{ClockTime, CurvePanel};
use super::report::{DayOutcome, EvalReport, PlotRow};

/// Which past days train a test day's model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingMode {
    /// Days with the same weekday label inside the trailing window.
    SameWeekday,
    /// Every day inside the trailing window.
    RollingAll,
}

/// Dimension selection for the protocol.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DimSpec {
    Fixed { p: usize, q: usize },
    Threshold { threshold: f64 },
    /// Pick (p, q) once by K-fold cross-validated prediction error on the
    /// first test day's training window.
    CrossValidate { folds: usize, p_max: usize, q_max: usize },
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct BandConfig {
    pub delta: f64,
    pub folds: usize,
}

impl Default for BandConfig {
    fn default() -> Self {
        BandConfig { delta: 0.05, folds: 10 }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ProtocolConfig {
    pub training_mode: TrainingMode,
    /// Trailing window length in panel days.
    pub window_days: usize,
    pub cut_time: ClockTime,
    /// Metrics are computed from this clock time on (>= cut_time).
    pub eval_start: ClockTime,
    pub order: usize,
    /// Spline spans over the day; 0 = one per four observation intervals.
    pub spans: usize,
    pub dims: DimSpec,
    pub method: MethodSpec,
    /// Ridge noise variance override (method = ridge).
    pub ridge_sigma2: Option<f64>,
    pub bands: Option<BandConfig>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodSpec {
    Blup,
    Ridge,
    MeanBaseline,
}

impl ProtocolConfig {
    pub fn predictor_choice(&self) -> PredictorChoice {
        match self.method {
            MethodSpec::Blup => PredictorChoice::Blup,
            MethodSpec::Ridge => PredictorChoice::Ridge(self.ridge_sigma2),
            MethodSpec::MeanBaseline => PredictorChoice::MeanBaseline,
        }
    }

    fn validate(&self, panel: &CurvePanel) -> Result<(f64, f64)> {
        if self.window_days < 2 {
            return Err(Error::InvalidInput("window must cover at least two days".into()));
        }
        if self.eval_start < self.cut_time {
            return Err(Error::InvalidInput("eval_start must not precede the cut".into()));
        }
        let cut_t = panel.time_of(self.cut_time);
        let eval_t = panel.time_of(self.eval_start);
        let (a, b) = panel.domain();
        if cut_t <= a || cut_t >= b {
            return Err(Error::OutsideDomain { point: cut_t, start: a, end: b });
        }
        Ok((cut_t, eval_t))
    }
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            training_mode: TrainingMode::SameWeekday,
            window_days: 100,
            cut_time: ClockTime::parse("12:00").unwrap(),
            eval_start: ClockTime::parse("12:00").unwrap(),
            order: 4,
            spans: 0,
            dims: DimSpec::Threshold { threshold: 0.90 },
            method: MethodSpec::Blup,
            ridge_sigma2: None,
            bands: Some(BandConfig::default()),
            seed: 17,
        }
    }
}

/// Coverage fraction and mean width of a band against the truth, evaluated
/// on a shared interval grid. Coverage counts strict containment.
pub fn cover_width(lower: &[f64], upper: &[f64], truth: &[f64]) -> (f64, f64) {
    assert_eq!(lower.len(), truth.len());
    assert_eq!(upper.len(), truth.len());
    if truth.is_empty() {
        return (0.0, 0.0);
    }
    let n = truth.len() as f64;
    let covered = truth
        .iter()
        .zip(lower.iter().zip(upper))
        .filter(|&(t, (lo, up))| lo < t && t < up)
        .count() as f64;
    let width: f64 = lower.iter().zip(upper).map(|(lo, up)| up - lo).sum();
    (covered / n, width / n)
}

/// Fit the day's beginning in the left space, coarsening the knot layout when
/// the pre-cut sample cannot pin down the full dimension, then re-expressing
/// the coarse fit on the original knots by insertion.
pub fn fit_left(sample: &CurveSample, left_space: &SplineSpace) -> Result<SplineFunction> {
    match fit_regression_spline(sample, left_space) {
        Ok(f) => Ok(f),
        Err(Error::UnderdeterminedFit { .. }) => {
            let breaks = left_space.breaks();
            let interior: Vec<f64> = breaks[1..breaks.len() - 1].to_vec();
            let mut keep = interior.clone();
            loop {
                if keep.is_empty() {
                    return Err(Error::UnderdeterminedFit {
                        rank: sample.times.len(),
                        unknowns: left_space.order(),
                    });
                }
                // Halve the interior breaks until the fit is determined.
                keep = keep.iter().copied().step_by(2).collect();
                let k = left_space.order();
                let (a, b) = left_space.domain();
                let mut knots = vec![a; k];
                knots.extend(keep.iter().copied());
                knots.extend(std::iter::repeat_n(b, k));
                let coarse = SplineSpace::new(crate::spline::KnotVector::new(knots, k)?);
                match fit_regression_spline(sample, &coarse) {
                    Ok(f) => {
                        log::warn!(
                            "pre-cut sample of {} points underdetermines N1={}; coarsened to {}",
                            sample.times.len(),
                            left_space.dim(),
                            coarse.dim()
                        );
                        let missing: Vec<f64> = interior
                            .iter()
                            .copied()
                            .filter(|u| !keep.contains(u))
                            .collect();
                        let refined = f.insert_knots(&missing)?;
                        if refined.space != *left_space {
                            return Err(Error::InvalidInput(
                                "coarsened fit does not refine back onto the left space".into(),
                            ));
                        }
                        return Ok(refined);
                    }
                    Err(Error::UnderdeterminedFit { .. }) => continue,
                    Err(e) => return Err(e),
                }
            }
        }
        Err(e) => Err(e),
    }
}

fn training_set(panel: &CurvePanel, day_idx: usize, config: &ProtocolConfig) -> Vec<CurveSample> {
    let lo = day_idx.saturating_sub(config.window_days);
    let window = &panel.days[lo..day_idx];
    match config.training_mode {
        TrainingMode::RollingAll => window.iter().map(|d| d.sample.clone()).collect(),
        TrainingMode::SameWeekday => {
            let target = panel.days[day_idx].weekday();
            window
                .iter()
                .filter(|d| d.weekday() == target)
                .map(|d| d.sample.clone())
                .collect()
        }
    }
}

/// Cross-validated choice of (p, q): minimize squared prediction error of
/// held-out curve continuations over a candidate grid.
pub fn select_dimensions_cv(
    curves: &[CurveSample],
    order: usize,
    spans: usize,
    cut_t: f64,
    eval_t: f64,
    choice: PredictorChoice,
    folds: usize,
    p_max: usize,
    q_max: usize,
) -> Result<(usize, usize)> {
    if curves.len() < folds || folds < 2 {
        return Err(Error::InvalidInput(format!(
            "{} curves cannot fill {folds} folds",
            curves.len()
        )));
    }
    let n_points = curves[0].times.len();
    let domain = (0.0, *curves[0].times.last().unwrap());
    let settings = FitSettings { order, spans, dims: DimSelect::Fixed { p: 1, q: 0 } };
    let space = settings.space_for(domain, n_points)?;
    let n = space.dim();

    let mut best = (1usize, 0usize);
    let mut best_score = f64::INFINITY;
    for p in 1..=p_max {
        for q in 0..=q_max {
            let mut score = 0.0;
            let mut count = 0usize;
            let mut feasible = true;
            for fold in 0..folds {
                let train: Vec<CurveSample> = curves
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| i % folds != fold)
                    .map(|(_, c)| c.clone())
                    .collect();
                if p + q > (train.len() - 1).min(n) {
                    feasible = false;
                    break;
                }
                let (model, _) =
                    fit_curve_set(&train, &space, &DimSelect::Fixed { p, q })?;
                if model.n_factors() != p || model.n_noise() != q {
                    feasible = false;
                    break;
                }
                let seg = segment(&model, cut_t)?;
                for (i, curve) in curves.iter().enumerate() {
                    if i % folds != fold {
                        continue;
                    }
                    let y1 = fit_left(&curve.before(cut_t), &seg.left_space)?;
                    let pred = run_predictor(&seg, &y1, choice)?;
                    let tail = curve.from_time(eval_t);
                    for (&t, &truth) in tail.times.iter().zip(&tail.values) {
                        let err = pred.mean.eval(t)? - truth;
                        score += err * err;
                        count += 1;
                    }
                }
            }
            if feasible && count > 0 {
                let score = score / count as f64;
                if score < best_score {
                    best_score = score;
                    best = (p, q);
                }
            }
        }
    }
    if !best_score.is_finite() {
        return Err(Error::DegenerateModel("no feasible (p, q) candidate".into()));
    }
    log::info!("cross-validation selected p={}, q={} (mse {best_score:.4})", best.0, best.1);
    Ok(best)
}

struct DayComputation {
    outcome: DayOutcome,
}

fn evaluate_day(
    panel: &CurvePanel,
    day_idx: usize,
    config: &ProtocolConfig,
    dims: &DimSelect,
    cut_t: f64,
    eval_t: f64,
) -> Result<Option<DayComputation>> {
    let day = &panel.days[day_idx];
    let train = training_set(panel, day_idx, config);
    if train.len() < 2 {
        log::warn!("skipping {}: only {} training curves", day.date, train.len());
        return Ok(None);
    }
    let n_points = day.sample.times.len();
    let settings = FitSettings { order: config.order, spans: config.spans, dims: dims.clone() };
    let space = settings.space_for(panel.domain(), n_points)?;
    let (model, _) = fit_curve_set(&train, &space, dims)?;
    let seg = segment(&model, cut_t)?;
    let choice = config.predictor_choice();

    let y1 = fit_left(&day.sample.before(cut_t), &seg.left_space)?;
    let pred = run_predictor(&seg, &y1, choice)?;

    let tail = day.sample.from_time(eval_t);
    if tail.times.is_empty() {
        log::warn!("skipping {}: no observations after the evaluation start", day.date);
        return Ok(None);
    }
    let forecast = pred.mean.eval_many(&tail.times)?;

    let k = tail.times.len() as f64;
    let rmse = (tail
        .values
        .iter()
        .zip(&forecast)
        .map(|(t, f)| (t - f) * (t - f))
        .sum::<f64>()
        / k)
        .sqrt();
    let ape = if tail.values.iter().any(|&v| v <= 0.0) {
        None
    } else {
        Some(
            100.0 / k
                * tail
                    .values
                    .iter()
                    .zip(&forecast)
                    .map(|(t, f)| (t - f).abs() / t)
                    .sum::<f64>(),
        )
    };

    let mut cover = None;
    let mut width = None;
    let mut lower_vals: Option<Vec<f64>> = None;
    let mut upper_vals: Option<Vec<f64>> = None;
    if let Some(bc) = &config.bands {
        let cvb = cv_bands(&train, &settings, choice, cut_t, bc.delta, bc.folds)?;
        let band = cvb.band(&pred, BandKind::CvLocal, 1.0 - bc.delta)?;
        let mut lo = Vec::with_capacity(tail.times.len());
        let mut up = Vec::with_capacity(tail.times.len());
        for &t in &tail.times {
            let (l, u) = band.bounds_at(t)?;
            lo.push(l);
            up.push(u);
        }
        let (c, w) = cover_width(&lo, &up, &tail.values);
        cover = Some(c);
        width = Some(w);
        lower_vals = Some(lo);
        upper_vals = Some(up);
    }

    let detail: Vec<PlotRow> = tail
        .times
        .iter()
        .enumerate()
        .map(|(i, &t)| PlotRow {
            clock: panel.clock_of(t),
            truth: tail.values[i],
            forecast: forecast[i],
            lower: lower_vals.as_ref().map(|v| v[i]),
            upper: upper_vals.as_ref().map(|v| v[i]),
        })
        .collect();

    Ok(Some(DayComputation {
        outcome: DayOutcome {
            date: day.date,
            weekday: day.weekday().to_string(),
            rmse,
            ape,
            cover,
            width,
            detail,
        },
    }))
}

/// Run the full protocol over every day with a complete trailing window.
/// Deterministic: day results are computed independently and merged in day
/// order.
pub fn run_protocol(panel: &CurvePanel, config: &ProtocolConfig) -> Result<EvalReport> {
    let (cut_t, eval_t) = config.validate(panel)?;
    if panel.days.len() <= config.window_days {
        return Err(Error::NoData);
    }
    let first_test = config.window_days;

    let dims: DimSelect = match config.dims {
        DimSpec::Fixed { p, q } => DimSelect::Fixed { p, q },
        DimSpec::Threshold { threshold } => DimSelect::Threshold(threshold),
        DimSpec::CrossValidate { folds, p_max, q_max } => {
            let train = training_set(panel, first_test, config);
            let (p, q) = select_dimensions_cv(
                &train,
                config.order,
                config.spans,
                cut_t,
                eval_t,
                config.predictor_choice(),
                folds,
                p_max,
                q_max,
            )?;
            DimSelect::Fixed { p, q }
        }
    };

    let results: Vec<Result<Option<DayComputation>>> = (first_test..panel.days.len())
        .into_par_iter()
        .map(|i| evaluate_day(panel, i, config, &dims, cut_t, eval_t))
        .collect();

    let mut days = Vec::new();
    for r in results {
        if let Some(c) = r? {
            days.push(c.outcome);
        }
    }
    if days.is_empty() {
        return Err(Error::NoData);
    }
    Ok(EvalReport { days })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::panel::PanelDay;
    use chrono::NaiveDate;

    fn tiny_panel(values_per_day: Vec<Vec<f64>>) -> CurvePanel {
        let times: Vec<f64> = (1..=values_per_day[0].len()).map(|j| 10.0 * j as f64).collect();
        let start = NaiveDate::from_ymd_opt(2003, 3, 3).unwrap();
        let days = values_per_day
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                let date = start.checked_add_days(chrono::Days::new(i as u64)).unwrap();
                PanelDay {
                    date,
                    sample: CurveSample::new(times.clone(), v, date.to_string()).unwrap(),
                }
            })
            .collect();
        let end = ClockTime(7 * 60 + times.len() as u32 * 10);
        CurvePanel::new(days, 10, (ClockTime(7 * 60), end)).unwrap()
    }

    #[test]
    fn cover_width_basics() {
        let truth = [1.0, 2.0, 3.0];
        let lower = [0.0, 1.0, 2.0];
        let upper = [2.0, 3.0, 4.0];
        let (c, w) = cover_width(&lower, &upper, &truth);
        assert_eq!(c, 1.0);
        assert!((w - 2.0).abs() < 1e-12);

        // Degenerate band off the truth covers nothing.
        let (c, w) = cover_width(&truth, &truth, &[5.0, 5.0, 5.0]);
        assert_eq!(c, 0.0);
        assert_eq!(w, 0.0);
    }

    #[test]
    fn metrics_arithmetic() {
        // truth (1,2), forecast (2,4): rmse = sqrt(2.5), ape = 100.
        let truth = [1.0f64, 2.0];
        let forecast = [2.0f64, 4.0];
        let k = truth.len() as f64;
        let rmse = (truth
            .iter()
            .zip(&forecast)
            .map(|(t, f)| (t - f) * (t - f))
            .sum::<f64>()
            / k)
            .sqrt();
        let ape =
            100.0 / k * truth.iter().zip(&forecast).map(|(t, f)| (t - f).abs() / t).sum::<f64>();
        assert!((rmse - 2.5f64.sqrt()).abs() < 1e-12);
        assert!((ape - 100.0).abs() < 1e-12);
    }

    #[test]
    fn fit_left_coarsens_when_short() {
        // Left space with more dimensions than pre-cut points.
        let space = SplineSpace::uniform(0.0, 100.0, 8, 4).unwrap();
        let left = space.restricted(50.0, crate::spline::Side::Left).unwrap();
        assert!(left.dim() > 5);
        let times: Vec<f64> = (1..=5).map(|j| 10.0 * j as f64).collect();
        let values: Vec<f64> = times.iter().map(|t| 1.0 + 0.01 * t).collect();
        let sample = CurveSample::new(times, values, "d").unwrap();
        let fitted = fit_left(&sample, &left).unwrap();
        assert_eq!(fitted.space, left);
        // The linear trend is reproduced.
        for &t in &[5.0, 25.0, 45.0] {
            assert!((fitted.eval(t).unwrap() - (1.0 + 0.01 * t)).abs() < 1e-6);
        }
    }

    #[test]
    fn training_set_modes() {
        let m = 16;
        let panel = tiny_panel((0..m).map(|i| vec![i as f64 + 1.0; 8]).collect());
        let config = ProtocolConfig {
            window_days: 14,
            training_mode: TrainingMode::SameWeekday,
            ..ProtocolConfig::default()
        };
        let train = training_set(&panel, 14, &config);
        assert_eq!(train.len(), 2, "two same-weekday days inside 14");
        let config = ProtocolConfig {
            window_days: 14,
            training_mode: TrainingMode::RollingAll,
            ..ProtocolConfig::default()
        };
        let train = training_set(&panel, 14, &config);
        assert_eq!(train.len(), 14);
    }
}
