use chrono::NaiveDate;
use curvecast::estimate::{fit_curve_set, fit_regression_spline, DimSelect, FitSettings};
use curvecast::harness::panel::ClockTime;
use curvecast::predict::{predict, predict_mean_baseline, segment};
use curvecast::spline::{SplineSpace, SplineFunction, Side};
use curvecast::synth::{model_with_leading_loadings, sample_panel, PanelLayout, SyntheticSpec};
use nalgebra::DMatrix;

fn main() {
    let horizon = 540.0;
    let space = SplineSpace::uniform(0.0, horizon, 9, 4).unwrap();
    let n = space.dim();
    let knots = space.knot_vector().knots();
    let k = space.order();
    let mut leading = DMatrix::zeros(n, 2);
    for j in 0..n {
        leading[(j, 0)] = 1.0;
        leading[(j, 1)] = knots[j + 1..j + k].iter().sum::<f64>() / (k - 1) as f64 / horizon - 0.5;
    }
    let model = model_with_leading_loadings(&space, &leading, 2, 6, 8_800, 20.0, 300.0).unwrap();
    println!("L = {:?}, Sigma = {:?}, sigma2 = {}", model.l_diag.as_slice(), model.sigma_diag.as_slice(), model.sigma2);
    let spec = SyntheticSpec::new(model.clone(), 2.0, 88).unwrap();
    let layout = PanelLayout {
        start_date: NaiveDate::from_ymd_opt(2003, 1, 6).unwrap(),
        weekdays_only: true,
        day_start: ClockTime::parse("08:00").unwrap(),
        interval_minutes: 5,
        n_intervals: 108,
    };
    let (_, panel) = sample_panel(&spec, 140, &layout).unwrap();

    let cut_t = 120.0;
    let eval_t = 240.0;
    // Take day 120 as test; train on same-weekday among previous 100.
    let test_idx = 120usize;
    let target = panel.days[test_idx].weekday();
    let train: Vec<_> = panel.days[test_idx - 100..test_idx]
        .iter()
        .filter(|d| d.weekday() == target)
        .map(|d| d.sample.clone())
        .collect();
    println!("training curves: {}", train.len());

    let day = &panel.days[test_idx].sample;
    let tail_times: Vec<f64> = day.times.iter().copied().filter(|&t| t >= eval_t).collect();
    let truth: Vec<f64> = day
        .times
        .iter()
        .zip(&day.values)
        .filter(|(t, _)| **t >= eval_t)
        .map(|(_, v)| *v)
        .collect();
    let rmse = |pred: &SplineFunction| -> f64 {
        let f = pred.eval_many(&tail_times).unwrap();
        (f.iter().zip(&truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / f.len() as f64).sqrt()
    };

    // Fitted model path.
    let settings = FitSettings { order: 4, spans: 9, dims: DimSelect::Fixed { p: 2, q: 6 } };
    let fit_space = settings.space_for((0.0, horizon), day.times.len()).unwrap();
    let (fitted, _) = fit_curve_set(&train, &fit_space, &settings.dims).unwrap();
    let seg_f = segment(&fitted, cut_t).unwrap();
    let y1_f = fit_regression_spline(&day.before(cut_t), &seg_f.left_space).unwrap();
    let blup_f = predict(&seg_f, &y1_f).unwrap();
    let base_f = predict_mean_baseline(&seg_f).unwrap();
    println!("fitted model: baseline rmse {:.2}, blup rmse {:.2}", rmse(&base_f.mean), rmse(&blup_f.mean));

    // True model path.
    let seg_t = segment(&model, cut_t).unwrap();
    let y1_t = fit_regression_spline(&day.before(cut_t), &seg_t.left_space).unwrap();
    let blup_t = predict(&seg_t, &y1_t).unwrap();
    let base_t = predict_mean_baseline(&seg_t).unwrap();
    println!("true model:   baseline rmse {:.2}, blup rmse {:.2}", rmse(&base_t.mean), rmse(&blup_t.mean));

    // True factor scores of this day for reference.
    let w = model.space.gram_matrix();
    let full_fit = fit_regression_spline(day, &space).unwrap();
    let dev = &full_fit.coefficients - &model.mu;
    let scores = model.loadings().transpose() * &w * dev;
    println!("day's fitted scores (first 2 = factors): {:?}",
        scores.iter().take(4).map(|v| format!("{v:.2}")).collect::<Vec<_>>());
    let x1_dev = &y1_t.coefficients - &seg_t.mu1;
    println!("|y1 dev| = {:.2}", x1_dev.norm());
    let gain_dev = &seg_t.x_cov_21 * (&seg_t.y_cov_11_pinv * x1_dev);
    println!("|gain*dev| = {:.2}", gain_dev.norm());
    let _ = Side::Left;
}
