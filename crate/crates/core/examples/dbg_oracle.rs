use curvecast::estimate::CurveModel;
use curvecast::linalg;
use curvecast::predict::{predict, segment, CovarianceForm};
use curvecast::spline::{Side, SplineFunction, SplineSpace};
use curvecast::synth::{discrete_blup_oracle, random_model, sample_coefficients, SyntheticSpec};
use nalgebra::DMatrix;

fn main() {
    for seed in 0..50u64 {
        let p = 1 + (seed as usize % 4);
        let q = seed as usize % 4;
        let space = SplineSpace::uniform(0.0, 1.0, 5 + (seed as usize % 5), 4).unwrap();
        let model: CurveModel = random_model(&space, p, q, 1000 + seed).unwrap();
        let s = SyntheticSpec::new(model, 0.0, seed).unwrap();
        let cut = 0.3 + 0.4 * (seed as f64 / 50.0);
        let seg = segment(&s.model, cut).unwrap();
        let draws = sample_coefficients(&s, 1);
        let full = SplineFunction::new(s.model.space.clone(), draws.row(0).transpose()).unwrap();
        let y1 = full.restrict(cut, Side::Left).unwrap();
        let via_predict = predict(&seg, &y1).unwrap().mean.coefficients;
        let via_oracle =
            discrete_blup_oracle(&s.model, cut, &y1.coefficients, CovarianceForm::Signal).unwrap();
        let dev = (via_predict - via_oracle).amax();
        if dev > 1e-9 {
            // conditioning diagnostics
            let c = {
                let mut c = DMatrix::zeros(seg.a1.nrows(), p + q);
                c.columns_mut(0, p).copy_from(&seg.a1);
                c.columns_mut(p, q).copy_from(&seg.b1);
                c
            };
            let sv = linalg::svd(&c).unwrap().sigma;
            println!(
                "seed {seed} p={p} q={q} cut={cut:.3} dev={dev:.3e} sv(C)={:?}",
                sv.as_slice().iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>()
            );
        }
    }
}
