mod common;

use common::{county, exact_wls, random_system, rng};
use geomort::covariates::*;
use geomort::Error;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::RngExt;
use rand_distr::{Distribution, Normal};
use statrs::function::beta::beta_reg;

#[test]
fn wls_matches_exact_normal_equations() {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let d = random_system(seed);
        let fit = fit_wls(&d).unwrap();
        let oracle = exact_wls(&d.x, &d.weights, &d.response);
        let scale = oracle.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (b, o) in fit.beta().iter().zip(&oracle) {
            worst = worst.max((b - o).abs() / o.abs().max(1e-3 * scale));
        }
    }
    assert!(worst < 1e-8, "worst relative error {worst:e}");
}

#[test]
fn exact_fit_has_unit_r2() {
    for seed in 0..20 {
        let d = random_system(1000 + seed);
        let y = d.x.dot(&Array1::from_iter((0..d.ncols()).map(|j| 0.5 + j as f64)));
        let fit = fit_wls(&d.with_response(y).unwrap()).unwrap();
        if d.ncols() > 1 {
            assert!((fit.stats.r2 - 1.0).abs() < 1e-12, "r2 = {}", fit.stats.r2);
        }
        assert!(fit.stats.ssr < 1e-12);
    }
}

#[test]
fn simple_regression_inference() {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let y = [1.1, 1.9, 3.2, 3.9, 5.1, 5.8];
    let mut m = Array2::<f64>::ones((6, 2));
    for i in 0..6 {
        m[[i, 1]] = x[i];
    }
    let d = DesignMatrix::new(vec![CONSTANT.into(), "x".into()], m, Array1::ones(6), Array1::from(y.to_vec())).unwrap();
    let fit = fit_wls(&d).unwrap();
    let xm = x.iter().sum::<f64>() / 6.0;
    let ym = y.iter().sum::<f64>() / 6.0;
    let sxx: f64 = x.iter().map(|v| (v - xm).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - xm) * (b - ym)).sum();
    let slope = sxy / sxx;
    let sse: f64 = x.iter().zip(&y).map(|(a, b)| (b - ym - slope * (a - xm)).powi(2)).sum();
    let se = (sse / 4.0 / sxx).sqrt();
    let c = fit.coefficient("x").unwrap();
    assert!((c.estimate - slope).abs() < 1e-12);
    assert!((c.std_err - se).abs() < 1e-12);
    let p = beta_reg(2.0, 0.5, 4.0 / (4.0 + (slope / se).powi(2)));
    assert!((c.p - p).abs() <= 1e-6 * p.max(1e-300));
    let t975 = 2.776_445_105_197_793;
    assert!((c.ci_low - (slope - t975 * se)).abs() < 1e-9);
    let syy: f64 = y.iter().map(|b| (b - ym).powi(2)).sum();
    assert!((fit.stats.r2 - (1.0 - sse / syy)).abs() < 1e-12);
}

#[test]
fn collinear_column_is_named() {
    let mut d = random_system(7);
    while d.ncols() < 3 {
        d = random_system(d.nrows() as u64 + 99);
    }
    let p = d.ncols();
    let mut x = Array2::<f64>::zeros((d.nrows(), p + 1));
    x.slice_mut(ndarray::s![.., ..p]).assign(&d.x);
    let dup = &d.x.column(1) * 2.0 - &d.x.column(2);
    x.column_mut(p).assign(&dup);
    let mut names = d.names.clone();
    names.push("dup".into());
    let d2 = DesignMatrix::new(names, x, d.weights.clone(), d.response.clone()).unwrap();
    match fit_wls(&d2) {
        Err(Error::SingularDesign { columns }) => assert_eq!(columns, vec!["dup".to_string()]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn county_design_has_reference_region() {
    let recs: Vec<_> = (0..30u64).map(|i| {
        let mut c = county(&format!("{i:05}"), 10_000 + i * 100, 80 + i);
        c.region = (i % 8) as u8 + 1;
        c.prop_white = 0.3 + 0.01 * i as f64;
        c
    }).collect();
    let d = DesignMatrix::from_counties(&recs).unwrap();
    assert_eq!(d.ncols(), 1 + 7 + 7 + 1);
    assert!(d.column_index("New England").is_none());
    assert_eq!(d.weights[3], 10_300.0);
}

#[test]
fn standardized_fit_rescales_slopes() {
    let d = random_system(11);
    if d.ncols() < 2 {
        return;
    }
    let raw = fit_wls(&d).unwrap();
    let z = standardize_then_fit(&d, false).unwrap();
    let scales = z.scaling.as_ref().unwrap();
    for j in 1..d.ncols() {
        let s = scales[j].unwrap();
        assert!((z.coefficients[j].estimate - raw.coefficients[j].estimate * s.sd).abs() < 1e-8);
        assert!((z.coefficients[j].t - raw.coefficients[j].t).abs() < 1e-8);
    }
}

fn welch_oracle(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let m = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let v = |x: &[f64]| {
        let mu = m(x);
        x.iter().map(|y| (y - mu).powi(2)).sum::<f64>() / (x.len() - 1) as f64
    };
    let (sa, sb) = (v(a) / a.len() as f64, v(b) / b.len() as f64);
    let t = (m(a) - m(b)) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    (t, df, beta_reg(df / 2.0, 0.5, df / (df + t * t)))
}

#[test]
fn welch_identical_groups_give_unit_p() {
    let a = [1.0, 2.5, 3.0, 4.5, 7.0];
    let w = [1.0, 3.0, 2.0, 5.0, 1.0];
    let r = weighted_welch(&a, &w, &a, &w).unwrap();
    assert_eq!(r.p, 1.0);
    assert_eq!(r.t, 0.0);
}

#[test]
fn welch_separated_normals() {
    let mut r = rng(10);
    let n = Normal::new(0.0, 1.0).unwrap();
    let a: Vec<f64> = (0..100).map(|_| n.sample(&mut r)).collect();
    let b: Vec<f64> = (0..100).map(|_| 5.0 + n.sample(&mut r)).collect();
    let ones = vec![1.0; 100];
    let got = weighted_welch(&a, &ones, &b, &ones).unwrap();
    let (t, df, p) = welch_oracle(&a, &b);
    assert!(got.p < 1e-20);
    assert!((got.t - t).abs() < 1e-10 * t.abs());
    assert!((got.df - df).abs() < 1e-8 * df);
    assert!(((got.p - p) / p).abs() < 5e-3, "{} vs {}", got.p, p);
}

#[test]
fn pairwise_matrix_skips_small_clusters() {
    let values = [1.0, 2.0, 3.0, 4.0, 10.0, 11.0, 12.0, 5.0];
    let labels = [0, 0, 0, 0, 1, 1, 1, 2];
    let m = weighted_pairwise_ttests("v", &values, &labels, &[1.0; 8], 3).unwrap();
    assert!(m.get(0, 1).unwrap() < 0.01);
    assert_eq!(m.get(0, 2), None);
    assert_eq!(m.diagnostics.len(), 2);
}

proptest! {
    #[test]
    fn welch_unit_weights_match_oracle(
        a in prop::collection::vec(-50.0f64..50.0, 2..30),
        b in prop::collection::vec(-50.0f64..50.0, 2..30),
    ) {
        let (t, df, p) = welch_oracle(&a, &b);
        prop_assume!(t.is_finite() && df.is_finite());
        let got = weighted_welch(&a, &vec![1.0; a.len()], &b, &vec![1.0; b.len()]).unwrap();
        prop_assert!((got.t - t).abs() <= 1e-9 * t.abs().max(1.0));
        prop_assert!((got.p - p).abs() <= 1e-8 + 1e-6 * p);
    }

    #[test]
    fn welch_weight_scale_invariant(
        a in prop::collection::vec((-5.0f64..5.0, 0.1f64..10.0), 2..20),
        b in prop::collection::vec((-5.0f64..5.0, 0.1f64..10.0), 2..20),
        k in 0.01f64..100.0,
    ) {
        let (xa, wa): (Vec<f64>, Vec<f64>) = a.into_iter().unzip();
        let (xb, wb): (Vec<f64>, Vec<f64>) = b.into_iter().unzip();
        let r1 = weighted_welch(&xa, &wa, &xb, &wb).unwrap();
        let ka: Vec<f64> = wa.iter().map(|w| w * k).collect();
        let r2 = weighted_welch(&xa, &ka, &xb, &wb).unwrap();
        prop_assume!(r1.t.is_finite());
        prop_assert!((r1.t - r2.t).abs() <= 1e-8 * r1.t.abs().max(1.0));
    }

    #[test]
    fn residuals_orthogonal_to_weighted_columns(seed in 0u64..500) {
        let d = random_system(seed);
        let fit = fit_wls(&d).unwrap();
        for j in 0..d.ncols() {
            let dot: f64 = (0..d.nrows()).map(|i| d.x[[i, j]] * d.weights[i] * fit.residuals[i]).sum();
            let scale: f64 = (0..d.nrows()).map(|i| (d.x[[i, j]] * d.weights[i] * d.response[i]).abs()).sum();
            prop_assert!(dot.abs() <= 1e-9 * scale.max(1.0));
        }
    }
}

#[test]
fn standardized_single_slope_is_weighted_correlation() {
    let mut r = rng(21);
    let n = 80;
    let xs: Vec<f64> = (0..n).map(|_| r.random_range(0.0..10.0)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 2.0 - 0.7 * x + r.random_range(-3.0..3.0)).collect();
    let ws: Vec<f64> = (0..n).map(|_| r.random_range(1.0..50.0)).collect();
    let mut x = Array2::<f64>::ones((n, 2));
    for i in 0..n {
        x[[i, 1]] = xs[i];
    }
    let d = DesignMatrix::new(vec![CONSTANT.into(), "x".into()], x, Array1::from(ws.clone()), Array1::from(ys.clone())).unwrap();
    let fit = standardize_then_fit(&d, true).unwrap();
    let sw: f64 = ws.iter().sum();
    let mx = xs.iter().zip(&ws).map(|(a, w)| a * w).sum::<f64>() / sw;
    let my = ys.iter().zip(&ws).map(|(a, w)| a * w).sum::<f64>() / sw;
    let cov: f64 = (0..n).map(|i| ws[i] * (xs[i] - mx) * (ys[i] - my)).sum();
    let vx: f64 = (0..n).map(|i| ws[i] * (xs[i] - mx).powi(2)).sum();
    let vy: f64 = (0..n).map(|i| ws[i] * (ys[i] - my).powi(2)).sum();
    let rho = cov / (vx * vy).sqrt();
    assert!((fit.coefficients[1].estimate - rho).abs() < 1e-10, "{} vs {rho}", fit.coefficients[1].estimate);
}
