//! Population-weighted linear regression of crude mortality on county
//! covariates, with inference, standardized and univariable variants, and
//! weighted Welch tests between image clusters.

use std::io::Write;

use ndarray::{Array1, Array2};

use crate::cohort::{CountyRecord, REGION_NAMES};
use crate::error::{Error, Result};
use crate::linalg::{qr_lstsq, r_inverse_gram};
use crate::stats::{f_sf, student_t_quantile, student_t_two_sided};

pub const CONSTANT: &str = "Constant";

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub names: Vec<String>,
    /// `n × p`, one row per county.
    pub x: Array2<f64>,
    pub weights: Array1<f64>,
    pub response: Array1<f64>,
    pub row_ids: Vec<String>,
}

/// Covariate column names in design order (after the constant).
pub fn covariate_names() -> Vec<String> {
    let mut names: Vec<String> = [
        "Proportion White",
        "Proportion Black",
        "Proportion Asian",
        "Hispanic",
        "Proportion Male",
        "Mean Age",
        "Any College",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    // New England (region 1) is the reference level
    names.extend(REGION_NAMES[1..].iter().map(|s| s.to_string()));
    names.push("Income".into());
    names
}

/// Covariate values for one county in [`covariate_names`] order.
pub fn covariate_row(r: &CountyRecord) -> Result<Vec<f64>> {
    let college = r
        .any_college
        .ok_or_else(|| Error::domain(format!("county {} has no any_college value (impute first)", r.fips)))?;
    let income = r
        .income
        .ok_or_else(|| Error::domain(format!("county {} has no income value (impute first)", r.fips)))?;
    let mut row = vec![
        r.prop_white,
        r.prop_black,
        r.prop_asian,
        r.prop_hispanic,
        r.prop_male,
        r.mean_age,
        college,
    ];
    row.extend((2..=8u8).map(|g| if r.region == g { 1.0 } else { 0.0 }));
    row.push(income);
    Ok(row)
}

impl DesignMatrix {
    pub fn new(
        names: Vec<String>,
        x: Array2<f64>,
        weights: Array1<f64>,
        response: Array1<f64>,
    ) -> Result<Self> {
        let (n, p) = x.dim();
        if names.len() != p {
            return Err(Error::domain(format!("{} names for {p} columns", names.len())));
        }
        if weights.len() != n || response.len() != n {
            return Err(Error::domain("weights and response must have one entry per row"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::domain("weights must be positive and finite"));
        }
        if x.iter().chain(response.iter()).any(|v| !v.is_finite()) {
            return Err(Error::domain("design and response must be finite"));
        }
        let row_ids = (0..n).map(|i| i.to_string()).collect();
        Ok(Self { names, x, weights, response, row_ids })
    }

    /// Constant + covariates, population weights, crude rate per 1,000 as response.
    pub fn from_counties(records: &[CountyRecord]) -> Result<Self> {
        let mut names = vec![CONSTANT.to_string()];
        names.extend(covariate_names());
        let p = names.len();
        let mut x = Array2::<f64>::zeros((records.len(), p));
        for (i, r) in records.iter().enumerate() {
            x[[i, 0]] = 1.0;
            for (j, v) in covariate_row(r)?.into_iter().enumerate() {
                x[[i, j + 1]] = v;
            }
        }
        let weights = records.iter().map(|r| r.population as f64).collect();
        let response = records.iter().map(|r| r.crude_rate()).collect();
        let mut d = Self::new(names, x, weights, response)?;
        d.row_ids = records.iter().map(|r| r.fips.clone()).collect();
        Ok(d)
    }

    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn is_constant_column(&self, j: usize) -> bool {
        let c = self.x.column(j);
        c.iter().all(|v| *v == c[0])
    }

    /// Index of an all-equal nonzero column, if any.
    pub fn intercept_column(&self) -> Option<usize> {
        (0..self.ncols()).find(|&j| self.x[[0, j]] != 0.0 && self.is_constant_column(j))
    }

    /// Remove non-intercept columns with no variation; returns their names.
    pub fn drop_constant_columns(&mut self) -> Vec<String> {
        let intercept = self.intercept_column();
        let keep: Vec<usize> = (0..self.ncols())
            .filter(|&j| Some(j) == intercept || !self.is_constant_column(j))
            .collect();
        let dropped = (0..self.ncols())
            .filter(|j| !keep.contains(j))
            .map(|j| self.names[j].clone())
            .collect();
        self.x = self.x.select(ndarray::Axis(1), &keep);
        self.names = keep.iter().map(|&j| self.names[j].clone()).collect();
        dropped
    }

    /// Same design, different response.
    pub fn with_response(&self, response: Array1<f64>) -> Result<Self> {
        let mut d = Self::new(self.names.clone(), self.x.clone(), self.weights.clone(), response)?;
        d.row_ids = self.row_ids.clone();
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_err: f64,
    pub t: f64,
    pub p: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitStats {
    pub n: usize,
    pub p: usize,
    pub df_resid: f64,
    pub r2: f64,
    pub adj_r2: f64,
    pub f_stat: f64,
    pub f_p: f64,
    pub log_lik: f64,
    pub aic: f64,
    pub bic: f64,
    /// Weighted residual sum of squares.
    pub ssr: f64,
}

/// Per-column centring and scaling applied before a standardized fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnScale {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    pub coefficients: Vec<Coefficient>,
    pub stats: FitStats,
    pub standardized: bool,
    pub intercept: Option<usize>,
    /// Present for standardized fits; `None` entries were left unscaled.
    pub scaling: Option<Vec<Option<ColumnScale>>>,
    pub residuals: Array1<f64>,
}

impl RegressionFit {
    pub fn names(&self) -> Vec<&str> {
        self.coefficients.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn beta(&self) -> Array1<f64> {
        self.coefficients.iter().map(|c| c.estimate).collect()
    }

    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    /// Linear predictor for one design row (in the fit's own column space).
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.coefficients.iter().zip(row).map(|(c, x)| c.estimate * x).sum()
    }
}

/// Weighted least squares by QR of the `√w`-scaled design.
pub fn fit_wls(d: &DesignMatrix) -> Result<RegressionFit> {
    let (n, p) = d.x.dim();
    if n <= p {
        return Err(Error::domain(format!("need more rows ({n}) than columns ({p})")));
    }
    let sw = d.weights.mapv(f64::sqrt);
    let mut xs = d.x.clone();
    for (mut row, s) in xs.rows_mut().into_iter().zip(sw.iter()) {
        row *= *s;
    }
    let ys = &d.response * &sw;
    let qr = qr_lstsq(xs.view(), ys.view());
    if !qr.dependent.is_empty() {
        return Err(Error::SingularDesign {
            columns: qr.dependent.iter().map(|&j| d.names[j].clone()).collect(),
        });
    }
    let beta = qr.coef;
    let fitted = d.x.dot(&beta);
    let residuals = &d.response - &fitted;
    let ssr: f64 = residuals.iter().zip(d.weights.iter()).map(|(r, w)| w * r * r).sum();
    let df = (n - p) as f64;
    let sigma2 = ssr / df;
    let cov = r_inverse_gram(&qr.r) * sigma2;
    let tq = student_t_quantile(0.975, df);

    let coefficients = (0..p)
        .map(|j| {
            let se = cov[[j, j]].max(0.0).sqrt();
            let est = beta[j];
            let t = est / se;
            let pval = if se == 0.0 {
                if est == 0.0 { 1.0 } else { 0.0 }
            } else {
                student_t_two_sided(t, df)
            };
            Coefficient {
                name: d.names[j].clone(),
                estimate: est,
                std_err: se,
                t,
                p: pval,
                ci_low: est - tq * se,
                ci_high: est + tq * se,
            }
        })
        .collect();

    let intercept = d.intercept_column();
    let sum_w: f64 = d.weights.sum();
    let tss = if intercept.is_some() {
        let ybar = d.response.iter().zip(d.weights.iter()).map(|(y, w)| y * w).sum::<f64>() / sum_w;
        d.response.iter().zip(d.weights.iter()).map(|(y, w)| w * (y - ybar).powi(2)).sum::<f64>()
    } else {
        d.response.iter().zip(d.weights.iter()).map(|(y, w)| w * y * y).sum::<f64>()
    };
    let r2 = if tss > 0.0 { (1.0 - ssr / tss).clamp(0.0, 1.0) } else { 1.0 };
    let k0 = if intercept.is_some() { 1.0 } else { 0.0 };
    let adj_r2 = 1.0 - (n as f64 - k0) / df * (1.0 - r2);
    let df_model = p as f64 - k0;
    let (f_stat, f_p) = if df_model > 0.0 {
        let f = (r2 / df_model) / ((1.0 - r2) / df);
        (f, f_sf(f, df_model, df))
    } else {
        (f64::NAN, f64::NAN)
    };
    let nf = n as f64;
    let log_lik = -0.5 * nf * ((2.0 * std::f64::consts::PI).ln() + (ssr / nf).ln() + 1.0)
        + 0.5 * d.weights.iter().map(|w| w.ln()).sum::<f64>();
    let pf = p as f64;
    let stats = FitStats {
        n,
        p,
        df_resid: df,
        r2,
        adj_r2,
        f_stat,
        f_p,
        log_lik,
        aic: -2.0 * log_lik + 2.0 * pf,
        bic: -2.0 * log_lik + pf * nf.ln(),
        ssr,
    };
    Ok(RegressionFit {
        coefficients,
        stats,
        standardized: false,
        intercept,
        scaling: None,
        residuals,
    })
}

fn weighted_scale(v: ndarray::ArrayView1<f64>, w: &Array1<f64>) -> ColumnScale {
    let sw = w.sum();
    let mean = v.iter().zip(w.iter()).map(|(x, w)| x * w).sum::<f64>() / sw;
    let var = v.iter().zip(w.iter()).map(|(x, w)| w * (x - mean).powi(2)).sum::<f64>() / sw;
    ColumnScale { mean, sd: var.sqrt() }
}

/// z-score every non-intercept column with weighted mean/sd (and optionally
/// the response) and fit.
pub fn standardize_then_fit(d: &DesignMatrix, standardize_response: bool) -> Result<RegressionFit> {
    let (z, _) = standardize(d, standardize_response)?;
    let mut fit = fit_wls(&z)?;
    fit.standardized = true;
    let intercept = d.intercept_column();
    fit.scaling = Some(
        (0..d.ncols())
            .map(|j| (Some(j) != intercept).then(|| weighted_scale(d.x.column(j), &d.weights)))
            .collect(),
    );
    Ok(fit)
}

/// The standardized design, plus the response scale when it was standardized.
pub fn standardize(d: &DesignMatrix, standardize_response: bool) -> Result<(DesignMatrix, Option<ColumnScale>)> {
    let intercept = d.intercept_column();
    let mut z = d.clone();
    for j in 0..d.ncols() {
        if Some(j) == intercept {
            continue;
        }
        let s = weighted_scale(d.x.column(j), &d.weights);
        if !(s.sd > 0.0) {
            return Err(Error::domain(format!("column {} has zero variance", d.names[j])));
        }
        z.x.column_mut(j).mapv_inplace(|v| (v - s.mean) / s.sd);
    }
    let yscale = if standardize_response {
        let s = weighted_scale(d.response.view(), &d.weights);
        if !(s.sd > 0.0) {
            return Err(Error::domain("response has zero variance"));
        }
        z.response.mapv_inplace(|v| (v - s.mean) / s.sd);
        Some(s)
    } else {
        None
    };
    Ok((z, yscale))
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnivariableRow {
    pub covariate: String,
    pub slope: f64,
    pub adj_r2: f64,
    pub p: f64,
}

/// Weighted simple regression of `pred` on each non-intercept column of `d`,
/// sorted by descending adjusted R².
pub fn univariable_fits(pred: &[f64], d: &DesignMatrix) -> Result<Vec<UnivariableRow>> {
    if pred.len() != d.nrows() {
        return Err(Error::domain(format!(
            "{} predictions for {} design rows",
            pred.len(),
            d.nrows()
        )));
    }
    let intercept = d.intercept_column();
    let y = Array1::from(pred.to_vec());
    let mut rows = Vec::new();
    for j in 0..d.ncols() {
        if Some(j) == intercept {
            continue;
        }
        let mut x = Array2::<f64>::ones((d.nrows(), 2));
        x.column_mut(1).assign(&d.x.column(j));
        let simple = DesignMatrix::new(
            vec![CONSTANT.into(), d.names[j].clone()],
            x,
            d.weights.clone(),
            y.clone(),
        )?;
        let fit = fit_wls(&simple)?;
        rows.push(UnivariableRow {
            covariate: d.names[j].clone(),
            slope: fit.coefficients[1].estimate,
            adj_r2: fit.stats.adj_r2,
            p: fit.coefficients[1].p,
        });
    }
    rows.sort_by(|a, b| b.adj_r2.total_cmp(&a.adj_r2).then_with(|| a.covariate.cmp(&b.covariate)));
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchResult {
    pub mean_a: f64,
    pub mean_b: f64,
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

/// Welch two-sample test on weighted means and variances.
///
/// Weights are relative: within each group they are rescaled to sum to the
/// member count, so equal weights reproduce the unweighted test.
pub fn weighted_welch(a: &[f64], wa: &[f64], b: &[f64], wb: &[f64]) -> Result<WelchResult> {
    let moments = |x: &[f64], w: &[f64]| -> Result<(f64, f64, f64)> {
        let n = x.len();
        if n < 2 || w.len() != n {
            return Err(Error::domain("each group needs at least two members with weights"));
        }
        let sw: f64 = w.iter().sum();
        if !(sw > 0.0) || w.iter().any(|v| *v < 0.0) {
            return Err(Error::domain("weights must be non-negative with positive sum"));
        }
        let nf = n as f64;
        let scale = nf / sw;
        let mean = x.iter().zip(w).map(|(x, w)| x * w * scale).sum::<f64>() / nf;
        let var = x.iter().zip(w).map(|(x, w)| w * scale * (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
        Ok((mean, var, nf))
    };
    let (ma, va, na) = moments(a, wa)?;
    let (mb, vb, nb) = moments(b, wb)?;
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        let (t, p) = if ma == mb { (0.0, 1.0) } else { ((ma - mb).signum() * f64::INFINITY, 0.0) };
        return Ok(WelchResult { mean_a: ma, mean_b: mb, t, df: na + nb - 2.0, p });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(WelchResult { mean_a: ma, mean_b: mb, t, df, p: student_t_two_sided(t, df) })
}

/// Upper-triangular matrix of pairwise p-values between clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct TTestMatrix {
    pub covariate: String,
    pub k: usize,
    /// `p[i][j]` for `i < j`; `None` on the diagonal, below it, and for skipped pairs.
    pub p: Vec<Vec<Option<f64>>>,
    pub diagnostics: Vec<String>,
}

impl TTestMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.p[a][b]
    }
}

pub fn weighted_pairwise_ttests(
    covariate: &str,
    values: &[f64],
    labels: &[usize],
    weights: &[f64],
    k: usize,
) -> Result<TTestMatrix> {
    if k < 2 {
        return Err(Error::domain("pairwise tests need at least two clusters"));
    }
    if values.len() != labels.len() || values.len() != weights.len() {
        return Err(Error::domain("values, labels and weights must align"));
    }
    let mut groups: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); k];
    for ((v, l), w) in values.iter().zip(labels).zip(weights) {
        if *l >= k {
            return Err(Error::domain(format!("cluster label {l} outside 0..{k}")));
        }
        groups[*l].0.push(*v);
        groups[*l].1.push(*w);
    }
    let mut p = vec![vec![None; k]; k];
    let mut diagnostics = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            let (gi, gj) = (&groups[i], &groups[j]);
            if gi.0.len() < 2 || gj.0.len() < 2 {
                diagnostics.push(format!(
                    "{covariate}: skipped clusters {i} vs {j} (sizes {} and {})",
                    gi.0.len(),
                    gj.0.len()
                ));
                continue;
            }
            p[i][j] = Some(weighted_welch(&gi.0, &gi.1, &gj.0, &gj.1)?.p);
        }
    }
    Ok(TTestMatrix { covariate: covariate.into(), k, p, diagnostics })
}

/// Coefficient table: `name,coef,std err,t,P,0.025,0.975`.
pub fn write_coef_table<W: Write>(w: W, fit: &RegressionFit) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["name", "coef", "std err", "t", "P", "0.025", "0.975"])?;
    for c in &fit.coefficients {
        wtr.write_record([
            c.name.clone(),
            fmt_num(c.estimate),
            fmt_num(c.std_err),
            fmt_num(c.t),
            fmt_num(c.p),
            fmt_num(c.ci_low),
            fmt_num(c.ci_high),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<coef table>", e))?;
    Ok(())
}

pub fn write_fit_stats<W: Write>(w: W, s: &FitStats) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["statistic", "value"])?;
    for (k, v) in [
        ("No. Observations", s.n as f64),
        ("R-squared", s.r2),
        ("Adj. R-squared", s.adj_r2),
        ("F-statistic", s.f_stat),
        ("Prob (F-statistic)", s.f_p),
        ("Log-Likelihood", s.log_lik),
        ("AIC", s.aic),
        ("BIC", s.bic),
    ] {
        wtr.write_record([k.to_string(), fmt_num(v)])?;
    }
    wtr.flush().map_err(|e| Error::io("<fit stats>", e))?;
    Ok(())
}

pub fn write_univariable<W: Write>(w: W, rows: &[UnivariableRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["covariate", "adj_r2", "p", "slope"])?;
    for r in rows {
        wtr.write_record([r.covariate.clone(), fmt_num(r.adj_r2), fmt_num(r.p), fmt_num(r.slope)])?;
    }
    wtr.flush().map_err(|e| Error::io("<univariable>", e))?;
    Ok(())
}

/// One square matrix per covariate; empty cells for the diagonal, lower triangle and skipped pairs.
pub fn write_ttest_matrix<W: Write>(w: W, m: &TTestMatrix) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec![m.covariate.clone()];
    header.extend((0..m.k).map(|j| j.to_string()));
    wtr.write_record(&header)?;
    for i in 0..m.k {
        let mut rec = vec![i.to_string()];
        rec.extend((0..m.k).map(|j| m.p[i][j].map(|p| format!("{p:.1E}")).unwrap_or_default()));
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io("<t-tests>", e))?;
    Ok(())
}

/// Shortest round-trip representation; keeps reports byte-stable.
pub(crate) fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v}")
    }
}
