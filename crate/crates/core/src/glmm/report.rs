use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::fit::{normal_quantile, CiMethod, Dataset, GlmmFit, SIGMA_NAME};
use super::logistic::{design_with_intercept, sigmoid, FixedFit};

pub fn aic(loglik: f64, n_params: usize) -> f64 {
    -2.0 * loglik + 2.0 * n_params as f64
}

/// `n` is the total number of observations.
pub fn bic(loglik: f64, n_params: usize, n: usize) -> f64 {
    -2.0 * loglik + n_params as f64 * (n as f64).ln()
}

pub fn significance_stars(p_value: f64) -> &'static str {
    match p_value {
        p if p < 0.001 => "***",
        p if p < 0.01 => "**",
        p if p < 0.05 => "*",
        _ => "",
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Minimum, quartiles (linear interpolation between order statistics) and
/// maximum of the finite values.
pub fn five_number_summary(values: &[f64]) -> Option<FiveNumber> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = (v.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    };
    Some(FiveNumber {
        min: v[0],
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
        max: v[v.len() - 1],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Fixed,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub z_value: f64,
    pub p_value: f64,
    pub stars: String,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub ci_method: CiMethod,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub group: String,
    pub name: String,
    pub variance: f64,
    pub std_dev: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub ci_method: CiMethod,
}

/// Serializable summary of a fitted model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: ModelKind,
    pub coefficients: Vec<CoefficientRow>,
    pub random_effects: Vec<VarianceRow>,
    pub scaled_residuals: Option<FiveNumber>,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub n_obs: usize,
    pub n_clusters: usize,
    pub n_params: usize,
    pub n_agq: Option<usize>,
    pub adaptive: Option<bool>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

fn coefficient_row(name: &str, estimate: f64, se: f64, lower: f64, upper: f64, method: CiMethod) -> CoefficientRow {
    let z_value = estimate / se;
    let p_value = 2.0 * Normal::standard().cdf(-z_value.abs());
    CoefficientRow {
        name: name.to_string(),
        estimate,
        std_error: se,
        z_value,
        p_value,
        stars: significance_stars(p_value).to_string(),
        ci_lower: lower,
        ci_upper: upper,
        ci_method: method,
    }
}

fn pearson_residuals(y: &[u8], eta: impl Iterator<Item = f64>) -> Vec<f64> {
    y.iter()
        .zip(eta)
        .map(|(&yi, e)| {
            let p = sigmoid(e);
            (f64::from(yi) - p) / (p * (1.0 - p)).sqrt()
        })
        .collect()
}

impl FitReport {
    /// Residuals are Pearson residuals at the conditional modes of the
    /// cluster intercepts, computed on `data`.
    pub fn from_glmm(fit: &GlmmFit, data: &Dataset) -> Self {
        let coefficients = fit
            .coefficient_names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let ci = fit.interval(name).cloned().unwrap_or_else(|| fit.wald_interval(i, 0.95));
                coefficient_row(name, fit.beta[i], fit.se_beta[i], ci.lower, ci.upper, ci.method)
            })
            .collect();
        let sigma_ci = fit
            .interval(SIGMA_NAME)
            .cloned()
            .unwrap_or_else(|| fit.wald_interval(fit.beta.len(), 0.95));
        let random_effects = vec![VarianceRow {
            group: "cluster".into(),
            name: "(Intercept)".into(),
            variance: fit.sigma_u * fit.sigma_u,
            std_dev: fit.sigma_u,
            ci_lower: sigma_ci.lower,
            ci_upper: sigma_ci.upper,
            ci_method: sigma_ci.method,
        }];
        let mut residuals = Vec::with_capacity(data.n_obs());
        for (c, &u) in data.clusters.iter().zip(&fit.conditional_modes) {
            let eta = design_with_intercept(&c.x) * &fit.beta;
            residuals.extend(pearson_residuals(&c.y, eta.iter().map(|e| e + u)));
        }
        FitReport {
            model: ModelKind::Mixed,
            coefficients,
            random_effects,
            scaled_residuals: five_number_summary(&residuals),
            loglik: fit.loglik,
            aic: fit.aic,
            bic: fit.bic,
            n_obs: fit.n_obs,
            n_clusters: fit.n_clusters,
            n_params: fit.n_params(),
            n_agq: Some(fit.n_quad),
            adaptive: Some(fit.adaptive),
            converged: fit.converged,
            warnings: fit.warnings.clone(),
        }
    }

    /// `x` excludes the intercept column.
    pub fn from_fixed(
        fit: &FixedFit,
        names: &[String],
        y: &[u8],
        x: &DMatrix<f64>,
        n_clusters: usize,
        level: f64,
    ) -> Self {
        let z = normal_quantile(level);
        let coefficients = names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let (b, se) = (fit.beta[i], fit.se[i]);
                coefficient_row(name, b, se, b - z * se, b + z * se, CiMethod::Wald)
            })
            .collect();
        let eta: DVector<f64> = design_with_intercept(x) * &fit.beta;
        let residuals = pearson_residuals(y, eta.iter().copied());
        let k = fit.beta.len();
        let mut warnings = Vec::new();
        if !fit.converged {
            warnings.push("fixed-effects fit did not converge".to_string());
        }
        FitReport {
            model: ModelKind::Fixed,
            coefficients,
            random_effects: Vec::new(),
            scaled_residuals: five_number_summary(&residuals),
            loglik: fit.loglik,
            aic: aic(fit.loglik, k),
            bic: bic(fit.loglik, k, y.len()),
            n_obs: y.len(),
            n_clusters,
            n_params: k,
            n_agq: None,
            adaptive: None,
            converged: fit.converged,
            warnings,
        }
    }
}

fn estimate_cell(row: &CoefficientRow) -> String {
    format!("{:.3} ({:.3}){}", row.estimate, row.std_error, row.stars)
}

fn ci_cell(lower: f64, upper: f64) -> String {
    format!("({:.4}, {:.4})", lower, upper)
}

/// Plain-text table: estimates with standard errors and stars, intervals,
/// random-effect standard deviation, residual quartiles and fit criteria.
pub fn render_table(report: &FitReport) -> String {
    render_comparison(&[("", report)])
}

/// Side-by-side rendering of several fits sharing coefficient names.
pub fn render_comparison(columns: &[(&str, &FitReport)]) -> String {
    let mut rows: Vec<(String, Vec<(String, String)>)> = Vec::new();
    let mut push = |label: &str, col: usize, est: String, ci: String| {
        let pos = match rows.iter().position(|(l, _)| l == label) {
            Some(p) => p,
            None => {
                rows.push((label.to_string(), vec![(String::new(), String::new()); columns.len()]));
                rows.len() - 1
            }
        };
        rows[pos].1[col] = (est, ci);
    };
    for (col, (_, r)) in columns.iter().enumerate() {
        for c in &r.coefficients {
            push(&c.name, col, estimate_cell(c), ci_cell(c.ci_lower, c.ci_upper));
        }
        for v in &r.random_effects {
            push(
                &format!("sigma_{}", v.group),
                col,
                format!("{:.3}", v.std_dev),
                ci_cell(v.ci_lower, v.ci_upper),
            );
        }
    }
    let mut stats: Vec<(String, Vec<String>)> = Vec::new();
    let mut stat = |label: &str, f: &dyn Fn(&FitReport) -> String| {
        stats.push((label.to_string(), columns.iter().map(|(_, r)| f(r)).collect()));
    };
    stat("Scaled residuals:", &|_| String::new());
    type Getter = fn(&FiveNumber) -> f64;
    let five: [(&str, Getter); 5] = [
        ("  Min", |f| f.min),
        ("  Q1", |f| f.q1),
        ("  Median", |f| f.median),
        ("  Q3", |f| f.q3),
        ("  Max", |f| f.max),
    ];
    for (label, get) in five {
        stat(label, &|r| r.scaled_residuals.as_ref().map_or("NA".into(), |f| format!("{:.3}", get(f))));
    }
    stat("Log-likelihood", &|r| format!("{:.1}", r.loglik));
    stat("AIC", &|r| format!("{:.1}", r.aic));
    stat("BIC", &|r| format!("{:.1}", r.bic));
    stat("N", &|r| r.n_obs.to_string());
    stat("Clusters", &|r| r.n_clusters.to_string());

    let label_w = rows
        .iter()
        .map(|(l, _)| l.len())
        .chain(stats.iter().map(|(l, _)| l.len()))
        .max()
        .unwrap_or(0);
    let est_w: Vec<usize> = (0..columns.len())
        .map(|c| {
            rows.iter()
                .map(|(_, v)| v[c].0.len())
                .chain(stats.iter().map(|(_, v)| v[c].len()))
                .chain(std::iter::once("Est (std. err.)".len()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let ci_w: Vec<usize> = (0..columns.len())
        .map(|c| rows.iter().map(|(_, v)| v[c].1.len()).chain(std::iter::once(6)).max().unwrap_or(0))
        .collect();

    let mut out = String::new();
    if columns.iter().any(|(title, _)| !title.is_empty()) {
        let _ = write!(out, "{:label_w$}", "");
        for (c, (title, _)) in columns.iter().enumerate() {
            let w = est_w[c] + ci_w[c] + 2;
            let _ = write!(out, "  {title:^w$}");
        }
        out.push('\n');
    }
    let _ = write!(out, "{:label_w$}", "");
    for c in 0..columns.len() {
        let _ = write!(out, "  {:>ew$}  {:>cw$}", "Est (std. err.)", "95% CI", ew = est_w[c], cw = ci_w[c]);
    }
    out.push('\n');
    for (label, cells) in &rows {
        let _ = write!(out, "{label:label_w$}");
        for (c, (est, ci)) in cells.iter().enumerate() {
            let _ = write!(out, "  {:>ew$}  {:>cw$}", est, ci, ew = est_w[c], cw = ci_w[c]);
        }
        out.push('\n');
    }
    for (label, cells) in &stats {
        let _ = write!(out, "{label:label_w$}");
        for (c, v) in cells.iter().enumerate() {
            let _ = write!(out, "  {:>ew$}  {:>cw$}", v, "", ew = est_w[c], cw = ci_w[c]);
        }
        out.push('\n');
    }
    out.push_str("*** p<0.001; ** p<0.01; * p<0.05\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn aic_arithmetic() {
        assert_eq!(aic(-1000.0, 8), 2016.0);
        assert_eq!(aic(-1000.0, 9) - aic(-1000.0, 8), 2.0);
    }

    #[test]
    fn bic_uses_log_of_total_observations() {
        // One extra parameter costs ln(N).
        let d = bic(-50.0, 4, 200) - bic(-50.0, 3, 200);
        assert_abs_diff_eq!(d, 200f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn stars_thresholds() {
        assert_eq!(significance_stars(0.0005), "***");
        assert_eq!(significance_stars(0.005), "**");
        assert_eq!(significance_stars(0.03), "*");
        assert_eq!(significance_stars(0.05), "");
    }

    #[test]
    fn quartiles_interpolate_linearly() {
        let f = five_number_summary(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(f.min, 1.0);
        assert_eq!(f.q1, 1.75);
        assert_eq!(f.median, 2.5);
        assert_eq!(f.q3, 3.25);
        assert_eq!(f.max, 4.0);
        assert!(five_number_summary(&[]).is_none());
        assert_eq!(five_number_summary(&[7.0]).unwrap().q3, 7.0);
    }

    #[test]
    fn mixed_report_renders_every_row() {
        let data = super::super::fit::tests::simulate(31, 10, 30, &[-0.3, 0.5], 0.9);
        let fit = super::super::fit_glmm(&data, &Default::default()).unwrap();
        let report = FitReport::from_glmm(&fit, &data);
        assert_eq!(report.n_params, 3);
        assert_eq!(report.coefficients.len(), 2);
        let text = render_table(&report);
        for needle in ["(Intercept)", "x1", "sigma_cluster", "Median", "AIC", "BIC", "Clusters"] {
            assert!(text.contains(needle), "{needle} missing:\n{text}");
        }
        let json = serde_json::to_string(&report).unwrap();
        let back: FitReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.coefficients[0].name, "(Intercept)");
        let both = render_comparison(&[("a", &report), ("b", &report)]);
        assert!(both.lines().count() >= text.lines().count());
    }
}
