use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::logistic::{design_with_intercept, fit_logistic, LogisticOptions};
use super::marginal::MarginalObjective;
use super::profile::profile_ci;
use crate::error::{Error, Result};
use crate::moments::ClusterData;
use crate::optim::{gauss_hermite_rule, maximize_loglik, MaximizeOptions, Objective};

pub const SIGMA_NAME: &str = "sigma_u";
pub const INTERCEPT_NAME: &str = "(Intercept)";
const BOUNDARY_LOG_SIGMA: f64 = -10.0;

/// Clustered binary data with named predictors (intercept excluded).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub predictor_names: Vec<String>,
    pub clusters: Vec<ClusterData>,
}

impl Dataset {
    pub fn new(predictor_names: Vec<String>, clusters: Vec<ClusterData>) -> Result<Self> {
        if let Some(c) = clusters.iter().find(|c| c.p() != predictor_names.len()) {
            return Err(Error::InvalidInput(format!(
                "cluster {} has {} predictors, expected {}",
                c.cluster_id,
                c.p(),
                predictor_names.len()
            )));
        }
        Ok(Dataset {
            predictor_names,
            clusters,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.clusters.iter().map(ClusterData::n).sum()
    }

    pub fn coefficient_names(&self) -> Vec<String> {
        std::iter::once(INTERCEPT_NAME.to_string())
            .chain(self.predictor_names.iter().cloned())
            .collect()
    }

    /// All observations stacked in cluster order.
    pub fn pooled(&self) -> (Vec<u8>, DMatrix<f64>) {
        let p = self.predictor_names.len();
        let n = self.n_obs();
        let mut y = Vec::with_capacity(n);
        let mut x = DMatrix::zeros(n, p);
        let mut row = 0;
        for c in &self.clusters {
            y.extend_from_slice(&c.y);
            x.rows_mut(row, c.n()).copy_from(&c.x);
            row += c.n();
        }
        (y, x)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    #[default]
    Wald,
    Profile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlmmOptions {
    pub n_quad: usize,
    pub adaptive: bool,
    pub ci_method: CiMethod,
    pub level: f64,
    pub tol_grad: f64,
    pub max_iterations: usize,
}

impl Default for GlmmOptions {
    fn default() -> Self {
        GlmmOptions {
            n_quad: 7,
            adaptive: true,
            ci_method: CiMethod::Wald,
            level: 0.95,
            tol_grad: 1e-6,
            max_iterations: 500,
        }
    }
}

impl GlmmOptions {
    pub fn validate(&self) -> Result<()> {
        gauss_hermite_rule(self.n_quad)?;
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("confidence level must lie in (0, 1) (got {})", self.level)));
        }
        if !(self.tol_grad > 0.0) {
            return Err(Error::Config("tol_grad must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn maximize(&self) -> MaximizeOptions {
        MaximizeOptions {
            max_iterations: self.max_iterations,
            tol_grad: self.tol_grad,
            ..MaximizeOptions::default()
        }
    }

    pub(crate) fn objective(&self, data: &Dataset) -> Result<MarginalObjective> {
        Ok(MarginalObjective::new(
            &data.clusters,
            gauss_hermite_rule(self.n_quad)?,
            self.adaptive,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamInterval {
    pub param: String,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub method: CiMethod,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlmmFit {
    pub coefficient_names: Vec<String>,
    pub beta: DVector<f64>,
    pub sigma_u: f64,
    pub se_beta: DVector<f64>,
    /// Standard error of `log σ_u`; not finite at the boundary.
    pub se_log_sigma: f64,
    /// Maximizer over `(β, log σ_u)`.
    pub theta: DVector<f64>,
    /// Inverse observed information over `θ`.
    pub vcov: DMatrix<f64>,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub n_quad: usize,
    pub adaptive: bool,
    pub converged: bool,
    pub boundary: bool,
    pub iterations: usize,
    pub n_obs: usize,
    pub n_clusters: usize,
    pub ci: Vec<ParamInterval>,
    /// Conditional modes of the cluster intercepts, in cluster order.
    pub conditional_modes: Vec<f64>,
    pub warnings: Vec<String>,
}

impl GlmmFit {
    /// `p + 2`: fixed effects, intercept and `σ_u`.
    pub fn n_params(&self) -> usize {
        self.beta.len() + 1
    }

    pub fn interval(&self, param: &str) -> Option<&ParamInterval> {
        self.ci.iter().find(|c| c.param == param)
    }

    pub(crate) fn wald_interval(&self, index: usize, level: f64) -> ParamInterval {
        let z = normal_quantile(level);
        let q = self.beta.len();
        if index < q {
            let (b, se) = (self.beta[index], self.se_beta[index]);
            ParamInterval {
                param: self.coefficient_names[index].clone(),
                estimate: b,
                lower: b - z * se,
                upper: b + z * se,
                method: CiMethod::Wald,
            }
        } else {
            let (lower, upper) = if self.boundary || !self.se_log_sigma.is_finite() {
                (0.0, 0.0)
            } else {
                let l = self.theta[q];
                ((l - z * self.se_log_sigma).exp(), (l + z * self.se_log_sigma).exp())
            };
            ParamInterval {
                param: SIGMA_NAME.to_string(),
                estimate: self.sigma_u,
                lower,
                upper,
                method: CiMethod::Wald,
            }
        }
    }
}

/// Two-sided standard-normal critical value for `level`.
pub(crate) fn normal_quantile(level: f64) -> f64 {
    Normal::standard().inverse_cdf(0.5 + 0.5 * level)
}

fn invert_information(info: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = info.clone().cholesky()?.inverse();
    inv.iter().all(|v| v.is_finite()).then_some(inv)
}

/// Fits the random-intercept logistic model by maximizing the quadrature
/// marginal likelihood over `(β, log σ_u)`, starting from the pooled
/// fixed-effects fit and `σ_u = 1`.
pub fn fit_glmm(data: &Dataset, opts: &GlmmOptions) -> Result<GlmmFit> {
    opts.validate()?;
    if data.clusters.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "mixed model needs at least 2 clusters (got {})",
            data.clusters.len()
        )));
    }
    let q = data.predictor_names.len() + 1;
    let (y, x) = data.pooled();
    let start = fit_logistic(&y, &design_with_intercept(&x), &LogisticOptions::default())?;
    let mut theta0 = DVector::zeros(q + 1);
    if start.beta.iter().all(|b| b.is_finite()) {
        theta0.rows_mut(0, q).copy_from(&start.beta);
    }

    let objective = opts.objective(data)?;
    let max = maximize_loglik(&objective, &theta0, &opts.maximize())?;
    let theta = max.argmax.clone();
    let boundary = theta[q] < BOUNDARY_LOG_SIGMA;
    let sigma_u = if boundary { 0.0 } else { theta[q].exp() };
    let mut warnings = Vec::new();
    if !max.converged {
        warnings.push("optimizer did not converge; estimates are from the last iterate".to_string());
    }
    if boundary {
        warnings.push("sigma_u estimated at the boundary 0".to_string());
    }

    let vcov = if boundary {
        let mut v = DMatrix::from_element(q + 1, q + 1, f64::NAN);
        let info = max.information.view((0, 0), (q, q)).into_owned();
        if let Some(inv) = invert_information(&info) {
            v.view_mut((0, 0), (q, q)).copy_from(&inv);
        }
        v
    } else {
        invert_information(&max.information)
            .unwrap_or_else(|| DMatrix::from_element(q + 1, q + 1, f64::NAN))
    };
    if vcov.view((0, 0), (q, q)).iter().any(|v| !v.is_finite()) {
        warnings.push("observed information is not positive definite".to_string());
    }
    let se_beta = DVector::from_fn(q, |i, _| vcov[(i, i)].sqrt());
    let se_log_sigma = vcov[(q, q)].sqrt();

    let loglik = max.value;
    let k = q + 1;
    let n_obs = data.n_obs();
    let mut fit = GlmmFit {
        coefficient_names: data.coefficient_names(),
        beta: theta.rows(0, q).into_owned(),
        sigma_u,
        se_beta,
        se_log_sigma,
        conditional_modes: objective.conditional_modes(&theta),
        theta,
        vcov,
        loglik,
        aic: super::report::aic(loglik, k),
        bic: super::report::bic(loglik, k, n_obs),
        n_quad: opts.n_quad,
        adaptive: opts.adaptive,
        converged: max.converged,
        boundary,
        iterations: max.iterations,
        n_obs,
        n_clusters: data.clusters.len(),
        ci: Vec::new(),
        warnings,
    };
    fit.ci = match opts.ci_method {
        CiMethod::Wald => (0..=q).map(|i| fit.wald_interval(i, opts.level)).collect(),
        CiMethod::Profile => {
            let mut names = fit.coefficient_names.clone();
            names.push(SIGMA_NAME.to_string());
            names
                .iter()
                .map(|name| profile_ci(&fit, data, name, opts.level, opts))
                .collect::<Result<_>>()?
        }
    };
    if fit.ci.iter().any(|c| c.method != opts.ci_method) {
        fit.warnings
            .push("profile interval failed for some parameters; Wald used instead".to_string());
    }
    Ok(fit)
}

/// Total marginal log-likelihood of `data` at `(β, σ_u)`.
pub fn marginal_loglik(data: &Dataset, beta: &DVector<f64>, sigma_u: f64, opts: &GlmmOptions) -> Result<f64> {
    if !(sigma_u >= 0.0) {
        return Err(Error::InvalidInput(format!("sigma_u must be ≥ 0 (got {sigma_u})")));
    }
    if beta.len() != data.predictor_names.len() + 1 {
        return Err(Error::InvalidInput("beta length does not match the predictors".into()));
    }
    let objective = opts.objective(data)?;
    let mut theta = DVector::zeros(beta.len() + 1);
    theta.rows_mut(0, beta.len()).copy_from(beta);
    // ln 0 = −∞ maps back to σ_u = 0 exactly.
    theta[beta.len()] = sigma_u.ln();
    Ok(objective.value(&theta))
}
