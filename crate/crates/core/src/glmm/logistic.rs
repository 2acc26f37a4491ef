use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `log(1 + e^η)` without overflow.
pub(crate) fn log1pexp(eta: f64) -> f64 {
    eta.max(0.0) + (-eta.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Prepends a column of ones.
pub fn design_with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut d = DMatrix::from_element(x.nrows(), x.ncols() + 1, 1.0);
    d.columns_mut(1, x.ncols()).copy_from(x);
    d
}

fn check(beta: &DVector<f64>, y: &[u8], x: &DMatrix<f64>) -> Result<()> {
    if x.nrows() != y.len() || x.ncols() != beta.len() {
        return Err(Error::InvalidInput(format!(
            "design is {}×{}, response has {} entries, beta has {}",
            x.nrows(),
            x.ncols(),
            y.len(),
            beta.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("design matrix has non-finite entries".into()));
    }
    Ok(())
}

/// `Σ y_i x_iᵀβ − Σ log(1 + exp(x_iᵀβ))`; `x` includes the intercept column.
pub fn logistic_loglik(beta: &DVector<f64>, y: &[u8], x: &DMatrix<f64>) -> Result<f64> {
    check(beta, y, x)?;
    let eta = x * beta;
    Ok(eta
        .iter()
        .zip(y)
        .map(|(&e, &yi)| f64::from(yi) * e - log1pexp(e))
        .sum())
}

/// `Xᵀ(y − π)`.
pub fn logistic_grad(beta: &DVector<f64>, y: &[u8], x: &DMatrix<f64>) -> Result<DVector<f64>> {
    check(beta, y, x)?;
    let eta = x * beta;
    let resid = DVector::from_iterator(
        y.len(),
        eta.iter().zip(y).map(|(&e, &yi)| f64::from(yi) - sigmoid(e)),
    );
    Ok(x.transpose() * resid)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticOptions {
    pub max_iterations: usize,
    pub tol_grad: f64,
    /// Coefficient norm beyond which the likelihood is treated as unbounded.
    pub separation_norm: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        LogisticOptions {
            max_iterations: 100,
            tol_grad: 1e-8,
            separation_norm: 1e3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedFit {
    pub beta: DVector<f64>,
    pub se: DVector<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub vcov: DMatrix<f64>,
    pub iterations: usize,
}

fn information(beta: &DVector<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let eta = x * beta;
    let mut xw = x.clone();
    for (i, mut row) in xw.row_iter_mut().enumerate() {
        let p = sigmoid(eta[i]);
        row *= p * (1.0 - p);
    }
    x.transpose() * xw
}

/// Newton–Raphson with step halving. Converged once `max |∇ℓ| < tol_grad`
/// and the last Newton step is below `1e-6`; under separation the steps
/// never shrink, so the fit ends unconverged either by iteration count or
/// when `‖β‖` passes `separation_norm`.
pub fn fit_logistic(y: &[u8], x: &DMatrix<f64>, opts: &LogisticOptions) -> Result<FixedFit> {
    let p = x.ncols();
    let mut beta = DVector::zeros(p);
    let mut ll = logistic_loglik(&beta, y, x)?;
    let mut converged = false;
    let mut iterations = 0;
    let mut last_step = f64::INFINITY;

    while iterations < opts.max_iterations {
        let g = logistic_grad(&beta, y, x)?;
        if g.amax() < opts.tol_grad && last_step < 1e-6 {
            converged = true;
            break;
        }
        iterations += 1;
        let Some(chol) = information(&beta, x).cholesky() else {
            break;
        };
        let step = chol.solve(&g);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..50 {
            let cand = &beta + &step * t;
            let lc = logistic_loglik(&cand, y, x)?;
            if lc >= ll {
                last_step = (&step * t).amax();
                beta = cand;
                ll = lc;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            converged = g.amax() < opts.tol_grad;
            break;
        }
        if beta.norm() > opts.separation_norm {
            break;
        }
    }

    let vcov = information(&beta, x)
        .try_inverse()
        .unwrap_or_else(|| DMatrix::from_element(p, p, f64::NAN));
    let se = DVector::from_fn(p, |i, _| vcov[(i, i)].sqrt());
    Ok(FixedFit {
        beta,
        se,
        loglik: ll,
        converged,
        vcov,
        iterations,
    })
}
