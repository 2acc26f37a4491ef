//! BFGS ascent for log-likelihoods.

use nalgebra::{DMatrix, DVector};

use super::gradcheck::central_difference_gradient;
use crate::error::{Error, Result};

/// A scalar function to maximize. The default gradient is a central
/// difference.
pub trait Objective {
    fn value(&self, x: &DVector<f64>) -> f64;

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        central_difference_gradient(|v| self.value(v), x)
    }
}

impl<F: Fn(&DVector<f64>) -> f64> Objective for F {
    fn value(&self, x: &DVector<f64>) -> f64 {
        self(x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaximizeOptions {
    pub max_iterations: usize,
    /// Convergence when `‖∇f‖∞` drops below this.
    pub tol_grad: f64,
    pub max_halvings: usize,
    /// Relative step for the finite-difference Hessian.
    pub hessian_step: f64,
}

impl Default for MaximizeOptions {
    fn default() -> Self {
        MaximizeOptions {
            max_iterations: 500,
            tol_grad: 1e-6,
            max_halvings: 50,
            hessian_step: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Maximum {
    pub argmax: DVector<f64>,
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Negated Hessian at `argmax` (observed information).
    pub information: DMatrix<f64>,
}

/// Negated Hessian from central differences of the gradient, symmetrized.
pub fn observed_information<O: Objective + ?Sized>(
    f: &O,
    x: &DVector<f64>,
    rel_step: f64,
) -> DMatrix<f64> {
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    let mut probe = x.clone();
    for j in 0..n {
        let step = rel_step * x[j].abs().max(1.0);
        probe[j] = x[j] + step;
        let up = f.gradient(&probe);
        probe[j] = x[j] - step;
        let down = f.gradient(&probe);
        probe[j] = x[j];
        h.set_column(j, &((up - down) / (2.0 * step)));
    }
    -(&h + h.transpose()) * 0.5
}

/// Maximizes `f` from `x0` with BFGS and Armijo backtracking.
///
/// A line search that fails after `max_halvings` halvings first resets the
/// curvature model; a second failure ends the search with
/// `converged = false` unless the gradient is already within a hundredfold
/// of the tolerance. Estimates are returned either way.
pub fn maximize_loglik<O: Objective + ?Sized>(
    f: &O,
    x0: &DVector<f64>,
    opts: &MaximizeOptions,
) -> Result<Maximum> {
    let n = x0.len();
    let mut x = x0.clone();
    let mut fx = f.value(&x);
    if !fx.is_finite() {
        return Err(Error::InvalidInput(
            "objective is not finite at the starting point".into(),
        ));
    }
    // Work with the minimization of −f.
    let mut g = -f.gradient(&x);
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        if g.amax() < opts.tol_grad {
            converged = true;
            break;
        }
        iterations += 1;
        let mut d = -(&hinv * &g);
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            hinv = DMatrix::identity(n, n);
            fresh = true;
            d = -g.clone();
            slope = g.dot(&d);
        }
        let mut t = if fresh { (1.0 / d.amax()).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand = &x + &d * t;
            let fc = f.value(&cand);
            if fc.is_finite() && -fc <= -fx + 1e-4 * t * slope {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            if !fresh {
                hinv = DMatrix::identity(n, n);
                fresh = true;
                continue;
            }
            converged = g.amax() < 100.0 * opts.tol_grad;
            break;
        };
        let g_new = -f.gradient(&x_new);
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                hinv *= sy / y.norm_squared();
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            fresh = false;
        }
        x = x_new;
        fx = f_new;
        g = g_new;
    }
    if !converged && g.amax() < opts.tol_grad {
        converged = true;
    }

    let information = observed_information(f, &x, opts.hessian_step);
    Ok(Maximum {
        argmax: x,
        value: fx,
        converged,
        iterations,
        information,
    })
}
