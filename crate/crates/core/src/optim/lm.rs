//! Levenberg–Marquardt for `min_x Σ r_i(x)²`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DAMPING_LIMIT: f64 = 1e12;

/// A residual vector with an optional analytic Jacobian (`m × n`, row per
/// residual). Without one, forward differences are used.
pub trait Residuals {
    fn residuals(&self, x: &DVector<f64>) -> DVector<f64>;

    fn jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

/// Adapts a closure to [`Residuals`] with a finite-difference Jacobian.
pub struct FnResiduals<F>(pub F);

impl<F> Residuals for FnResiduals<F>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.0)(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmOptions {
    /// `None` means `400 · dim`.
    pub max_iterations: Option<usize>,
    pub tol_ssd: f64,
    pub tol_step: f64,
    pub tol_grad: f64,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub seed: u64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iterations: None,
            tol_ssd: 1e-10,
            tol_step: 1e-10,
            tol_grad: 1e-10,
            initial_damping: 1e-3,
            damping_up: 10.0,
            damping_down: 0.1,
            seed: 0,
        }
    }
}

impl LmOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tol_ssd", self.tol_ssd),
            ("tol_step", self.tol_step),
            ("tol_grad", self.tol_grad),
            ("initial_damping", self.initial_damping),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.damping_up > 1.0) {
            return Err(Error::Config("damping_up must exceed 1".into()));
        }
        if !(self.damping_down > 0.0 && self.damping_down < 1.0) {
            return Err(Error::Config("damping_down must lie in (0, 1)".into()));
        }
        if self.max_iterations == Some(0) {
            return Err(Error::Config("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergedBy {
    SsdFloor,
    StepFloor,
    GradFloor,
    MaxIter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmResult {
    pub solution: DVector<f64>,
    pub ssd: f64,
    pub iterations: usize,
    pub converged_by: ConvergedBy,
}

fn forward_difference_jacobian<P: Residuals + ?Sized>(
    problem: &P,
    x: &DVector<f64>,
    r: &DVector<f64>,
) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(r.len(), x.len());
    let mut probe = x.clone();
    for j in 0..x.len() {
        let h = (1e-7 * x[j].abs()).max(1e-7);
        probe[j] = x[j] + h;
        let shifted = problem.residuals(&probe);
        probe[j] = x[j];
        jac.set_column(j, &((shifted - r) / h));
    }
    jac
}

/// Solves `(JᵀJ + μI) δ = −Jᵀr`, through the `m × m` dual system when there
/// are fewer residuals than unknowns.
fn damped_step(jac: &DMatrix<f64>, r: &DVector<f64>, mu: f64) -> Option<DVector<f64>> {
    let (m, n) = jac.shape();
    if m < n {
        let mut a = jac * jac.transpose();
        for i in 0..m {
            a[(i, i)] += mu;
        }
        let z = a.cholesky()?.solve(&(-r));
        Some(jac.transpose() * z)
    } else {
        let mut a = jac.transpose() * jac;
        for i in 0..n {
            a[(i, i)] += mu;
        }
        Some(a.cholesky()?.solve(&(-(jac.transpose() * r))))
    }
}

fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|a| a.is_finite())
}

/// Minimizes the sum of squared residuals from `x0`.
///
/// The damping parameter is relative to the largest diagonal entry of `JᵀJ`;
/// it is multiplied by `damping_up` after every rejected step and by
/// `damping_down` after every accepted one. Accepted steps never increase
/// the SSD. Each attempted step counts as one iteration.
pub fn lm_solve<P: Residuals + ?Sized>(
    problem: &P,
    x0: &DVector<f64>,
    opts: &LmOptions,
) -> Result<LmResult> {
    opts.validate()?;
    let max_iterations = opts.max_iterations.unwrap_or(400 * x0.len().max(1));

    let mut x = x0.clone();
    let mut r = problem.residuals(&x);
    if !all_finite(&r) || !all_finite(&x) {
        return Err(Error::InvalidStart);
    }
    let mut ssd = r.norm_squared();
    let mut damping = opts.initial_damping;
    let mut iterations = 0;
    let mut jac = None;

    let converged_by = loop {
        if ssd < opts.tol_ssd {
            break ConvergedBy::SsdFloor;
        }
        if iterations >= max_iterations {
            break ConvergedBy::MaxIter;
        }
        let j = jac.get_or_insert_with(|| {
            problem
                .jacobian(&x)
                .unwrap_or_else(|| forward_difference_jacobian(problem, &x, &r))
        });
        let grad = j.transpose() * &r;
        if grad.amax() < opts.tol_grad {
            break ConvergedBy::GradFloor;
        }
        let scale = j
            .column_iter()
            .map(|c| c.norm_squared())
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);

        iterations += 1;
        let Some(step) = damped_step(j, &r, damping * scale) else {
            damping *= opts.damping_up;
            continue;
        };
        if step.norm() <= opts.tol_step * (x.norm() + opts.tol_step) {
            break ConvergedBy::StepFloor;
        }
        let candidate = &x + &step;
        let r_new = problem.residuals(&candidate);
        if !all_finite(&r_new) {
            damping *= opts.damping_up;
            if damping > DAMPING_LIMIT {
                return Err(Error::DampingOverflow {
                    limit: DAMPING_LIMIT,
                });
            }
            continue;
        }
        let ssd_new = r_new.norm_squared();
        if ssd_new < ssd {
            x = candidate;
            r = r_new;
            ssd = ssd_new;
            jac = None;
            damping = (damping * opts.damping_down).max(1e-15);
        } else {
            damping = (damping * opts.damping_up).min(1e300);
        }
    };

    Ok(LmResult {
        solution: x,
        ssd,
        iterations,
        converged_by,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::cell::RefCell;

    struct Rosenbrock;

    impl Residuals for Rosenbrock {
        fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![1.0 - x[0], 10.0 * (x[1] - x[0] * x[0])])
        }
        fn jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
            Some(DMatrix::from_row_slice(
                2,
                2,
                &[-1.0, 0.0, -20.0 * x[0], 10.0],
            ))
        }
    }

    #[test]
    fn linear_residual_is_solved() {
        let a = DVector::from_vec(vec![3.0, -1.5, 0.25]);
        let p = FnResiduals(|x: &DVector<f64>| x - &a);
        let res = lm_solve(&p, &DVector::zeros(3), &LmOptions::default()).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(res.solution[i], a[i], epsilon = 1e-6);
        }
        assert!(res.ssd < 1e-10);
    }

    #[test]
    fn rosenbrock_converges_to_one_one() {
        let x0 = DVector::from_vec(vec![-1.2, 1.0]);
        let res = lm_solve(&Rosenbrock, &x0, &LmOptions::default()).unwrap();
        assert_abs_diff_eq!(res.solution[0], 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(res.solution[1], 1.0, epsilon = 1e-5);
        assert!(res.ssd < 1e-10);

        let fd = FnResiduals(|x: &DVector<f64>| Rosenbrock.residuals(x));
        let res = lm_solve(&fd, &x0, &LmOptions::default()).unwrap();
        assert_abs_diff_eq!(res.solution[0], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn underdetermined_lands_on_the_line() {
        let p = FnResiduals(|x: &DVector<f64>| DVector::from_element(1, x[0] + x[1] - 1.0));
        let a = lm_solve(&p, &DVector::from_vec(vec![0.0, 0.0]), &LmOptions::default()).unwrap();
        let b = lm_solve(&p, &DVector::from_vec(vec![5.0, -2.0]), &LmOptions::default()).unwrap();
        assert!(a.ssd < 1e-10 && b.ssd < 1e-10);
        assert!((a.solution[0] - b.solution[0]).abs() > 1.0);
    }

    #[test]
    fn ssd_never_increases_on_accepted_steps() {
        struct Tracked(RefCell<Vec<f64>>);
        impl Residuals for Tracked {
            fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
                Rosenbrock.residuals(x)
            }
            fn jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
                // called once per accepted iterate
                self.0.borrow_mut().push(Rosenbrock.residuals(x).norm_squared());
                Rosenbrock.jacobian(x)
            }
        }
        let t = Tracked(RefCell::new(Vec::new()));
        lm_solve(&t, &DVector::from_vec(vec![-1.2, 1.0]), &LmOptions::default()).unwrap();
        let seen = t.0.borrow();
        assert!(seen.len() > 2);
        assert!(seen.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn affine_system_matches_gauss_newton_in_one_step() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 3.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let p = FnResiduals(|x: &DVector<f64>| &a * x - &b);
        let opts = LmOptions {
            initial_damping: 1e-12,
            max_iterations: Some(1),
            ..LmOptions::default()
        };
        let res = lm_solve(&p, &DVector::zeros(2), &opts).unwrap();
        let gn = (a.transpose() * &a).cholesky().unwrap().solve(&(a.transpose() * &b));
        assert_abs_diff_eq!(res.solution[0], gn[0], epsilon = 1e-6);
        assert_abs_diff_eq!(res.solution[1], gn[1], epsilon = 1e-6);
    }

    #[test]
    fn non_finite_start_is_rejected() {
        let p = FnResiduals(|x: &DVector<f64>| x.map(|v| v.ln()));
        let err = lm_solve(&p, &DVector::from_element(1, -1.0), &LmOptions::default());
        assert!(matches!(err, Err(Error::InvalidStart)));
    }

    #[test]
    fn non_finite_candidates_are_rejected_not_fatal() {
        // sqrt is undefined left of zero; the first full step overshoots there.
        let p = FnResiduals(|x: &DVector<f64>| DVector::from_element(1, x[0].sqrt() - 0.1));
        let res = lm_solve(&p, &DVector::from_element(1, 4.0), &LmOptions::default()).unwrap();
        assert!(res.ssd < 1e-10);
    }

    #[test]
    fn deterministic() {
        let x0 = DVector::from_vec(vec![-1.2, 1.0]);
        let a = lm_solve(&Rosenbrock, &x0, &LmOptions::default()).unwrap();
        let b = lm_solve(&Rosenbrock, &x0, &LmOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn options_are_validated() {
        let bad = LmOptions {
            damping_down: 2.0,
            ..LmOptions::default()
        };
        assert!(matches!(
            lm_solve(&Rosenbrock, &DVector::zeros(2), &bad),
            Err(Error::Config(_))
        ));
    }
}
