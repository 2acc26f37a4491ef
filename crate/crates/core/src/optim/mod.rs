//! Numerical kernels shared by pseudo-data generation and model fitting.

mod gradcheck;
mod lm;
mod quadrature;
mod quasi_newton;

pub use gradcheck::{central_difference_gradient, check_gradient};
pub use lm::{lm_solve, ConvergedBy, FnResiduals, LmOptions, LmResult, Residuals};
pub use quadrature::{gauss_hermite_rule, QuadratureRule, MAX_QUADRATURE_POINTS};
pub use quasi_newton::{maximize_loglik, Maximum, MaximizeOptions, Objective};
