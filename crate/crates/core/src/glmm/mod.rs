//! Maximum-likelihood logistic regression with and without a random
//! intercept per cluster.

mod fit;
mod logistic;
mod marginal;
mod profile;
mod report;

pub use fit::{
    fit_glmm, marginal_loglik, CiMethod, Dataset, GlmmFit, GlmmOptions, ParamInterval,
    INTERCEPT_NAME, SIGMA_NAME,
};
pub use logistic::{
    design_with_intercept, fit_logistic, logistic_grad, logistic_loglik, FixedFit,
    LogisticOptions,
};
pub use marginal::{cluster_marginal_loglik, MarginalObjective};
pub use profile::{profile_ci, profile_interval};
pub use report::{
    aic, bic, five_number_summary, render_comparison, render_table, significance_stars,
    CoefficientRow, FitReport, FiveNumber, ModelKind, VarianceRow,
};
