//! Cluster marginal likelihood of the random-intercept logistic model,
//! integrating `u ~ N(0, σ²)` out by (adaptive) Gauss–Hermite quadrature.

use nalgebra::{DMatrix, DVector};

use super::logistic::{design_with_intercept, log1pexp, sigmoid};
use crate::error::{Error, Result};
use crate::moments::ClusterData;
use crate::optim::{Objective, QuadratureRule};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug)]
pub(crate) struct PreparedCluster {
    pub y: Vec<f64>,
    pub design: DMatrix<f64>,
}

impl PreparedCluster {
    pub fn new(cluster: &ClusterData) -> Self {
        PreparedCluster {
            y: cluster.y_f64(),
            design: design_with_intercept(&cluster.x),
        }
    }
}

fn cond_loglik(offsets: &[f64], y: &[f64], u: f64) -> f64 {
    offsets
        .iter()
        .zip(y)
        .map(|(&o, &yi)| {
            let e = o + u;
            yi * e - log1pexp(e)
        })
        .sum()
}

/// Mode of `ℓ(u) − u²/(2σ²)` and the negated second derivative there.
fn conditional_mode(offsets: &[f64], y: &[f64], sigma: f64) -> (f64, f64) {
    let prec = 1.0 / (sigma * sigma);
    let h = |u: f64| cond_loglik(offsets, y, u) - 0.5 * prec * u * u;
    let derivs = |u: f64| {
        let mut d1 = -prec * u;
        let mut d2 = prec;
        for (&o, &yi) in offsets.iter().zip(y) {
            let p = sigmoid(o + u);
            d1 += yi - p;
            d2 += p * (1.0 - p);
        }
        (d1, d2)
    };
    let mut u = 0.0;
    let mut hu = h(u);
    for _ in 0..200 {
        let (d1, d2) = derivs(u);
        let step = d1 / d2;
        if step.abs() <= 1e-12 * (1.0 + u.abs()) {
            u += step;
            break;
        }
        let slack = 1e-12 * (1.0 + hu.abs());
        let mut t = 1.0;
        let mut next = u + step;
        let mut hn = h(next);
        while hn < hu - slack && t > 1e-10 {
            t *= 0.5;
            next = u + t * step;
            hn = h(next);
        }
        u = next;
        hu = hn;
    }
    (u, derivs(u).1)
}

fn log_sum_exp(v: &[f64]) -> (f64, f64) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = v.iter().map(|&a| (a - m).exp()).sum();
    (m + s.ln(), m)
}

pub(crate) struct ClusterEval {
    pub loglik: f64,
    /// Gradient over `(β, log σ)`, with quadrature nodes held fixed.
    pub grad: Option<DVector<f64>>,
    pub mode: f64,
}

pub(crate) fn eval_cluster(
    pc: &PreparedCluster,
    beta: &DVector<f64>,
    sigma: f64,
    rule: &QuadratureRule,
    adaptive: bool,
    want_grad: bool,
) -> ClusterEval {
    let offsets: Vec<f64> = (&pc.design * beta).iter().copied().collect();
    let q = beta.len();
    if sigma == 0.0 {
        let loglik = cond_loglik(&offsets, &pc.y, 0.0);
        let grad = want_grad.then(|| {
            let r = DVector::from_iterator(
                pc.y.len(),
                offsets.iter().zip(&pc.y).map(|(&o, &yi)| yi - sigmoid(o)),
            );
            let mut g = DVector::zeros(q + 1);
            g.rows_mut(0, q).copy_from(&(pc.design.transpose() * r));
            g
        });
        return ClusterEval {
            loglik,
            grad,
            mode: 0.0,
        };
    }

    if adaptive {
        adaptive_eval(pc, &offsets, sigma, rule, want_grad)
    } else {
        plain_eval(pc, &offsets, sigma, rule, want_grad)
    }
}

fn plain_eval(
    pc: &PreparedCluster,
    offsets: &[f64],
    sigma: f64,
    rule: &QuadratureRule,
    want_grad: bool,
) -> ClusterEval {
    let nodes: Vec<f64> = rule.nodes.iter().map(|&z| sigma * z).collect();
    let terms: Vec<f64> = nodes
        .iter()
        .zip(&rule.weights)
        .map(|(&u, &w)| w.ln() + cond_loglik(offsets, &pc.y, u))
        .collect();
    let (loglik, _) = log_sum_exp(&terms);
    let (mode, _) = conditional_mode(offsets, &pc.y, sigma);

    let grad = want_grad.then(|| {
        let q = pc.design.ncols();
        let mut r = pc.y.clone();
        let mut g_log_sigma = 0.0;
        for (&u, &t) in nodes.iter().zip(&terms) {
            let w = (t - loglik).exp();
            if w == 0.0 {
                continue;
            }
            let mut score_u = 0.0;
            for (rj, (&o, &yj)) in r.iter_mut().zip(offsets.iter().zip(&pc.y)) {
                let p = sigmoid(o + u);
                *rj -= w * p;
                score_u += yj - p;
            }
            // u = σz, so ∂u/∂log σ = u.
            g_log_sigma += w * score_u * u;
        }
        let mut g = DVector::zeros(q + 1);
        g.rows_mut(0, q)
            .copy_from(&(pc.design.transpose() * DVector::from_vec(r)));
        g[q] = g_log_sigma;
        g
    });
    ClusterEval { loglik, grad, mode }
}

/// Nodes sit at `û + τ z_k` with `τ = (−h''(û))^{-1/2}`. The gradient
/// differentiates through `û` and `τ` as well, so it is the exact
/// derivative of the returned approximation.
fn adaptive_eval(
    pc: &PreparedCluster,
    offsets: &[f64],
    sigma: f64,
    rule: &QuadratureRule,
    want_grad: bool,
) -> ClusterEval {
    let (mode, curv) = conditional_mode(offsets, &pc.y, sigma);
    let tau = curv.sqrt().recip();
    let log_prior_const = -HALF_LN_2PI - sigma.ln();
    let nodes: Vec<f64> = rule.nodes.iter().map(|&z| mode + tau * z).collect();
    let terms: Vec<f64> = nodes
        .iter()
        .zip(&rule.nodes)
        .zip(&rule.weights)
        .map(|((&u, &z), &w)| {
            w.ln() + cond_loglik(offsets, &pc.y, u) - 0.5 * (u / sigma).powi(2)
                + log_prior_const
                + 0.5 * z * z
        })
        .collect();
    // ∫ e^{H(u)} du = τ √(2π) Σ w_k e^{H(û+τz_k) + z_k²/2}
    let (lse, _) = log_sum_exp(&terms);
    let loglik = lse + tau.ln() + HALF_LN_2PI;

    let grad = want_grad.then(|| {
        let q = pc.design.ncols();
        let prec = 1.0 / (sigma * sigma);
        let n = pc.y.len();
        let mut v = DVector::zeros(n);
        let mut t = DVector::zeros(n);
        for (j, &o) in offsets.iter().enumerate() {
            let p = sigmoid(o + mode);
            v[j] = p * (1.0 - p);
            t[j] = v[j] * (1.0 - 2.0 * p);
        }
        let sum_t = t.sum();
        // Implicit derivatives of the mode and of c = −h''(û) over (β, log σ).
        let mut d_mode = DVector::zeros(q + 1);
        d_mode
            .rows_mut(0, q)
            .copy_from(&(-(pc.design.transpose() * &v) / curv));
        d_mode[q] = 2.0 * mode * prec / curv;
        let mut d_curv = d_mode.clone() * sum_t;
        let mut head = d_curv.rows_mut(0, q);
        head += pc.design.transpose() * &t;
        d_curv[q] -= 2.0 * prec;
        let d_log_tau = d_curv * (-0.5 / curv);

        let mut r = pc.y.clone();
        let mut g_log_sigma = 0.0;
        let mut mean_slope = 0.0;
        let mut mean_slope_z = 0.0;
        for ((&u, &z), &term) in nodes.iter().zip(&rule.nodes).zip(&terms) {
            let w = (term - lse).exp();
            if w == 0.0 {
                continue;
            }
            let mut slope = -u * prec;
            for (rj, (&o, &yj)) in r.iter_mut().zip(offsets.iter().zip(&pc.y)) {
                let p = sigmoid(o + u);
                *rj -= w * p;
                slope += yj - p;
            }
            g_log_sigma += w * (u * u * prec - 1.0);
            mean_slope += w * slope;
            mean_slope_z += w * slope * z;
        }
        let mut g = DVector::zeros(q + 1);
        g.rows_mut(0, q)
            .copy_from(&(pc.design.transpose() * DVector::from_vec(r)));
        g[q] = g_log_sigma;
        g + &d_log_tau + d_mode * mean_slope + d_log_tau * (tau * mean_slope_z)
    });
    ClusterEval { loglik, grad, mode }
}

/// `log ∫ g(y | u; β) φ(u; 0, σ²) du` for one cluster. `beta` starts with
/// the intercept. The adaptive rule recenters the nodes at the conditional
/// mode and rescales them by the Laplace curvature; `σ = 0` gives the
/// fixed-effects log-likelihood.
pub fn cluster_marginal_loglik(
    beta: &DVector<f64>,
    sigma_u: f64,
    cluster: &ClusterData,
    rule: &QuadratureRule,
    adaptive: bool,
) -> Result<f64> {
    if !(sigma_u >= 0.0) || !sigma_u.is_finite() {
        return Err(Error::InvalidInput(format!("sigma_u must be ≥ 0 (got {sigma_u})")));
    }
    if rule.is_empty() {
        return Err(Error::Config("quadrature rule needs at least one node".into()));
    }
    if beta.len() != cluster.p() + 1 {
        return Err(Error::InvalidInput(format!(
            "beta has {} entries for {} predictors plus intercept",
            beta.len(),
            cluster.p()
        )));
    }
    let pc = PreparedCluster::new(cluster);
    Ok(eval_cluster(&pc, beta, sigma_u, rule, adaptive, false).loglik)
}

/// Total marginal log-likelihood over clusters as a function of
/// `θ = (β, log σ)`.
pub struct MarginalObjective {
    clusters: Vec<PreparedCluster>,
    rule: QuadratureRule,
    adaptive: bool,
}

impl MarginalObjective {
    pub fn new(clusters: &[ClusterData], rule: QuadratureRule, adaptive: bool) -> Self {
        MarginalObjective {
            clusters: clusters.iter().map(PreparedCluster::new).collect(),
            rule,
            adaptive,
        }
    }

    fn split(theta: &DVector<f64>) -> (DVector<f64>, f64) {
        let q = theta.len() - 1;
        (theta.rows(0, q).into_owned(), theta[q].exp())
    }

    /// Conditional modes of the random intercepts at `θ`.
    pub fn conditional_modes(&self, theta: &DVector<f64>) -> Vec<f64> {
        let (beta, sigma) = Self::split(theta);
        self.clusters
            .iter()
            .map(|c| eval_cluster(c, &beta, sigma, &self.rule, self.adaptive, false).mode)
            .collect()
    }

    pub fn n_obs(&self) -> usize {
        self.clusters.iter().map(|c| c.y.len()).sum()
    }
}

impl Objective for MarginalObjective {
    fn value(&self, theta: &DVector<f64>) -> f64 {
        let (beta, sigma) = Self::split(theta);
        self.clusters
            .iter()
            .map(|c| eval_cluster(c, &beta, sigma, &self.rule, self.adaptive, false).loglik)
            .sum()
    }

    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        let (beta, sigma) = Self::split(theta);
        let mut g = DVector::zeros(theta.len());
        for c in &self.clusters {
            g += eval_cluster(c, &beta, sigma, &self.rule, self.adaptive, true)
                .grad
                .expect("requested");
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glmm::logistic::logistic_loglik;
    use crate::optim::{central_difference_gradient, gauss_hermite_rule};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn random_cluster(rng: &mut impl Rng, n: usize, p: usize) -> ClusterData {
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.5..1.5));
        let y = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.35)).collect();
        ClusterData::new("c", y, x).unwrap()
    }

    /// Trapezoid rule on a dense uniform grid spanning ±12σ.
    fn dense_grid(beta: &DVector<f64>, sigma: f64, c: &ClusterData) -> f64 {
        let pc = PreparedCluster::new(c);
        let off: Vec<f64> = (&pc.design * beta).iter().copied().collect();
        let points = 201;
        let h = 24.0 * sigma / (points - 1) as f64;
        let vals: Vec<f64> = (0..points)
            .map(|i| {
                let u = -12.0 * sigma + h * i as f64;
                cond_loglik(&off, &pc.y, u) - 0.5 * (u / sigma).powi(2) - HALF_LN_2PI - sigma.ln()
                    + h.ln()
            })
            .collect();
        log_sum_exp(&vals).0
    }

    #[test]
    fn zero_sigma_is_fixed_effects_loglik() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let c = random_cluster(&mut rng, 15, 2);
        let b = DVector::from_vec(vec![0.2, -0.4, 0.9]);
        let rule = gauss_hermite_rule(7).unwrap();
        let m = cluster_marginal_loglik(&b, 0.0, &c, &rule, true).unwrap();
        let f = logistic_loglik(&b, &c.y, &design_with_intercept(&c.x)).unwrap();
        assert_eq!(m, f);
    }

    #[test]
    fn single_observation_at_origin() {
        let c = ClusterData::new("c", vec![1], DMatrix::zeros(1, 0)).unwrap();
        let rule = gauss_hermite_rule(7).unwrap();
        let m = cluster_marginal_loglik(&DVector::zeros(1), 0.0, &c, &rule, true).unwrap();
        assert_abs_diff_eq!(m, 0.5f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn adaptive_rule_converges_to_dense_grid() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let c = random_cluster(&mut rng, 20, 2);
        let b = DVector::from_vec(vec![-0.7, 0.5, 0.2]);
        for sigma in [0.3, 1.0, 1.8] {
            let oracle = dense_grid(&b, sigma, &c);
            let err = |k| (cluster_marginal_loglik(&b, sigma, &c, &gauss_hermite_rule(k).unwrap(), true).unwrap() - oracle).abs();
            assert!(err(5) < 1e-3, "σ={sigma}: {}", err(5));
            assert!(err(9) < err(3), "σ={sigma}");
            assert!(err(25) < 1e-9, "σ={sigma}: {}", err(25));
        }
    }

    #[test]
    fn one_point_adaptive_rule_is_laplace() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let c = random_cluster(&mut rng, 12, 1);
        let b = DVector::from_vec(vec![0.1, -0.3]);
        let pc = PreparedCluster::new(&c);
        let off: Vec<f64> = (&pc.design * &b).iter().copied().collect();
        let sigma: f64 = 1.3;
        let (u, curv) = conditional_mode(&off, &pc.y, sigma);
        let laplace = cond_loglik(&off, &pc.y, u) - 0.5 * (u / sigma).powi(2) - sigma.ln() - 0.5 * curv.ln();
        let k1 = cluster_marginal_loglik(&b, sigma, &c, &gauss_hermite_rule(1).unwrap(), true).unwrap();
        assert_abs_diff_eq!(k1, laplace, epsilon = 1e-12);
    }

    #[test]
    fn non_adaptive_converges_with_more_points() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let c = random_cluster(&mut rng, 10, 1);
        let b = DVector::from_vec(vec![-0.2, 0.4]);
        let oracle = dense_grid(&b, 0.8, &c);
        let coarse = (oracle - cluster_marginal_loglik(&b, 0.8, &c, &gauss_hermite_rule(3).unwrap(), false).unwrap()).abs();
        let fine = (oracle - cluster_marginal_loglik(&b, 0.8, &c, &gauss_hermite_rule(40).unwrap(), false).unwrap()).abs();
        assert!(fine < coarse);
        assert!(fine < 1e-8, "{fine}");
    }

    #[test]
    fn invalid_arguments() {
        let c = ClusterData::new("c", vec![1], DMatrix::zeros(1, 0)).unwrap();
        let rule = gauss_hermite_rule(3).unwrap();
        assert!(matches!(
            cluster_marginal_loglik(&DVector::zeros(1), -1.0, &c, &rule, true),
            Err(Error::InvalidInput(_))
        ));
        let empty = QuadratureRule { nodes: vec![], weights: vec![] };
        assert!(matches!(
            cluster_marginal_loglik(&DVector::zeros(1), 1.0, &c, &empty, true),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let clusters: Vec<ClusterData> = (0..6).map(|_| random_cluster(&mut rng, 25, 2)).collect();
        for adaptive in [true, false] {
            let obj = MarginalObjective::new(&clusters, gauss_hermite_rule(9).unwrap(), adaptive);
            for _ in 0..5 {
                let theta = DVector::from_fn(4, |i, _| {
                    if i == 3 { rng.random_range(-1.0..0.7) } else { rng.random_range(-1.0..1.0) }
                });
                let g = obj.gradient(&theta);
                let fd = central_difference_gradient(|v| obj.value(v), &theta);
                for i in 0..4 {
                    let rel = (g[i] - fd[i]).abs() / (1.0 + fd[i].abs());
                    assert!(rel < 1e-5, "adaptive={adaptive} i={i}: {} vs {}", g[i], fd[i]);
                }
            }
        }
    }
}
