//! Simulation study: clustered data from a known random-intercept model,
//! fitted directly and through moment-matched pseudo-data of each order.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glmm::{fit_glmm, CiMethod, Dataset, GlmmFit, GlmmOptions, SIGMA_NAME};
use crate::moments::{summarize_cluster, ClusterData, VariableMeta};
use crate::pseudogen::{generate_cluster, GenerateOptions};
use crate::seeding::{derive_seed, rng_for};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Truth {
    pub beta0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta32: f64,
    pub beta33: f64,
    pub sigma_u: f64,
}

impl Default for Truth {
    fn default() -> Self {
        Truth {
            beta0: -4.16,
            beta1: 0.32,
            beta2: -0.24,
            beta32: 1.20,
            beta33: 0.74,
            sigma_u: 1.195,
        }
    }
}

impl Truth {
    fn beta(&self) -> [f64; 5] {
        [self.beta0, self.beta1, self.beta2, self.beta32, self.beta33]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorLaws {
    pub normal_mean: f64,
    pub normal_variance: f64,
    pub poisson_lambda: f64,
    /// Probabilities of the three levels; the first is the reference.
    pub multinomial: [f64; 3],
}

impl Default for PredictorLaws {
    fn default() -> Self {
        PredictorLaws {
            normal_mean: 0.0,
            normal_variance: 1.0,
            poisson_lambda: 1.0,
            multinomial: [0.25, 0.55, 0.20],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub m: usize,
    pub n: usize,
    pub replicates: usize,
    pub truth: Truth,
    pub laws: PredictorLaws,
    pub moment_orders: Vec<u32>,
    pub seed: u64,
    pub n_quad: usize,
    pub level: f64,
    /// Standardize the numeric predictors per cluster before summarizing.
    pub standardize: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            m: 50,
            n: 60,
            replicates: 20,
            truth: Truth::default(),
            laws: PredictorLaws::default(),
            moment_orders: vec![2, 3, 4],
            seed: 1,
            n_quad: 7,
            level: 0.95,
            standardize: true,
        }
    }
}

pub const PREDICTOR_NAMES: [&str; 4] = ["x1", "x2", "x3_2", "x3_3"];
pub const PARAMETER_NAMES: [&str; 6] = ["(Intercept)", "x1", "x2", "x3_2", "x3_3", SIGMA_NAME];

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.m < 2 {
            return bad(format!("m must be ≥ 2 (got {})", self.m));
        }
        if self.n < 2 {
            return bad(format!("n must be ≥ 2 (got {})", self.n));
        }
        if self.replicates < 1 {
            return bad("replicates must be ≥ 1".into());
        }
        let p = self.laws.multinomial;
        if p.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("multinomial probabilities {p:?} must be in [0, 1] and sum to 1"));
        }
        if !(self.laws.normal_variance > 0.0 && self.laws.normal_variance.is_finite()) {
            return bad("normal_variance must be positive".into());
        }
        if !(self.laws.poisson_lambda > 0.0 && self.laws.poisson_lambda.is_finite()) {
            return bad("poisson_lambda must be positive".into());
        }
        if !(self.truth.sigma_u >= 0.0) {
            return bad("sigma_u must be ≥ 0".into());
        }
        if self.moment_orders.iter().any(|o| !(2..=4).contains(o)) {
            return bad(format!("moment orders must be 2, 3 or 4 (got {:?})", self.moment_orders));
        }
        let mut seen = self.moment_orders.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.moment_orders.len() {
            return bad("moment orders must be distinct".into());
        }
        self.glmm_options().validate()
    }

    pub fn glmm_options(&self) -> GlmmOptions {
        GlmmOptions {
            n_quad: self.n_quad,
            level: self.level,
            ci_method: CiMethod::Wald,
            ..GlmmOptions::default()
        }
    }

    fn truth_for(&self, param: usize) -> f64 {
        if param < 5 {
            self.truth.beta()[param]
        } else {
            self.truth.sigma_u
        }
    }
}

/// One dataset of the study, deterministic in `(cfg.seed, replicate)`.
pub fn simulate_dataset(cfg: &SimConfig, replicate: usize) -> Result<Dataset> {
    cfg.validate()?;
    let laws = &cfg.laws;
    let normal = Normal::new(laws.normal_mean, laws.normal_variance.sqrt())
        .map_err(|e| Error::Config(e.to_string()))?;
    let poisson = Poisson::new(laws.poisson_lambda).map_err(|e| Error::Config(e.to_string()))?;
    let beta = cfg.truth.beta();
    let clusters = (0..cfg.m)
        .map(|i| {
            let mut rng = rng_for(cfg.seed, &[replicate as u64, 0, i as u64]);
            let u = cfg.truth.sigma_u * rng.sample::<f64, _>(rand_distr::StandardNormal);
            let mut x = DMatrix::zeros(cfg.n, 4);
            let mut y = Vec::with_capacity(cfg.n);
            for r in 0..cfg.n {
                x[(r, 0)] = normal.sample(&mut rng);
                x[(r, 1)] = poisson.sample(&mut rng);
                let draw: f64 = rng.random();
                let level = if draw < laws.multinomial[0] {
                    0
                } else if draw < laws.multinomial[0] + laws.multinomial[1] {
                    1
                } else {
                    2
                };
                if level > 0 {
                    x[(r, 1 + level)] = 1.0;
                }
                let eta = beta[0] + (0..4).map(|j| beta[j + 1] * x[(r, j)]).sum::<f64>() + u;
                let p = 1.0 / (1.0 + (-eta).exp());
                y.push(u8::from(rng.random::<f64>() < p));
            }
            ClusterData::new(format!("cluster{:03}", i + 1), y, x)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(PREDICTOR_NAMES.iter().map(|s| s.to_string()).collect(), clusters)
}

/// `p ± 2·√(p(1 − p)/B)`.
pub fn coverage_band(p: f64, replicates: usize) -> (f64, f64) {
    let half = 2.0 * (p * (1.0 - p) / replicates as f64).sqrt();
    (p - half, p + half)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Arm {
    Sim,
    Pseudo(u32),
}

impl Arm {
    pub fn label(&self) -> String {
        match self {
            Arm::Sim => "sim".into(),
            Arm::Pseudo(k) => format!("ps{k}"),
        }
    }
}

/// Metadata for one cluster's predictors. Numeric columns that are
/// constant within the cluster are left unstandardized.
fn cluster_predictors(c: &ClusterData, standardize: bool) -> Vec<VariableMeta> {
    let numeric = |j: usize, name: &str| {
        let col = c.x.column(j);
        let first = col[0];
        if standardize && col.iter().any(|&v| v != first) {
            VariableMeta::numeric_standardized(name)
        } else {
            VariableMeta::numeric(name)
        }
    };
    vec![
        numeric(0, "x1"),
        numeric(1, "x2"),
        VariableMeta::dummy("x3", "2"),
        VariableMeta::dummy("x3", "3"),
    ]
}

/// Pseudo-data of one moment order for every cluster, on the original
/// predictor scale, plus the worst absolute moment difference.
pub fn pseudo_dataset(cfg: &SimConfig, data: &Dataset, order: u32, replicate: usize) -> Result<(Dataset, f64)> {
    let mut worst = 0.0f64;
    let clusters = data
        .clusters
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let bundle = summarize_cluster(c, "y", &cluster_predictors(c, cfg.standardize), order)?;
            let opts = GenerateOptions {
                seed: derive_seed(cfg.seed, &[replicate as u64, 1, u64::from(order), i as u64]),
                ..GenerateOptions::default()
            };
            let (pseudo, diag) = generate_cluster(&bundle, &opts)?;
            Ok((pseudo.to_original_scale(), diag.max_abs_difference()))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .map(|(c, d)| {
            worst = worst.max(d);
            c
        })
        .collect();
    Ok((Dataset::new(data.predictor_names.clone(), clusters)?, worst))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamRecord {
    pub replicate: usize,
    #[serde(serialize_with = "serialize_arm")]
    pub arm: Arm,
    pub parameter: String,
    pub truth: f64,
    pub estimate: f64,
    pub bias: f64,
    pub std_error: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub covered: bool,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmRecord {
    pub replicate: usize,
    #[serde(serialize_with = "serialize_arm")]
    pub arm: Arm,
    pub converged: bool,
    pub loglik: f64,
    pub aic: f64,
    /// Worst absolute moment difference over clusters (pseudo arms only).
    pub max_moment_difference: Option<f64>,
    pub error: Option<String>,
}

fn serialize_arm<S: serde::Serializer>(arm: &Arm, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&arm.label())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamSummary {
    #[serde(serialize_with = "serialize_arm")]
    pub arm: Arm,
    pub parameter: String,
    pub truth: f64,
    pub n_converged: usize,
    pub n_not_converged: usize,
    pub mean_bias: f64,
    pub mean_abs_bias: f64,
    /// Monte Carlo standard error of `mean_abs_bias`.
    pub mcse_abs_bias: f64,
    pub coverage: f64,
    pub coverage_band: (f64, f64),
    pub coverage_in_band: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AicSummary {
    #[serde(serialize_with = "serialize_arm")]
    pub arm: Arm,
    /// Replicates where both this arm and the sim arm converged.
    pub n_pairs: usize,
    pub mean_abs_difference: f64,
    pub fraction_within_10: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub config: SimConfig,
    pub arms: Vec<ArmRecord>,
    pub params: Vec<ParamRecord>,
    pub summary: Vec<ParamSummary>,
    pub aic: Vec<AicSummary>,
}

impl ExperimentReport {
    pub fn summary_for(&self, arm: Arm, parameter: &str) -> Option<&ParamSummary> {
        self.summary.iter().find(|s| s.arm == arm && s.parameter == parameter)
    }

    pub fn aic_for(&self, arm: Arm) -> Option<&AicSummary> {
        self.aic.iter().find(|s| s.arm == arm)
    }

    pub fn arm_record(&self, replicate: usize, arm: Arm) -> Option<&ArmRecord> {
        self.arms.iter().find(|a| a.replicate == replicate && a.arm == arm)
    }
}

fn records_for(cfg: &SimConfig, replicate: usize, arm: Arm, fit: &GlmmFit) -> Vec<ParamRecord> {
    PARAMETER_NAMES
        .iter()
        .enumerate()
        .map(|(k, &name)| {
            let truth = cfg.truth_for(k);
            let (estimate, std_error) = if k < 5 {
                (fit.beta[k], fit.se_beta[k])
            } else {
                (fit.sigma_u, fit.sigma_u * fit.se_log_sigma)
            };
            let ci = fit.interval(name).cloned().unwrap_or_else(|| fit.wald_interval(k, cfg.level));
            ParamRecord {
                replicate,
                arm,
                parameter: name.to_string(),
                truth,
                estimate,
                bias: estimate - truth,
                std_error,
                ci_lower: ci.lower,
                ci_upper: ci.upper,
                covered: ci.lower <= truth && truth <= ci.upper,
                converged: fit.converged,
            }
        })
        .collect()
}

fn evaluate_arm(
    cfg: &SimConfig,
    replicate: usize,
    arm: Arm,
    data: Result<(Dataset, Option<f64>)>,
) -> (ArmRecord, Vec<ParamRecord>) {
    let fitted = data.and_then(|(d, diff)| Ok((fit_glmm(&d, &cfg.glmm_options())?, diff)));
    match fitted {
        Ok((fit, diff)) => (
            ArmRecord {
                replicate,
                arm,
                converged: fit.converged,
                loglik: fit.loglik,
                aic: fit.aic,
                max_moment_difference: diff,
                error: None,
            },
            records_for(cfg, replicate, arm, &fit),
        ),
        Err(e) => (
            ArmRecord {
                replicate,
                arm,
                converged: false,
                loglik: f64::NAN,
                aic: f64::NAN,
                max_moment_difference: None,
                error: Some(e.to_string()),
            },
            Vec::new(),
        ),
    }
}

fn run_replicate(cfg: &SimConfig, replicate: usize) -> Result<Vec<(ArmRecord, Vec<ParamRecord>)>> {
    let data = simulate_dataset(cfg, replicate)?;
    let mut out = vec![evaluate_arm(cfg, replicate, Arm::Sim, Ok((data.clone(), None)))];
    for &order in &cfg.moment_orders {
        let pseudo = pseudo_dataset(cfg, &data, order, replicate).map(|(d, w)| (d, Some(w)));
        out.push(evaluate_arm(cfg, replicate, Arm::Pseudo(order), pseudo));
    }
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn summarize(cfg: &SimConfig, arms: &[ArmRecord], params: &[ParamRecord]) -> (Vec<ParamSummary>, Vec<AicSummary>) {
    let arm_list: Vec<Arm> = std::iter::once(Arm::Sim)
        .chain(cfg.moment_orders.iter().map(|&k| Arm::Pseudo(k)))
        .collect();
    let mut summary = Vec::new();
    for &arm in &arm_list {
        let n_not_converged = arms.iter().filter(|a| a.arm == arm && !a.converged).count();
        for (k, &name) in PARAMETER_NAMES.iter().enumerate() {
            let rows: Vec<&ParamRecord> = params
                .iter()
                .filter(|r| r.arm == arm && r.parameter == name && r.converged)
                .collect();
            let bias: Vec<f64> = rows.iter().map(|r| r.bias).collect();
            let abs_bias: Vec<f64> = bias.iter().map(|b| b.abs()).collect();
            let coverage = rows.iter().filter(|r| r.covered).count() as f64 / rows.len() as f64;
            let band = coverage_band(cfg.level, rows.len().max(1));
            summary.push(ParamSummary {
                arm,
                parameter: name.to_string(),
                truth: cfg.truth_for(k),
                n_converged: rows.len(),
                n_not_converged,
                mean_bias: mean(&bias),
                mean_abs_bias: mean(&abs_bias),
                mcse_abs_bias: sd(&abs_bias) / (abs_bias.len() as f64).sqrt(),
                coverage,
                coverage_band: band,
                coverage_in_band: band.0 <= coverage && coverage <= band.1,
            });
        }
    }
    let aic = arm_list[1..]
        .iter()
        .map(|&arm| {
            let diffs: Vec<f64> = (0..cfg.replicates)
                .filter_map(|r| {
                    let a = arms.iter().find(|x| x.replicate == r && x.arm == arm)?;
                    let s = arms.iter().find(|x| x.replicate == r && x.arm == Arm::Sim)?;
                    (a.converged && s.converged).then(|| (a.aic - s.aic).abs())
                })
                .collect();
            AicSummary {
                arm,
                n_pairs: diffs.len(),
                mean_abs_difference: mean(&diffs),
                fraction_within_10: diffs.iter().filter(|&&d| d < 10.0).count() as f64 / diffs.len() as f64,
            }
        })
        .collect();
    (summary, aic)
}

/// Runs every replicate (in parallel on the current rayon pool) and
/// aggregates bias, coverage and AIC agreement per arm. Replicates whose
/// fit did not converge are excluded from that arm's statistics.
pub fn run_experiment(cfg: &SimConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let per_rep: Vec<Vec<(ArmRecord, Vec<ParamRecord>)>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| run_replicate(cfg, r))
        .collect::<Result<_>>()?;
    let mut arms = Vec::new();
    let mut params = Vec::new();
    for (a, p) in per_rep.into_iter().flatten() {
        arms.push(a);
        params.extend(p);
    }
    let (summary, aic) = summarize(cfg, &arms, &params);
    Ok(ExperimentReport {
        config: cfg.clone(),
        arms,
        params,
        summary,
        aic,
    })
}
