//! Moment-matched pseudo-data.
//!
//! The response is generated first as a strictly binary vector with the
//! bundle's event proportion. Predictors follow one at a time: predictor `j`
//! takes every moment target that involves it and otherwise only the
//! response or predictors generated before it, and Levenberg–Marquardt
//! drives the unweighted residuals `target − achieved` to zero.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{moments_for_targets, ClusterData, MultiIndex, SummaryBundle};
use crate::optim::{lm_solve, ConvergedBy, LmOptions, Residuals};
use crate::seeding::{derive_seed, rng_for};

/// SSD above which a predictor's fit is reported as a warning.
pub const WARN_SSD: f64 = 1e-6;

/// A solve ending above this SSD is retried, up to `MAX_ATTEMPTS` starts in
/// total: first from a normal start with the target mean and variance, then
/// from the best solution so far with added noise.
const RESTART_SSD: f64 = 1e-12;
const MAX_ATTEMPTS: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateOptions {
    pub lm: LmOptions,
    pub seed: u64,
    /// Predictor names in generation order; `None` keeps the bundle order.
    pub order: Option<Vec<String>>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            lm: LmOptions {
                max_iterations: Some(500),
                tol_ssd: 1e-24,
                tol_step: 1e-13,
                tol_grad: 1e-18,
                ..LmOptions::default()
            },
            seed: 0,
            order: None,
        }
    }
}

/// Generated data on the bundle's scale, predictors in bundle order.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoDataset {
    pub cluster_id: String,
    pub y: Vec<u8>,
    pub x: DMatrix<f64>,
    pub predictor_names: Vec<String>,
    pub achieved_ssd_per_variable: Vec<f64>,
    pub generation_seed: u64,
    centers: Vec<f64>,
    scales: Vec<f64>,
}

impl PseudoDataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Undoes provider-side standardization, giving data on the original
    /// measurement scale of every predictor.
    pub fn to_original_scale(&self) -> ClusterData {
        let mut x = self.x.clone();
        for (j, mut col) in x.column_iter_mut().enumerate() {
            let (c, s) = (self.centers[j], self.scales[j]);
            col.apply(|v| *v = c + s * *v);
        }
        ClusterData {
            cluster_id: self.cluster_id.clone(),
            y: self.y.clone(),
            x,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub multi_index: MultiIndex,
    pub target: f64,
    pub achieved: f64,
    pub abs_difference: f64,
}

/// Target against achieved value for every moment target of a bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentDiagnostics {
    pub cluster_id: String,
    pub rows: Vec<DiagnosticRow>,
    pub warnings: Vec<String>,
}

impl MomentDiagnostics {
    pub fn max_abs_difference(&self) -> f64 {
        self.rows.iter().map(|r| r.abs_difference).fold(0.0, f64::max)
    }

    pub fn max_abs_difference_by_order(&self) -> BTreeMap<u32, f64> {
        let mut out = BTreeMap::new();
        for r in &self.rows {
            let e = out.entry(r.multi_index.total_order()).or_insert(0.0f64);
            *e = e.max(r.abs_difference);
        }
        out
    }
}

/// Exactly `round(n·p̄)` ones in seeded random positions.
pub fn generate_response(n: usize, p_bar: f64, seed: u64) -> Result<Vec<u8>> {
    if n == 0 {
        return Err(Error::InvalidInput("response length must be positive".into()));
    }
    if !(0.0..=1.0).contains(&p_bar) {
        return Err(Error::InvalidInput(format!(
            "event proportion {p_bar} outside [0, 1]"
        )));
    }
    let ones = ((n as f64) * p_bar).round() as usize;
    let mut y: Vec<u8> = (0..n).map(|i| u8::from(i < ones)).collect();
    y.shuffle(&mut rng_for(seed, &[]));
    Ok(y)
}

/// Random start with the target mean and variance. Zero-one variables start
/// from Bernoulli draws plus `N(0, 0.1²)` jitter so the Jacobian is not
/// singular at the start.
pub fn initialize_predictor(bundle: &SummaryBundle, j: usize, seed: u64) -> Result<Vec<f64>> {
    let mean = bundle.mean_of(j).ok_or_else(|| missing(bundle, j))?;
    let var = bundle.variance_of(j).ok_or_else(|| missing(bundle, j))?;
    let mut rng = rng_for(seed, &[]);
    let n = bundle.n;
    if bundle.variables[j].kind.is_zero_one() {
        let q = mean.clamp(0.0, 1.0);
        let jitter = Normal::new(0.0, 0.1).expect("valid normal");
        Ok((0..n)
            .map(|_| f64::from(u8::from(rng.random::<f64>() < q)) + jitter.sample(&mut rng))
            .collect())
    } else {
        normal_start(mean, var, n, seed)
    }
}

fn normal_start(mean: f64, var: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    let law = Normal::new(mean, var.max(0.0).sqrt()).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = rng_for(seed, &[]);
    Ok((0..n).map(|_| law.sample(&mut rng)).collect())
}

fn perturbed(x: &DVector<f64>, sd: f64, seed: u64) -> Vec<f64> {
    let noise = Normal::new(0.0, sd).expect("finite sd");
    let mut rng = rng_for(seed, &[]);
    x.iter().map(|&v| v + noise.sample(&mut rng)).collect()
}

fn missing(bundle: &SummaryBundle, j: usize) -> Error {
    Error::MissingMoment(MultiIndex::unit(bundle.variables.len(), j))
}

/// One moment residual of the predictor being generated. `power` is the
/// predictor's exponent; `weights` is the product of the other centered
/// columns raised to their exponents (`None` for a pure moment).
struct Term {
    target: f64,
    is_mean: bool,
    power: i32,
    weights: Option<Vec<f64>>,
}

struct PredictorProblem {
    terms: Vec<Term>,
}

impl PredictorProblem {
    fn centered(x: &DVector<f64>) -> (f64, Vec<f64>) {
        let m = x.mean();
        (m, x.iter().map(|&v| v - m).collect())
    }
}

impl Residuals for PredictorProblem {
    fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = x.len() as f64;
        let (mean, c) = Self::centered(x);
        DVector::from_iterator(
            self.terms.len(),
            self.terms.iter().map(|t| {
                if t.is_mean {
                    return t.target - mean;
                }
                let s: f64 = match &t.weights {
                    Some(w) => c.iter().zip(w).map(|(&ci, &wi)| ci.powi(t.power) * wi).sum(),
                    None => c.iter().map(|&ci| ci.powi(t.power)).sum(),
                };
                t.target - s / n
            }),
        )
    }

    fn jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let len = x.len();
        let n = len as f64;
        let (_, c) = Self::centered(x);
        let mut jac = DMatrix::zeros(self.terms.len(), len);
        let mut row = vec![0.0; len];
        for (k, t) in self.terms.iter().enumerate() {
            if t.is_mean {
                jac.row_mut(k).fill(-1.0 / n);
                continue;
            }
            // d/dx_l (1/n) Σ c_i^a w_i = (a/n) [c_l^{a-1} w_l − mean_i(c_i^{a-1} w_i)]
            for (l, r) in row.iter_mut().enumerate() {
                let base = c[l].powi(t.power - 1);
                *r = match &t.weights {
                    Some(w) => base * w[l],
                    None => base,
                };
            }
            let avg = row.iter().sum::<f64>() / n;
            let a = f64::from(t.power);
            for (l, &r) in row.iter().enumerate() {
                jac[(k, l)] = -a / n * (r - avg);
            }
        }
        Some(jac)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorOutcome {
    pub values: Vec<f64>,
    pub ssd: f64,
    pub n_targets: usize,
    pub converged_by: Option<ConvergedBy>,
    pub warnings: Vec<String>,
}

/// The targets assigned to predictor `j` given which positions are already
/// generated.
fn targets_for(bundle: &SummaryBundle, j: usize, generated: &[bool]) -> Result<Vec<MultiIndex>> {
    Ok(bundle
        .spec()?
        .targets()
        .iter()
        .filter(|t| t.order_of(j) > 0 && t.support().all(|k| k == j || generated[k]))
        .cloned()
        .collect())
}

/// Generates predictor `j` (a position in `bundle.variables`) given the
/// columns already generated, keyed by position. The response must be among
/// them.
pub fn generate_predictor(
    bundle: &SummaryBundle,
    j: usize,
    previous: &[(usize, &[f64])],
    lm: &LmOptions,
    seed: u64,
) -> Result<PredictorOutcome> {
    let n = bundle.n;
    let name = &bundle.variables[j].name;
    let mut generated = vec![false; bundle.variables.len()];
    let mut centered: Vec<Option<Vec<f64>>> = vec![None; bundle.variables.len()];
    for &(k, col) in previous {
        if col.len() != n {
            return Err(Error::InvalidInput(format!(
                "column for position {k} has length {} (expected {n})",
                col.len()
            )));
        }
        generated[k] = true;
        let m = col.iter().sum::<f64>() / n as f64;
        centered[k] = Some(col.iter().map(|&v| v - m).collect());
    }
    if !generated[bundle.response_position()] {
        return Err(Error::InvalidInput(
            "the response must be generated before any predictor".into(),
        ));
    }

    let indices = targets_for(bundle, j, &generated)?;
    let mut terms = Vec::with_capacity(indices.len());
    for idx in &indices {
        let target = bundle
            .moment(idx)
            .ok_or_else(|| Error::MissingMoment(idx.clone()))?;
        let others: Vec<usize> = idx.support().filter(|&k| k != j).collect();
        let weights = if others.is_empty() {
            None
        } else {
            let mut w = vec![1.0; n];
            for k in others {
                let col = centered[k].as_ref().expect("support limited to generated columns");
                let r = idx.order_of(k) as i32;
                for (wi, &ci) in w.iter_mut().zip(col) {
                    *wi *= ci.powi(r);
                }
            }
            Some(w)
        };
        terms.push(Term {
            target,
            is_mean: idx.total_order() == 1,
            power: idx.order_of(j) as i32,
            weights,
        });
    }
    let n_targets = terms.len();
    let problem = PredictorProblem { terms };
    let mut warnings = Vec::new();
    if n_targets > n {
        warnings.push(format!(
            "`{name}`: overdetermined ({n_targets} targets for {n} observations); \
             exact matching is not guaranteed"
        ));
    }

    let mean = bundle.mean_of(j).ok_or_else(|| missing(bundle, j))?;
    let var = bundle.variance_of(j).ok_or_else(|| missing(bundle, j))?;
    if var <= 1e-14 * mean.abs().max(1.0) {
        // Constant column: every central moment vanishes.
        let values = vec![mean; n];
        let ssd = problem
            .residuals(&DVector::from_column_slice(&values))
            .norm_squared();
        return Ok(PredictorOutcome {
            values,
            ssd,
            n_targets,
            converged_by: None,
            warnings,
        });
    }

    let solve = |start: Vec<f64>| -> Result<(DVector<f64>, f64, ConvergedBy)> {
        let res = lm_solve(&problem, &DVector::from_vec(start), lm)?;
        Ok((res.solution, res.ssd, res.converged_by))
    };
    let mut best = solve(initialize_predictor(bundle, j, derive_seed(seed, &[0]))?)?;
    let mut attempt = 1;
    while best.1 > RESTART_SSD && n > n_targets && attempt < MAX_ATTEMPTS {
        let attempt_seed = derive_seed(seed, &[attempt]);
        let start = if attempt == 1 {
            normal_start(mean, var, n, attempt_seed)?
        } else {
            perturbed(&best.0, 0.5 * var.sqrt(), attempt_seed)
        };
        let next = solve(start)?;
        if next.1 < best.1 {
            best = next;
        }
        attempt += 1;
    }
    let (x, ssd, by) = best;
    if ssd > WARN_SSD {
        warnings.push(format!(
            "`{name}`: moment SSD {ssd:.3e} exceeds {WARN_SSD:e}"
        ));
    }
    Ok(PredictorOutcome {
        values: x.iter().copied().collect(),
        ssd,
        n_targets,
        converged_by: Some(by),
        warnings,
    })
}

fn generation_order(bundle: &SummaryBundle, order: Option<&[String]>) -> Result<Vec<usize>> {
    let predictors = bundle.predictor_positions();
    let Some(names) = order else {
        return Ok(predictors);
    };
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let pos = predictors
            .iter()
            .copied()
            .find(|&k| &bundle.variables[k].name == name)
            .ok_or_else(|| Error::Config(format!("unknown predictor `{name}` in generation order")))?;
        if out.contains(&pos) {
            return Err(Error::Config(format!("predictor `{name}` listed twice")));
        }
        out.push(pos);
    }
    if out.len() != predictors.len() {
        return Err(Error::Config(
            "generation order must list every predictor exactly once".into(),
        ));
    }
    Ok(out)
}

/// Generates a whole cluster: response first, then predictors in order.
pub fn generate_cluster(
    bundle: &SummaryBundle,
    opts: &GenerateOptions,
) -> Result<(PseudoDataset, MomentDiagnostics)> {
    let spec = bundle.spec()?;
    let n = bundle.n;
    let nvars = bundle.variables.len();
    let resp = bundle.response_position();
    let order = generation_order(bundle, opts.order.as_deref())?;

    let y = generate_response(n, bundle.response_mean, derive_seed(opts.seed, &[0]))?;
    let mut columns: Vec<Option<Vec<f64>>> = vec![None; nvars];
    columns[resp] = Some(y.iter().map(|&v| f64::from(v)).collect());
    let mut ssd_by_pos = vec![0.0; nvars];
    let mut warnings = Vec::new();

    for &j in &order {
        let previous: Vec<(usize, &[f64])> = columns
            .iter()
            .enumerate()
            .filter_map(|(k, c)| c.as_deref().map(|c| (k, c)))
            .collect();
        let out = generate_predictor(
            bundle,
            j,
            &previous,
            &opts.lm,
            derive_seed(opts.seed, &[1, j as u64]),
        )?;
        ssd_by_pos[j] = out.ssd;
        warnings.extend(out.warnings);
        columns[j] = Some(out.values);
    }

    let cols: Vec<Vec<f64>> = columns.into_iter().map(|c| c.expect("all generated")).collect();
    let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
    let achieved = moments_for_targets(&refs, spec.targets())?;
    let rows = spec
        .targets()
        .iter()
        .zip(achieved)
        .map(|(idx, a)| {
            let t = bundle.moments[idx];
            DiagnosticRow {
                multi_index: idx.clone(),
                target: t,
                achieved: a,
                abs_difference: (t - a).abs(),
            }
        })
        .collect();

    let predictors = bundle.predictor_positions();
    let x = DMatrix::from_fn(n, predictors.len(), |i, c| cols[predictors[c]][i]);
    let dataset = PseudoDataset {
        cluster_id: bundle.cluster_id.clone(),
        y,
        x,
        predictor_names: predictors
            .iter()
            .map(|&k| bundle.variables[k].name.clone())
            .collect(),
        achieved_ssd_per_variable: predictors.iter().map(|&k| ssd_by_pos[k]).collect(),
        generation_seed: opts.seed,
        centers: predictors
            .iter()
            .map(|&k| {
                let v = &bundle.variables[k];
                if v.standardized { v.center } else { 0.0 }
            })
            .collect(),
        scales: predictors
            .iter()
            .map(|&k| {
                let v = &bundle.variables[k];
                if v.standardized { v.scale } else { 1.0 }
            })
            .collect(),
    };
    let diagnostics = MomentDiagnostics {
        cluster_id: bundle.cluster_id.clone(),
        rows,
        warnings,
    };
    Ok((dataset, diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::{summarize_cluster, VariableMeta};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn simulated(n: usize, seed: u64) -> (ClusterData, Vec<VariableMeta>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Normal::new(0.0, 1.0).unwrap();
        let mut x = DMatrix::zeros(n, 3);
        let mut y = vec![0u8; n];
        for i in 0..n {
            let a: f64 = z.sample(&mut rng);
            let b: f64 = (z.sample(&mut rng) * 0.5 + 0.3 * a).exp();
            let d = u8::from(rng.random::<f64>() < 0.3);
            x[(i, 0)] = 40.0 + 12.0 * a;
            x[(i, 1)] = b;
            x[(i, 2)] = f64::from(d);
            let eta = -0.5 + 0.8 * a + 0.6 * f64::from(d);
            y[i] = u8::from(rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp()));
        }
        let vars = vec![
            VariableMeta::numeric_standardized("age"),
            VariableMeta::numeric("dose"),
            VariableMeta::binary("flag"),
        ];
        (ClusterData::new("c", y, x).unwrap(), vars)
    }

    fn bundle(n: usize, seed: u64, order: u32) -> SummaryBundle {
        let (data, vars) = simulated(n, seed);
        summarize_cluster(&data, "y", &vars, order).unwrap()
    }

    #[test]
    fn response_counts() {
        let y = generate_response(10, 0.3, 1).unwrap();
        assert_eq!(y.iter().filter(|&&v| v == 1).count(), 3);
        assert!(generate_response(5, 0.0, 1).unwrap().iter().all(|&v| v == 0));
        let a = generate_response(4, 0.5, 1).unwrap();
        let b = generate_response(4, 0.5, 2).unwrap();
        assert_eq!(a.iter().sum::<u8>(), 2);
        assert_eq!(b.iter().sum::<u8>(), 2);
        assert!(generate_response(4, 1.5, 1).is_err());
        assert!(generate_response(0, 0.5, 1).is_err());
    }

    #[test]
    fn single_predictor_order_two() {
        let mut moments = BTreeMap::new();
        let m = |v: &[u32]| MultiIndex::new(v.to_vec());
        moments.insert(m(&[1, 0]), 0.5);
        moments.insert(m(&[0, 1]), 0.0);
        moments.insert(m(&[2, 0]), 0.25);
        moments.insert(m(&[1, 1]), 0.1);
        moments.insert(m(&[0, 2]), 1.0);
        let b = SummaryBundle {
            cluster_id: "k".into(),
            n: 100,
            variables: vec![VariableMeta::response("y"), VariableMeta::numeric("x")],
            max_order: 2,
            moments,
            response_mean: 0.5,
        };
        let (ds, diag) = generate_cluster(&b, &GenerateOptions::default()).unwrap();
        assert_eq!(diag.rows.len(), 5);
        assert!(diag.max_abs_difference() < 1e-6, "{:?}", diag.rows);
        let x: Vec<f64> = ds.x.column(0).iter().copied().collect();
        let y = ds.y.iter().map(|&v| f64::from(v)).collect::<Vec<_>>();
        let cov = crate::moments::joint_central_moment(&[&y, &x], &m(&[1, 1])).unwrap();
        assert!((cov - 0.1).abs() < 1e-6);
    }

    #[test]
    fn underdetermined_third_order_hits_ssd_floor() {
        let b = bundle(100, 3, 3);
        let (ds, diag) = generate_cluster(&b, &GenerateOptions::default()).unwrap();
        assert!(ds.achieved_ssd_per_variable.iter().all(|&s| s < 1e-8), "{:?}", ds.achieved_ssd_per_variable);
        assert!(diag.warnings.is_empty(), "{:?}", diag.warnings);
        assert!(diag.max_abs_difference() < 1e-6);
    }

    #[test]
    fn tiny_cluster_fourth_order_records_warning() {
        let b = bundle(2, 5, 4);
        let (_, diag) = generate_cluster(&b, &GenerateOptions::default()).unwrap();
        assert!(diag.warnings.iter().any(|w| w.contains("overdetermined")));
    }

    #[test]
    fn even_split_matches_response_mean_exactly() {
        let mut b = bundle(60, 9, 2);
        // force a 50/50 response by rebuilding from balanced data
        let (mut data, vars) = simulated(60, 9);
        for (i, y) in data.y.iter_mut().enumerate() {
            *y = u8::from(i % 2 == 0);
        }
        b = summarize_cluster(&data, "y", &vars, b.max_order).unwrap();
        let (ds, _) = generate_cluster(&b, &GenerateOptions::default()).unwrap();
        let mean = ds.y.iter().map(|&v| f64::from(v)).sum::<f64>() / 60.0;
        assert_eq!(mean, 0.5);
    }

    #[test]
    fn deterministic_for_a_seed() {
        let b = bundle(80, 4, 3);
        let opts = GenerateOptions {
            seed: 42,
            ..GenerateOptions::default()
        };
        let a = generate_cluster(&b, &opts).unwrap();
        let c = generate_cluster(&b, &opts).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn original_scale_restores_standardized_columns() {
        let (data, vars) = simulated(120, 8);
        let b = summarize_cluster(&data, "y", &vars, 3).unwrap();
        let (ds, _) = generate_cluster(&b, &GenerateOptions::default()).unwrap();
        let orig = ds.to_original_scale();
        let again = summarize_cluster(&orig, "y", &vars, 3).unwrap();
        for (idx, v) in &b.moments {
            assert!((again.moments[idx] - v).abs() < 1e-6, "{idx}");
        }
        let mean_age = orig.x.column(0).mean();
        assert!((mean_age - data.x.column(0).mean()).abs() < 1e-6);
    }

    #[test]
    fn initial_values_follow_targets() {
        let b = bundle(100, 12, 2);
        let start = initialize_predictor(&b, 1, 3).unwrap();
        let m = start.iter().sum::<f64>() / start.len() as f64;
        assert!(m.abs() < 0.5);

        let mut moments = BTreeMap::new();
        let mi = |v: &[u32]| MultiIndex::new(v.to_vec());
        moments.insert(mi(&[0, 1]), 0.25);
        moments.insert(mi(&[0, 2]), 0.1875);
        let bin = SummaryBundle {
            cluster_id: "b".into(),
            n: 100,
            variables: vec![VariableMeta::response("y"), VariableMeta::binary("z")],
            max_order: 2,
            moments,
            response_mean: 0.5,
        };
        let start = initialize_predictor(&bin, 1, 17).unwrap();
        let near_one = start.iter().filter(|&&v| (v - 1.0).abs() < 0.5).count();
        assert!((15..=35).contains(&near_one), "{near_one}");
    }

    #[test]
    fn custom_order_is_respected_and_validated() {
        let b = bundle(90, 6, 3);
        let opts = GenerateOptions {
            order: Some(vec!["flag".into(), "dose".into(), "age".into()]),
            ..GenerateOptions::default()
        };
        let (_, diag) = generate_cluster(&b, &opts).unwrap();
        assert!(diag.max_abs_difference() < 1e-6);
        let bad = GenerateOptions {
            order: Some(vec!["flag".into()]),
            ..GenerateOptions::default()
        };
        assert!(matches!(generate_cluster(&b, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let b = bundle(30, 2, 4);
        let y: Vec<f64> = generate_response(30, b.response_mean, 1)
            .unwrap()
            .iter()
            .map(|&v| f64::from(v))
            .collect();
        let x1 = initialize_predictor(&b, 1, 5).unwrap();
        let mut generated = vec![false; 4];
        generated[0] = true;
        generated[1] = true;
        let idx = targets_for(&b, 2, &generated).unwrap();
        let cols = [y.clone(), x1.clone()];
        let terms = idx
            .iter()
            .map(|t| {
                let others: Vec<usize> = t.support().filter(|&k| k != 2).collect();
                let weights = (!others.is_empty()).then(|| {
                    let mut w = vec![1.0; 30];
                    for k in others {
                        let m = cols[k].iter().sum::<f64>() / 30.0;
                        for (wi, v) in w.iter_mut().zip(&cols[k]) {
                            *wi *= (v - m).powi(t.order_of(k) as i32);
                        }
                    }
                    w
                });
                Term {
                    target: b.moments[t],
                    is_mean: t.total_order() == 1,
                    power: t.order_of(2) as i32,
                    weights,
                }
            })
            .collect();
        let p = PredictorProblem { terms };
        let x = DVector::from_vec(initialize_predictor(&b, 2, 9).unwrap());
        let jac = p.jacobian(&x).unwrap();
        let r0 = p.residuals(&x);
        let mut probe = x.clone();
        for l in [0usize, 7, 29] {
            let h = 1e-6;
            probe[l] += h;
            let up = p.residuals(&probe);
            probe[l] -= 2.0 * h;
            let down = p.residuals(&probe);
            probe[l] += h;
            for k in 0..r0.len() {
                let fd = (up[k] - down[k]) / (2.0 * h);
                assert!((fd - jac[(k, l)]).abs() < 1e-6 * (1.0 + fd.abs()), "{k} {l}");
            }
        }
    }
}
