//! Sample central moments and per-cluster summary bundles.
//!
//! All moments use divisor `n`. Order-1 entries of a bundle hold the raw
//! means; every entry of total order two or more holds a central moment
//! computed by two-pass accumulation (means first, then centered powers).

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SUPPORTED_ORDERS: std::ops::RangeInclusive<u32> = 2..=4;

/// Per-variable exponents of a joint moment, one entry per variable in the
/// bundle's variable order.
///
/// Ordering is canonical: by total order, then lexicographically descending,
/// so `(1,0,0) < (0,1,0) < (2,0,0) < (1,1,0)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiIndex(Vec<u32>);

impl MultiIndex {
    pub fn new(orders: Vec<u32>) -> Self {
        MultiIndex(orders)
    }

    pub fn unit(len: usize, pos: usize) -> Self {
        let mut v = vec![0; len];
        v[pos] = 1;
        MultiIndex(v)
    }

    pub fn orders(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total_order(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn order_of(&self, pos: usize) -> u32 {
        self.0[pos]
    }

    /// Positions with a non-zero exponent.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &r)| r > 0)
            .map(|(j, _)| j)
    }
}

impl Ord for MultiIndex {
    fn cmp(&self, other: &Self) -> Ordering {
        self.total_order()
            .cmp(&other.total_order())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for MultiIndex {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, r) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{r}")?;
        }
        write!(f, ")")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableKind {
    BinaryResponse,
    Numeric,
    Binary,
    Dummy { level: String, parent: String },
}

impl VariableKind {
    /// Response, binary and dummy variables hold 0/1 values.
    pub fn is_zero_one(&self) -> bool {
        !matches!(self, VariableKind::Numeric)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableMeta {
    pub name: String,
    pub kind: VariableKind,
    pub standardized: bool,
    pub center: f64,
    pub scale: f64,
}

impl VariableMeta {
    fn plain(name: impl Into<String>, kind: VariableKind) -> Self {
        VariableMeta {
            name: name.into(),
            kind,
            standardized: false,
            center: 0.0,
            scale: 1.0,
        }
    }

    pub fn response(name: impl Into<String>) -> Self {
        Self::plain(name, VariableKind::BinaryResponse)
    }

    pub fn numeric(name: impl Into<String>) -> Self {
        Self::plain(name, VariableKind::Numeric)
    }

    /// Numeric predictor that the provider standardizes before summarizing.
    pub fn numeric_standardized(name: impl Into<String>) -> Self {
        VariableMeta {
            standardized: true,
            ..Self::numeric(name)
        }
    }

    pub fn binary(name: impl Into<String>) -> Self {
        Self::plain(name, VariableKind::Binary)
    }

    pub fn dummy(parent: &str, level: &str) -> Self {
        Self::plain(
            dummy_name(parent, level),
            VariableKind::Dummy {
                level: level.to_string(),
                parent: parent.to_string(),
            },
        )
    }

    pub fn is_response(&self) -> bool {
        self.kind == VariableKind::BinaryResponse
    }
}

pub fn dummy_name(parent: &str, level: &str) -> String {
    format!("{parent}_{level}")
}

/// The moment targets implied by a variable list and a maximum order.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentSpec {
    n_variables: usize,
    response: usize,
    max_order: u32,
    targets: Vec<MultiIndex>,
}

impl MomentSpec {
    pub fn targets(&self) -> &[MultiIndex] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn max_order(&self) -> u32 {
        self.max_order
    }

    pub fn n_variables(&self) -> usize {
        self.n_variables
    }

    pub fn response_position(&self) -> usize {
        self.response
    }

    /// Number of values a provider ships in the packed matrix layout: the
    /// mean vector, the symmetric order-2 matrix, and for order three two
    /// symmetric predictor matrices (`(2,1)`-type and `(1,2)`-type entries)
    /// whose diagonals both carry the pure third moments, plus the vector of
    /// order-3 moments over three distinct predictors. Higher orders are
    /// shipped as a flat list. This differs from [`len`](Self::len) only by
    /// the repeated order-3 diagonal.
    pub fn summary_measure_count(&self) -> usize {
        let predictors = self.n_variables - 1;
        if self.max_order >= 3 {
            self.targets.len() + predictors
        } else {
            self.targets.len()
        }
    }
}

/// All multi-indices of total order `k` supported on `positions`.
fn indices_of_order(positions: &[usize], len: usize, k: u32) -> Vec<MultiIndex> {
    fn rec(
        positions: &[usize],
        remaining: u32,
        current: &mut Vec<u32>,
        out: &mut Vec<MultiIndex>,
    ) {
        match positions.split_first() {
            None => {
                if remaining == 0 {
                    out.push(MultiIndex(current.clone()));
                }
            }
            Some((&p, rest)) => {
                for r in (0..=remaining).rev() {
                    current[p] = r;
                    rec(rest, remaining - r, current, out);
                }
                current[p] = 0;
            }
        }
    }
    let mut out = Vec::new();
    let mut current = vec![0; len];
    rec(positions, k, &mut current, &mut out);
    out
}

/// Enumerates moment targets: every mean, every order-2 index over all
/// variables (response included), and for orders 3..=`max_order` every
/// index over the predictors only.
pub fn enumerate_moment_spec(variables: &[VariableMeta], max_order: u32) -> Result<MomentSpec> {
    if !SUPPORTED_ORDERS.contains(&max_order) {
        return Err(Error::Config(format!(
            "max_order must be 2, 3 or 4 (got {max_order})"
        )));
    }
    let responses: Vec<usize> = variables
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_response())
        .map(|(j, _)| j)
        .collect();
    if responses.len() != 1 {
        return Err(Error::InvalidInput(format!(
            "exactly one binary response variable is required (found {})",
            responses.len()
        )));
    }
    let response = responses[0];
    let len = variables.len();
    let all: Vec<usize> = (0..len).collect();
    let predictors: Vec<usize> = (0..len).filter(|&j| j != response).collect();

    let mut targets = indices_of_order(&all, len, 1);
    targets.extend(indices_of_order(&all, len, 2));
    for k in 3..=max_order {
        targets.extend(indices_of_order(&predictors, len, k));
    }
    targets.sort();
    Ok(MomentSpec {
        n_variables: len,
        response,
        max_order,
        targets,
    })
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Univariate sample central moment of order `r` (divisor `n`).
pub fn central_moment(x: &[f64], r: u32) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::InvalidInput("central moment of an empty vector".into()));
    }
    if r == 0 {
        return Err(Error::InvalidInput("moment order must be positive".into()));
    }
    let m = mean(x);
    Ok(x.iter().map(|&v| (v - m).powi(r as i32)).sum::<f64>() / x.len() as f64)
}

/// Columns shifted by their own means, ready for repeated moment evaluation.
#[derive(Clone, Debug)]
pub struct CenteredColumns {
    means: Vec<f64>,
    centered: Vec<Vec<f64>>,
}

impl CenteredColumns {
    pub fn new(columns: &[&[f64]]) -> Result<Self> {
        let n = columns.first().map_or(0, |c| c.len());
        if n == 0 {
            return Err(Error::InvalidInput("no observations".into()));
        }
        if columns.iter().any(|c| c.len() != n) {
            return Err(Error::InvalidInput("columns differ in length".into()));
        }
        let means: Vec<f64> = columns.iter().map(|c| mean(c)).collect();
        let centered = columns
            .iter()
            .zip(&means)
            .map(|(c, &m)| c.iter().map(|&v| v - m).collect())
            .collect();
        Ok(CenteredColumns { means, centered })
    }

    pub fn n(&self) -> usize {
        self.centered[0].len()
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn centered(&self, j: usize) -> &[f64] {
        &self.centered[j]
    }

    /// Mean for order-1 indices, central moment otherwise.
    pub fn moment(&self, index: &MultiIndex) -> f64 {
        let support: Vec<(usize, i32)> = index
            .support()
            .map(|j| (j, index.order_of(j) as i32))
            .collect();
        if index.total_order() == 1 {
            return self.means[support[0].0];
        }
        let n = self.n();
        let mut acc = 0.0;
        for i in 0..n {
            let mut prod = 1.0;
            for &(j, r) in &support {
                prod *= self.centered[j][i].powi(r);
            }
            acc += prod;
        }
        acc / n as f64
    }
}

/// Joint sample central moment `(1/n) Σ_i Π_j (x_ji − x̄_j)^{r_j}`.
pub fn joint_central_moment(columns: &[&[f64]], r: &MultiIndex) -> Result<f64> {
    if columns.len() != r.len() {
        return Err(Error::InvalidInput(format!(
            "multi-index has {} entries but {} columns were given",
            r.len(),
            columns.len()
        )));
    }
    if r.total_order() < 2 {
        return Err(Error::InvalidInput(
            "joint central moments need total order of at least 2".into(),
        ));
    }
    Ok(CenteredColumns::new(columns)?.moment(r))
}

/// Evaluates each target on `columns` (means for order-1 indices).
pub fn moments_for_targets(columns: &[&[f64]], targets: &[MultiIndex]) -> Result<Vec<f64>> {
    let cc = CenteredColumns::new(columns)?;
    Ok(targets.iter().map(|t| cc.moment(t)).collect())
}

/// Dummy-codes a categorical column. The first level is the reference and
/// gets no column; the remaining `L − 1` columns follow the level order.
pub fn encode_dummies<S: AsRef<str>>(column: &[S], levels: &[S]) -> Result<DMatrix<f64>> {
    if levels.len() < 2 {
        return Err(Error::InvalidInput(
            "a categorical variable needs at least two levels".into(),
        ));
    }
    for (i, a) in levels.iter().enumerate() {
        if levels[..i].iter().any(|b| b.as_ref() == a.as_ref()) {
            return Err(Error::InvalidInput(format!(
                "duplicate level `{}`",
                a.as_ref()
            )));
        }
    }
    let mut out = DMatrix::zeros(column.len(), levels.len() - 1);
    for (i, v) in column.iter().enumerate() {
        let pos = levels
            .iter()
            .position(|l| l.as_ref() == v.as_ref())
            .ok_or_else(|| Error::InvalidInput(format!("unseen level `{}`", v.as_ref())))?;
        if pos > 0 {
            out[(i, pos - 1)] = 1.0;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Standardized {
    pub values: Vec<f64>,
    pub center: f64,
    pub scale: f64,
}

/// Centers and scales a column to mean 0 and divisor-`n` standard deviation 1.
pub fn standardize(column: &[f64]) -> Result<Standardized> {
    standardize_named(column, "column")
}

fn standardize_named(column: &[f64], name: &str) -> Result<Standardized> {
    let center = mean(column);
    let scale = central_moment(column, 2)?.sqrt();
    if !(scale > 1e-12 * center.abs().max(1.0)) {
        return Err(Error::DegenerateScale { name: name.into() });
    }
    Ok(Standardized {
        values: column.iter().map(|&v| (v - center) / scale).collect(),
        center,
        scale,
    })
}

/// Individual-level data of one cluster: binary responses and an `n × p`
/// predictor matrix whose columns follow the predictor metadata order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterData {
    pub cluster_id: String,
    pub y: Vec<u8>,
    pub x: DMatrix<f64>,
}

impl ClusterData {
    pub fn new(cluster_id: impl Into<String>, y: Vec<u8>, x: DMatrix<f64>) -> Result<Self> {
        let cluster_id = cluster_id.into();
        if y.is_empty() {
            return Err(Error::InvalidInput(format!("cluster `{cluster_id}` is empty")));
        }
        if x.nrows() != y.len() {
            return Err(Error::InvalidInput(format!(
                "cluster `{cluster_id}`: {} responses but {} predictor rows",
                y.len(),
                x.nrows()
            )));
        }
        if y.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput(format!(
                "cluster `{cluster_id}`: response must be 0/1"
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "cluster `{cluster_id}`: predictors must be finite"
            )));
        }
        Ok(ClusterData { cluster_id, y, x })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn y_f64(&self) -> Vec<f64> {
        self.y.iter().map(|&v| f64::from(v)).collect()
    }
}

/// One provider's payload: sample size, variable metadata and every moment
/// target of the bundle's [`MomentSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryBundle {
    pub cluster_id: String,
    pub n: usize,
    pub variables: Vec<VariableMeta>,
    pub max_order: u32,
    pub moments: BTreeMap<MultiIndex, f64>,
    pub response_mean: f64,
}

impl SummaryBundle {
    pub fn spec(&self) -> Result<MomentSpec> {
        enumerate_moment_spec(&self.variables, self.max_order)
    }

    pub fn response_position(&self) -> usize {
        self.variables
            .iter()
            .position(VariableMeta::is_response)
            .unwrap_or(0)
    }

    pub fn predictor_positions(&self) -> Vec<usize> {
        let r = self.response_position();
        (0..self.variables.len()).filter(|&j| j != r).collect()
    }

    pub fn moment(&self, index: &MultiIndex) -> Option<f64> {
        self.moments.get(index).copied()
    }

    pub fn mean_of(&self, pos: usize) -> Option<f64> {
        self.moment(&MultiIndex::unit(self.variables.len(), pos))
    }

    pub fn variance_of(&self, pos: usize) -> Option<f64> {
        let mut v = vec![0; self.variables.len()];
        v[pos] = 2;
        self.moment(&MultiIndex(v))
    }

    /// The symmetric order-2 moment matrix over all variables.
    pub fn second_moment_matrix(&self) -> Option<DMatrix<f64>> {
        let p = self.variables.len();
        let mut m = DMatrix::zeros(p, p);
        for a in 0..p {
            for b in a..p {
                let mut v = vec![0; p];
                v[a] += 1;
                v[b] += 1;
                let value = self.moment(&MultiIndex(v))?;
                m[(a, b)] = value;
                m[(b, a)] = value;
            }
        }
        Some(m)
    }
}

/// Reduces a cluster to its summary bundle.
///
/// `predictors` gives the metadata for the columns of `data.x`; a numeric
/// predictor whose `standardized` flag is set is standardized first and its
/// center and scale are recorded. The response is placed first in the
/// bundle's variable list.
pub fn summarize_cluster(
    data: &ClusterData,
    response_name: &str,
    predictors: &[VariableMeta],
    max_order: u32,
) -> Result<SummaryBundle> {
    if data.n() < 2 {
        return Err(Error::ClusterTooSmall {
            cluster_id: data.cluster_id.clone(),
            n: data.n(),
        });
    }
    if predictors.len() != data.p() {
        return Err(Error::InvalidInput(format!(
            "{} predictor descriptions for {} columns",
            predictors.len(),
            data.p()
        )));
    }
    let mut variables = vec![VariableMeta::response(response_name)];
    let mut columns: Vec<Vec<f64>> = vec![data.y_f64()];
    for (j, meta) in predictors.iter().enumerate() {
        if meta.is_response() {
            return Err(Error::InvalidInput(format!(
                "predictor `{}` is marked as the response",
                meta.name
            )));
        }
        let col: Vec<f64> = data.x.column(j).iter().copied().collect();
        let mut meta = meta.clone();
        if meta.standardized {
            if meta.kind != VariableKind::Numeric {
                return Err(Error::InvalidInput(format!(
                    "only numeric predictors can be standardized (`{}`)",
                    meta.name
                )));
            }
            let s = standardize_named(&col, &meta.name)?;
            meta.center = s.center;
            meta.scale = s.scale;
            columns.push(s.values);
        } else {
            meta.center = 0.0;
            meta.scale = 1.0;
            columns.push(col);
        }
        variables.push(meta);
    }

    let spec = enumerate_moment_spec(&variables, max_order)?;
    let refs: Vec<&[f64]> = columns.iter().map(Vec::as_slice).collect();
    let values = moments_for_targets(&refs, spec.targets())?;
    let moments: BTreeMap<MultiIndex, f64> =
        spec.targets().iter().cloned().zip(values).collect();
    let response_mean = moments[&MultiIndex::unit(variables.len(), 0)];

    Ok(SummaryBundle {
        cluster_id: data.cluster_id.clone(),
        n: data.n(),
        variables,
        max_order,
        moments,
        response_mean,
    })
}
