//! CSV input and output of clustered individual-level data.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::glmm::Dataset;
use crate::moments::{dummy_name, ClusterData, VariableMeta};

/// `column=ref,level2,...`: the first level is the reference. Without
/// `=levels`, the observed levels are used in sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoricalSpec {
    pub column: String,
    pub levels: Option<Vec<String>>,
}

impl FromStr for CategoricalSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (column, levels) = match s.split_once('=') {
            Some((c, l)) => {
                let levels: Vec<String> = l.split(',').map(|v| v.trim().to_string()).collect();
                if levels.len() < 2 || levels.iter().any(String::is_empty) {
                    return Err(Error::Usage(format!(
                        "categorical spec `{s}` needs at least two non-empty levels"
                    )));
                }
                (c.trim(), Some(levels))
            }
            None => (s.trim(), None),
        };
        if column.is_empty() {
            return Err(Error::Usage(format!("categorical spec `{s}` has no column name")));
        }
        Ok(CategoricalSpec {
            column: column.to_string(),
            levels,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestSpec {
    pub cluster_column: String,
    pub response_column: String,
    /// Predictor columns in order; every other column when `None`.
    pub predictors: Option<Vec<String>>,
    pub categorical: Vec<CategoricalSpec>,
    /// Numeric columns the provider standardizes before summarizing.
    pub standardize: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedData {
    pub response_name: String,
    /// One entry per column of each cluster's `x`.
    pub predictors: Vec<VariableMeta>,
    pub dataset: Dataset,
}

enum Column {
    Numeric { name: String, values: Vec<f64> },
    Categorical { name: String, values: Vec<String>, levels: Option<Vec<String>> },
}

fn csv_error(source: &str, line: u64, reason: impl Into<String>) -> Error {
    Error::Csv {
        path: source.to_string(),
        line,
        reason: reason.into(),
    }
}

pub fn load_csv(path: &Path, spec: &IngestSpec) -> Result<LoadedData> {
    let file = std::fs::File::open(path)?;
    read_csv(file, &path.display().to_string(), spec)
}

/// Reads clustered data. Clusters appear in order of first appearance;
/// numeric predictors whose values are all 0 or 1 are typed binary unless
/// listed for standardization. Errors carry the 1-based line number.
pub fn read_csv<R: Read>(reader: R, source: &str, spec: &IngestSpec) -> Result<LoadedData> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(source, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Usage(format!("column `{name}` not found in {source}")))
    };
    let cluster_idx = find(&spec.cluster_column)?;
    let response_idx = find(&spec.response_column)?;
    let predictor_names: Vec<String> = match &spec.predictors {
        Some(p) => p.clone(),
        None => header
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != cluster_idx && i != response_idx)
            .map(|(_, h)| h.clone())
            .collect(),
    };
    for c in spec.categorical.iter().map(|c| &c.column).chain(&spec.standardize) {
        if !predictor_names.contains(c) {
            return Err(Error::Usage(format!("`{c}` is not a predictor column")));
        }
    }
    let mut columns: Vec<(usize, Column)> = predictor_names
        .iter()
        .map(|name| {
            let idx = find(name)?;
            if idx == cluster_idx || idx == response_idx {
                return Err(Error::Usage(format!("`{name}` cannot be both a predictor and the cluster or response column")));
            }
            let col = match spec.categorical.iter().find(|c| &c.column == name) {
                Some(c) => Column::Categorical {
                    name: name.clone(),
                    values: Vec::new(),
                    levels: c.levels.clone(),
                },
                None => Column::Numeric {
                    name: name.clone(),
                    values: Vec::new(),
                },
            };
            Ok((idx, col))
        })
        .collect::<Result<_>>()?;

    let mut cluster_of_row: Vec<usize> = Vec::new();
    let mut cluster_ids: Vec<String> = Vec::new();
    let mut cluster_lookup: HashMap<String, usize> = HashMap::new();
    let mut y: Vec<u8> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_error(source, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("");
        let id = field(cluster_idx);
        if id.is_empty() {
            return Err(csv_error(source, line, "empty cluster id"));
        }
        let next = cluster_ids.len();
        let k = *cluster_lookup.entry(id.to_string()).or_insert(next);
        if k == next {
            cluster_ids.push(id.to_string());
        }
        cluster_of_row.push(k);
        let resp = field(response_idx);
        y.push(match resp.parse::<f64>() {
            Ok(0.0) => 0,
            Ok(1.0) => 1,
            _ => {
                return Err(csv_error(
                    source,
                    line,
                    format!("response `{}` must be 0 or 1 (got `{resp}`)", spec.response_column),
                ))
            }
        });
        for (idx, col) in &mut columns {
            let raw = field(*idx);
            match col {
                Column::Numeric { name, values } => {
                    let v: f64 = raw.parse().map_err(|_| {
                        csv_error(source, line, format!("`{name}`: `{raw}` is not a number"))
                    })?;
                    if !v.is_finite() {
                        return Err(csv_error(source, line, format!("`{name}`: value is not finite")));
                    }
                    values.push(v);
                }
                Column::Categorical { name, values, levels } => {
                    if let Some(levels) = levels {
                        if !levels.iter().any(|l| l == raw) {
                            return Err(csv_error(
                                source,
                                line,
                                format!("`{name}`: level `{raw}` is not among {}", levels.join(",")),
                            ));
                        }
                    }
                    values.push(raw.to_string());
                }
            }
        }
    }
    if y.is_empty() {
        return Err(Error::Usage(format!("{source} has no data rows")));
    }

    let mut metas = Vec::new();
    let mut design_cols: Vec<Vec<f64>> = Vec::new();
    for (_, col) in columns {
        match col {
            Column::Numeric { name, values } => {
                let meta = if spec.standardize.contains(&name) {
                    VariableMeta::numeric_standardized(&name)
                } else if values.iter().all(|&v| v == 0.0 || v == 1.0) {
                    VariableMeta::binary(&name)
                } else {
                    VariableMeta::numeric(&name)
                };
                metas.push(meta);
                design_cols.push(values);
            }
            Column::Categorical { name, values, levels } => {
                let levels = levels.unwrap_or_else(|| {
                    values.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect()
                });
                if levels.len() < 2 {
                    return Err(Error::Usage(format!("categorical `{name}` has fewer than two levels")));
                }
                for level in &levels[1..] {
                    let dummy = dummy_name(&name, level);
                    if predictor_names.contains(&dummy) {
                        return Err(Error::Usage(format!("dummy column `{dummy}` clashes with an existing column")));
                    }
                    metas.push(VariableMeta::dummy(&name, level));
                    design_cols.push(values.iter().map(|v| f64::from(u8::from(v == level))).collect());
                }
            }
        }
    }

    let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); cluster_ids.len()];
    for (row, &k) in cluster_of_row.iter().enumerate() {
        rows_of[k].push(row);
    }
    let p = design_cols.len();
    let clusters = cluster_ids
        .into_iter()
        .zip(rows_of)
        .map(|(id, rows)| {
            let x = DMatrix::from_fn(rows.len(), p, |r, j| design_cols[j][rows[r]]);
            let yc = rows.iter().map(|&r| y[r]).collect();
            ClusterData::new(id, yc, x)
        })
        .collect::<Result<Vec<_>>>()?;
    let names = metas.iter().map(|m| m.name.clone()).collect();
    Ok(LoadedData {
        response_name: spec.response_column.clone(),
        predictors: metas,
        dataset: Dataset::new(names, clusters)?,
    })
}

/// Writes `cluster_column,response,<predictor names>` rows with predictors
/// in 17-significant-digit scientific notation.
pub fn write_clusters_csv<W: Write>(
    writer: W,
    cluster_column: &str,
    response_column: &str,
    predictor_names: &[String],
    clusters: &[ClusterData],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![cluster_column.to_string(), response_column.to_string()];
    header.extend(predictor_names.iter().cloned());
    w.write_record(&header).map_err(|e| Error::InvalidInput(e.to_string()))?;
    for c in clusters {
        for i in 0..c.n() {
            let mut row = vec![c.cluster_id.clone(), c.y[i].to_string()];
            row.extend(c.x.row(i).iter().map(|v| format!("{v:.16e}")));
            w.write_record(&row).map_err(|e| Error::InvalidInput(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::VariableKind;

    fn spec() -> IngestSpec {
        IngestSpec {
            cluster_column: "clinic".into(),
            response_column: "positive".into(),
            ..IngestSpec::default()
        }
    }

    const CSV: &str = "clinic,positive,age,male,class\n\
                       b,1,30,1,inpatient\n\
                       a,0,41.5,0,emergency\n\
                       b,0,52,1,outpatient\n\
                       a,1,18,0,inpatient\n";

    #[test]
    fn reads_clusters_in_first_appearance_order() {
        let mut s = spec();
        s.categorical.push("class=inpatient,emergency,outpatient".parse().unwrap());
        s.standardize.push("age".into());
        let d = read_csv(CSV.as_bytes(), "t.csv", &s).unwrap();
        let ids: Vec<_> = d.dataset.clusters.iter().map(|c| c.cluster_id.as_str()).collect();
        assert_eq!(ids, ["b", "a"]);
        let names: Vec<_> = d.predictors.iter().map(|m| m.name.as_str()).collect();
        assert_eq!(names, ["age", "male", "class_emergency", "class_outpatient"]);
        assert!(d.predictors[0].standardized);
        assert_eq!(d.predictors[1].kind, VariableKind::Binary);
        let b = &d.dataset.clusters[0];
        assert_eq!(b.y, vec![1, 0]);
        assert_eq!(b.x.row(1).iter().copied().collect::<Vec<_>>(), vec![52.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn inferred_levels_are_sorted() {
        let mut s = spec();
        s.categorical.push("class".parse().unwrap());
        let d = read_csv(CSV.as_bytes(), "t.csv", &s).unwrap();
        let names: Vec<_> = d.predictors.iter().map(|m| m.name.as_str()).collect();
        assert_eq!(names, ["age", "male", "class_inpatient", "class_outpatient"]);
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let bad = "clinic,positive,age\na,1,3\na,2,4\n";
        match read_csv(bad.as_bytes(), "t.csv", &spec()) {
            Err(Error::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let bad = "clinic,positive,age\na,1,3\na,0,x\n";
        match read_csv(bad.as_bytes(), "t.csv", &spec()) {
            Err(Error::Csv { line, reason, .. }) => {
                assert_eq!(line, 3);
                assert!(reason.contains("age"));
            }
            other => panic!("{other:?}"),
        }
        let ragged = "clinic,positive,age\na,1,3\na,0\n";
        assert!(matches!(read_csv(ragged.as_bytes(), "t.csv", &spec()), Err(Error::Csv { line: 3, .. })));
        let mut s = spec();
        s.categorical.push("class=inpatient,emergency".parse().unwrap());
        assert!(matches!(read_csv(CSV.as_bytes(), "t.csv", &s), Err(Error::Csv { line: 4, .. })));
    }

    #[test]
    fn missing_columns_are_usage_errors() {
        let mut s = spec();
        s.response_column = "outcome".into();
        assert!(matches!(read_csv(CSV.as_bytes(), "t.csv", &s), Err(Error::Usage(_))));
        assert!("=a,b".parse::<CategoricalSpec>().is_err());
        assert!("c=a".parse::<CategoricalSpec>().is_err());
    }

    #[test]
    fn written_csv_reads_back_exactly() {
        let x = DMatrix::from_row_slice(2, 2, &[0.1, -1.0 / 3.0, 2.5e-17, 1e300]);
        let c = ClusterData::new("k", vec![0, 1], x).unwrap();
        let names = vec!["u".to_string(), "v".to_string()];
        let mut buf = Vec::new();
        write_clusters_csv(&mut buf, "cluster_id", "y", &names, std::slice::from_ref(&c)).unwrap();
        let s = IngestSpec {
            cluster_column: "cluster_id".into(),
            response_column: "y".into(),
            ..IngestSpec::default()
        };
        let back = read_csv(buf.as_slice(), "mem", &s).unwrap();
        assert_eq!(back.dataset.clusters[0], c);
    }
}
