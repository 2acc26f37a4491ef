//! Wire format for summary bundles: canonical JSON, validation, merging of
//! bundles from several providers, and the on-disk bundle directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::moments::{MultiIndex, SummaryBundle, VariableKind, VariableMeta};

pub const SCHEMA_VERSION: u32 = 1;
pub const BUNDLE_EXTENSION: &str = ".bundle.json";
pub const MANIFEST_NAME: &str = "manifest.json";
pub const PSD_FLOOR: f64 = -1e-8;
const ZERO_ONE_TOLERANCE: f64 = 1e-12;

#[derive(Serialize, Deserialize)]
struct MomentEntry {
    index: MultiIndex,
    value: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleWire {
    schema_version: u32,
    cluster_id: String,
    n: usize,
    max_order: u32,
    response_mean: f64,
    variables: Vec<VariableMeta>,
    moments: Vec<MomentEntry>,
}

fn schema(field: &str, reason: impl Into<String>) -> Error {
    Error::Schema {
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// Pretty-printed canonical JSON: moments in canonical multi-index order,
/// floats in shortest round-trip form.
pub fn to_json(bundle: &SummaryBundle) -> Result<String> {
    let wire = BundleWire {
        schema_version: SCHEMA_VERSION,
        cluster_id: bundle.cluster_id.clone(),
        n: bundle.n,
        max_order: bundle.max_order,
        response_mean: bundle.response_mean,
        variables: bundle.variables.clone(),
        moments: bundle
            .moments
            .iter()
            .map(|(index, &value)| MomentEntry {
                index: index.clone(),
                value,
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&wire)?;
    s.push('\n');
    Ok(s)
}

/// Parses and fully checks a bundle.
pub fn validate_bundle(raw: &[u8]) -> Result<SummaryBundle> {
    let wire: BundleWire = serde_json::from_slice(raw)?;
    if wire.schema_version != SCHEMA_VERSION {
        return Err(schema(
            "schema_version",
            format!("expected {SCHEMA_VERSION}, found {}", wire.schema_version),
        ));
    }
    if wire.cluster_id.is_empty() {
        return Err(schema("cluster_id", "must not be empty"));
    }
    if wire.n < 2 {
        return Err(schema("n", format!("at least 2 observations required (found {})", wire.n)));
    }
    let mut names = BTreeSet::new();
    for v in &wire.variables {
        if v.name.is_empty() || !names.insert(v.name.as_str()) {
            return Err(schema("variables", format!("variable name `{}` is empty or repeated", v.name)));
        }
        if !(v.center.is_finite() && v.scale.is_finite() && v.scale > 0.0) {
            return Err(schema(
                "variables",
                format!("`{}` needs a finite center and a positive scale", v.name),
            ));
        }
        if v.standardized && v.kind != VariableKind::Numeric {
            return Err(schema("variables", format!("`{}` is standardized but not numeric", v.name)));
        }
    }

    let bundle = SummaryBundle {
        cluster_id: wire.cluster_id,
        n: wire.n,
        max_order: wire.max_order,
        response_mean: wire.response_mean,
        variables: wire.variables,
        moments: BTreeMap::new(),
    };
    let spec = bundle.spec().map_err(|e| match e {
        Error::Config(reason) => schema("max_order", reason),
        Error::InvalidInput(reason) => schema("variables", reason),
        other => other,
    })?;

    let mut moments = BTreeMap::new();
    for entry in wire.moments {
        if entry.index.len() != spec.n_variables() {
            return Err(schema(
                "moments",
                format!("multi-index {} has the wrong length", entry.index),
            ));
        }
        if !entry.value.is_finite() {
            return Err(schema("moments", format!("value for {} is not finite", entry.index)));
        }
        let index = entry.index;
        if moments.insert(index.clone(), entry.value).is_some() {
            return Err(schema("moments", format!("multi-index {index} appears twice")));
        }
    }
    let expected: BTreeSet<&MultiIndex> = spec.targets().iter().collect();
    if let Some(missing) = spec.targets().iter().find(|t| !moments.contains_key(*t)) {
        return Err(Error::MissingMoment(missing.clone()));
    }
    if let Some(extra) = moments.keys().find(|k| !expected.contains(k)) {
        return Err(Error::UnexpectedMoment(extra.clone()));
    }
    let bundle = SummaryBundle { moments, ..bundle };

    let r = bundle.response_position();
    let response_moment = bundle.mean_of(r).expect("complete");
    if !(0.0..=1.0).contains(&bundle.response_mean) {
        return Err(schema(
            "response_mean",
            format!("{} lies outside [0, 1]", bundle.response_mean),
        ));
    }
    if (bundle.response_mean - response_moment).abs() > ZERO_ONE_TOLERANCE {
        return Err(schema(
            "response_mean",
            format!("{} disagrees with the response mean moment {response_moment}", bundle.response_mean),
        ));
    }
    for (j, v) in bundle.variables.iter().enumerate() {
        if !v.kind.is_zero_one() {
            continue;
        }
        let mean = bundle.mean_of(j).expect("complete");
        let var = bundle.variance_of(j).expect("complete");
        if !(0.0..=1.0).contains(&mean) {
            return Err(schema("moments", format!("mean of 0/1 variable `{}` is {mean}", v.name)));
        }
        if (var - mean * (1.0 - mean)).abs() > ZERO_ONE_TOLERANCE {
            return Err(schema(
                "moments",
                format!("variance of 0/1 variable `{}` is {var}, expected {}", v.name, mean * (1.0 - mean)),
            ));
        }
    }
    let m = bundle.second_moment_matrix().expect("complete");
    let min_eigenvalue = SymmetricEigen::new(m).eigenvalues.min();
    if min_eigenvalue < PSD_FLOOR {
        return Err(Error::NonPsd { min_eigenvalue });
    }
    Ok(bundle)
}

/// Bundles from several providers that share one variable signature.
#[derive(Clone, Debug, PartialEq)]
pub struct BundleSet {
    pub schema_version: u32,
    pub max_order: u32,
    pub variable_signature: Vec<(String, VariableKind)>,
    pub bundles: Vec<SummaryBundle>,
}

fn signature(b: &SummaryBundle) -> Vec<(String, VariableKind)> {
    b.variables.iter().map(|v| (v.name.clone(), v.kind.clone())).collect()
}

fn kind_label(kind: &VariableKind) -> String {
    match kind {
        VariableKind::BinaryResponse => "binary response".into(),
        VariableKind::Numeric => "numeric".into(),
        VariableKind::Binary => "binary".into(),
        VariableKind::Dummy { parent, level } => format!("dummy {parent}={level}"),
    }
}

/// Checks that every bundle has the first bundle's variables (same names,
/// kinds and order) and maximum order, and that cluster ids are unique.
pub fn merge_bundles(bundles: Vec<SummaryBundle>) -> Result<BundleSet> {
    let first = bundles
        .first()
        .ok_or_else(|| Error::InvalidInput("no bundles to merge".into()))?;
    let reference = signature(first);
    let max_order = first.max_order;
    let mut ids = BTreeSet::new();
    for b in &bundles {
        if !ids.insert(b.cluster_id.as_str()) {
            return Err(Error::DuplicateCluster(b.cluster_id.clone()));
        }
        if b.max_order != max_order {
            return Err(Error::IncompatibleProviders(format!(
                "cluster `{}` has max_order {}, expected {max_order}",
                b.cluster_id, b.max_order
            )));
        }
        let sig = signature(b);
        for pos in 0..reference.len().max(sig.len()) {
            match (reference.get(pos), sig.get(pos)) {
                (Some(a), Some(c)) if a == c => {}
                (Some((name, kind)), Some((other, other_kind))) => {
                    return Err(Error::IncompatibleProviders(format!(
                        "cluster `{}` has `{other}` ({}) at position {pos} where `{name}` ({}) is expected",
                        b.cluster_id,
                        kind_label(other_kind),
                        kind_label(kind),
                    )))
                }
                (Some((name, _)), None) => {
                    return Err(Error::IncompatibleProviders(format!(
                        "cluster `{}` lacks variable `{name}`",
                        b.cluster_id
                    )))
                }
                (None, Some((other, _))) => {
                    return Err(Error::IncompatibleProviders(format!(
                        "cluster `{}` has extra variable `{other}`",
                        b.cluster_id
                    )))
                }
                (None, None) => unreachable!(),
            }
        }
    }
    Ok(BundleSet {
        schema_version: SCHEMA_VERSION,
        max_order,
        variable_signature: reference,
        bundles,
    })
}

#[derive(Serialize, Deserialize)]
struct SignatureEntry {
    name: String,
    kind: VariableKind,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    file: String,
    cluster_id: String,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    max_order: u32,
    signature: Vec<SignatureEntry>,
    files: Vec<ManifestFile>,
}

/// File-name-safe form of a cluster id.
pub fn sanitize_id(id: &str) -> String {
    let s: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    if s.is_empty() {
        "cluster".into()
    } else {
        s
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes one `.bundle.json` file per cluster plus `manifest.json`.
/// Returns the bundle paths in order.
pub fn write_bundle_dir(dir: &Path, set: &BundleSet) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(set.bundles.len());
    let mut paths = Vec::with_capacity(set.bundles.len());
    for (idx, b) in set.bundles.iter().enumerate() {
        let file = format!("{idx:04}_{}{BUNDLE_EXTENSION}", sanitize_id(&b.cluster_id));
        let json = to_json(b)?;
        let path = dir.join(&file);
        fs::write(&path, json.as_bytes())?;
        files.push(ManifestFile {
            file,
            cluster_id: b.cluster_id.clone(),
            sha256: sha256_hex(json.as_bytes()),
        });
        paths.push(path);
    }
    let manifest = Manifest {
        schema_version: set.schema_version,
        max_order: set.max_order,
        signature: set
            .variable_signature
            .iter()
            .map(|(name, kind)| SignatureEntry {
                name: name.clone(),
                kind: kind.clone(),
            })
            .collect(),
        files,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST_NAME), json)?;
    Ok(paths)
}

/// Reads a bundle directory. With a manifest, files are read in manifest
/// order and their digests checked; without one, every `.bundle.json` file
/// is read in file-name order.
pub fn read_bundle_dir(dir: &Path) -> Result<BundleSet> {
    if !dir.is_dir() {
        return Err(Error::Usage(format!("{} is not a directory", dir.display())));
    }
    let manifest_path = dir.join(MANIFEST_NAME);
    let mut bundles = Vec::new();
    if manifest_path.exists() {
        let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(schema(
                "manifest.schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", manifest.schema_version),
            ));
        }
        for entry in &manifest.files {
            let raw = fs::read(dir.join(&entry.file))?;
            if sha256_hex(&raw) != entry.sha256 {
                return Err(schema("manifest.files", format!("digest mismatch for {}", entry.file)));
            }
            let b = validate_bundle(&raw)?;
            if b.cluster_id != entry.cluster_id {
                return Err(schema(
                    "manifest.files",
                    format!("{} holds cluster `{}`, manifest says `{}`", entry.file, b.cluster_id, entry.cluster_id),
                ));
            }
            bundles.push(b);
        }
    } else {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.to_string_lossy().ends_with(BUNDLE_EXTENSION))
            .collect();
        files.sort();
        for f in files {
            bundles.push(validate_bundle(&fs::read(&f)?)?);
        }
    }
    if bundles.is_empty() {
        return Err(Error::Usage(format!("no bundles found in {}", dir.display())));
    }
    merge_bundles(bundles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::{summarize_cluster, ClusterData};
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn predictors() -> Vec<VariableMeta> {
        vec![
            VariableMeta::numeric_standardized("age"),
            VariableMeta::binary("male"),
            VariableMeta::numeric("dose"),
        ]
    }

    fn bundle(seed: u64, id: &str, max_order: u32) -> SummaryBundle {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = 30;
        let x = DMatrix::from_fn(n, 3, |_, j| match j {
            0 => rng.random_range(20.0..80.0),
            1 => f64::from(u8::from(rng.random::<bool>())),
            _ => rng.random_range(0.0..5.0),
        });
        let y = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.3)).collect();
        let c = ClusterData::new(id, y, x).unwrap();
        summarize_cluster(&c, "y", &predictors(), max_order).unwrap()
    }

    fn edit(b: &SummaryBundle, f: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
        let mut v: serde_json::Value = serde_json::from_str(&to_json(b).unwrap()).unwrap();
        f(&mut v);
        serde_json::to_vec(&v).unwrap()
    }

    #[test]
    fn summarized_bundle_round_trips_byte_identically() {
        for order in [2, 3, 4] {
            let b = bundle(1, "clinic A", order);
            let json = to_json(&b).unwrap();
            let back = validate_bundle(json.as_bytes()).unwrap();
            assert_eq!(back, b);
            assert_eq!(to_json(&back).unwrap(), json);
        }
    }

    #[test]
    fn cauchy_schwarz_violation_is_non_psd() {
        let b = bundle(2, "c", 3);
        // cov(age, dose) pushed beyond sqrt(var_age * var_dose)
        let idx = MultiIndex::new(vec![0, 1, 0, 1]);
        let va = b.variance_of(1).unwrap();
        let vd = b.variance_of(3).unwrap();
        let mut bad = b.clone();
        bad.moments.insert(idx, 1.5 * (va * vd).sqrt());
        let err = validate_bundle(to_json(&bad).unwrap().as_bytes()).unwrap_err();
        assert!(matches!(err, Error::NonPsd { .. }), "{err}");
    }

    #[test]
    fn missing_order_three_key_is_named() {
        let b = bundle(3, "c", 3);
        let idx = MultiIndex::new(vec![0, 1, 1, 1]);
        let mut bad = b.clone();
        bad.moments.remove(&idx);
        match validate_bundle(to_json(&bad).unwrap().as_bytes()) {
            Err(Error::MissingMoment(m)) => assert_eq!(m, idx),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unexpected_key_is_named() {
        let b = bundle(4, "c", 3);
        // Response-involving order-3 moments are not part of the targets.
        let idx = MultiIndex::new(vec![1, 2, 0, 0]);
        let mut bad = b.clone();
        bad.moments.insert(idx.clone(), 0.1);
        match validate_bundle(to_json(&bad).unwrap().as_bytes()) {
            Err(Error::UnexpectedMoment(m)) => assert_eq!(m, idx),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn field_level_rejections() {
        let b = bundle(5, "c", 2);
        let cases: Vec<(Vec<u8>, &str)> = vec![
            (edit(&b, |v| v["schema_version"] = 2.into()), "schema_version"),
            (edit(&b, |v| v["response_mean"] = 1.5.into()), "response_mean"),
            (edit(&b, |v| v["response_mean"] = 0.0.into()), "response_mean"),
            (edit(&b, |v| v["n"] = 1.into()), "n"),
            (edit(&b, |v| v["max_order"] = 5.into()), "max_order"),
            (edit(&b, |v| v["variables"][2]["name"] = "age".into()), "variables"),
        ];
        for (raw, field) in cases {
            match validate_bundle(&raw) {
                Err(Error::Schema { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{field}: {other:?}"),
            }
        }
        assert!(matches!(validate_bundle(b"{"), Err(Error::Json(_))));
        let extra = edit(&b, |v| v["surprise"] = 1.into());
        assert!(matches!(validate_bundle(&extra), Err(Error::Json(_))));
    }

    #[test]
    fn zero_one_variance_must_match_mean() {
        let b = bundle(6, "c", 2);
        let mut bad = b.clone();
        let idx = MultiIndex::new(vec![0, 0, 2, 0]);
        *bad.moments.get_mut(&idx).unwrap() += 1e-6;
        assert!(matches!(
            validate_bundle(to_json(&bad).unwrap().as_bytes()),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn merge_enforces_signature_and_unique_ids() {
        let set = merge_bundles((0..57).map(|i| bundle(i, &format!("clinic{i}"), 3)).collect()).unwrap();
        assert_eq!(set.bundles.len(), 57);
        assert_eq!(set.variable_signature[0].0, "y");

        let mut swapped = bundle(9, "other", 3);
        swapped.variables.swap(1, 3);
        let err = merge_bundles(vec![bundle(8, "a", 3), swapped]).unwrap_err();
        assert!(matches!(&err, Error::IncompatibleProviders(m) if m.contains("dose")), "{err}");

        let err = merge_bundles(vec![bundle(8, "a", 3), bundle(9, "a", 3)]).unwrap_err();
        assert!(matches!(err, Error::DuplicateCluster(ref id) if id == "a"));

        let err = merge_bundles(vec![bundle(8, "a", 3), bundle(9, "b", 2)]).unwrap_err();
        assert!(matches!(err, Error::IncompatibleProviders(_)));
        assert!(merge_bundles(Vec::new()).is_err());
    }

    #[test]
    fn directory_round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let set = merge_bundles(vec![bundle(1, "north/1", 3), bundle(2, "south", 3)]).unwrap();
        let paths = write_bundle_dir(dir.path(), &set).unwrap();
        assert!(paths[0].ends_with("0000_north_1.bundle.json"));
        let back = read_bundle_dir(dir.path()).unwrap();
        assert_eq!(back, set);

        let mut text = fs::read_to_string(&paths[1]).unwrap();
        text = text.replacen("\"n\": 30", "\"n\": 31", 1);
        fs::write(&paths[1], text).unwrap();
        assert!(matches!(read_bundle_dir(dir.path()), Err(Error::Schema { .. })));

        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(read_bundle_dir(empty.path()), Err(Error::Usage(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn summarized_bundles_always_validate(seed in any::<u64>(), order in 2u32..=4) {
            let b = bundle(seed, "c", order);
            let json = to_json(&b).unwrap();
            let back = validate_bundle(json.as_bytes()).unwrap();
            prop_assert_eq!(to_json(&back).unwrap(), json);
        }
    }
}
