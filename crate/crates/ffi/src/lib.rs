//! C ABI over the pseudoglmm toolkit.
//!
//! Every function returns a [`PgStatus`]. On failure the message is kept per
//! thread and read with [`pg_last_error_message`]. Objects are opaque handles
//! released with their `_free` function; matrices are column-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use nalgebra::DMatrix;
use pseudoglmm::bundle_io::{to_json, validate_bundle};
use pseudoglmm::glmm::{fit_glmm, Dataset, GlmmFit, GlmmOptions};
use pseudoglmm::moments::{summarize_cluster, ClusterData, SummaryBundle, VariableMeta};
use pseudoglmm::pseudogen::{generate_cluster, GenerateOptions, MomentDiagnostics, PseudoDataset};
use pseudoglmm::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Schema = 3,
    Numerical = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PgVariableKind {
    Numeric = 0,
    NumericStandardized = 1,
    Binary = 2,
}

pub struct PgBundle(SummaryBundle);

pub struct PgPseudo {
    data: PseudoDataset,
    diagnostics: MomentDiagnostics,
}

pub struct PgDataset {
    predictor_names: Vec<String>,
    clusters: Vec<ClusterData>,
}

pub struct PgFit(GlmmFit);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(PgStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Schema { .. }
            | Error::MissingMoment(_)
            | Error::UnexpectedMoment(_)
            | Error::NonPsd { .. }
            | Error::IncompatibleProviders(_)
            | Error::Json(_) => PgStatus::Schema,
            Error::InvalidStart | Error::DampingOverflow { .. } | Error::DegenerateScale { .. } => PgStatus::Numerical,
            _ => PgStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> PgStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            PgStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PgStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(PgStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn text(p: *const c_char, what: &str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure(PgStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn array<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn copy_out(src: &[f64], out: *mut f64, len: usize) -> Result<(), Failure> {
    if len < src.len() {
        return Err(Failure(
            PgStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", src.len()),
        ));
    }
    if !src.is_empty() {
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    }
    Ok(())
}

unsafe fn cluster_from_raw(
    cluster_id: *const c_char,
    y: *const u8,
    x: *const f64,
    n: usize,
    p: usize,
) -> Result<ClusterData, Failure> {
    let id = text(cluster_id, "cluster_id")?;
    let y = array(y, n, "y")?.to_vec();
    let x = DMatrix::from_column_slice(n, p, array(x, n * p, "x")?);
    Ok(ClusterData::new(id, y, x)?)
}

unsafe fn names_from_raw(names: *const *const c_char, p: usize) -> Result<Vec<String>, Failure> {
    array(names, p, "names")?.iter().map(|&s| text(s, "names[j]")).collect()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn pg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Frees a string returned by this library.
///
/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn pg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Summarizes one cluster. `x` is `n × p` column-major; `kinds` holds one
/// [`PgVariableKind`] per predictor, or is null when every predictor is
/// numeric.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `names` holds `p` strings.
#[no_mangle]
pub unsafe extern "C" fn pg_summarize(
    cluster_id: *const c_char,
    y: *const u8,
    x: *const f64,
    n: usize,
    p: usize,
    names: *const *const c_char,
    kinds: *const i32,
    max_order: u32,
    out: *mut *mut PgBundle,
) -> PgStatus {
    guard(|| {
        let cluster = cluster_from_raw(cluster_id, y, x, n, p)?;
        let names = names_from_raw(names, p)?;
        let kinds = if kinds.is_null() {
            vec![PgVariableKind::Numeric as i32; p]
        } else {
            array(kinds, p, "kinds")?.to_vec()
        };
        let metas = names
            .into_iter()
            .zip(kinds)
            .map(|(name, kind)| match kind {
                0 => Ok(VariableMeta::numeric(name)),
                1 => Ok(VariableMeta::numeric_standardized(name)),
                2 => Ok(VariableMeta::binary(name)),
                k => Err(Failure(PgStatus::InvalidArgument, format!("unknown variable kind {k} for `{name}`"))),
            })
            .collect::<Result<Vec<VariableMeta>, Failure>>()?;
        let bundle = summarize_cluster(&cluster, "y", &metas, max_order)?;
        put(out, PgBundle(bundle))
    })
}

/// Parses and validates a bundle from its JSON form.
///
/// # Safety
/// `json` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pg_bundle_from_json(json: *const c_char, out: *mut *mut PgBundle) -> PgStatus {
    guard(|| {
        let raw = text(json, "json")?;
        put(out, PgBundle(validate_bundle(raw.as_bytes())?))
    })
}

/// Serializes a bundle; release the string with [`pg_string_free`].
///
/// # Safety
/// `bundle` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pg_bundle_to_json(bundle: *const PgBundle, out: *mut *mut c_char) -> PgStatus {
    guard(|| {
        let b = handle(bundle, "bundle")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let json = to_json(&b.0)?;
        *out = CString::new(json).map_err(|e| Failure(PgStatus::Schema, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `bundle` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pg_bundle_n(bundle: *const PgBundle) -> usize {
    bundle.as_ref().map_or(0, |b| b.0.n)
}

/// # Safety
/// `bundle` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pg_bundle_n_moments(bundle: *const PgBundle) -> usize {
    bundle.as_ref().map_or(0, |b| b.0.moments.len())
}

/// # Safety
/// `bundle` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn pg_bundle_free(bundle: *mut PgBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// Generates moment-matched pseudo-data for one bundle.
///
/// # Safety
/// `bundle` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pg_generate(bundle: *const PgBundle, seed: u64, out: *mut *mut PgPseudo) -> PgStatus {
    guard(|| {
        let b = handle(bundle, "bundle")?;
        let opts = GenerateOptions { seed, ..GenerateOptions::default() };
        let (data, diagnostics) = generate_cluster(&b.0, &opts)?;
        put(out, PgPseudo { data, diagnostics })
    })
}

/// # Safety
/// `pseudo` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pg_pseudo_n(pseudo: *const PgPseudo) -> usize {
    pseudo.as_ref().map_or(0, |p| p.data.n())
}

/// # Safety
/// `pseudo` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pg_pseudo_p(pseudo: *const PgPseudo) -> usize {
    pseudo.as_ref().map_or(0, |p| p.data.x.ncols())
}

/// Largest absolute gap between target and achieved moments, or NaN for a
/// null handle.
///
/// # Safety
/// `pseudo` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pg_pseudo_max_abs_difference(pseudo: *const PgPseudo) -> f64 {
    pseudo.as_ref().map_or(f64::NAN, |p| p.diagnostics.max_abs_difference())
}

/// Number of warnings recorded during generation.
///
/// # Safety
/// `pseudo` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pg_pseudo_n_warnings(pseudo: *const PgPseudo) -> usize {
    pseudo.as_ref().map_or(0, |p| p.diagnostics.warnings.len())
}

/// Copies the `n` responses into `out`.
///
/// # Safety
/// `out` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn pg_pseudo_copy_y(pseudo: *const PgPseudo, out: *mut u8, len: usize) -> PgStatus {
    guard(|| {
        let y = &handle(pseudo, "pseudo")?.data.y;
        if len < y.len() {
            return Err(Failure(PgStatus::BufferTooSmall, format!("buffer holds {len} values, {} needed", y.len())));
        }
        if !y.is_empty() {
            if out.is_null() {
                return Err(null("out"));
            }
            ptr::copy_nonoverlapping(y.as_ptr(), out, y.len());
        }
        Ok(())
    })
}

/// Copies the `n × p` predictors, on the original scale, into `out`.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pg_pseudo_copy_x(pseudo: *const PgPseudo, out: *mut f64, len: usize) -> PgStatus {
    guard(|| {
        let p = handle(pseudo, "pseudo")?;
        copy_out(p.data.to_original_scale().x.as_slice(), out, len)
    })
}

/// # Safety
/// `pseudo` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn pg_pseudo_free(pseudo: *mut PgPseudo) {
    if !pseudo.is_null() {
        drop(Box::from_raw(pseudo));
    }
}

/// Creates an empty dataset with `p` named predictors.
///
/// # Safety
/// `names` holds `p` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn pg_dataset_new(names: *const *const c_char, p: usize, out: *mut *mut PgDataset) -> PgStatus {
    guard(|| {
        let predictor_names = names_from_raw(names, p)?;
        put(out, PgDataset { predictor_names, clusters: Vec::new() })
    })
}

/// Appends a cluster of `n` rows; `x` is `n × p` column-major.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn pg_dataset_add_cluster(
    dataset: *mut PgDataset,
    cluster_id: *const c_char,
    y: *const u8,
    x: *const f64,
    n: usize,
) -> PgStatus {
    guard(|| {
        let ds = dataset.as_mut().ok_or_else(|| null("dataset"))?;
        let c = cluster_from_raw(cluster_id, y, x, n, ds.predictor_names.len())?;
        ds.clusters.push(c);
        Ok(())
    })
}

/// Appends generated pseudo-data, on the original scale, as a cluster.
///
/// # Safety
/// Both handles must be live.
#[no_mangle]
pub unsafe extern "C" fn pg_dataset_add_pseudo(dataset: *mut PgDataset, pseudo: *const PgPseudo) -> PgStatus {
    guard(|| {
        let ds = dataset.as_mut().ok_or_else(|| null("dataset"))?;
        let p = handle(pseudo, "pseudo")?;
        if p.data.predictor_names != ds.predictor_names {
            return Err(Failure(
                PgStatus::InvalidArgument,
                format!("predictors {:?} differ from {:?}", p.data.predictor_names, ds.predictor_names),
            ));
        }
        ds.clusters.push(p.data.to_original_scale());
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn pg_dataset_free(dataset: *mut PgDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Fits the random-intercept logistic model with `n_agq` quadrature points.
///
/// # Safety
/// `dataset` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pg_fit_glmm(dataset: *const PgDataset, n_agq: usize, out: *mut *mut PgFit) -> PgStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        let data = Dataset::new(ds.predictor_names.clone(), ds.clusters.clone())?;
        let opts = GlmmOptions { n_quad: n_agq, ..GlmmOptions::default() };
        opts.validate()?;
        put(out, PgFit(fit_glmm(&data, &opts)?))
    })
}

/// Number of fixed effects, intercept included.
///
/// # Safety
/// `fit` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pg_fit_n_coefficients(fit: *const PgFit) -> usize {
    fit.as_ref().map_or(0, |f| f.0.beta.len())
}

/// Copies the fixed effects, intercept first.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pg_fit_coefficients(fit: *const PgFit, out: *mut f64, len: usize) -> PgStatus {
    guard(|| copy_out(handle(fit, "fit")?.0.beta.as_slice(), out, len))
}

/// Copies the standard errors of the fixed effects.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pg_fit_std_errors(fit: *const PgFit, out: *mut f64, len: usize) -> PgStatus {
    guard(|| copy_out(handle(fit, "fit")?.0.se_beta.as_slice(), out, len))
}

/// # Safety
/// `fit` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pg_fit_sigma(fit: *const PgFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.0.sigma_u)
}

/// # Safety
/// `fit` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pg_fit_loglik(fit: *const PgFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.0.loglik)
}

/// # Safety
/// `fit` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pg_fit_aic(fit: *const PgFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.0.aic)
}

/// # Safety
/// `fit` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pg_fit_converged(fit: *const PgFit) -> bool {
    fit.as_ref().is_some_and(|f| f.0.converged)
}

/// # Safety
/// `fit` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn pg_fit_free(fit: *mut PgFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panics_become_a_status() {
        let status = guard(|| panic!("boom"));
        assert_eq!(status, PgStatus::Panic);
        let msg = unsafe { CStr::from_ptr(pg_last_error_message()) };
        assert_eq!(msg.to_str().unwrap(), "internal panic");
    }

    #[test]
    fn library_errors_map_to_statuses() {
        let schema = Failure::from(Error::Schema { field: "n".into(), reason: "missing".into() });
        assert_eq!(schema.0, PgStatus::Schema);
        assert_eq!(Failure::from(Error::InvalidStart).0, PgStatus::Numerical);
        assert_eq!(Failure::from(Error::Config("x".into())).0, PgStatus::InvalidArgument);
    }

    #[test]
    fn interior_nul_in_a_message_is_kept_readable() {
        set_error("a\0b");
        let msg = unsafe { CStr::from_ptr(pg_last_error_message()) };
        assert_eq!(msg.to_str().unwrap(), "a b");
    }
}
