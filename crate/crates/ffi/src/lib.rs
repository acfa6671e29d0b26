//! C ABI over `ivqr-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! style calls and released with the matching `*_free`. Every fallible call
//! returns an [`IvqrStatus`]; the message of the last failure on the calling
//! thread is available from [`ivqr_last_error_message`]. Matrices are passed
//! column-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ivqr_core::dataset::{load_csv, Dataset, RoleMap};
use ivqr_core::first_stage::{fit_first_stage_with, wald_test, CovarianceKind, FirstStageResult};
use ivqr_core::ivqr::{fit_ivqr, AlphaGrid, IvqrFit, WeightingMode};
use ivqr_core::weights::{sparsity_weights, WeightSource, WeightVector};
use ivqr_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IvqrStatus {
    Ok = 0,
    /// Estimation failed: singular design, no convergence, bad domain.
    Numerical = 1,
    /// Invalid argument, shape mismatch or unparsable input.
    Usage = 2,
    /// File or network failure.
    Io = 3,
    NullPointer = 4,
    /// A Rust panic was caught at the boundary.
    Internal = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IvqrWeighting {
    Identity = 0,
    InverseGammaCov = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IvqrCovariance {
    Hc0 = 0,
    Hc1 = 1,
    Classical = 2,
}

/// Opaque dataset handle.
pub struct IvqrDataset {
    inner: Dataset,
}

/// Opaque IVQR fit handle.
pub struct IvqrFitHandle {
    inner: IvqrFit,
}

/// Opaque first-stage handle.
pub struct IvqrFirstStage {
    inner: FirstStageResult,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> IvqrStatus {
    match e.exit_code() {
        1 => IvqrStatus::Numerical,
        3 => IvqrStatus::Io,
        _ => IvqrStatus::Usage,
    }
}

enum Failure {
    Core(Error),
    Null(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> IvqrStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => IvqrStatus::Ok,
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer passed for `{what}`"));
            IvqrStatus::NullPointer
        }
        Err(_) => {
            set_error("internal error: panic caught at the C boundary".into());
            IvqrStatus::Internal
        }
    }
}

unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn reference<'a, T>(ptr: *const T, what: &'static str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or(Failure::Null(what))
}

unsafe fn path_arg<'a>(ptr: *const c_char, what: &'static str) -> Result<&'a Path, Failure> {
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    let s = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Error::InvalidArgument(format!("`{what}` is not valid UTF-8")))?;
    Ok(Path::new(s))
}

fn columns(values: &[f64], n: usize, m: usize) -> Vec<Vec<f64>> {
    (0..m).map(|j| values[j * n..(j + 1) * n].to_vec()).collect()
}

unsafe fn write_out(out: *mut f64, out_len: usize, values: &[f64]) -> Result<(), Failure> {
    if out_len < values.len() {
        return Err(Error::Dimension(format!("buffer holds {out_len} values, {} needed", values.len())).into());
    }
    if values.is_empty() {
        return Ok(());
    }
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ivqr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a dataset from column-major arrays: `y` and `d` of length `n`,
/// `x` of `n * k` and `z` of `n * p` values. `x` may be NULL when `k == 0`.
///
/// # Safety
/// Every non-null pointer must reference the stated number of readable
/// doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ivqr_dataset_new(
    n: usize,
    y: *const f64,
    d: *const f64,
    x: *const f64,
    k: usize,
    z: *const f64,
    p: usize,
    add_intercept: bool,
    out: *mut *mut IvqrDataset,
) -> IvqrStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let y = slice(y, n, "y")?.to_vec();
        let d = slice(d, n, "d")?.to_vec();
        let x = columns(slice(x, n * k, "x")?, n, k);
        let z = columns(slice(z, n * p, "z")?, n, p);
        let inner = Dataset::from_columns(y, d, x, z, add_intercept)?;
        *out = Box::into_raw(Box::new(IvqrDataset { inner }));
        Ok(())
    })
}

/// Reads a headed CSV under a role mapping file.
///
/// # Safety
/// `data_path` and `map_path` must be NUL-terminated strings; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ivqr_dataset_load_csv(
    data_path: *const c_char,
    map_path: *const c_char,
    out: *mut *mut IvqrDataset,
) -> IvqrStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let data = path_arg(data_path, "data_path")?;
        let map = RoleMap::from_file(path_arg(map_path, "map_path")?)?;
        let inner = load_csv(data, &map, map.intercept)?;
        *out = Box::into_raw(Box::new(IvqrDataset { inner }));
        Ok(())
    })
}

/// Number of observations, or 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn ivqr_dataset_n(ds: *const IvqrDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.n())
}

/// Number of exogenous regressors including any intercept.
///
/// # Safety
/// `ds` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn ivqr_dataset_k(ds: *const IvqrDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.k())
}

/// Number of instruments.
///
/// # Safety
/// `ds` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn ivqr_dataset_p(ds: *const IvqrDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.p())
}

/// # Safety
/// `ds` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ivqr_dataset_free(ds: *mut IvqrDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

fn mode_of(w: IvqrWeighting) -> WeightingMode {
    match w {
        IvqrWeighting::Identity => WeightingMode::Identity,
        IvqrWeighting::InverseGammaCov => WeightingMode::InverseGammaCov,
    }
}

/// IVQR grid search over `lo, lo + step, ..., hi`.
///
/// # Safety
/// `ds` must be a live dataset handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ivqr_fit(
    ds: *const IvqrDataset,
    tau: f64,
    lo: f64,
    step: f64,
    hi: f64,
    weighting: IvqrWeighting,
    out: *mut *mut IvqrFitHandle,
) -> IvqrStatus {
    guard(|| {
        let ds = reference(ds, "ds")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let grid = AlphaGrid::new(lo, hi, step)?;
        let inner = fit_ivqr(&ds.inner, tau, &grid, mode_of(weighting))?;
        *out = Box::into_raw(Box::new(IvqrFitHandle { inner }));
        Ok(())
    })
}

/// Estimated coefficient on the endogenous variable; NaN for NULL.
///
/// # Safety
/// `fit` must be NULL or a live fit handle.
#[no_mangle]
pub unsafe extern "C" fn ivqr_fit_alpha(fit: *const IvqrFitHandle) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.inner.alpha_hat)
}

/// Number of grid points, the length needed by [`ivqr_fit_objective`].
///
/// # Safety
/// `fit` must be NULL or a live fit handle.
#[no_mangle]
pub unsafe extern "C" fn ivqr_fit_grid_len(fit: *const IvqrFitHandle) -> usize {
    fit.as_ref().map_or(0, |f| f.inner.grid.len())
}

/// Number of warnings raised by the fit (flat curve, boundary minimum,
/// discontinuity).
///
/// # Safety
/// `fit` must be NULL or a live fit handle.
#[no_mangle]
pub unsafe extern "C" fn ivqr_fit_warning_count(fit: *const IvqrFitHandle) -> usize {
    fit.as_ref().map_or(0, |f| f.inner.warnings.len())
}

/// Copies the grid and the objective value at each point.
///
/// # Safety
/// `fit` must be a live fit handle; `alphas` and `values` must each hold
/// `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ivqr_fit_objective(
    fit: *const IvqrFitHandle,
    alphas: *mut f64,
    values: *mut f64,
    len: usize,
) -> IvqrStatus {
    guard(|| {
        let fit = reference(fit, "fit")?;
        write_out(alphas, len, &fit.inner.grid)?;
        write_out(values, len, &fit.inner.objective_curve)
    })
}

/// Copies `theta = (alpha, beta, gamma)`, of length `1 + k + p`.
///
/// # Safety
/// `fit` must be a live fit handle; `out` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ivqr_fit_theta(fit: *const IvqrFitHandle, out: *mut f64, len: usize) -> IvqrStatus {
    guard(|| {
        let fit = reference(fit, "fit")?;
        write_out(out, len, &fit.inner.theta())
    })
}

/// # Safety
/// `fit` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ivqr_fit_free(fit: *mut IvqrFitHandle) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Sparsity density weights at `tau`, `n` values written to `out`.
///
/// # Safety
/// `ds` must be a live dataset handle; `out` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ivqr_sparsity_weights(
    ds: *const IvqrDataset,
    tau: f64,
    lo: f64,
    step: f64,
    hi: f64,
    weighting: IvqrWeighting,
    out: *mut f64,
    len: usize,
) -> IvqrStatus {
    guard(|| {
        let ds = reference(ds, "ds")?;
        let grid = AlphaGrid::new(lo, hi, step)?;
        let w = sparsity_weights(&ds.inner, tau, &grid, mode_of(weighting))?;
        write_out(out, len, &w.values)
    })
}

/// Weighted first stage. `weights` may be NULL for unit weights (the 2SLS
/// first stage); otherwise it holds `n` nonnegative values.
///
/// # Safety
/// `ds` must be a live dataset handle, `weights` NULL or `n` readable
/// doubles, and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ivqr_first_stage(
    ds: *const IvqrDataset,
    weights: *const f64,
    covariance: IvqrCovariance,
    out: *mut *mut IvqrFirstStage,
) -> IvqrStatus {
    guard(|| {
        let ds = reference(ds, "ds")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let n = ds.inner.n();
        let w = if weights.is_null() {
            WeightVector::unit(n)
        } else {
            WeightVector::from_values(slice(weights, n, "weights")?.to_vec(), None, WeightSource::Supplied)?
        };
        let kind = match covariance {
            IvqrCovariance::Hc0 => CovarianceKind::Hc0,
            IvqrCovariance::Hc1 => CovarianceKind::Hc1,
            IvqrCovariance::Classical => CovarianceKind::Classical,
        };
        let inner = fit_first_stage_with(&ds.inner, &w, kind)?;
        *out = Box::into_raw(Box::new(IvqrFirstStage { inner }));
        Ok(())
    })
}

/// Number of first-stage coefficients, `k + p`.
///
/// # Safety
/// `fs` must be NULL or a live first-stage handle.
#[no_mangle]
pub unsafe extern "C" fn ivqr_first_stage_len(fs: *const IvqrFirstStage) -> usize {
    fs.as_ref().map_or(0, |f| f.inner.mu_hat.len())
}

/// Copies `(psi, delta)`: exogenous coefficients, then instruments.
///
/// # Safety
/// `fs` must be a live first-stage handle; `out` must hold `len` writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn ivqr_first_stage_coefficients(
    fs: *const IvqrFirstStage,
    out: *mut f64,
    len: usize,
) -> IvqrStatus {
    guard(|| {
        let fs = reference(fs, "fs")?;
        write_out(out, len, &fs.inner.mu_hat)
    })
}

/// Copies the standard errors, aligned with the coefficients.
///
/// # Safety
/// As [`ivqr_first_stage_coefficients`].
#[no_mangle]
pub unsafe extern "C" fn ivqr_first_stage_std_errors(
    fs: *const IvqrFirstStage,
    out: *mut f64,
    len: usize,
) -> IvqrStatus {
    guard(|| {
        let fs = reference(fs, "fs")?;
        write_out(out, len, &fs.inner.std_errors())
    })
}

/// Wald test that the instrument coefficients at positions `tested`
/// (0-based, among the `p` instruments) are zero. At least one instrument
/// must stay untested.
///
/// # Safety
/// `fs` must be a live first-stage handle, `tested` must hold `m` readable
/// indices, and `statistic` and `p_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ivqr_wald_test(
    fs: *const IvqrFirstStage,
    tested: *const usize,
    m: usize,
    statistic: *mut f64,
    p_value: *mut f64,
) -> IvqrStatus {
    guard(|| {
        let fs = reference(fs, "fs")?;
        if statistic.is_null() || p_value.is_null() {
            return Err(Failure::Null("statistic/p_value"));
        }
        let idx: &[usize] = if m == 0 {
            &[]
        } else if tested.is_null() {
            return Err(Failure::Null("tested"));
        } else {
            std::slice::from_raw_parts(tested, m)
        };
        let t = wald_test(&fs.inner, idx)?;
        *statistic = t.statistic;
        *p_value = t.p_value;
        Ok(())
    })
}

/// # Safety
/// `fs` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ivqr_first_stage_free(fs: *mut IvqrFirstStage) {
    if !fs.is_null() {
        drop(Box::from_raw(fs));
    }
}
