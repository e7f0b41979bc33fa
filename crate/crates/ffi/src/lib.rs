//! C interface to `edmd-dl`.
//!
//! Datasets and models are opaque heap handles released with the matching
//! `_free` function. Every fallible call returns an [`EdmdStatus`]; on failure
//! `edmd_last_error_message` describes the most recent error on the calling
//! thread. Output arrays are caller-allocated, and a too-small buffer yields
//! `EDMD_STATUS_BUFFER_TOO_SMALL`, with the required length in the error message.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use edmd_dl::cli::{read_model, CliError, ModelFile, RunConfig};
use edmd_dl::dataset::{SystemDescriptor, TimeSeriesDataset};
use edmd_dl::edmd::KoopmanModel;
use edmd_dl::systems::{
    generate_duffing, generate_ks, DuffingDataConfig, DuffingParams, KsDataConfig, KsParams,
};
use edmd_dl::trainer::train;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdmdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Numerical = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Opaque snapshot dataset.
pub struct EdmdDataset {
    inner: TimeSeriesDataset,
}

/// Opaque trained Koopman model.
pub struct EdmdModel {
    model: KoopmanModel,
    system: SystemDescriptor,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Failure(EdmdStatus, String);

impl From<CliError> for Failure {
    fn from(e: CliError) -> Self {
        let status = match e {
            CliError::Usage(_) => EdmdStatus::InvalidArgument,
            CliError::Numerical(_) => EdmdStatus::Numerical,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: EdmdStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EdmdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EdmdStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            EdmdStatus::Panic
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(EdmdStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(EdmdStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(EdmdStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(EdmdStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(fail(EdmdStatus::NullPointer, format!("{what} is null")));
    }
    if len < need {
        return Err(fail(
            EdmdStatus::BufferTooSmall,
            format!("{what} holds {len} values, {need} needed"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn edmd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn edmd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Simulates the default Duffing oscillator from uniform random initial conditions.
///
/// # Safety
/// `out` must be a valid pointer to write the new handle to.
#[no_mangle]
pub unsafe extern "C" fn edmd_dataset_generate_duffing(
    trajectories: usize,
    steps: usize,
    seed: u64,
    out: *mut *mut EdmdDataset,
) -> EdmdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg = DuffingDataConfig {
            trajectories,
            steps,
            ..DuffingDataConfig::default()
        };
        let ds = generate_duffing(&DuffingParams::default(), &cfg, seed).map_err(CliError::from)?;
        *out = Box::into_raw(Box::new(EdmdDataset { inner: ds }));
        Ok(())
    })
}

/// Simulates the Kuramoto–Sivashinsky equation on `nx` grid points.
/// `substeps == 0` selects the stable substep count automatically.
///
/// # Safety
/// `out` must be a valid pointer to write the new handle to.
#[no_mangle]
pub unsafe extern "C" fn edmd_dataset_generate_ks(
    nx: usize,
    trajectories: usize,
    steps: usize,
    substeps: usize,
    seed: u64,
    out: *mut *mut EdmdDataset,
) -> EdmdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let p = KsParams {
            nx,
            substeps: (substeps > 0).then_some(substeps),
            ..KsParams::default()
        };
        let cfg = KsDataConfig {
            trajectories,
            steps,
            ..KsDataConfig::default()
        };
        let ds = generate_ks(&p, &cfg, seed).map_err(CliError::from)?;
        *out = Box::into_raw(Box::new(EdmdDataset { inner: ds }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn edmd_dataset_load(path: *const c_char, out: *mut *mut EdmdDataset) -> EdmdStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        let out = out_ptr(out, "out")?;
        let file = std::fs::File::open(path)
            .map_err(|e| fail(EdmdStatus::Io, format!("cannot open {path}: {e}")))?;
        let ds = TimeSeriesDataset::read_binary(std::io::BufReader::new(file))
            .map_err(|e| fail(EdmdStatus::InvalidArgument, e.to_string()))?;
        *out = Box::into_raw(Box::new(EdmdDataset { inner: ds }));
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live dataset handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn edmd_dataset_save(ds: *const EdmdDataset, path: *const c_char) -> EdmdStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        let path = c_str(path, "path")?;
        let file = std::fs::File::create(path)
            .map_err(|e| fail(EdmdStatus::Io, format!("cannot create {path}: {e}")))?;
        ds.inner
            .write_binary(std::io::BufWriter::new(file))
            .map_err(|e| fail(EdmdStatus::Io, e.to_string()))
    })
}

/// State dimension and number of transition pairs.
///
/// # Safety
/// `ds` must be a live dataset handle; the outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn edmd_dataset_shape(
    ds: *const EdmdDataset,
    state_dim: *mut usize,
    pairs: *mut usize,
) -> EdmdStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        *out_ptr(state_dim, "state_dim")? = ds.inner.d;
        *out_ptr(pairs, "pairs")? = ds.inner.n_pairs();
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn edmd_dataset_free(ds: *mut EdmdDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains a dictionary on `ds` using a TOML configuration document
/// (same schema as the command-line `--config` file). A null config uses defaults.
///
/// # Safety
/// `ds` must be a live dataset handle, `config_toml` null or NUL-terminated,
/// and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn edmd_train(
    ds: *const EdmdDataset,
    config_toml: *const c_char,
    out: *mut *mut EdmdModel,
) -> EdmdStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        let out = out_ptr(out, "out")?;
        let cfg = if config_toml.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_toml(c_str(config_toml, "config_toml")?)?
        };
        let (_, model, _) = train(&cfg.train, &ds.inner).map_err(CliError::from)?;
        *out = Box::into_raw(Box::new(EdmdModel {
            model,
            system: ds.inner.system.clone(),
        }));
        Ok(())
    })
}

/// Loads a `model.json` written by `edmd-dl train` or [`edmd_model_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn edmd_model_load(path: *const c_char, out: *mut *mut EdmdModel) -> EdmdStatus {
    guard(|| {
        let path = PathBuf::from(c_str(path, "path")?);
        let out = out_ptr(out, "out")?;
        if !path.exists() {
            return Err(fail(EdmdStatus::Io, format!("{} does not exist", path.display())));
        }
        let (model, system) = read_model(&path)?;
        *out = Box::into_raw(Box::new(EdmdModel { model, system }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live model handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn edmd_model_save(model: *const EdmdModel, path: *const c_char) -> EdmdStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let path = c_str(path, "path")?;
        let file = ModelFile {
            system: m.system.clone(),
            model: m.model.to_export(),
        };
        let bytes = serde_json::to_vec_pretty(&file).map_err(|e| fail(EdmdStatus::Io, e.to_string()))?;
        std::fs::write(path, bytes).map_err(|e| fail(EdmdStatus::Io, format!("cannot write {path}: {e}")))
    })
}

/// State dimension `d` and dictionary size `M`.
///
/// # Safety
/// `model` must be a live model handle; the outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn edmd_model_shape(
    model: *const EdmdModel,
    state_dim: *mut usize,
    dictionary_size: *mut usize,
) -> EdmdStatus {
    guard(|| {
        let m = handle(model, "model")?;
        *out_ptr(state_dim, "state_dim")? = m.model.dictionary.state_dim();
        *out_ptr(dictionary_size, "dictionary_size")? = m.model.size();
        Ok(())
    })
}

/// Predicts `steps` steps from `x0` (length `d`). Writes `(steps + 1) * d`
/// values row by row; the first row is `x0` reconstructed through the modes.
///
/// # Safety
/// `model` must be a live model handle, `x0` must point to `d` values and
/// `out` to `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn edmd_model_predict(
    model: *const EdmdModel,
    x0: *const f64,
    d: usize,
    steps: usize,
    out: *mut f64,
    out_len: usize,
) -> EdmdStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let dim = m.model.dictionary.state_dim();
        if d != dim {
            return Err(fail(
                EdmdStatus::InvalidArgument,
                format!("initial condition has {d} components, model state has {dim}"),
            ));
        }
        if x0.is_null() {
            return Err(fail(EdmdStatus::NullPointer, "x0 is null"));
        }
        let x0 = std::slice::from_raw_parts(x0, d);
        let need = steps
            .checked_add(1)
            .and_then(|s| s.checked_mul(d))
            .ok_or_else(|| fail(EdmdStatus::InvalidArgument, "steps too large"))?;
        let dst = out_slice(out, out_len, need, "out")?;
        let traj = m
            .model
            .predict_many(x0, 1, steps)
            .map_err(CliError::from)?
            .pop()
            .unwrap();
        dst.copy_from_slice(&traj);
        Ok(())
    })
}

/// Koopman eigenvalues as separate real and imaginary arrays of length `M`.
///
/// # Safety
/// `model` must be a live model handle; `re` and `im` must each point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn edmd_model_eigenvalues(
    model: *const EdmdModel,
    re: *mut f64,
    im: *mut f64,
    len: usize,
) -> EdmdStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let ev = m.model.eigenvalues();
        let re = out_slice(re, len, ev.len(), "re")?;
        let im = out_slice(im, len, ev.len(), "im")?;
        for (k, z) in ev.iter().enumerate() {
            re[k] = z.re;
            im[k] = z.im;
        }
        Ok(())
    })
}

/// Eigenfunction values at `n` points (`xs` holds `n * d` values, one point per row).
/// Writes `n * M` values per output array, one point per row.
///
/// # Safety
/// `model` must be a live model handle, `xs` must point to `n * d` values and
/// `re`, `im` to `len` writable values each.
#[no_mangle]
pub unsafe extern "C" fn edmd_model_eigenfunctions(
    model: *const EdmdModel,
    xs: *const f64,
    n: usize,
    re: *mut f64,
    im: *mut f64,
    len: usize,
) -> EdmdStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let d = m.model.dictionary.state_dim();
        let size = m.model.size();
        if xs.is_null() {
            return Err(fail(EdmdStatus::NullPointer, "xs is null"));
        }
        if n == 0 {
            return Err(fail(EdmdStatus::InvalidArgument, "n must be positive"));
        }
        let need = n
            .checked_mul(size)
            .ok_or_else(|| fail(EdmdStatus::InvalidArgument, "n too large"))?;
        let xs = std::slice::from_raw_parts(xs, n * d);
        let re = out_slice(re, len, need, "re")?;
        let im = out_slice(im, len, need, "im")?;
        let phi = m.model.eigenfunctions_batch(xs, n).map_err(CliError::from)?;
        for i in 0..n {
            for k in 0..size {
                re[i * size + k] = phi[(i, k)].re;
                im[i * size + k] = phi[(i, k)].im;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn edmd_model_free(model: *mut EdmdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
