//! C interface for the affine square-root diffusion toolkit.
//!
//! Conventions shared by every entry point:
//!
//! * Models are opaque [`FpModel`] handles, created by [`fp_model_parse`]
//!   from the same JSON accepted by the command-line tool and released
//!   with [`fp_model_free`].
//! * Results are UTF-8 JSON documents allocated by this library; release
//!   them with [`fp_string_free`]. Their shapes mirror the command-line
//!   output for the corresponding subcommand.
//! * Every function returns an [`FpStatus`]. `Ok` and `Negative` both
//!   produce a result document — `Negative` means the question itself
//!   came back negative (a violated condition, a missing witness) — while
//!   the three error codes leave the output null and store a diagnostic
//!   retrievable with [`fp_last_error`] on the calling thread.
//!
//! ```c
//! FpModel *model = NULL;
//! char *report = NULL;
//! if (fp_model_parse(json, &model) != FP_STATUS_OK) {
//!     fprintf(stderr, "%s\n", fp_last_error());
//!     return 1;
//! }
//! FpStatus st = fp_check_feller(model, &report);
//! if (st == FP_STATUS_OK || st == FP_STATUS_NEGATIVE) {
//!     puts(report);
//! }
//! fp_string_free(report);
//! fp_model_free(model);
//! ```
//!
//! The header `include/feller_probe.h` is regenerated on every build.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use libc::c_char;
use nalgebra::DVector;
use serde_json::json;

use feller_probe::canonical::{canonicalize, eliminate_b1};
use feller_probe::certify::{certify_c2, certify_c22, to_tilted_model, Certificate};
use feller_probe::feller::check_canonical_feller;
use feller_probe::model::SdeModel;
use feller_probe::montecarlo::{simulate, SimConfig};
use feller_probe::novikov;
use feller_probe::odeexp::integrate_mean;
use feller_probe::{Error, Result};

/// Status code returned by every function in this interface.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpStatus {
    /// The operation succeeded and the answer is affirmative.
    Ok = 0,
    /// The operation succeeded and the answer is negative (a condition
    /// fails, a witness was not found); a result document is still
    /// produced.
    Negative = 1,
    /// Malformed input: unreadable JSON, invalid dimensions, null
    /// pointers, out-of-range parameters.
    InvalidInput = 2,
    /// The model is not in the class the operation requires.
    ClassMismatch = 3,
    /// A numerical failure: search exhaustion, internal inconsistency,
    /// or an exploding simulation.
    Numerical = 4,
}

impl FpStatus {
    fn from_error(e: &Error) -> Self {
        match e.exit_code() {
            2 => FpStatus::InvalidInput,
            3 => FpStatus::ClassMismatch,
            _ => FpStatus::Numerical,
        }
    }
}

/// Opaque handle to a validated model.
pub struct FpModel {
    inner: SdeModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&ch| ch != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

/// Message describing the most recent failure on the calling thread, as
/// a NUL-terminated UTF-8 string. The pointer stays valid until the next
/// call into this library from the same thread; do not free it. Returns
/// an empty string when no failure has been recorded.
#[no_mangle]
pub extern "C" fn fp_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Version of the library, as a static NUL-terminated string; do not
/// free it.
#[no_mangle]
pub extern "C" fn fp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Releases a string allocated by this library. Passing null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn fp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Releases a model handle. Passing null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn fp_model_free(model: *mut FpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs `body`, routing panics and errors into the status code and the
/// thread-local diagnostic. `Ok(true)` maps to `Ok`, `Ok(false)` to
/// `Negative`.
fn guarded(body: impl FnOnce() -> Result<bool>) -> FpStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(true)) => FpStatus::Ok,
        Ok(Ok(false)) => FpStatus::Negative,
        Ok(Err(e)) => {
            set_last_error(&e.to_string());
            FpStatus::from_error(&e)
        }
        Err(_) => {
            set_last_error("internal panic");
            FpStatus::Numerical
        }
    }
}

/// # Safety
/// `text` must be a valid NUL-terminated string.
unsafe fn read_str<'a>(text: *const c_char, what: &str) -> Result<&'a str> {
    if text.is_null() {
        return Err(Error::InvalidInput(format!("{what} is null")));
    }
    CStr::from_ptr(text)
        .to_str()
        .map_err(|e| Error::InvalidInput(format!("{what} is not UTF-8: {e}")))
}

unsafe fn read_model<'a>(model: *const FpModel) -> Result<&'a SdeModel> {
    if model.is_null() {
        return Err(Error::InvalidInput("model handle is null".into()));
    }
    Ok(&(*model).inner)
}

unsafe fn write_json(out: *mut *mut c_char, value: &serde_json::Value) -> Result<()> {
    if out.is_null() {
        return Err(Error::InvalidInput("output pointer is null".into()));
    }
    let text = serde_json::to_string_pretty(value)?;
    let c = CString::new(text)
        .map_err(|_| Error::InternalConsistency("result contained a NUL byte".into()))?;
    *out = c.into_raw();
    Ok(())
}

/// Parses and validates a model from JSON. On success writes a handle to
/// `out_model`; release it with [`fp_model_free`].
#[no_mangle]
pub unsafe extern "C" fn fp_model_parse(
    json: *const c_char,
    out_model: *mut *mut FpModel,
) -> FpStatus {
    guarded(|| {
        if out_model.is_null() {
            return Err(Error::InvalidInput("output pointer is null".into()));
        }
        *out_model = ptr::null_mut();
        let text = read_str(json, "model JSON")?;
        let model = SdeModel::from_json_str(text)?;
        *out_model = Box::into_raw(Box::new(FpModel { inner: model }));
        Ok(true)
    })
}

/// Checks the structural non-negativity conditions on a canonical model.
/// `Ok` when all conditions hold, `Negative` when at least one fails; the
/// report lists each condition with its signed margin.
#[no_mangle]
pub unsafe extern "C" fn fp_check_feller(
    model: *const FpModel,
    out_json: *mut *mut c_char,
) -> FpStatus {
    guarded(|| {
        let m = read_model(model)?;
        let report = check_canonical_feller(m)?;
        let value = json!({
            "class": m.classify().display_name(),
            "report": serde_json::to_value(&report)?,
        });
        write_json(out_json, &value)?;
        Ok(report.overall)
    })
}

/// Brings a model with proportional volatility factors to canonical form.
/// When `drop_b1` is non-zero the first intercept is also eliminated by
/// the additional coordinate shift (2-dimensional models only).
#[no_mangle]
pub unsafe extern "C" fn fp_canonicalize(
    model: *const FpModel,
    drop_b1: i32,
    out_json: *mut *mut c_char,
) -> FpStatus {
    guarded(|| {
        let m = read_model(model)?;
        let transform = canonicalize(m)?;
        let mut value = json!({
            "input_class": m.classify().display_name(),
            "transform": transform.to_json_value(),
            "canonical_model": transform.model.to_json_value(),
            "output_class": transform.model.classify().display_name(),
        });
        if drop_b1 != 0 {
            value["intercept_free_model"] = eliminate_b1(&transform.model)?.to_json_value();
        }
        write_json(out_json, &value)?;
        Ok(true)
    })
}

/// Evaluates the expectation flow `x' = a x + b` at time `t`, writing
/// `{"t": ..., "mean": [...]}`.
#[no_mangle]
pub unsafe extern "C" fn fp_expectation(
    model: *const FpModel,
    t: f64,
    out_json: *mut *mut c_char,
) -> FpStatus {
    guarded(|| {
        let m = read_model(model)?;
        let mean = integrate_mean(&m.a, &m.b, &m.x0, t, 1e-10)?;
        let value = json!({ "t": t, "mean": mean.as_slice() });
        write_json(out_json, &value)?;
        Ok(true)
    })
}

fn certify_dispatch(model: &SdeModel, t0: f64) -> Result<Certificate> {
    if model.p == 2 && model.m == 2 && model.is_canonical() {
        certify_c22(model, t0)
    } else if model.is_proportional() {
        certify_c2(model, t0)
    } else {
        Err(Error::ClassMismatch(format!(
            "certificates exist for 2-dim canonical models with independent \
             factors or proportional models; got {}",
            model.classify().display_name()
        )))
    }
}

/// Constructs a drift tilt under which the expected volatility factor is
/// negative at `t0`, certifying that the untilted process leaves the
/// non-negative range with positive probability.
#[no_mangle]
pub unsafe extern "C" fn fp_certify(
    model: *const FpModel,
    t0: f64,
    out_json: *mut *mut c_char,
) -> FpStatus {
    guarded(|| {
        let m = read_model(model)?;
        let cert = certify_dispatch(m, t0)?;
        let tilted = to_tilted_model(m, &cert)?;
        let value = json!({
            "class": m.classify().display_name(),
            "certificate": serde_json::to_value(&cert)?,
            "tilted_model": tilted.to_json_value(),
        });
        write_json(out_json, &value)?;
        Ok(true)
    })
}

/// Computes the exponential-moment constants for scale `c` and the step
/// schedule covering `[0, horizon]`.
#[no_mangle]
pub unsafe extern "C" fn fp_novikov_schedule(
    model: *const FpModel,
    c: f64,
    horizon: f64,
    out_json: *mut *mut c_char,
) -> FpStatus {
    guarded(|| {
        let m = read_model(model)?;
        let consts = novikov::constants(m, c)?;
        let partition = novikov::partition(m, c, horizon)?;
        let value = json!({
            "constants": serde_json::to_value(&consts)?,
            "steps": partition.steps(),
            "partition": serde_json::to_value(&partition)?,
        });
        write_json(out_json, &value)?;
        Ok(true)
    })
}

/// Searches for a positive vector witnessing the drift-block feasibility
/// inequality on the leading `m_factors x m_factors` block; pass zero to
/// use the model's own factor count. `Ok` with a verified witness,
/// `Negative` when the search found none.
#[no_mangle]
pub unsafe extern "C" fn fp_check_addreq(
    model: *const FpModel,
    m_factors: usize,
    out_json: *mut *mut c_char,
) -> FpStatus {
    guarded(|| {
        let m = read_model(model)?;
        let dim = if m_factors == 0 { m.m } else { m_factors };
        if dim == 0 || dim > m.p {
            return Err(Error::InvalidInput(format!(
                "factor count must be in 1..={}, got {dim}",
                m.p
            )));
        }
        let block = m.a.view((0, 0), (dim, dim)).into_owned();
        let outcome = novikov::check_addreq(&block, dim)?;
        let cases = if m.p == 2 {
            novikov::classify_2x2_cases(&m.a).unwrap_or_default()
        } else {
            Vec::new()
        };
        let value = json!({
            "m": dim,
            "holds": outcome.holds,
            "witness": outcome.witness,
            "cases": serde_json::to_value(&cases)?,
        });
        write_json(out_json, &value)?;
        Ok(outcome.holds)
    })
}

/// Runs the Euler scheme with the exponential density along each path.
/// `lambda` points to `lambda_len` tilt entries (null with length zero
/// for the untilted chain); `stopped` freezes each path's density at its
/// first factor crossing. Statistics are reported at the quarter points
/// of the horizon and are independent of the worker count.
#[no_mangle]
pub unsafe extern "C" fn fp_simulate(
    model: *const FpModel,
    horizon: f64,
    dt: f64,
    n_paths: u64,
    seed: u64,
    lambda: *const f64,
    lambda_len: usize,
    stopped: i32,
    out_json: *mut *mut c_char,
) -> FpStatus {
    guarded(|| {
        let m = read_model(model)?;
        let tilt = if lambda.is_null() {
            if lambda_len != 0 {
                return Err(Error::InvalidInput(
                    "lambda is null but lambda_len is non-zero".into(),
                ));
            }
            DVector::zeros(m.p)
        } else {
            if lambda_len != m.p {
                return Err(Error::InvalidInput(format!(
                    "lambda has length {lambda_len}, expected {}",
                    m.p
                )));
            }
            DVector::from_column_slice(std::slice::from_raw_parts(lambda, lambda_len))
        };
        let cfg = SimConfig::new(horizon, dt, n_paths, seed);
        let result = simulate(m, &cfg, &tilt, stopped != 0)?;
        write_json(out_json, &serde_json::to_value(&result)?)?;
        Ok(true)
    })
}
