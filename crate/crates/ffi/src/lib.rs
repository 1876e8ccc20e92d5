//! C ABI over `lipattn`.
//!
//! Parameters live behind an opaque [`LipMhaParams`] handle. Every call
//! returns a [`LipStatus`]; on failure [`lip_last_error`] gives a message for
//! the calling thread. Matrices are row-major `N × D` arrays of `double`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use lipattn::attention::{mha_forward, AttentionKind, MhaParams};
use lipattn::bounds::bound;
use lipattn::contractive::{residual_inverse, ContractiveMha};
use lipattn::jacobian::{jacobian_norm, mha_jacobian};
use lipattn::tensor::{phi, phi_inv, Matrix, NormKind};
use lipattn::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LipStatus {
    Ok = 0,
    NullPointer = 1,
    Domain = 2,
    Shape = 3,
    Mask = 4,
    Unsupported = 5,
    NonFinite = 6,
    Dominance = 7,
    Io = 8,
    Parse = 9,
    Numerical = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LipKind {
    DotProduct = 0,
    L2 = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LipNorm {
    Two = 0,
    Inf = 1,
}

/// Upper bound on the Lipschitz constant of tied L2 attention.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LipBound {
    pub value: f64,
    /// `φ⁻¹(N − 1)`.
    pub phi_term: f64,
    pub n: usize,
    pub d: usize,
    pub h: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LipInversion {
    pub iterations: usize,
    /// `‖y − (x + c f(x))‖_∞` at the returned point.
    pub residual: f64,
    pub converged: bool,
}

/// Opaque multihead attention parameters.
pub struct LipMhaParams(MhaParams);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> LipStatus {
    match e {
        Error::Shape(_) => LipStatus::Shape,
        Error::Domain(_) => LipStatus::Domain,
        Error::FullyMaskedRow(_) | Error::Mask(_) => LipStatus::Mask,
        Error::Unsupported(_) => LipStatus::Unsupported,
        Error::NonFinite { .. } => LipStatus::NonFinite,
        Error::Dominance { .. } => LipStatus::Dominance,
        Error::Io(_) => LipStatus::Io,
        Error::Json(_) | Error::Csv(_) => LipStatus::Parse,
        Error::DegenerateIterate | Error::NoConvergence(_) | Error::Plot(_) => LipStatus::Numerical,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `body`, records any error or panic and maps it to a status.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> LipStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            LipStatus::Ok
        }
        Ok(Err(Failure::Null(name))) => {
            set_error(format!("{name} is null"));
            LipStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            LipStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(name))
}

unsafe fn out<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(name))
}

/// Copies an `n × d` row-major array into a matrix.
unsafe fn read_matrix(data: *const f64, n: usize, d: usize, name: &'static str) -> Result<Matrix, Failure> {
    if data.is_null() {
        return Err(Failure::Null(name));
    }
    let len = n.checked_mul(d).ok_or_else(|| Failure::Lib(Error::Shape("n * d overflows".into())))?;
    Ok(Matrix::from_vec(n, d, std::slice::from_raw_parts(data, len).to_vec())?)
}

unsafe fn write_matrix(m: &Matrix, data: *mut f64, name: &'static str) -> Result<(), Failure> {
    if data.is_null() {
        return Err(Failure::Null(name));
    }
    std::slice::from_raw_parts_mut(data, m.as_slice().len()).copy_from_slice(m.as_slice());
    Ok(())
}

fn kind_of(k: LipKind) -> AttentionKind {
    match k {
        LipKind::DotProduct => AttentionKind::DotProduct,
        LipKind::L2 => AttentionKind::L2,
    }
}

fn norm_of(p: LipNorm) -> NormKind {
    match p {
        LipNorm::Two => NormKind::Two,
        LipNorm::Inf => NormKind::Inf,
    }
}

fn boxed(params: MhaParams) -> *mut LipMhaParams {
    Box::into_raw(Box::new(LipMhaParams(params)))
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn lip_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Parses parameters from a NUL-terminated JSON document.
///
/// # Safety
/// `json` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lip_params_from_json(json: *const c_char, out_params: *mut *mut LipMhaParams) -> LipStatus {
    guard(|| {
        let slot = out(out_params, "out_params")?;
        if json.is_null() {
            return Err(Failure::Null("json"));
        }
        let text = CStr::from_ptr(json).to_str().map_err(|e| Error::Domain(format!("json is not UTF-8: {e}")))?;
        *slot = boxed(MhaParams::from_json(text)?);
        Ok(())
    })
}

/// Identity projections and `W^O = I`.
///
/// # Safety
/// `out_params` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lip_params_identity(kind: LipKind, d: usize, h: usize, out_params: *mut *mut LipMhaParams) -> LipStatus {
    guard(|| {
        let slot = out(out_params, "out_params")?;
        *slot = boxed(MhaParams::identity(kind_of(kind), d, h)?);
        Ok(())
    })
}

/// Glorot-uniform weights from a seeded generator.
///
/// # Safety
/// `out_params` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lip_params_random(
    kind: LipKind,
    tied: bool,
    d: usize,
    h: usize,
    seed: u64,
    out_params: *mut *mut LipMhaParams,
) -> LipStatus {
    guard(|| {
        let slot = out(out_params, "out_params")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        *slot = boxed(MhaParams::random(kind_of(kind), tied, d, h, &mut rng)?);
        Ok(())
    })
}

/// Serializes parameters to JSON. Free the string with [`lip_string_free`].
///
/// # Safety
/// `params` must come from this library and `out_json` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lip_params_to_json(params: *const LipMhaParams, out_json: *mut *mut c_char) -> LipStatus {
    guard(|| {
        let p = deref(params, "params")?;
        let slot = out(out_json, "out_json")?;
        let text = p.0.to_json()?;
        *slot = CString::new(text).map_err(|e| Error::Domain(e.to_string()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from [`lip_params_to_json`] or be null.
#[no_mangle]
pub unsafe extern "C" fn lip_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `params` must come from this library or be null, and is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn lip_params_free(params: *mut LipMhaParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

/// Model width `D`, or 0 for a null handle.
///
/// # Safety
/// `params` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn lip_params_d_model(params: *const LipMhaParams) -> usize {
    params.as_ref().map_or(0, |p| p.0.d_model())
}

/// Head count `H`, or 0 for a null handle.
///
/// # Safety
/// `params` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn lip_params_num_heads(params: *const LipMhaParams) -> usize {
    params.as_ref().map_or(0, |p| p.0.num_heads())
}

/// Multihead attention output for an `n × D` input.
///
/// # Safety
/// `x` and `out_y` must each hold `n · D` doubles.
#[no_mangle]
pub unsafe extern "C" fn lip_mha_forward(params: *const LipMhaParams, x: *const f64, n: usize, out_y: *mut f64) -> LipStatus {
    guard(|| {
        let p = deref(params, "params")?;
        let x = read_matrix(x, n, p.0.d_model(), "x")?;
        write_matrix(&mha_forward(&x, &p.0, None)?, out_y, "out_y")
    })
}

/// Operator norm of the full Jacobian at `x`.
///
/// # Safety
/// `x` must hold `n · D` doubles and `out_norm` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lip_jacobian_norm(
    params: *const LipMhaParams,
    x: *const f64,
    n: usize,
    norm: LipNorm,
    out_norm: *mut f64,
) -> LipStatus {
    guard(|| {
        let p = deref(params, "params")?;
        let slot = out(out_norm, "out_norm")?;
        let x = read_matrix(x, n, p.0.d_model(), "x")?;
        *slot = jacobian_norm(&mha_jacobian(&x, &p.0, None)?, norm_of(norm))?.0;
        Ok(())
    })
}

/// Closed-form upper bound for sequence length `n` (tied L2 only).
///
/// # Safety
/// `out_bound` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lip_bound(params: *const LipMhaParams, n: usize, norm: LipNorm, out_bound: *mut LipBound) -> LipStatus {
    guard(|| {
        let p = deref(params, "params")?;
        let slot = out(out_bound, "out_bound")?;
        let r = bound(&p.0, n, norm_of(norm))?;
        *slot = LipBound { value: r.value, phi_term: r.phi_term, n: r.n, d: r.d, h: r.h };
        Ok(())
    })
}

/// `x · e^{x+1}` for `x ≥ 0`.
///
/// # Safety
/// `out_y` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lip_phi(x: f64, out_y: *mut f64) -> LipStatus {
    guard(|| {
        *out(out_y, "out_y")? = phi(x)?;
        Ok(())
    })
}

/// Inverse of [`lip_phi`] for `y ≥ 0`.
///
/// # Safety
/// `out_x` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lip_phi_inv(y: f64, out_x: *mut f64) -> LipStatus {
    guard(|| {
        *out(out_x, "out_x")? = phi_inv(y)?;
        Ok(())
    })
}

/// Inverts `y = x + g(x)`, where `g` is the tied L2 attention rescaled to
/// Lipschitz constant `c`, by fixed-point iteration from `x = y`.
///
/// # Safety
/// `y` and `out_x` must each hold `n · D` doubles; `out_info` may be null.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn lip_contractive_invert(
    params: *const LipMhaParams,
    c: f64,
    y: *const f64,
    n: usize,
    tol: f64,
    max_iter: usize,
    out_x: *mut f64,
    out_info: *mut LipInversion,
) -> LipStatus {
    guard(|| {
        let p = deref(params, "params")?;
        let y = read_matrix(y, n, p.0.d_model(), "y")?;
        let f = ContractiveMha::new(p.0.clone(), c, n)?;
        let r = residual_inverse(&y, |x| f.forward(x), tol, max_iter)?;
        write_matrix(&r.x, out_x, "out_x")?;
        if let Some(info) = out_info.as_mut() {
            *info = LipInversion { iterations: r.iterations, residual: r.residual, converged: r.converged };
        }
        Ok(())
    })
}
