//! C ABI over the `laaf` core library.
//!
//! Every function returns a [`LaafStatus`]; results come back through out
//! pointers. On failure a message is kept per thread and can be copied out
//! with [`laaf_last_error`]. Networks are opaque [`LaafNetwork`] handles
//! created by [`laaf_network_new`] or [`laaf_network_load`] and released
//! with [`laaf_network_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use laaf::autodiff::Tape;
use laaf::dynamics::verify_step_equivalence;
use laaf::network::{param_count_ratio, Activation, ActivationMode, Checkpoint, NetworkParams, SlopeKind};
use laaf::objective::{slope_recovery, DataTerm, ObjectiveSpec, PointSet, RecoveryKind};
use laaf::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaafStatus {
    Ok = 0,
    /// A required pointer was null.
    Null = 1,
    InvalidArgument = 2,
    /// Non-finite values, divergence or a failed line search.
    Numerical = 3,
    Io = 4,
    /// An internal panic was caught.
    Panic = 5,
}

pub const LAAF_MODE_FIXED: u32 = 0;
pub const LAAF_MODE_GAAF: u32 = 1;
pub const LAAF_MODE_LLAAF: u32 = 2;
pub const LAAF_MODE_NLAAF: u32 = 3;

pub const LAAF_ACTIVATION_TANH: u32 = 0;
pub const LAAF_ACTIVATION_SIGMOID: u32 = 1;
pub const LAAF_ACTIVATION_RELU: u32 = 2;
pub const LAAF_ACTIVATION_SOFTPLUS: u32 = 3;

/// Opaque network handle.
pub struct LaafNetwork {
    params: NetworkParams,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

struct Fail(LaafStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => LaafStatus::Io,
            e if e.is_numerical() => LaafStatus::Numerical,
            _ => LaafStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(LaafStatus::Null, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(LaafStatus::InvalidArgument, msg.into())
}

fn guard(body: impl FnOnce() -> Result<(), Fail>) -> LaafStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => LaafStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            LaafStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

unsafe fn output<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(ptr, len))
}

unsafe fn handle<'a>(net: *const LaafNetwork) -> Result<&'a LaafNetwork, Fail> {
    net.as_ref().ok_or_else(|| null("network"))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(Path::new(s))
}

fn mode_of(code: u32) -> Result<SlopeKind, Fail> {
    match code {
        LAAF_MODE_FIXED => Ok(SlopeKind::Fixed),
        LAAF_MODE_GAAF => Ok(SlopeKind::Gaaf),
        LAAF_MODE_LLAAF => Ok(SlopeKind::Llaaf),
        LAAF_MODE_NLAAF => Ok(SlopeKind::Nlaaf),
        _ => Err(invalid(format!("unknown mode code {code}"))),
    }
}

fn activation_of(code: u32) -> Result<Activation, Fail> {
    match code {
        LAAF_ACTIVATION_TANH => Ok(Activation::Tanh),
        LAAF_ACTIVATION_SIGMOID => Ok(Activation::Sigmoid),
        LAAF_ACTIVATION_RELU => Ok(Activation::Relu),
        LAAF_ACTIVATION_SOFTPLUS => Ok(Activation::Softplus),
        _ => Err(invalid(format!("unknown activation code {code}"))),
    }
}

/// Copies the calling thread's last error message into `buf` (truncated and
/// always NUL-terminated when `len > 0`). Returns the full message length in
/// bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn laaf_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// New network with Xavier-uniform weights, zero biases and slopes `1/scale`.
///
/// # Safety
/// `widths` must point to `n_widths` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn laaf_network_new(
    widths: *const usize,
    n_widths: usize,
    mode: u32,
    activation: u32,
    scale: f64,
    seed: u64,
    out: *mut *mut LaafNetwork,
) -> LaafStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let widths = input(widths, n_widths, "widths")?;
        let mode = ActivationMode::new(mode_of(mode)?, activation_of(activation)?, scale)?;
        let params = NetworkParams::init(widths, mode, seed)?;
        *out = Box::into_raw(Box::new(LaafNetwork { params }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `net` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn laaf_network_free(net: *mut LaafNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Number of trainable parameters (weights, biases, slopes).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn laaf_network_param_count(net: *const LaafNetwork, out: *mut usize) -> LaafStatus {
    guard(|| {
        let net = handle(net)?;
        *out.as_mut().ok_or_else(|| null("out"))? = net.params.param_count();
        Ok(())
    })
}

/// Input and output widths.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn laaf_network_dims(
    net: *const LaafNetwork,
    input_dim: *mut usize,
    output_dim: *mut usize,
) -> LaafStatus {
    guard(|| {
        let net = handle(net)?;
        *input_dim.as_mut().ok_or_else(|| null("input_dim"))? = net.params.input_dim();
        *output_dim.as_mut().ok_or_else(|| null("output_dim"))? = net.params.output_dim();
        Ok(())
    })
}

/// Evaluates `n_points` row-major inputs into `n_points * output_dim`
/// row-major outputs.
///
/// # Safety
/// `inputs` must hold `n_points * input_dim` values and `outputs` must have
/// room for `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn laaf_network_forward(
    net: *const LaafNetwork,
    inputs: *const f64,
    n_points: usize,
    outputs: *mut f64,
    out_len: usize,
) -> LaafStatus {
    guard(|| {
        let net = handle(net)?;
        let (din, dout) = (net.params.input_dim(), net.params.output_dim());
        if out_len != n_points * dout {
            return Err(invalid(format!(
                "output buffer holds {out_len} values, need {}",
                n_points * dout
            )));
        }
        let xs = input(inputs, n_points * din, "inputs")?;
        let ys = output(outputs, out_len, "outputs")?;
        for (x, y) in xs.chunks(din).zip(ys.chunks_mut(dout)) {
            y.copy_from_slice(&net.params.predict(x)?);
        }
        Ok(())
    })
}

/// Copies the flat parameter vector: per layer the row-major weights then
/// the biases, followed by all slopes.
///
/// # Safety
/// `out` must have room for `len` values.
#[no_mangle]
pub unsafe extern "C" fn laaf_network_get_params(net: *const LaafNetwork, out: *mut f64, len: usize) -> LaafStatus {
    guard(|| {
        let net = handle(net)?;
        let flat = net.params.to_flat();
        if len != flat.len() {
            return Err(invalid(format!(
                "buffer holds {len} values, network has {}",
                flat.len()
            )));
        }
        output(out, len, "out")?.copy_from_slice(&flat);
        Ok(())
    })
}

/// Replaces the flat parameter vector (same layout as
/// [`laaf_network_get_params`]).
///
/// # Safety
/// `values` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn laaf_network_set_params(net: *mut LaafNetwork, values: *const f64, len: usize) -> LaafStatus {
    guard(|| {
        let net = net.as_mut().ok_or_else(|| null("network"))?;
        let values = input(values, len, "values")?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Fail(LaafStatus::Numerical, format!("value {i} is not finite")));
        }
        net.params.set_flat(values)?;
        Ok(())
    })
}

/// Slope-recovery term `S(a)` of an adaptive network.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn laaf_network_slope_recovery(net: *const LaafNetwork, out: *mut f64) -> LaafStatus {
    guard(|| {
        let net = handle(net)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let mut tape = Tape::new();
        let tp = net.params.lift(&mut tape)?;
        let s = slope_recovery(&mut tape, &tp, RecoveryKind::for_mode(net.params.mode().kind))?;
        *out = tape.value(s);
        Ok(())
    })
}

/// Writes a JSON checkpoint that reloads bit for bit.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn laaf_network_save(net: *const LaafNetwork, path_: *const c_char, seed: u64) -> LaafStatus {
    guard(|| {
        let net = handle(net)?;
        Checkpoint::from_params(&net.params, seed).save(path(path_)?)?;
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn laaf_network_load(path_: *const c_char, out: *mut *mut LaafNetwork) -> LaafStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let params = Checkpoint::load(path(path_)?)?.to_params()?;
        *out = Box::into_raw(Box::new(LaafNetwork { params }));
        Ok(())
    })
}

/// Ratio of N-LAAF to fixed-activation parameter counts for `widths`.
///
/// # Safety
/// `widths` must hold `n_widths` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn laaf_param_count_ratio(widths: *const usize, n_widths: usize, out: *mut f64) -> LaafStatus {
    guard(|| {
        let widths = input(widths, n_widths, "widths")?;
        *out.as_mut().ok_or_else(|| null("out"))? = param_count_ratio(widths)?;
        Ok(())
    })
}

/// Maximum absolute gap between one plain gradient step of size `eta` on
/// the adaptive parameters (mapped to effective parameters) and the
/// conditioned standard step, for the mean-squared loss on the given
/// regression data. Needs an adaptive network with scale 1.
///
/// # Safety
/// `points` must hold `n_points * input_dim` values and `targets`
/// `n_points * output_dim`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn laaf_verify_step_equivalence(
    net: *const LaafNetwork,
    points: *const f64,
    targets: *const f64,
    n_points: usize,
    eta: f64,
    out: *mut f64,
) -> LaafStatus {
    guard(|| {
        let net = handle(net)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let din = net.params.input_dim();
        let pts = input(points, n_points * din, "points")?.to_vec();
        let tgs = input(targets, n_points * net.params.output_dim(), "targets")?.to_vec();
        let spec = ObjectiveSpec {
            w_f: 0.0,
            w_u: 1.0,
            w_a: 0.0,
            data: Some(DataTerm::regression(PointSet::new(din, pts)?, tgs)?),
            residual: None,
            recovery: RecoveryKind::None,
        };
        *out = verify_step_equivalence(&net.params, &spec, eta)?.residual();
        Ok(())
    })
}
