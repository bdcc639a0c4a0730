//! C ABI over the `confae` library.
//!
//! Networks are opaque `ConfaeMlp` handles owned by the caller and released
//! with `confae_mlp_free`. Every fallible call returns a `ConfaeStatus`; the
//! message of the most recent failure on the calling thread is available
//! through `confae_last_error`. Arrays are row-major `double` buffers with an
//! explicit length that must match exactly.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use confae::data::swiss_roll;
use confae::geometry::{build_graph, condition_numbers, pullback_metric, scalar_curvature, Bandwidth, ConformalField};
use confae::training::Checkpoint;
use confae::{Activation, Error, Mlp};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConfaeStatus {
    Ok = 0,
    NullPointer = 1,
    /// Wrong buffer length, bad argument, or malformed input file.
    InvalidArgument = 2,
    /// Singular or otherwise degenerate geometry.
    Degenerate = 3,
    NonFinite = 4,
    Io = 5,
    Numerical = 6,
    /// A Rust panic was caught at the boundary.
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConfaeActivation {
    Relu = 0,
    /// Slope 0.01 on the negative side.
    LeakyRelu = 1,
    Tanh = 2,
    Identity = 3,
}

/// Which network of a training checkpoint to load.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConfaeNetRole {
    Encoder = 0,
    Decoder = 1,
}

/// Opaque network handle.
pub struct ConfaeMlp {
    inner: Mlp,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(ConfaeStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io(_) => ConfaeStatus::Io,
            Error::NonFinite(_) => ConfaeStatus::NonFinite,
            Error::DegenerateJacobian { .. } | Error::Degenerate(_) => ConfaeStatus::Degenerate,
            Error::Numerical(_) => ConfaeStatus::Numerical,
            _ if e.is_validation() => ConfaeStatus::InvalidArgument,
            _ => ConfaeStatus::Numerical,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(ConfaeStatus::InvalidArgument, msg.into())
}

fn null(name: &str) -> Failure {
    Failure(ConfaeStatus::NullPointer, format!("{name} is null"))
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ConfaeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            ConfaeStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            ConfaeStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, name: &str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a>(p: *const ConfaeMlp) -> Result<&'a Mlp, Failure> {
    p.as_ref().map(|h| &h.inner).ok_or_else(|| null("network handle"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

fn copy_out(dst: &mut [f64], src: &[f64], name: &str) -> Result<(), Failure> {
    if dst.len() != src.len() {
        return Err(invalid(format!("{name} has length {}, expected {}", dst.len(), src.len())));
    }
    dst.copy_from_slice(src);
    Ok(())
}

unsafe fn store<T>(out: *mut T, value: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(name));
    }
    out.write(value);
    Ok(())
}

fn boxed(mlp: Mlp) -> *mut ConfaeMlp {
    Box::into_raw(Box::new(ConfaeMlp { inner: mlp }))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `cap`) and returns the full message length in bytes.
/// An empty message means the last call succeeded.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn confae_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Fresh network with layer sizes `dims[0..n_dims]` and one activation per
/// layer (`n_dims - 1` entries).
///
/// # Safety
/// `dims` and `activations` must point to `n_dims` and `n_dims - 1` readable
/// elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn confae_mlp_init(
    dims: *const usize,
    n_dims: usize,
    activations: *const ConfaeActivation,
    seed: u64,
    out: *mut *mut ConfaeMlp,
) -> ConfaeStatus {
    guard(|| {
        if dims.is_null() || activations.is_null() {
            return Err(null("dims or activations"));
        }
        if n_dims < 2 {
            return Err(invalid("need at least two layer sizes"));
        }
        let d = std::slice::from_raw_parts(dims, n_dims);
        let acts: Vec<Activation> = std::slice::from_raw_parts(activations, n_dims - 1)
            .iter()
            .map(|a| match a {
                ConfaeActivation::Relu => Activation::Relu,
                ConfaeActivation::LeakyRelu => Activation::LeakyRelu(confae::net::DEFAULT_LEAKY_SLOPE),
                ConfaeActivation::Tanh => Activation::Tanh,
                ConfaeActivation::Identity => Activation::Identity,
            })
            .collect();
        let mlp = Mlp::init(d, &acts, seed)?;
        store(out, boxed(mlp), "out")
    })
}

/// Loads a network saved with `confae_mlp_save`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn confae_mlp_load(path: *const c_char, out: *mut *mut ConfaeMlp) -> ConfaeStatus {
    guard(|| {
        let mlp = Mlp::load_json(&path_arg(path)?)?;
        store(out, boxed(mlp), "out")
    })
}

/// Loads the encoder or decoder of a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn confae_checkpoint_load(
    path: *const c_char,
    role: ConfaeNetRole,
    out: *mut *mut ConfaeMlp,
) -> ConfaeStatus {
    guard(|| {
        let ck = Checkpoint::load_json(&path_arg(path)?)?;
        let mlp = match role {
            ConfaeNetRole::Encoder => ck.encoder,
            ConfaeNetRole::Decoder => ck.decoder,
        };
        store(out, boxed(mlp), "out")
    })
}

/// # Safety
/// `mlp` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn confae_mlp_save(mlp: *const ConfaeMlp, path: *const c_char) -> ConfaeStatus {
    guard(|| {
        handle(mlp)?.save_json(&path_arg(path)?)?;
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `mlp` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn confae_mlp_free(mlp: *mut ConfaeMlp) {
    if !mlp.is_null() {
        drop(Box::from_raw(mlp));
    }
}

/// Input dimension, or 0 for a null handle.
///
/// # Safety
/// `mlp` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn confae_mlp_input_dim(mlp: *const ConfaeMlp) -> usize {
    mlp.as_ref().map_or(0, |h| h.inner.input_dim())
}

/// Output dimension, or 0 for a null handle.
///
/// # Safety
/// `mlp` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn confae_mlp_output_dim(mlp: *const ConfaeMlp) -> usize {
    mlp.as_ref().map_or(0, |h| h.inner.output_dim())
}

/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn confae_mlp_forward(
    mlp: *const ConfaeMlp,
    x: *const f64,
    x_len: usize,
    y: *mut f64,
    y_len: usize,
) -> ConfaeStatus {
    guard(|| {
        let net = handle(mlp)?;
        let out = net.forward(slice(x, x_len, "x")?)?;
        copy_out(slice_mut(y, y_len, "y")?, &out, "y")
    })
}

/// `J(z) v` into `out` (output dimension).
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn confae_mlp_jvp(
    mlp: *const ConfaeMlp,
    z: *const f64,
    z_len: usize,
    v: *const f64,
    v_len: usize,
    out: *mut f64,
    out_len: usize,
) -> ConfaeStatus {
    guard(|| {
        let net = handle(mlp)?;
        let (_, jv, _) = net.jvp(slice(z, z_len, "z")?, slice(v, v_len, "v")?)?;
        copy_out(slice_mut(out, out_len, "out")?, &jv, "out")
    })
}

/// `J(z)ᵀ u` into `out` (input dimension).
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn confae_mlp_vjp(
    mlp: *const ConfaeMlp,
    z: *const f64,
    z_len: usize,
    u: *const f64,
    u_len: usize,
    out: *mut f64,
    out_len: usize,
) -> ConfaeStatus {
    guard(|| {
        let net = handle(mlp)?;
        let (_, jtu) = net.vjp(slice(z, z_len, "z")?, slice(u, u_len, "u")?)?;
        copy_out(slice_mut(out, out_len, "out")?, &jtu, "out")
    })
}

/// Row-major `output_dim × input_dim` Jacobian at `z`.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn confae_mlp_jacobian(
    mlp: *const ConfaeMlp,
    z: *const f64,
    z_len: usize,
    out: *mut f64,
    out_len: usize,
) -> ConfaeStatus {
    guard(|| {
        let j = handle(mlp)?.jacobian(slice(z, z_len, "z")?)?;
        copy_out(slice_mut(out, out_len, "out")?, j.as_slice(), "out")
    })
}

/// Row-major `m × m` pullback metric `JᵀJ` of a decoder at `z`.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn confae_pullback_metric(
    decoder: *const ConfaeMlp,
    z: *const f64,
    z_len: usize,
    out: *mut f64,
    out_len: usize,
) -> ConfaeStatus {
    guard(|| {
        let r = pullback_metric(handle(decoder)?, slice(z, z_len, "z")?)?;
        copy_out(slice_mut(out, out_len, "out")?, r.as_slice(), "out")
    })
}

/// `Tr(JᵀJ) / m` at `z`.
///
/// # Safety
/// `z` must hold `z_len` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn confae_conformal_factor(
    decoder: *const ConfaeMlp,
    z: *const f64,
    z_len: usize,
    out: *mut f64,
) -> ConfaeStatus {
    guard(|| {
        let c = confae::geometry::conformal_factor(handle(decoder)?, slice(z, z_len, "z")?)?;
        store(out, c, "out")
    })
}

/// Condition numbers of `J` and `JᵀJ` at `z`; infinite when `J` is singular.
///
/// # Safety
/// `z` must hold `z_len` elements; both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn confae_condition_numbers(
    decoder: *const ConfaeMlp,
    z: *const f64,
    z_len: usize,
    kappa_jac: *mut f64,
    kappa_pbm: *mut f64,
) -> ConfaeStatus {
    guard(|| {
        let k = condition_numbers(handle(decoder)?, slice(z, z_len, "z")?)?;
        store(kappa_jac, k.jac, "kappa_jac")?;
        store(kappa_pbm, k.pbm, "kappa_pbm")
    })
}

/// Scalar curvature of the conformal field `values` sampled at `n` planar
/// codes (`codes` is row-major `n × 2`), on a `k`-nearest-neighbour graph.
/// A non-positive `bandwidth` selects it from the data. Each output holds
/// `n` entries; `calibrated` and `interior` may be null.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn confae_scalar_curvature(
    codes: *const f64,
    n: usize,
    values: *const f64,
    k: usize,
    bandwidth: f64,
    raw: *mut f64,
    normalized: *mut f64,
    calibrated: *mut f64,
    interior: *mut u8,
) -> ConfaeStatus {
    guard(|| {
        let flat = slice(codes, 2 * n, "codes")?;
        let vals = slice(values, n, "values")?.to_vec();
        let pts: Vec<Vec<f64>> = flat.chunks(2).map(|c| c.to_vec()).collect();
        let bw = if bandwidth > 0.0 { Bandwidth::Fixed(bandwidth) } else { Bandwidth::Auto };
        let field = ConformalField::new(pts, vals)?;
        let graph = build_graph(&field.codes, k, bw)?;
        let s = scalar_curvature(&field, &graph)?;
        copy_out(slice_mut(raw, n, "raw")?, &s.raw, "raw")?;
        copy_out(slice_mut(normalized, n, "normalized")?, &s.normalized, "normalized")?;
        if !calibrated.is_null() {
            copy_out(slice_mut(calibrated, n, "calibrated")?, &s.calibrated, "calibrated")?;
        }
        if !interior.is_null() && n > 0 {
            let dst = std::slice::from_raw_parts_mut(interior, n);
            for (d, b) in dst.iter_mut().zip(&s.interior) {
                *d = u8::from(*b);
            }
        }
        Ok(())
    })
}

/// `n` Swiss-roll samples: row-major `n × 3` points and, when `params` is not
/// null, the `n × 2` generating parameters `(ξ, η)`.
///
/// # Safety
/// `samples` must hold `3n` and `params` (if not null) `2n` elements.
#[no_mangle]
pub unsafe extern "C" fn confae_swiss_roll(n: usize, seed: u64, samples: *mut f64, params: *mut f64) -> ConfaeStatus {
    guard(|| {
        let ds = swiss_roll(n, seed)?;
        let out = slice_mut(samples, 3 * n, "samples")?;
        for (dst, s) in out.chunks_mut(3).zip(&ds.samples) {
            dst.copy_from_slice(s);
        }
        if !params.is_null() {
            let out = slice_mut(params, 2 * n, "params")?;
            for (dst, p) in out.chunks_mut(2).zip(&ds.true_params) {
                dst.copy_from_slice(p);
            }
        }
        Ok(())
    })
}
