//! C interface to `wgflow`.
//!
//! Every function returns a [`WgfStatus`]; on failure the message is kept per
//! thread and read with [`wgf_last_error`]. Arrays are row-major `double`
//! buffers owned by the caller. Operators are opaque handles released with
//! [`wgf_operator_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use ndarray::{ArrayView1, ArrayView2};
use wgflow::checkpoint::Checkpoint;
use wgflow::energy::kernel_value;
use wgflow::geometry::{chamfer_distance, ParticleEnsemble};
use wgflow::operator::{Conditioning, JkoModel, NeuralOperator};
use wgflow::oracles::{ring_radius, BarenblattSpec};
use wgflow::training::{advance, GenerateOptions};
use wgflow::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WgfStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Structural = 3,
    Numeric = 4,
    Parameter = 5,
    Domain = 6,
    Format = 7,
    Io = 8,
    Other = 9,
    Panic = 10,
}

/// A trained operator loaded from a checkpoint.
pub struct WgfOperator {
    inner: NeuralOperator,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> WgfStatus {
    match e {
        Error::Config(_) => WgfStatus::Config,
        Error::Structural(_) => WgfStatus::Structural,
        Error::Numeric { .. } | Error::Generation { .. } | Error::SingularPair(..) => WgfStatus::Numeric,
        Error::Parameter(_) => WgfStatus::Parameter,
        Error::Domain(_) | Error::EquilibriumNotFound(_) => WgfStatus::Domain,
        Error::Format(_) => WgfStatus::Format,
        Error::Io(_) => WgfStatus::Io,
        Error::At { source, .. } => status_of(source),
        Error::Diverged { .. } => WgfStatus::Other,
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

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> WgfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WgfStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            WgfStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            WgfStatus::Panic
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

unsafe fn slice_mut<'a>(ptr: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn out<'a>(ptr: *mut f64, what: &'static str) -> Result<&'a mut f64, Failure> {
    ptr.as_mut().ok_or(Failure::Null(what))
}

/// Message for the last failed call on this thread; empty if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn wgf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load an operator checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wgf_operator_load(path: *const c_char, out: *mut *mut WgfOperator) -> WgfStatus {
    guard(|| {
        if path.is_null() {
            return Err(Failure::Null("path"));
        }
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Error::Parameter("path is not UTF-8".into()))?;
        let inner = Checkpoint::read_file(path)?.into_operator()?;
        *out = Box::into_raw(Box::new(WgfOperator { inner }));
        Ok(())
    })
}

/// Release a handle from [`wgf_operator_load`]. Null is ignored.
///
/// # Safety
/// `op` must come from [`wgf_operator_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wgf_operator_free(op: *mut WgfOperator) {
    if !op.is_null() {
        drop(Box::from_raw(op));
    }
}

/// Spatial dimension of the operator, or 0 for a null handle.
///
/// # Safety
/// `op` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn wgf_operator_dim(op: *const WgfOperator) -> usize {
    op.as_ref().map_or(0, |o| o.inner.dim())
}

unsafe fn prompt(
    op: &WgfOperator,
    points: *const f64,
    densities: *const f64,
    m: usize,
) -> Result<ParticleEnsemble, Failure> {
    let d = op.inner.dim();
    let pts = slice(points, m * d, "points")?;
    let rho = slice(densities, m, "densities")?;
    let pts = ArrayView2::from_shape((m, d), pts).map_err(|e| Error::structural(e.to_string()))?;
    Ok(ParticleEnsemble::new(pts.to_owned(), ArrayView1::from(rho).to_owned(), 0)?)
}

unsafe fn conditioning(pq: *const f64) -> Conditioning {
    if pq.is_null() {
        Conditioning::none()
    } else {
        Conditioning::pq(*pq, *pq.add(1))
    }
}

/// Displacements at `n_queries` points for the field induced by the prompt
/// (`m` points with density values). `pq` is null or two doubles `(p, q)`.
/// `out` receives `n_queries * dim` doubles.
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn wgf_operator_displacements(
    op: *const WgfOperator,
    points: *const f64,
    densities: *const f64,
    m: usize,
    pq: *const f64,
    queries: *const f64,
    n_queries: usize,
    out: *mut f64,
) -> WgfStatus {
    guard(|| {
        let op = op.as_ref().ok_or(Failure::Null("op"))?;
        let d = op.inner.dim();
        let e = prompt(op, points, densities, m)?;
        let q = slice(queries, n_queries * d, "queries")?;
        let q = ArrayView2::from_shape((n_queries, d), q).map_err(|e| Error::structural(e.to_string()))?;
        let v = op.inner.displacements(&e, &conditioning(pq), q)?;
        slice_mut(out, n_queries * d, "out")?.copy_from_slice(v.as_slice().expect("standard layout"));
        Ok(())
    })
}

/// One JKO step: moves the `m` points and rescales their densities in
/// `out_points` (`m * dim`) and `out_densities` (`m`).
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn wgf_operator_step(
    op: *const WgfOperator,
    points: *const f64,
    densities: *const f64,
    m: usize,
    pq: *const f64,
    out_points: *mut f64,
    out_densities: *mut f64,
) -> WgfStatus {
    guard(|| {
        let op = op.as_ref().ok_or(Failure::Null("op"))?;
        let d = op.inner.dim();
        let e = prompt(op, points, densities, m)?;
        let (next, _) = advance(&op.inner, &e, &conditioning(pq), GenerateOptions::default())?;
        let (pts, rho, _) = next.into_parts();
        slice_mut(out_points, m * d, "out_points")?.copy_from_slice(pts.as_slice().expect("standard layout"));
        slice_mut(out_densities, m, "out_densities")?.copy_from_slice(rho.as_slice().expect("contiguous"));
        Ok(())
    })
}

/// Radius of the ring equilibrium of the `(p, q)` kernel.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wgf_ring_radius(p: f64, q: f64, out: *mut f64) -> WgfStatus {
    guard(|| {
        *self::out(out, "out")? = ring_radius(p, q)?;
        Ok(())
    })
}

/// Barenblatt density at time `t` and point `x` (`dim` doubles).
///
/// # Safety
/// `x` must hold `dim` doubles and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wgf_barenblatt_density(
    m_exponent: f64,
    dim: usize,
    c: f64,
    t0: f64,
    t: f64,
    x: *const f64,
    out: *mut f64,
) -> WgfStatus {
    guard(|| {
        let spec = BarenblattSpec::new(m_exponent, dim, c, t0)?;
        if !(t + t0 > 0.0) {
            return Err(Error::Domain(format!("t + t0 must be > 0, got {}", t + t0)).into());
        }
        let x = slice(x, dim, "x")?;
        *self::out(out, "out")? = spec.density(t, ArrayView1::from(x));
        Ok(())
    })
}

/// Chamfer distance between `n_a` and `n_b` points of dimension `dim`.
///
/// # Safety
/// `a` and `b` must hold `n_a * dim` and `n_b * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn wgf_chamfer(
    a: *const f64,
    n_a: usize,
    b: *const f64,
    n_b: usize,
    dim: usize,
    out: *mut f64,
) -> WgfStatus {
    guard(|| {
        let view = |ptr, n, what| -> Result<ArrayView2<'_, f64>, Failure> {
            let s = slice(ptr, n * dim, what)?;
            Ok(ArrayView2::from_shape((n, dim), s).map_err(|e| Error::structural(e.to_string()))?)
        };
        *self::out(out, "out")? = chamfer_distance(view(a, n_a, "a")?, view(b, n_b, "b")?)?;
        Ok(())
    })
}

/// Attraction-repulsion kernel `r^(q+1)/(q+1) - r^(p+1)/(p+1)`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wgf_kernel(r: f64, p: f64, q: f64, out: *mut f64) -> WgfStatus {
    guard(|| {
        *self::out(out, "out")? = kernel_value(r, p, q)?;
        Ok(())
    })
}
