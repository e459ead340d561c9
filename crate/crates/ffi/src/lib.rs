//! C ABI over the switchpide solver.
//!
//! Conventions, mirrored in the generated `include/switchpide.h`:
//!
//! - Handles are opaque and must be released with their matching `_free`
//!   call; freeing a null pointer is a no-op.
//! - Every fallible call returns a [`SpideStatus`]; on anything other than
//!   `Ok`, [`spide_last_error`] returns a message for the calling thread,
//!   valid until that thread's next call into this library.
//! - No call unwinds across the boundary: panics are caught and surface as
//!   `Runtime` with the panic text.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use switchpide::model::{validate_assumptions, GridSpec, ProblemSpec, SamplePlan};
use switchpide::solver::{solve, SolveResult, SolverConfig};
use switchpide::Error;

/// Outcome of a call. Values match the CLI exit codes: `2` means a data
/// assumption failed (the error message names the tag), `64` means the
/// input itself was unusable.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpideStatus {
    Ok = 0,
    Runtime = 1,
    Validation = 2,
    NullArgument = 3,
    Usage = 64,
}

/// Parsed problem description (opaque).
pub struct SpideSpec {
    inner: ProblemSpec,
}

/// Solver output (opaque): value surfaces, residuals, and binding modes on
/// a space-time grid.
pub struct SpideSolution {
    grid: GridSpec,
    result: SolveResult,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).expect("no interior NUL"));
}

fn fail(status: SpideStatus, msg: &str) -> SpideStatus {
    set_error(msg);
    status
}

fn status_of(e: &Error) -> SpideStatus {
    match e {
        Error::Spec(_) => SpideStatus::Usage,
        Error::Assumption { .. } | Error::NegativeLoop(_) => SpideStatus::Validation,
        _ => SpideStatus::Runtime,
    }
}

/// Run `f`, converting panics into `Runtime` errors instead of unwinding.
fn guard(f: impl FnOnce() -> SpideStatus) -> SpideStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic of unknown type".to_string());
            fail(SpideStatus::Runtime, &format!("internal panic: {msg}"))
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn spide_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the last failure on the calling thread.
///
/// The pointer stays valid until this thread's next call into the library.
/// Returns an empty string if nothing failed yet.
#[no_mangle]
pub extern "C" fn spide_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Parse a JSON problem description into a new handle.
///
/// On `Ok`, `*out` owns the spec and must be released with
/// [`spide_spec_free`].
///
/// # Safety
/// `json` must point to a NUL-terminated string and `out` to writable
/// pointer storage.
#[no_mangle]
pub unsafe extern "C" fn spide_spec_parse(
    json: *const c_char,
    out: *mut *mut SpideSpec,
) -> SpideStatus {
    if json.is_null() || out.is_null() {
        return fail(SpideStatus::NullArgument, "spide_spec_parse: null argument");
    }
    let text = match CStr::from_ptr(json).to_str() {
        Ok(t) => t,
        Err(_) => return fail(SpideStatus::Usage, "spec is not valid UTF-8"),
    };
    guard(|| match ProblemSpec::from_json_str(text) {
        Ok(spec) => {
            *out = Box::into_raw(Box::new(SpideSpec { inner: spec }));
            SpideStatus::Ok
        }
        Err(e) => fail(status_of(&e), &e.to_string()),
    })
}

/// Release a spec handle; null is ignored.
///
/// # Safety
/// `spec` must be null or a pointer from [`spide_spec_parse`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spide_spec_free(spec: *mut SpideSpec) {
    if !spec.is_null() {
        drop(Box::from_raw(spec));
    }
}

/// State dimension, mode count, and horizon of a parsed spec.
///
/// # Safety
/// `spec` must be a live spec handle; out-pointers may be null to skip a
/// field.
#[no_mangle]
pub unsafe extern "C" fn spide_spec_dims(
    spec: *const SpideSpec,
    n: *mut usize,
    m: *mut usize,
    t_end: *mut f64,
) -> SpideStatus {
    if spec.is_null() {
        return fail(SpideStatus::NullArgument, "spide_spec_dims: null spec");
    }
    let inner = &(*spec).inner;
    if !n.is_null() {
        *n = inner.n;
    }
    if !m.is_null() {
        *m = inner.m;
    }
    if !t_end.is_null() {
        *t_end = inner.t_end;
    }
    SpideStatus::Ok
}

/// Check the data assumptions on `samples` quasi-random points; returns
/// `Validation` (message names the failing tag) if any group fails.
///
/// # Safety
/// `spec` must be a live spec handle.
#[no_mangle]
pub unsafe extern "C" fn spide_validate(spec: *const SpideSpec, samples: usize) -> SpideStatus {
    if spec.is_null() {
        return fail(SpideStatus::NullArgument, "spide_validate: null spec");
    }
    let inner = &(*spec).inner;
    guard(|| {
        let plan = SamplePlan::build(&inner.domain, inner.t_end, samples);
        match validate_assumptions(inner, &plan) {
            Ok(report) if report.pass() => SpideStatus::Ok,
            Ok(report) => {
                let first = report.first_failure().expect("some check failed");
                fail(
                    SpideStatus::Validation,
                    &format!(
                        "({}) {}: empirical {:.6e} vs bound {:.6e}, worst at {}",
                        first.tag, first.description, first.empirical, first.bound, first.worst
                    ),
                )
            }
            Err(e) => fail(status_of(&e), &e.to_string()),
        }
    })
}

/// Solve on a uniform grid with `nx` nodes per axis and `nt` time levels.
///
/// `theta` sets the implicitness of the diffusion stage (use 1 for fully
/// implicit); `obstacle_tol <= 0` keeps the default. On `Ok`, `*out` owns
/// the solution and must be released with [`spide_solution_free`].
///
/// # Safety
/// `spec` must be a live spec handle and `out` writable pointer storage.
#[no_mangle]
pub unsafe extern "C" fn spide_solve(
    spec: *const SpideSpec,
    nx: usize,
    nt: usize,
    theta: f64,
    obstacle_tol: f64,
    out: *mut *mut SpideSolution,
) -> SpideStatus {
    if spec.is_null() || out.is_null() {
        return fail(SpideStatus::NullArgument, "spide_solve: null argument");
    }
    let inner = &(*spec).inner;
    guard(|| {
        let grid = match GridSpec::new(inner.domain.clone(), vec![nx; inner.n], nt) {
            Ok(g) => g,
            Err(e) => return fail(SpideStatus::Usage, &e.to_string()),
        };
        let mut cfg = SolverConfig::new(grid);
        cfg.theta = theta;
        if obstacle_tol > 0.0 {
            cfg.obstacle_tol = obstacle_tol;
        }
        if let Err(e) = cfg.validate(inner) {
            return fail(SpideStatus::Usage, &e.to_string());
        }
        match solve(inner, &cfg) {
            Ok(result) => {
                *out = Box::into_raw(Box::new(SpideSolution {
                    grid: cfg.grid,
                    result,
                }));
                SpideStatus::Ok
            }
            Err(e) => fail(status_of(&e), &e.to_string()),
        }
    })
}

/// Release a solution handle; null is ignored.
///
/// # Safety
/// `sol` must be null or a pointer from [`spide_solve`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spide_solution_free(sol: *mut SpideSolution) {
    if !sol.is_null() {
        drop(Box::from_raw(sol));
    }
}

/// Mode count, time levels, and spatial nodes of a solution.
///
/// # Safety
/// `sol` must be a live solution handle; out-pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn spide_solution_dims(
    sol: *const SpideSolution,
    m: *mut usize,
    nt: *mut usize,
    nodes: *mut usize,
) -> SpideStatus {
    if sol.is_null() {
        return fail(SpideStatus::NullArgument, "spide_solution_dims: null solution");
    }
    let u = &(*sol).result.u;
    if !m.is_null() {
        *m = u.m;
    }
    if !nt.is_null() {
        *nt = u.nt;
    }
    if !nodes.is_null() {
        *nodes = u.num_nodes;
    }
    SpideStatus::Ok
}

/// Coordinate of grid node `node` along `axis`.
///
/// # Safety
/// `sol` must be a live solution handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spide_solution_coord(
    sol: *const SpideSolution,
    node: usize,
    axis: usize,
    out: *mut f64,
) -> SpideStatus {
    if sol.is_null() || out.is_null() {
        return fail(SpideStatus::NullArgument, "spide_solution_coord: null argument");
    }
    let grid = &(*sol).grid;
    if node >= grid.num_nodes() || axis >= grid.n() {
        return fail(
            SpideStatus::Usage,
            &format!("node {node} / axis {axis} out of range"),
        );
    }
    *out = grid.node(node)[axis];
    SpideStatus::Ok
}

/// Copy one time slice of the value surface for `mode` into `buf`
/// (`len >= nodes` required), ordered by flat node index.
///
/// # Safety
/// `sol` must be a live solution handle and `buf` writable for `len`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn spide_solution_values(
    sol: *const SpideSolution,
    mode: usize,
    level: usize,
    buf: *mut f64,
    len: usize,
) -> SpideStatus {
    if sol.is_null() || buf.is_null() {
        return fail(SpideStatus::NullArgument, "spide_solution_values: null argument");
    }
    let u = &(*sol).result.u;
    if mode >= u.m || level >= u.nt {
        return fail(
            SpideStatus::Usage,
            &format!("mode {mode} / level {level} out of range"),
        );
    }
    if len < u.num_nodes {
        return fail(
            SpideStatus::Usage,
            &format!("buffer holds {len} values, need {}", u.num_nodes),
        );
    }
    let slice = u.slice(mode, level);
    std::ptr::copy_nonoverlapping(slice.as_ptr(), buf, slice.len());
    SpideStatus::Ok
}

/// Single value lookup: `u_mode(x_node, t_level)`.
///
/// # Safety
/// `sol` must be a live solution handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spide_solution_value(
    sol: *const SpideSolution,
    mode: usize,
    level: usize,
    node: usize,
    out: *mut f64,
) -> SpideStatus {
    if sol.is_null() || out.is_null() {
        return fail(SpideStatus::NullArgument, "spide_solution_value: null argument");
    }
    let u = &(*sol).result.u;
    if mode >= u.m || level >= u.nt || node >= u.num_nodes {
        return fail(
            SpideStatus::Usage,
            &format!("index (mode {mode}, level {level}, node {node}) out of range"),
        );
    }
    *out = u.get(mode, level, node);
    SpideStatus::Ok
}

/// Complementarity residual `min(equation residual, u - obstacle)` at one
/// space-time index (zero on the boundary and at the terminal level).
///
/// # Safety
/// `sol` must be a live solution handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spide_solution_residual(
    sol: *const SpideSolution,
    mode: usize,
    level: usize,
    node: usize,
    out: *mut f64,
) -> SpideStatus {
    if sol.is_null() || out.is_null() {
        return fail(SpideStatus::NullArgument, "spide_solution_residual: null argument");
    }
    let r = &(*sol).result.residual;
    if mode >= r.m || level >= r.nt || node >= r.num_nodes {
        return fail(
            SpideStatus::Usage,
            &format!("index (mode {mode}, level {level}, node {node}) out of range"),
        );
    }
    *out = r.get(mode, level, node);
    SpideStatus::Ok
}

/// Mode whose switch target binds at this index, or `-1` when the value
/// sits strictly above the switching obstacle.
///
/// # Safety
/// `sol` must be a live solution handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spide_solution_binding(
    sol: *const SpideSolution,
    mode: usize,
    level: usize,
    node: usize,
    out: *mut c_int,
) -> SpideStatus {
    if sol.is_null() || out.is_null() {
        return fail(SpideStatus::NullArgument, "spide_solution_binding: null argument");
    }
    let s = &*sol;
    let u = &s.result.u;
    if mode >= u.m || level >= u.nt || node >= u.num_nodes {
        return fail(
            SpideStatus::Usage,
            &format!("index (mode {mode}, level {level}, node {node}) out of range"),
        );
    }
    *out = match s.result.binding_at(mode, level, node) {
        Some(j) => j as c_int,
        None => -1,
    };
    SpideStatus::Ok
}
