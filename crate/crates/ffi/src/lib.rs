//! C ABI over `bfflow`.
//!
//! Every object crosses the boundary as an opaque pointer created by a
//! `*_new`/`*_load`/`*_parse`/`bf_run` call and released by the matching
//! `*_free`. Fallible calls return a [`BfStatus`]; on failure the message is
//! available from [`bf_last_error`] on the same thread until the next
//! failing call. Panics never unwind into C: they become `BF_STATUS_PANIC`.
//!
//! Strings returned as `char *` are owned by the caller and must be released
//! with [`bf_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use bfflow::cli::{self, Outcome, ScenarioConfig, Status, Subcommand};
use bfflow::dynamics::{FullSystem, SimState, SolverConfig};
use bfflow::grid::SineBasis;
use bfflow::rng::SeededRng;
use bfflow::Error;

/// Result of a fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BfStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The configuration could not be parsed or violates an invariant.
    Config = 3,
    /// Blow-up, solver non-convergence or invalid numerical input.
    Runtime = 4,
    Io = 5,
    /// Unknown key or out-of-range index.
    NotFound = 6,
    /// Output buffer has the wrong length.
    BufferSize = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BfSubcommand {
    Simulate = 0,
    Spectrum = 1,
    Lipschitz = 2,
    Split = 3,
    Expsplit = 4,
    Smoothing = 5,
    Attractor = 6,
    Audit = 7,
    Oracle = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BfCheckStatus {
    Pass = 0,
    Fail = 1,
    Skip = 2,
}

/// Parsed scenario configuration.
pub struct BfConfig {
    inner: ScenarioConfig,
}

/// Result of a scenario run: tables, scalar values and checks.
pub struct BfOutcome {
    inner: Outcome,
}

/// A single trajectory that C code advances step by step.
pub struct BfSimulation {
    system: FullSystem,
    solver: SolverConfig,
    state: SimState,
    basis: SineBasis,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> BfStatus {
    match err {
        Error::ConfigSyntax { .. } | Error::ConfigSemantic(_) => BfStatus::Config,
        Error::Io(_) => BfStatus::Io,
        _ => BfStatus::Runtime,
    }
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), BfStatus>) -> BfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BfStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            BfStatus::Panic
        }
    }
}

fn fail(err: Error) -> BfStatus {
    let s = status_of(&err);
    set_error(err.to_string());
    s
}

fn null(what: &str) -> BfStatus {
    set_error(format!("{what} is null"));
    BfStatus::NullArgument
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, BfStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        BfStatus::InvalidUtf8
    })
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, BfStatus> {
    p.as_ref().ok_or_else(|| null(what))
}

fn out_ptr<T>(out: *mut *mut T, value: T) -> Result<(), BfStatus> {
    if out.is_null() {
        return Err(null("out"));
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

fn owned_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map(CString::into_raw).unwrap_or(ptr::null_mut())
}

fn subcommand(s: BfSubcommand) -> Subcommand {
    match s {
        BfSubcommand::Simulate => Subcommand::Simulate,
        BfSubcommand::Spectrum => Subcommand::Spectrum,
        BfSubcommand::Lipschitz => Subcommand::Lipschitz,
        BfSubcommand::Split => Subcommand::Split,
        BfSubcommand::Expsplit => Subcommand::Expsplit,
        BfSubcommand::Smoothing => Subcommand::Smoothing,
        BfSubcommand::Attractor => Subcommand::Attractor,
        BfSubcommand::Audit => Subcommand::Audit,
        BfSubcommand::Oracle => Subcommand::Oracle,
    }
}

/// Message of the last failed call on this thread, or null. Borrowed: valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn bf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses configuration text. A relative forcing file path is taken relative
/// to the working directory.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bf_config_parse(text: *const c_char, out: *mut *mut BfConfig) -> BfStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        let inner = cli::parse_config(text).map_err(fail)?;
        out_ptr(out, BfConfig { inner })
    })
}

/// Loads a configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bf_config_load(path: *const c_char, out: *mut *mut BfConfig) -> BfStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let inner = cli::load_config(Path::new(path)).map_err(fail)?;
        out_ptr(out, BfConfig { inner })
    })
}

/// Overrides the run seed.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bf_config_set_seed(cfg: *mut BfConfig, seed: u64) -> BfStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        cfg.inner.initial.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn bf_config_free(cfg: *mut BfConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs a scenario. A failed check is not an error: inspect the outcome.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bf_run(cfg: *const BfConfig, which: BfSubcommand, out: *mut *mut BfOutcome) -> BfStatus {
    guard(|| {
        let cfg = obj(cfg, "cfg")?;
        let inner = cli::run_scenario(&cfg.inner, subcommand(which)).map_err(fail)?;
        out_ptr(out, BfOutcome { inner })
    })
}

/// 1 when no check failed, 0 otherwise, -1 for a null handle.
///
/// # Safety
/// `o` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn bf_outcome_passed(o: *const BfOutcome) -> i32 {
    match o.as_ref() {
        Some(o) => i32::from(o.inner.passed()),
        None => -1,
    }
}

/// Looks up a named scalar of the outcome (the `key = value` lines of the
/// summary).
///
/// # Safety
/// `o` must be a live handle, `key` a NUL-terminated string, `value` writable.
#[no_mangle]
pub unsafe extern "C" fn bf_outcome_value(o: *const BfOutcome, key: *const c_char, value: *mut f64) -> BfStatus {
    guard(|| {
        let o = obj(o, "outcome")?;
        let key = str_arg(key, "key")?;
        if value.is_null() {
            return Err(null("value"));
        }
        match o.inner.get(key) {
            Some(v) => {
                *value = v;
                Ok(())
            }
            None => {
                set_error(format!("no value named {key:?}"));
                Err(BfStatus::NotFound)
            }
        }
    })
}

/// Number of checks; 0 for a null handle.
///
/// # Safety
/// `o` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn bf_outcome_check_count(o: *const BfOutcome) -> usize {
    o.as_ref().map_or(0, |o| o.inner.checks.len())
}

/// Status and name of check `index`. `name` may be null; otherwise it
/// receives an owned string.
///
/// # Safety
/// `o` must be a live handle; `status` writable; `name` null or writable.
#[no_mangle]
pub unsafe extern "C" fn bf_outcome_check(
    o: *const BfOutcome,
    index: usize,
    status: *mut BfCheckStatus,
    name: *mut *mut c_char,
) -> BfStatus {
    guard(|| {
        let o = obj(o, "outcome")?;
        if status.is_null() {
            return Err(null("status"));
        }
        let c = o.inner.checks.get(index).ok_or_else(|| {
            set_error(format!("check index {index} out of range"));
            BfStatus::NotFound
        })?;
        *status = match c.status {
            Status::Pass => BfCheckStatus::Pass,
            Status::Fail => BfCheckStatus::Fail,
            Status::Skip => BfCheckStatus::Skip,
        };
        if !name.is_null() {
            *name = owned_string(c.name.clone());
        }
        Ok(())
    })
}

/// Plain-text summary (owned; release with `bf_string_free`). Null for a
/// null handle.
///
/// # Safety
/// `o` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn bf_outcome_summary(o: *const BfOutcome) -> *mut c_char {
    match o.as_ref() {
        Some(o) => owned_string(o.inner.summary()),
        None => ptr::null_mut(),
    }
}

/// Writes CSV tables, `summary.txt` and optionally SVG plots into `dir`.
///
/// # Safety
/// `o` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bf_outcome_write(o: *const BfOutcome, dir: *const c_char, svg: bool) -> BfStatus {
    guard(|| {
        let o = obj(o, "outcome")?;
        let dir = str_arg(dir, "dir")?;
        o.inner.write(Path::new(dir), svg).map_err(fail)
    })
}

/// # Safety
/// `o` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn bf_outcome_free(o: *mut BfOutcome) {
    if !o.is_null() {
        drop(Box::from_raw(o));
    }
}

/// Creates a trajectory on the configured grid, starting from the configured
/// initial kind scaled to `amplitude`. With `dt = auto` the step is chosen
/// for `run.sample_every`.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bf_sim_new(cfg: *const BfConfig, amplitude: f64, out: *mut *mut BfSimulation) -> BfStatus {
    guard(|| {
        let cfg = &obj(cfg, "cfg")?.inner;
        if !(amplitude.is_finite() && amplitude >= 0.0) {
            set_error("amplitude must be finite and nonnegative");
            return Err(BfStatus::Runtime);
        }
        let grid = cfg.grid;
        let system = cli::build_system(cfg, grid, cfg.convective).map_err(fail)?;
        let solver = cli::full_solver(cfg, &grid, cfg.run.sample_every);
        solver.validate(&grid, &cfg.medium).map_err(fail)?;
        let mut rng = SeededRng::new(cfg.initial.seed);
        let state = cli::initial_state(cfg, grid, &mut rng, amplitude);
        out_ptr(out, BfSimulation { system, solver, state, basis: SineBasis::new(grid) })
    })
}

/// Advances by `steps` time steps. On failure the state is left at the last
/// successful step.
///
/// # Safety
/// `sim` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bf_sim_advance(sim: *mut BfSimulation, steps: usize) -> BfStatus {
    guard(|| {
        let sim = sim.as_mut().ok_or_else(|| null("sim"))?;
        for _ in 0..steps {
            sim.state = sim.system.step(&sim.state, &sim.solver).map_err(fail)?;
        }
        Ok(())
    })
}

/// Current time; NaN for a null handle.
///
/// # Safety
/// `sim` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn bf_sim_time(sim: *const BfSimulation) -> f64 {
    sim.as_ref().map_or(f64::NAN, |s| s.state.t)
}

/// Time step in use; NaN for a null handle.
///
/// # Safety
/// `sim` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn bf_sim_dt(sim: *const BfSimulation) -> f64 {
    sim.as_ref().map_or(f64::NAN, |s| s.solver.dt)
}

/// Squared energy norm `|u|_{H1}^2 + |p|^2`; NaN for a null handle.
///
/// # Safety
/// `sim` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn bf_sim_energy(sim: *const BfSimulation) -> f64 {
    sim.as_ref().map_or(f64::NAN, |s| s.state.e_norm_sq(&s.basis))
}

/// Number of interior nodes (length of the pressure buffer).
///
/// # Safety
/// `sim` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn bf_sim_node_count(sim: *const BfSimulation) -> usize {
    sim.as_ref().map_or(0, |s| s.state.grid().len())
}

/// Spatial dimension (2 or 3); 0 for a null handle.
///
/// # Safety
/// `sim` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn bf_sim_dim(sim: *const BfSimulation) -> usize {
    sim.as_ref().map_or(0, |s| s.state.grid().dim())
}

unsafe fn copy_out(src: &[f64], buf: *mut f64, len: usize) -> Result<(), BfStatus> {
    if buf.is_null() {
        return Err(null("buf"));
    }
    if len != src.len() {
        set_error(format!("buffer holds {len} values, need {}", src.len()));
        return Err(BfStatus::BufferSize);
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, len);
    Ok(())
}

/// Copies nodal pressure values (x fastest). `len` must equal the node count.
///
/// # Safety
/// `sim` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn bf_sim_copy_pressure(sim: *const BfSimulation, buf: *mut f64, len: usize) -> BfStatus {
    guard(|| copy_out(obj(sim, "sim")?.state.p.values(), buf, len))
}

/// Copies velocity values, component-major. `len` must equal dim times the
/// node count.
///
/// # Safety
/// `sim` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn bf_sim_copy_velocity(sim: *const BfSimulation, buf: *mut f64, len: usize) -> BfStatus {
    guard(|| copy_out(obj(sim, "sim")?.state.u.values(), buf, len))
}

/// # Safety
/// `sim` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn bf_sim_free(sim: *mut BfSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        let p = bf_last_error();
        assert!(!p.is_null());
        unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
    }

    fn parse(text: &str) -> (BfStatus, *mut BfConfig) {
        let c = CString::new(text).unwrap();
        let mut cfg = ptr::null_mut();
        let s = unsafe { bf_config_parse(c.as_ptr(), &mut cfg) };
        (s, cfg)
    }

    #[test]
    fn config_errors_are_reported() {
        let (s, cfg) = parse("[nonlinearity]\nl = 3\n");
        assert_eq!(s, BfStatus::Config);
        assert!(cfg.is_null());
        assert!(last_error().contains("(0, 2]"));
        let (s, _) = parse("[grid]\ndtt = 1\n");
        assert_eq!(s, BfStatus::Config);
        assert!(last_error().contains("line 2"), "{}", last_error());
    }

    #[test]
    fn null_arguments() {
        let mut cfg = ptr::null_mut();
        assert_eq!(unsafe { bf_config_parse(ptr::null(), &mut cfg) }, BfStatus::NullArgument);
        assert_eq!(unsafe { bf_outcome_passed(ptr::null()) }, -1);
        assert_eq!(unsafe { bf_outcome_check_count(ptr::null()) }, 0);
        assert!(unsafe { bf_sim_time(ptr::null()) }.is_nan());
        unsafe {
            bf_config_free(ptr::null_mut());
            bf_outcome_free(ptr::null_mut());
            bf_sim_free(ptr::null_mut());
            bf_string_free(ptr::null_mut());
        }
    }

    #[test]
    fn run_spectrum_through_handles() {
        let (s, cfg) = parse("[grid]\nn = 8\n[medium]\ndiagonal = 1, 2\n[spectrum]\nt_max = 5\nsamples = 11\n");
        assert_eq!(s, BfStatus::Ok);
        let mut out = ptr::null_mut();
        unsafe {
            assert_eq!(bf_run(cfg, BfSubcommand::Spectrum, &mut out), BfStatus::Ok);
            assert_eq!(bf_outcome_passed(out), 1);
            let key = CString::new("eig_min").unwrap();
            let mut v = 0.0;
            assert_eq!(bf_outcome_value(out, key.as_ptr(), &mut v), BfStatus::Ok);
            assert!(v > 0.0);
            let missing = CString::new("nope").unwrap();
            assert_eq!(bf_outcome_value(out, missing.as_ptr(), &mut v), BfStatus::NotFound);
            let n = bf_outcome_check_count(out);
            assert!(n >= 3);
            let mut st = BfCheckStatus::Fail;
            let mut name = ptr::null_mut();
            assert_eq!(bf_outcome_check(out, 0, &mut st, &mut name), BfStatus::Ok);
            assert_eq!(st, BfCheckStatus::Pass);
            assert_eq!(CStr::from_ptr(name).to_str().unwrap(), "symmetry");
            bf_string_free(name);
            assert_eq!(bf_outcome_check(out, n, &mut st, ptr::null_mut()), BfStatus::NotFound);
            let summary = bf_outcome_summary(out);
            assert!(CStr::from_ptr(summary).to_str().unwrap().ends_with("result = PASS\n"));
            bf_string_free(summary);
            let dir = tempfile::tempdir().unwrap();
            let d = CString::new(dir.path().to_str().unwrap()).unwrap();
            assert_eq!(bf_outcome_write(out, d.as_ptr(), false), BfStatus::Ok);
            assert!(dir.path().join("spectrum.csv").exists());
            bf_outcome_free(out);
            bf_config_free(cfg);
        }
    }

    #[test]
    fn simulation_handle_steps() {
        let (s, cfg) = parse("[grid]\nn = 8\n[run]\nsample_every = 0.01\n[initial]\nkind = smooth\n");
        assert_eq!(s, BfStatus::Ok);
        let mut sim = ptr::null_mut();
        unsafe {
            assert_eq!(bf_sim_new(cfg, 1.0, &mut sim), BfStatus::Ok);
            let e0 = bf_sim_energy(sim);
            assert!((e0 - 1.0).abs() < 1e-9, "{e0}");
            assert_eq!(bf_sim_advance(sim, 10), BfStatus::Ok);
            assert!((bf_sim_time(sim) - 10.0 * bf_sim_dt(sim)).abs() < 1e-12);
            assert!(bf_sim_energy(sim) < e0);
            let n = bf_sim_node_count(sim);
            assert_eq!(n, 64);
            let mut p = vec![0.0; n];
            assert_eq!(bf_sim_copy_pressure(sim, p.as_mut_ptr(), n), BfStatus::Ok);
            assert!(p.iter().any(|v| *v != 0.0));
            assert_eq!(bf_sim_copy_pressure(sim, p.as_mut_ptr(), n - 1), BfStatus::BufferSize);
            let mut u = vec![0.0; 2 * n];
            assert_eq!(bf_sim_copy_velocity(sim, u.as_mut_ptr(), 2 * n), BfStatus::Ok);
            bf_sim_free(sim);
            bf_config_free(cfg);
        }
    }

    #[test]
    fn header_lists_the_api() {
        let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/bfflow.h")).unwrap();
        for name in ["bf_config_parse", "bf_run", "bf_sim_advance", "BF_STATUS_CONFIG", "typedef struct BfOutcome BfOutcome"] {
            assert!(header.contains(name), "{name} missing from header");
        }
    }
}
