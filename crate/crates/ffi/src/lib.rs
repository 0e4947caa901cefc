//! C ABI for the wqed simulator.
//!
//! Every object crosses the boundary as an opaque pointer created by a
//! `*_new`/`*_from_*` function and released by the matching `*_free`.
//! Every fallible function returns a [`WqedStatus`]; on failure the message
//! of the last error on the calling thread is available through
//! [`wqed_last_error_message`]. Strings returned by the library are owned by
//! the caller and released with [`wqed_string_free`]. Panics never unwind
//! across the boundary; they are reported as `WQED_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use wqed::emission::{EmissionSetup, EmitterConfig, QubitPreparation};
use wqed::fock::{expect_moment, Powers, TwoModeState};
use wqed::scenario::{run_scenario, RunReport, Scenario, ScenarioConfig, ScenarioResults};
use wqed::spectroscopy::{s21_model, SpectroscopyParams};
use wqed::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WqedStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// An argument or configuration value was rejected.
    InvalidArgument = 3,
    /// A scenario stage failed; the message names the stage and config hash.
    StageFailed = 4,
    /// A numerical routine did not converge or was ill-conditioned.
    Numerical = 5,
    /// Reading or writing a file failed.
    Io = 6,
    /// The requested quantity does not exist for this object.
    NotAvailable = 7,
    /// The caller's buffer is too small; the message holds the needed size.
    BufferTooSmall = 8,
    /// An internal panic was caught.
    Panic = 9,
}

/// Scenario configuration.
pub struct WqedConfig {
    inner: ScenarioConfig,
}

/// Finished run.
pub struct WqedReport {
    inner: RunReport,
}

/// Two-mode photonic state.
pub struct WqedState {
    inner: TwoModeState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> WqedStatus {
    match err {
        Error::Stage { .. } => WqedStatus::StageFailed,
        Error::NonConvergence(_)
        | Error::IllConditioned(_)
        | Error::ResidualTooLarge { .. }
        | Error::NoBracket { .. }
        | Error::StepUnderflow { .. }
        | Error::NonFinite { .. }
        | Error::BoundSearch(_)
        | Error::AcceptanceTooLow(_) => WqedStatus::Numerical,
        Error::Io(_) => WqedStatus::Io,
        _ => WqedStatus::InvalidArgument,
    }
}

fn fail(status: WqedStatus, message: impl Into<String>) -> WqedStatus {
    set_last_error(message.into());
    status
}

/// Run `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (WqedStatus, String)>) -> WqedStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WqedStatus::Ok,
        Ok(Err((status, message))) => fail(status, message),
        Err(_) => fail(WqedStatus::Panic, "internal panic"),
    }
}

fn lib<T>(r: wqed::Result<T>) -> Result<T, (WqedStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (WqedStatus, String) {
    (WqedStatus::NullPointer, format!("{what} is null"))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, (WqedStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn borrow_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (WqedStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (WqedStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| (WqedStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), (WqedStatus, String)> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn to_c_string(s: String) -> Result<*mut c_char, (WqedStatus, String)> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|e| (WqedStatus::InvalidArgument, e.to_string()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn wqed_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length excluding the NUL,
/// or 0 when there is no error.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn wqed_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn wqed_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parse and validate a JSON scenario configuration.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wqed_config_from_json(json: *const c_char, out: *mut *mut WqedConfig) -> WqedStatus {
    guard(|| {
        let text = read_str(json, "json")?;
        let inner = lib(ScenarioConfig::from_json(text))?;
        write_out(out, Box::into_raw(Box::new(WqedConfig { inner })), "out")
    })
}

/// Canonical configuration of a named scenario (`"noon_3l4"`, `"partition_l2"`,
/// `"gain_calibration"`, `"spectroscopy_fit"`, `"dynamics_check"`).
///
/// # Safety
/// `scenario` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wqed_config_preset(scenario: *const c_char, out: *mut *mut WqedConfig) -> WqedStatus {
    guard(|| {
        let name = read_str(scenario, "scenario")?;
        let s = lib(Scenario::from_name(name))?;
        let inner = ScenarioConfig::preset(s);
        write_out(out, Box::into_raw(Box::new(WqedConfig { inner })), "out")
    })
}

/// # Safety
/// `cfg` must be a live configuration handle.
#[no_mangle]
pub unsafe extern "C" fn wqed_config_set_seed(cfg: *mut WqedConfig, seed: u64) -> WqedStatus {
    guard(|| {
        borrow_mut(cfg, "cfg")?.inner.seed = seed;
        Ok(())
    })
}

/// Set the signal shot count (ground and calibration shots follow unless
/// set explicitly in the configuration).
///
/// # Safety
/// `cfg` must be a live configuration handle.
#[no_mangle]
pub unsafe extern "C" fn wqed_config_set_shots(cfg: *mut WqedConfig, n_shots: usize) -> WqedStatus {
    guard(|| {
        let cfg = borrow_mut(cfg, "cfg")?;
        let mut next = cfg.inner.clone();
        next.n_shots = n_shots;
        lib(next.validate())?;
        cfg.inner = next;
        Ok(())
    })
}

/// Set (or with null, clear) the output directory.
///
/// # Safety
/// `cfg` must be a live configuration handle; `dir` null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn wqed_config_set_output_dir(cfg: *mut WqedConfig, dir: *const c_char) -> WqedStatus {
    guard(|| {
        let cfg = borrow_mut(cfg, "cfg")?;
        cfg.inner.output_dir = if dir.is_null() {
            None
        } else {
            Some(read_str(dir, "dir")?.into())
        };
        Ok(())
    })
}

/// Configuration as pretty-printed JSON; free with [`wqed_string_free`].
///
/// # Safety
/// `cfg` must be a live configuration handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wqed_config_to_json(cfg: *const WqedConfig, out: *mut *mut c_char) -> WqedStatus {
    guard(|| {
        let json = lib(borrow(cfg, "cfg")?.inner.to_json())?;
        write_out(out, to_c_string(json)?, "out")
    })
}

/// SHA-256 configuration hash (64 hex characters) written into `buf`, which
/// must hold at least 65 bytes.
///
/// # Safety
/// `cfg` must be a live configuration handle; `buf` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn wqed_config_hash(cfg: *const WqedConfig, buf: *mut c_char, len: usize) -> WqedStatus {
    guard(|| {
        let hash = borrow(cfg, "cfg")?.inner.hash();
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len <= hash.len() {
            return Err((WqedStatus::BufferTooSmall, format!("need {} bytes", hash.len() + 1)));
        }
        ptr::copy_nonoverlapping(hash.as_ptr().cast::<c_char>(), buf, hash.len());
        *buf.add(hash.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn wqed_config_free(cfg: *mut WqedConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Execute the scenario; with an output directory set, results are written
/// there as well.
///
/// # Safety
/// `cfg` must be a live configuration handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wqed_run(cfg: *const WqedConfig, out: *mut *mut WqedReport) -> WqedStatus {
    guard(|| {
        let inner = lib(run_scenario(&borrow(cfg, "cfg")?.inner))?;
        write_out(out, Box::into_raw(Box::new(WqedReport { inner })), "out")
    })
}

/// Full report as JSON; free with [`wqed_string_free`].
///
/// # Safety
/// `report` must be a live report handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wqed_report_json(report: *const WqedReport, out: *mut *mut c_char) -> WqedStatus {
    guard(|| {
        let json = lib(borrow(report, "report")?.inner.to_json())?;
        write_out(out, to_c_string(json)?, "out")
    })
}

/// Report as JSON without timings: identical for identical configurations.
///
/// # Safety
/// `report` must be a live report handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wqed_report_canonical_json(report: *const WqedReport, out: *mut *mut c_char) -> WqedStatus {
    guard(|| {
        let json = lib(borrow(report, "report")?.inner.canonical_json())?;
        write_out(out, to_c_string(json)?, "out")
    })
}

/// Reconstruction fidelity to the ideal state (tomography scenarios only).
///
/// # Safety
/// `report` must be a live report handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wqed_report_fidelity(report: *const WqedReport, out: *mut f64) -> WqedStatus {
    guard(|| {
        let r = borrow(report, "report")?;
        let t = r
            .inner
            .tomography()
            .ok_or((WqedStatus::NotAvailable, "not a tomography report".to_string()))?;
        write_out(out, t.fidelity, "out")
    })
}

/// Efficiencies η of the left and right chains (tomography and gain
/// calibration scenarios).
///
/// # Safety
/// `report` must be a live report handle; both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn wqed_report_efficiency(
    report: *const WqedReport,
    eta_l: *mut f64,
    eta_r: *mut f64,
) -> WqedStatus {
    guard(|| {
        let eff = match &borrow(report, "report")?.inner.results {
            ScenarioResults::Tomography(t) => t.efficiency,
            ScenarioResults::GainCalibration(g) => g.efficiency,
            _ => return Err((WqedStatus::NotAvailable, "report has no efficiency estimate".into())),
        };
        write_out(eta_l, eff[0].eta, "eta_l")?;
        write_out(eta_r, eff[1].eta, "eta_r")
    })
}

/// # Safety
/// `report` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn wqed_report_free(report: *mut WqedReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Photonic state emitted by `n_qubits` fully excited qubits at `positions`
/// (m) with resonance `omega` (rad/s), phase velocity `v` (m/s) and coupling
/// `gamma` (rad/s), truncated at `cutoff` photons per mode.
///
/// # Safety
/// `positions` must point to `n_qubits` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wqed_emitted_state(
    positions: *const f64,
    n_qubits: usize,
    omega: f64,
    v: f64,
    gamma: f64,
    cutoff: usize,
    out: *mut *mut WqedState,
) -> WqedStatus {
    guard(|| {
        if positions.is_null() {
            return Err(null("positions"));
        }
        let positions = std::slice::from_raw_parts(positions, n_qubits).to_vec();
        let config = EmitterConfig {
            positions,
            omega,
            v,
            gamma,
            gamma_phi: 0.0,
            n_th: 0.0,
            qubit_omegas: None,
        };
        let setup = EmissionSetup {
            config,
            prep: QubitPreparation::all_excited(n_qubits),
            active: (0..n_qubits).collect(),
            cutoff,
        };
        let inner = lib(setup.emitted_state())?;
        write_out(out, Box::into_raw(Box::new(WqedState { inner })), "out")
    })
}

/// Moment `⟨a_L†ʷ a_Lˣ a_R†ʸ a_Rᶻ⟩` of a state.
///
/// # Safety
/// `state` must be a live state handle; `re`/`im` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wqed_state_moment(
    state: *const WqedState,
    w: usize,
    x: usize,
    y: usize,
    z: usize,
    re: *mut f64,
    im: *mut f64,
) -> WqedStatus {
    guard(|| {
        let s = borrow(state, "state")?;
        let m = lib(expect_moment(&s.inner, Powers::new(w, x, y, z)))?;
        write_out(re, m.re, "re")?;
        write_out(im, m.im, "im")
    })
}

/// Population of `|n_l, n_r⟩`.
///
/// # Safety
/// `state` must be a live state handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wqed_state_population(
    state: *const WqedState,
    n_l: usize,
    n_r: usize,
    out: *mut f64,
) -> WqedStatus {
    guard(|| {
        let p = lib(borrow(state, "state")?.inner.population(n_l, n_r))?;
        write_out(out, p, "out")
    })
}

/// # Safety
/// `state` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn wqed_state_free(state: *mut WqedState) {
    if !state.is_null() {
        drop(Box::from_raw(state));
    }
}

/// Steady-state transmission `S21` of a probe detuned by `delta_omega`
/// (rad/s) at `power_w` watts past a qubit with coupling `gamma`, pure
/// dephasing `gamma_phi` (rad/s) and thermal occupation `n_th`.
///
/// # Safety
/// `re`/`im` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wqed_s21(
    gamma: f64,
    gamma_phi: f64,
    n_th: f64,
    omega: f64,
    delta_omega: f64,
    power_w: f64,
    re: *mut f64,
    im: *mut f64,
) -> WqedStatus {
    guard(|| {
        let p = SpectroscopyParams {
            gamma,
            gamma_phi,
            n_th,
            omega,
        };
        lib(p.validate())?;
        if !(power_w >= 0.0 && delta_omega.is_finite()) {
            return Err((WqedStatus::InvalidArgument, "power must be ≥ 0 and detuning finite".into()));
        }
        let s = s21_model(&p, delta_omega, power_w);
        write_out(re, s.re, "re")?;
        write_out(im, s.im, "im")
    })
}
