//! C interface to fedscore.
//!
//! Every fallible function returns an [`FsStatus`]. On failure a message is
//! kept per thread and read with [`fs_last_error_message`]. Configs and
//! results are opaque handles released with their `_free` function; strings
//! handed out by the library are released with [`fs_string_free`].
//!
//! Run, round and client indices are 0-based. Method and tail arguments take
//! the numeric values of [`FsCeMethod`] and [`FsTail`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fedscore::config::ExperimentConfig;
use fedscore::contribution::{exact_shapley, CeMethod, TableGame};
use fedscore::harness::{run_experiment, ExperimentResult};
use fedscore::stats::{anderson_darling_k2, paired_t_test, Tail};
use fedscore::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    Runtime = 4,
    OutOfRange = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsCeMethod {
    Sv = 0,
    Gtg = 1,
    Loo = 2,
    Adp = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsTail {
    Greater = 0,
    Less = 1,
    TwoSided = 2,
}

/// Parsed, validated experiment configuration.
pub struct FsConfig {
    inner: ExperimentConfig,
}

/// Outcome of [`fs_run_experiment`].
pub struct FsResult {
    config: ExperimentConfig,
    inner: ExperimentResult,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    status: FsStatus,
    message: String,
}

impl Failure {
    fn new(status: FsStatus, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Config { .. } => FsStatus::InvalidConfig,
            _ => FsStatus::Runtime,
        };
        Failure::new(status, e.to_string())
    }
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FsStatus::Ok,
        Ok(Err(fail)) => {
            set_error(&fail.message);
            fail.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            FsStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::new(FsStatus::NullPointer, format!("`{what}` is null")))
    } else {
        Ok(())
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    non_null(p, what)?;
    CStr::from_ptr(p).to_str().map_err(|e| Failure::new(FsStatus::InvalidUtf8, format!("`{what}` is not UTF-8: {e}")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

fn out_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| Failure::new(FsStatus::Runtime, "string contains a nul byte"))?;
    unsafe { *out = c.into_raw() };
    Ok(())
}

fn method_of(code: u32) -> Result<CeMethod, Failure> {
    Ok(match code {
        0 => CeMethod::Sv,
        1 => CeMethod::Gtg,
        2 => CeMethod::Loo,
        3 => CeMethod::Adp,
        _ => return Err(Failure::new(FsStatus::OutOfRange, format!("unknown method code {code}"))),
    })
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn fs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parse and validate a TOML configuration. Relative CSV paths are taken
/// relative to the working directory.
///
/// # Safety
/// `toml` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_config_from_toml(toml: *const c_char, out: *mut *mut FsConfig) -> FsStatus {
    guard(|| {
        non_null(out, "out")?;
        let text = str_arg(toml, "toml")?;
        let inner = ExperimentConfig::from_toml_str(text)?;
        *out = Box::into_raw(Box::new(FsConfig { inner }));
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a live handle from [`fs_config_from_toml`].
#[no_mangle]
pub unsafe extern "C" fn fs_config_free(cfg: *mut FsConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Override the base seed.
///
/// # Safety
/// `cfg` must be a live config handle.
#[no_mangle]
pub unsafe extern "C" fn fs_config_set_seed(cfg: *mut FsConfig, seed: u64) -> FsStatus {
    guard(|| {
        non_null(cfg, "cfg")?;
        (*cfg).inner.base_seed = seed;
        Ok(())
    })
}

/// Override the repetition count (at least 1).
///
/// # Safety
/// `cfg` must be a live config handle.
#[no_mangle]
pub unsafe extern "C" fn fs_config_set_repetitions(cfg: *mut FsConfig, repetitions: usize) -> FsStatus {
    guard(|| {
        non_null(cfg, "cfg")?;
        if repetitions == 0 {
            return Err(Error::config("repetitions", "must be >= 1").into());
        }
        (*cfg).inner.repetitions = repetitions;
        Ok(())
    })
}

/// Hex digest identifying the configuration. Free with [`fs_string_free`].
///
/// # Safety
/// `cfg` must be a live config handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_config_hash(cfg: *const FsConfig, out: *mut *mut c_char) -> FsStatus {
    guard(|| {
        non_null(cfg, "cfg")?;
        non_null(out, "out")?;
        out_string(out, (*cfg).inner.hash())
    })
}

/// Run every repetition of the experiment.
///
/// # Safety
/// `cfg` must be a live config handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_run_experiment(cfg: *const FsConfig, out: *mut *mut FsResult) -> FsStatus {
    guard(|| {
        non_null(cfg, "cfg")?;
        non_null(out, "out")?;
        let config = (*cfg).inner.clone();
        let inner = run_experiment(&config)?;
        *out = Box::into_raw(Box::new(FsResult { config, inner }));
        Ok(())
    })
}

/// # Safety
/// `res` must be null or a live handle from [`fs_run_experiment`].
#[no_mangle]
pub unsafe extern "C" fn fs_result_free(res: *mut FsResult) {
    if !res.is_null() {
        drop(Box::from_raw(res));
    }
}

/// Number of runs (repetitions), rounds per run and clients. Any output
/// pointer may be null.
///
/// # Safety
/// `res` must be a live result handle.
#[no_mangle]
pub unsafe extern "C" fn fs_result_dims(
    res: *const FsResult,
    runs: *mut usize,
    rounds: *mut usize,
    clients: *mut usize,
) -> FsStatus {
    guard(|| {
        non_null(res, "res")?;
        let r = &*res;
        if !runs.is_null() {
            *runs = r.inner.runs.len();
        }
        if !rounds.is_null() {
            *rounds = r.config.rounds;
        }
        if !clients.is_null() {
            *clients = r.config.clients;
        }
        Ok(())
    })
}

/// Final normalised scores of one run and method, written to `out[0..clients]`.
///
/// # Safety
/// `res` must be a live result handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fs_result_final_scores(
    res: *const FsResult,
    run: usize,
    method: u32,
    out: *mut f64,
    len: usize,
) -> FsStatus {
    guard(|| {
        non_null(res, "res")?;
        non_null(out, "out")?;
        let r = &*res;
        let m = method_of(method)?;
        let run = r
            .inner
            .runs
            .get(run)
            .ok_or_else(|| Failure::new(FsStatus::OutOfRange, format!("run {run} of {}", r.inner.runs.len())))?;
        let scores = run
            .final_for(m)
            .ok_or_else(|| Failure::new(FsStatus::OutOfRange, format!("method {} was not configured", m.name())))?;
        if len < scores.values.len() {
            return Err(Failure::new(
                FsStatus::OutOfRange,
                format!("buffer holds {len} values, need {}", scores.values.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, scores.values.len()).copy_from_slice(&scores.values);
        Ok(())
    })
}

/// Global validation loss and accuracy after `round` (0-based) of `run`.
/// Either output may be null.
///
/// # Safety
/// `res` must be a live result handle.
#[no_mangle]
pub unsafe extern "C" fn fs_result_round_metrics(
    res: *const FsResult,
    run: usize,
    round: usize,
    loss: *mut f64,
    accuracy: *mut f64,
) -> FsStatus {
    guard(|| {
        non_null(res, "res")?;
        let r = &*res;
        let rec = r
            .inner
            .runs
            .get(run)
            .and_then(|r| r.rounds.get(round))
            .ok_or_else(|| Failure::new(FsStatus::OutOfRange, format!("no round {round} in run {run}")))?;
        if !loss.is_null() {
            *loss = rec.global_loss;
        }
        if !accuracy.is_null() {
            *accuracy = rec.global_accuracy;
        }
        Ok(())
    })
}

/// The result as scores.csv text, byte-identical to the `run` command's
/// file. Free with [`fs_string_free`].
///
/// # Safety
/// `res` must be a live result handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_result_scores_csv(res: *const FsResult, out: *mut *mut c_char) -> FsStatus {
    guard(|| {
        non_null(res, "res")?;
        non_null(out, "out")?;
        let r = &*res;
        out_string(out, fedscore::cli::scores_csv(&r.config, &r.inner))
    })
}

/// Two-sample Anderson-Darling test. Either output may be null.
///
/// # Safety
/// `a` and `b` must hold `na` and `nb` doubles.
#[no_mangle]
pub unsafe extern "C" fn fs_anderson_darling(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    statistic: *mut f64,
    p_value: *mut f64,
) -> FsStatus {
    guard(|| {
        let r = anderson_darling_k2(slice_arg(a, na, "a")?, slice_arg(b, nb, "b")?)?;
        if !statistic.is_null() {
            *statistic = r.statistic;
        }
        if !p_value.is_null() {
            *p_value = r.p_value;
        }
        Ok(())
    })
}

/// One-sample t-test on paired differences. Either output may be null.
///
/// # Safety
/// `diffs` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn fs_paired_t_test(
    diffs: *const f64,
    n: usize,
    tail: u32,
    t: *mut f64,
    p_value: *mut f64,
) -> FsStatus {
    guard(|| {
        let tail = match tail {
            0 => Tail::Greater,
            1 => Tail::Less,
            2 => Tail::TwoSided,
            _ => return Err(Failure::new(FsStatus::OutOfRange, format!("unknown tail code {tail}"))),
        };
        let r = paired_t_test(slice_arg(diffs, n, "diffs")?, tail)?;
        if !t.is_null() {
            *t = r.t;
        }
        if !p_value.is_null() {
            *p_value = r.p_value;
        }
        Ok(())
    })
}

/// Exact Shapley values of a game given as `2^players` coalition values
/// indexed by bitmask. Writes `players` values to `out`.
///
/// # Safety
/// `values` must hold `2^players` doubles and `out` `players` doubles.
#[no_mangle]
pub unsafe extern "C" fn fs_exact_shapley(values: *const f64, players: usize, out: *mut f64) -> FsStatus {
    guard(|| {
        non_null(out, "out")?;
        if players == 0 || players > 16 {
            return Err(Failure::new(FsStatus::OutOfRange, format!("players must be in 1..=16, got {players}")));
        }
        let table = slice_arg(values, 1usize << players, "values")?.to_vec();
        let sv = exact_shapley(&TableGame::new(players, table)?)?;
        std::slice::from_raw_parts_mut(out, players).copy_from_slice(&sv);
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panics_become_a_status() {
        let st = guard(|| panic!("boom"));
        assert_eq!(st, FsStatus::Panic);
        let msg = unsafe { CStr::from_ptr(fs_last_error_message()) }.to_str().unwrap();
        assert_eq!(msg, "panic: boom");
    }

    #[test]
    fn library_errors_map_to_statuses() {
        assert_eq!(Failure::from(Error::config("x", "y")).status, FsStatus::InvalidConfig);
        assert_eq!(Failure::from(Error::Empty("z".into())).status, FsStatus::Runtime);
    }
}
