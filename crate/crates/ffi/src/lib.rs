//! C ABI over the crpcl engine.
//!
//! Every fallible function returns a [`CrpclStatus`]; on failure the message
//! is available from [`crpcl_last_error_message`] on the same thread.
//! Strings returned through `out` pointers are owned by the caller and must
//! be released with [`crpcl_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use crpcl::config::RunConfig;
use crpcl::embedding::EmbeddingSource;
use crpcl::similarity::{chernoff_bound, SimilarityModel};
use crpcl::{generate_toy_stream, run_stream, CrpState, Error, ErrorClass, TaskEmbedding};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrpclStatus {
    Ok = 0,
    NullPointer = 1,
    /// Malformed argument: non-UTF-8 text, non-finite number, bad length.
    InvalidArgument = 2,
    /// Rejected configuration or infeasible stream spec.
    Config = 3,
    /// Malformed or mismatched input data.
    Data = 4,
    /// The requested metric is undefined for the input (e.g. forgetting
    /// with fewer than two tasks).
    Undefined = 5,
    Internal = 6,
    /// A panic was caught at the boundary.
    Panic = 7,
}

/// Opaque online clustering engine.
pub struct CrpclEngine {
    state: CrpState,
}

/// Outcome of one assignment.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CrpclAssignment {
    pub cluster_id: usize,
    /// True when the task opened a new cluster.
    pub created: bool,
    /// Log posterior of the chosen option (unnormalized).
    pub log_posterior: f64,
    /// True when the Gaussian likelihood ratio was used, false during cold
    /// start.
    pub gaussian_mode: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> CrpclStatus {
    if matches!(e, Error::Domain(_)) {
        return CrpclStatus::Undefined;
    }
    match e.class() {
        ErrorClass::Config => CrpclStatus::Config,
        ErrorClass::Data => CrpclStatus::Data,
        ErrorClass::Internal => CrpclStatus::Internal,
    }
}

struct Failure(CrpclStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(CrpclStatus::NullPointer, format!("{what} is null"))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(CrpclStatus::InvalidArgument, message.into())
}

/// Runs `body`, records any failure or panic, and maps it to a status.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> CrpclStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => CrpclStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {message}"));
            CrpclStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn owned_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(CrpclStatus::Internal, "output contains a nul byte".into()))
}

fn positive(x: f64, what: &str) -> Result<(), Failure> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{what} must be positive and finite, got {x}")))
    }
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next crpcl call on the same thread.
#[no_mangle]
pub extern "C" fn crpcl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn crpcl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn crpcl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates an empty engine with concentration `alpha`, similarity floor
/// `sigma_min` and logit guard `epsilon`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn crpcl_engine_new(
    alpha: f64,
    sigma_min: f64,
    epsilon: f64,
    out: *mut *mut CrpclEngine,
) -> CrpclStatus {
    guard(|| {
        positive(alpha, "alpha")?;
        positive(sigma_min, "sigma_min")?;
        positive(epsilon, "epsilon")?;
        let engine = Box::new(CrpclEngine {
            state: CrpState::new(alpha, SimilarityModel::new(sigma_min, epsilon)),
        });
        write(out, Box::into_raw(engine), "out")
    })
}

/// Destroys an engine. Null is ignored.
///
/// # Safety
/// `engine` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn crpcl_engine_free(engine: *mut CrpclEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Routes one task embedding of length `dim` and updates the engine.
///
/// # Safety
/// `engine` must be a live handle, `task_id` a NUL-terminated string,
/// `vector` must point to `dim` doubles and `out` may be null or writable.
#[no_mangle]
pub unsafe extern "C" fn crpcl_engine_assign(
    engine: *mut CrpclEngine,
    task_id: *const c_char,
    vector: *const f64,
    dim: usize,
    out: *mut CrpclAssignment,
) -> CrpclStatus {
    guard(|| {
        let engine = engine.as_mut().ok_or_else(|| null("engine"))?;
        let task_id = text(task_id, "task_id")?;
        let vector = slice(vector, dim, "vector")?;
        if dim == 0 {
            return Err(invalid("embedding dimension must be positive"));
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(invalid("embedding contains a non-finite value"));
        }
        let decision = engine.state.assign(&TaskEmbedding {
            task_id: task_id.to_string(),
            vector: vector.to_vec(),
            source: EmbeddingSource::File,
        })?;
        if out.is_null() {
            return Ok(());
        }
        let log_posterior = if decision.created {
            decision.new_log_posterior
        } else {
            decision
                .per_cluster_log_posterior
                .iter()
                .find(|(k, _)| *k == decision.cluster_id)
                .map_or(f64::NAN, |(_, lp)| *lp)
        };
        write(
            out,
            CrpclAssignment {
                cluster_id: decision.cluster_id,
                created: decision.created,
                log_posterior,
                gaussian_mode: decision.mode == crpcl::crp::DecisionMode::Gaussian,
            },
            "out",
        )
    })
}

/// Number of clusters discovered so far.
///
/// # Safety
/// `engine` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn crpcl_engine_discovered_k(engine: *const CrpclEngine, out: *mut usize) -> CrpclStatus {
    guard(|| {
        let engine = engine.as_ref().ok_or_else(|| null("engine"))?;
        write(out, engine.state.discovered_k(), "out")
    })
}

/// Cluster label of every task in arrival order. Writes at most `capacity`
/// labels into `labels` and the total count into `out_len`; call with
/// `capacity = 0` to query the length.
///
/// # Safety
/// `engine` must be a live handle, `labels` must hold `capacity` entries
/// (or be null when `capacity` is 0) and `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn crpcl_engine_labels(
    engine: *const CrpclEngine,
    labels: *mut usize,
    capacity: usize,
    out_len: *mut usize,
) -> CrpclStatus {
    guard(|| {
        let engine = engine.as_ref().ok_or_else(|| null("engine"))?;
        let all = engine.state.labels();
        if capacity > 0 {
            if labels.is_null() {
                return Err(null("labels"));
            }
            let n = capacity.min(all.len());
            ptr::copy_nonoverlapping(all.as_ptr(), labels, n);
        }
        write(out_len, all.len(), "out_len")
    })
}

/// Serializes the engine as JSON into a new string.
///
/// # Safety
/// `engine` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn crpcl_engine_to_json(engine: *const CrpclEngine, out: *mut *mut c_char) -> CrpclStatus {
    guard(|| {
        let engine = engine.as_ref().ok_or_else(|| null("engine"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let json = serde_json::to_string(&engine.state).expect("engine state serializes");
        write(out, owned_string(json)?, "out")
    })
}

/// Restores an engine from [`crpcl_engine_to_json`] output.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn crpcl_engine_from_json(json: *const c_char, out: *mut *mut CrpclEngine) -> CrpclStatus {
    guard(|| {
        let json = text(json, "json")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let state: CrpState = serde_json::from_str(json)
            .map_err(|e| Failure(CrpclStatus::Data, format!("malformed engine json: {e}")))?;
        write(out, Box::into_raw(Box::new(CrpclEngine { state })), "out")
    })
}

/// Hard Dice between two binary masks of length `len`; two empty masks
/// score 1.
///
/// # Safety
/// `pred` and `truth` must each point to `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn crpcl_dice_score(pred: *const u8, truth: *const u8, len: usize, out: *mut f64) -> CrpclStatus {
    guard(|| {
        let (p, t) = (slice(pred, len, "pred")?, slice(truth, len, "truth")?);
        write(out, crpcl::loss::dice_score(p, t), "out")
    })
}

/// Mean `peak − final` over the first `len − 1` tasks. Returns
/// [`CrpclStatus::Undefined`] when `len < 2`.
///
/// # Safety
/// `peaks` and `finals` must each point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn crpcl_forgetting_rate(
    peaks: *const f64,
    finals: *const f64,
    len: usize,
    out: *mut f64,
) -> CrpclStatus {
    guard(|| {
        let (p, f) = (slice(peaks, len, "peaks")?, slice(finals, len, "finals")?);
        write(out, crpcl::trainer::forgetting_from(p, f)?, "out")
    })
}

/// `2·exp(−Δ²/(8(σ_intra² + σ_inter²)))`.
#[no_mangle]
pub extern "C" fn crpcl_chernoff_bound(delta: f64, sigma_intra: f64, sigma_inter: f64) -> f64 {
    chernoff_bound(delta, sigma_intra, sigma_inter)
}

/// Runs the continual learner on the synthetic toy stream described by a
/// TOML run configuration (empty string for defaults) and returns the run
/// summary as JSON.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn crpcl_train_synthetic(config_toml: *const c_char, out: *mut *mut c_char) -> CrpclStatus {
    guard(|| {
        let toml = text(config_toml, "config_toml")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let config = RunConfig::from_toml_str(toml, &[])?;
        let tasks = generate_toy_stream(&config.stream, &config.world)?.tasks;
        let summary = run_stream(&tasks, &config.train)?.summary()?;
        let json = serde_json::to_string(&summary).expect("summaries serialize");
        write(out, owned_string(json)?, "out")
    })
}
