//! C interface to the metalabel engine.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! style functions and released by the matching `*_free`. Every fallible
//! call returns an [`MlStatus`]; on failure the message is kept per thread
//! and read with [`ml_last_error`]. Strings returned to the caller are
//! owned by the caller and released with [`ml_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use metalabel::data::{load_dataset, save_dataset, Dataset, Split};
use metalabel::gradcheck::{run_suite, GradcheckOptions};
use metalabel::harness::{baseline_ce, prepare_dataset, run_experiment, RunOutcome, TrainConfig};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Bad config, argument or file contents.
    Validation = 3,
    /// Failure while computing (non-finite loss, I/O, ...).
    Runtime = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MlSplit {
    Train = 0,
    Meta = 1,
    Test = 2,
}

impl From<MlSplit> for Split {
    fn from(s: MlSplit) -> Split {
        match s {
            MlSplit::Train => Split::Train,
            MlSplit::Meta => Split::Meta,
            MlSplit::Test => Split::Test,
        }
    }
}

/// Opaque training configuration.
pub struct MlConfig(TrainConfig);

/// Opaque dataset.
pub struct MlDataset(Dataset);

/// Opaque finished run: log, selected model and summary.
pub struct MlRun(RunOutcome);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(MlStatus, String);

impl From<metalabel::Error> for Failure {
    fn from(e: metalabel::Error) -> Self {
        let status = if e.is_validation() { MlStatus::Validation } else { MlStatus::Runtime };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MlStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside metalabel".into());
            MlStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(MlStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MlStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(MlStatus::NullPointer, format!("{name} is null")))
}

unsafe fn write_out<T>(out: *mut T, value: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(MlStatus::NullPointer, format!("{name} is null")));
    }
    out.write(value);
    Ok(())
}

fn owned_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw()
}

/// Message of the last failed call on this thread, or NULL. Free with
/// `ml_string_free`.
#[no_mangle]
pub extern "C" fn ml_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |c| c.clone().into_raw()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn ml_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Default configuration.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ml_config_default(out: *mut *mut MlConfig) -> MlStatus {
    guard(|| write_out(out, Box::into_raw(Box::new(MlConfig(TrainConfig::default()))), "out"))
}

/// Parses and validates a JSON configuration.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ml_config_from_json(json: *const c_char, out: *mut *mut MlConfig) -> MlStatus {
    guard(|| {
        let cfg = TrainConfig::from_json(str_arg(json, "json")?)?;
        write_out(out, Box::into_raw(Box::new(MlConfig(cfg))), "out")
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ml_config_set_seed(cfg: *mut MlConfig, seed: u64) -> MlStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| Failure(MlStatus::NullPointer, "cfg is null".into()))?;
        cfg.0.seed = seed;
        Ok(())
    })
}

/// Canonical JSON of the configuration. Free with `ml_string_free`.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ml_config_to_json(cfg: *const MlConfig, out: *mut *mut c_char) -> MlStatus {
    guard(|| {
        let cfg = handle(cfg, "cfg")?;
        write_out(out, owned_string(cfg.0.to_json()), "out")
    })
}

/// # Safety
/// `cfg` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ml_config_free(cfg: *mut MlConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Builds the dataset described by the configuration.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ml_dataset_prepare(cfg: *const MlConfig, out: *mut *mut MlDataset) -> MlStatus {
    guard(|| {
        let ds = prepare_dataset(&handle(cfg, "cfg")?.0)?;
        write_out(out, Box::into_raw(Box::new(MlDataset(ds))), "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ml_dataset_load(path: *const c_char, out: *mut *mut MlDataset) -> MlStatus {
    guard(|| {
        let ds = load_dataset(str_arg(path, "path")?)?;
        write_out(out, Box::into_raw(Box::new(MlDataset(ds))), "out")
    })
}

/// # Safety
/// `ds` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ml_dataset_save(ds: *const MlDataset, path: *const c_char) -> MlStatus {
    guard(|| {
        save_dataset(&handle(ds, "ds")?.0, str_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live handle and `rows`, `dims`, `classes` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ml_dataset_shape(
    ds: *const MlDataset,
    rows: *mut usize,
    dims: *mut usize,
    classes: *mut usize,
) -> MlStatus {
    guard(|| {
        let ds = &handle(ds, "ds")?.0;
        write_out(rows, ds.len(), "rows")?;
        write_out(dims, ds.dims(), "dims")?;
        write_out(classes, ds.classes(), "classes")
    })
}

/// # Safety
/// `ds` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ml_dataset_free(ds: *mut MlDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains one run to completion. With `baseline`, trains plain
/// cross-entropy instead of the label-learning method.
///
/// # Safety
/// `cfg` and `ds` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ml_run_train(
    cfg: *const MlConfig,
    ds: *const MlDataset,
    baseline: bool,
    out: *mut *mut MlRun,
) -> MlStatus {
    guard(|| {
        let (cfg, ds) = (&handle(cfg, "cfg")?.0, &handle(ds, "ds")?.0);
        let outcome = if baseline { baseline_ce(cfg, ds)? } else { run_experiment(cfg, ds)? };
        write_out(out, Box::into_raw(Box::new(MlRun(outcome))), "out")
    })
}

/// Accuracy of the run's selected model on a split of `ds`.
///
/// # Safety
/// `run` and `ds` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ml_run_accuracy(
    run: *const MlRun,
    ds: *const MlDataset,
    split: MlSplit,
    out: *mut f64,
) -> MlStatus {
    guard(|| {
        let run = handle(run, "run")?;
        let acc = metalabel::harness::evaluate(&run.0.selected.theta, &handle(ds, "ds")?.0, split.into())?;
        write_out(out, acc, "out")
    })
}

/// # Safety
/// `run` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ml_run_selected_epoch(run: *const MlRun, out: *mut usize) -> MlStatus {
    guard(|| write_out(out, handle(run, "run")?.0.selected.epoch, "out"))
}

/// Run summary as JSON. Free with `ml_string_free`.
///
/// # Safety
/// `run` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ml_run_summary_json(run: *const MlRun, out: *mut *mut c_char) -> MlStatus {
    guard(|| {
        let s = serde_json::to_string(&handle(run, "run")?.0.summary)
            .map_err(|e| Failure(MlStatus::Runtime, e.to_string()))?;
        write_out(out, owned_string(s), "out")
    })
}

/// # Safety
/// `run` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ml_run_free(run: *mut MlRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Runs the gradient-check suite; `passed` is set to whether every check
/// met its tolerance.
///
/// # Safety
/// `passed` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ml_gradcheck(trials: usize, seed: u64, passed: *mut bool) -> MlStatus {
    guard(|| {
        let report = run_suite(&GradcheckOptions { trials, seed, ..Default::default() })?;
        write_out(passed, report.iter().all(|r| r.passed), "passed")
    })
}
