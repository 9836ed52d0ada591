use std::ffi::{CStr, CString};
use std::ptr;

use metalabel_ffi::*;

const SMALL: &str = r#"{
    "schema_version": 1,
    "seed": 3,
    "data": {"n": 300, "meta_size": 40, "test_size": 40, "oracle_epochs": 3},
    "train": {"batch_size": 32, "e_phase1": 2, "e_phase2": 4}
}"#;

fn take_string(p: *mut std::ffi::c_char) -> String {
    assert!(!p.is_null());
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned();
    unsafe { ml_string_free(p) };
    s
}

fn small_config() -> *mut MlConfig {
    let json = CString::new(SMALL).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { ml_config_from_json(json.as_ptr(), &mut cfg) }, MlStatus::Ok);
    cfg
}

#[test]
fn config_round_trips_through_json() {
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { ml_config_default(&mut cfg) }, MlStatus::Ok);
    assert_eq!(unsafe { ml_config_set_seed(cfg, 11) }, MlStatus::Ok);
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { ml_config_to_json(cfg, &mut out) }, MlStatus::Ok);
    let text = take_string(out);
    assert!(text.contains("\"seed\": 11"));
    let again = CString::new(text).unwrap();
    let mut cfg2 = ptr::null_mut();
    assert_eq!(unsafe { ml_config_from_json(again.as_ptr(), &mut cfg2) }, MlStatus::Ok);
    unsafe {
        ml_config_free(cfg);
        ml_config_free(cfg2);
    }
}

#[test]
fn invalid_config_reports_field() {
    let json = CString::new(r#"{"schema_version": 1, "data": {"noise": {"ratio": 1.5}}}"#).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { ml_config_from_json(json.as_ptr(), &mut cfg) }, MlStatus::Validation);
    assert!(cfg.is_null());
    assert!(take_string(ml_last_error()).contains("data.noise.ratio"));
}

#[test]
fn null_arguments_are_rejected() {
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { ml_config_from_json(ptr::null(), &mut cfg) }, MlStatus::NullPointer);
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { ml_dataset_prepare(ptr::null(), &mut ds) }, MlStatus::NullPointer);
    assert_eq!(unsafe { ml_config_default(ptr::null_mut()) }, MlStatus::NullPointer);
    unsafe {
        ml_config_free(ptr::null_mut());
        ml_dataset_free(ptr::null_mut());
        ml_run_free(ptr::null_mut());
        ml_string_free(ptr::null_mut());
    }
}

#[test]
fn missing_dataset_file_is_validation_error() {
    let path = CString::new("/nonexistent/data.csv").unwrap();
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { ml_dataset_load(path.as_ptr(), &mut ds) }, MlStatus::Validation);
}

#[test]
fn prepare_train_and_evaluate() {
    let cfg = small_config();
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { ml_dataset_prepare(cfg, &mut ds) }, MlStatus::Ok);
    let (mut n, mut d, mut c) = (0, 0, 0);
    assert_eq!(unsafe { ml_dataset_shape(ds, &mut n, &mut d, &mut c) }, MlStatus::Ok);
    assert_eq!((n, d, c), (300, 10, 4));

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("d.csv").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ml_dataset_save(ds, path.as_ptr()) }, MlStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { ml_dataset_load(path.as_ptr(), &mut loaded) }, MlStatus::Ok);

    for baseline in [false, true] {
        let mut run = ptr::null_mut();
        assert_eq!(unsafe { ml_run_train(cfg, loaded, baseline, &mut run) }, MlStatus::Ok);
        let mut acc = -1.0;
        assert_eq!(unsafe { ml_run_accuracy(run, loaded, MlSplit::Test, &mut acc) }, MlStatus::Ok);
        assert!((0.0..=1.0).contains(&acc));
        let mut epoch = usize::MAX;
        assert_eq!(unsafe { ml_run_selected_epoch(run, &mut epoch) }, MlStatus::Ok);
        assert!(epoch < 4);
        let mut s = ptr::null_mut();
        assert_eq!(unsafe { ml_run_summary_json(run, &mut s) }, MlStatus::Ok);
        let summary: serde_json::Value = serde_json::from_str(&take_string(s)).unwrap();
        assert_eq!(summary["test_accuracy"].as_f64().unwrap(), acc);
        unsafe { ml_run_free(run) };
    }
    unsafe {
        ml_dataset_free(ds);
        ml_dataset_free(loaded);
        ml_config_free(cfg);
    }
}

#[test]
fn gradcheck_passes() {
    let mut passed = false;
    assert_eq!(unsafe { ml_gradcheck(3, 0, &mut passed) }, MlStatus::Ok);
    assert!(passed);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/metalabel.h")).unwrap();
    let source = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = source
        .split("extern \"C\" fn ")
        .skip(1)
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/metalabel.h");
    let Ok(status) = std::process::Command::new("cc").args(["-fsyntax-only", "-x", "c", header]).status() else {
        eprintln!("no C compiler available, skipping");
        return;
    };
    assert!(status.success());
}
