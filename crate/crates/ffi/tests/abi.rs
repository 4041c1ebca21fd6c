use std::ffi::{CStr, CString};
use std::ptr;

use smcinfer_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = smc_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_updater(model: &str, prior: &str, n: usize, seed: u64) -> (SmcStatus, *mut SmcUpdater) {
    let mut u = ptr::null_mut();
    let s = unsafe { smc_updater_new(c(model).as_ptr(), c(prior).as_ptr(), n, seed, &mut u) };
    (s, u)
}

#[test]
fn updater_lifecycle() {
    let (s, u) = new_updater(r#"["binomial", {"n_meas": 25}, "precession"]"#, r#"{"kind": "uniform", "bounds": [[0, 1]]}"#, 2000, 1);
    assert_eq!(s, SmcStatus::Ok);
    assert!(!u.is_null());
    unsafe {
        let mut d = 0usize;
        assert_eq!(smc_updater_n_params(u, &mut d), SmcStatus::Ok);
        assert_eq!(d, 1);
        let mut ess = 0.0;
        assert_eq!(smc_updater_ess(u, &mut ess), SmcStatus::Ok);
        assert_eq!(ess, 2000.0);
        // counts consistent with ω = 0.5 at t = 1..10
        for t in 1..=10 {
            let p0 = (0.25 * t as f64).cos().powi(2);
            let e = c(&format!(r#"{{"t": {t}.0}}"#));
            assert_eq!(smc_updater_update(u, (25.0 * p0).round() as u64, e.as_ptr()), SmcStatus::Ok, "{}", last_error());
        }
        let mut mean = [0.0];
        assert_eq!(smc_updater_est_mean(u, mean.as_mut_ptr(), 1), SmcStatus::Ok);
        let mut cov = [0.0];
        assert_eq!(smc_updater_est_covariance(u, cov.as_mut_ptr(), 1), SmcStatus::Ok);
        assert!((mean[0] - 0.5).abs() < 3.0 * cov[0].sqrt(), "{mean:?} {cov:?}");
        let mut lz = 0.0;
        assert_eq!(smc_updater_log_evidence(u, &mut lz), SmcStatus::Ok);
        assert!(lz < 0.0);
        smc_updater_free(u);
        smc_updater_free(ptr::null_mut());
    }
}

#[test]
fn errors_carry_status_and_message() {
    let (s, u) = new_updater(r#""nosuchmodel""#, r#"{"kind": "uniform", "bounds": [[0, 1]]}"#, 100, 1);
    assert_eq!(s, SmcStatus::Config);
    assert!(u.is_null());
    assert!(last_error().contains("nosuchmodel"), "{}", last_error());

    let (s, _) = new_updater("[not json", "{}", 100, 1);
    assert_eq!(s, SmcStatus::InvalidArgument);

    let mut out = ptr::null_mut();
    let s = unsafe { smc_updater_new(ptr::null(), c("{}").as_ptr(), 100, 1, &mut out) };
    assert_eq!(s, SmcStatus::NullPointer);

    let (s, u) = new_updater(r#""precession""#, r#"{"kind": "uniform", "bounds": [[0, 1]]}"#, 100, 1);
    assert_eq!(s, SmcStatus::Ok);
    unsafe {
        let mut short = [0.0; 0];
        assert_eq!(smc_updater_est_mean(u, short.as_mut_ptr(), 0), SmcStatus::InvalidArgument);
        // outcome 0 at t = 0 has probability one; outcome 1 has zero evidence
        let e = c(r#"{"t": 0.0}"#);
        assert_eq!(smc_updater_update(u, 1, e.as_ptr()), SmcStatus::Numeric);
        let mut ess = 0.0;
        assert_eq!(smc_updater_ess(u, &mut ess), SmcStatus::Ok);
        assert_eq!(ess, 100.0, "failed update leaves the updater unchanged");
        assert!(smc_last_error_message().is_null(), "success clears the message");
        smc_updater_free(u);
        assert_eq!(smc_updater_ess(ptr::null(), &mut ess), SmcStatus::NullPointer);
    }
}

#[test]
fn simple_rb_matches_library() {
    let ms: Vec<f64> = (0..50).map(|i| 1.0 + 8.0 * i as f64).collect();
    let counts: Vec<u64> = ms.iter().map(|m| (25.0 * (0.5 * 0.97f64.powf(*m) + 0.5)).round() as u64).collect();
    let shots = vec![25u64; ms.len()];
    let (mut mean, mut cov) = ([0.0; 3], [0.0; 9]);
    let s = unsafe {
        smc_simple_est_rb(counts.as_ptr(), ms.as_ptr(), shots.as_ptr(), ms.len(), 3000, 0.8, 1.0, 4, mean.as_mut_ptr(), cov.as_mut_ptr())
    };
    assert_eq!(s, SmcStatus::Ok, "{}", last_error());
    let data = smcinfer::estimate::DataRecord::from_columns(&counts, &ms, &shots).unwrap();
    let lib = smcinfer::estimate::simple_est_rb(&data, 3000, 0.8, 1.0, 4).unwrap();
    assert_eq!(mean.to_vec(), lib.mean);
    assert_eq!(cov.to_vec(), lib.covariance.concat());

    let bad = unsafe {
        smc_simple_est_rb(counts.as_ptr(), ms.as_ptr(), shots.as_ptr(), ms.len(), 3000, 0.9, 0.8, 4, mean.as_mut_ptr(), cov.as_mut_ptr())
    };
    assert_eq!(bad, SmcStatus::Config);
    let over = vec![30u64; ms.len()];
    let bad = unsafe {
        smc_simple_est_rb(over.as_ptr(), ms.as_ptr(), shots.as_ptr(), ms.len(), 3000, 0.8, 1.0, 4, mean.as_mut_ptr(), cov.as_mut_ptr())
    };
    assert_eq!(bad, SmcStatus::Ingestion);
    assert!(last_error().contains("row 1"), "{}", last_error());
}

#[test]
fn simple_prec_writes_mean_and_variance() {
    let ts: Vec<f64> = (1..=20).map(|t| t as f64).collect();
    let counts: Vec<u64> = ts.iter().map(|t| (25.0 * (0.3 * t / 2.0).cos().powi(2)).round() as u64).collect();
    let shots = vec![25u64; ts.len()];
    let (mut mean, mut var) = (0.0, 0.0);
    let s = unsafe { smc_simple_est_prec(counts.as_ptr(), ts.as_ptr(), shots.as_ptr(), ts.len(), 2000, 0.0, 1.0, 1, &mut mean, &mut var) };
    assert_eq!(s, SmcStatus::Ok, "{}", last_error());
    assert!((mean - 0.3).abs() < 0.01 && var > 0.0, "{mean} {var}");
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/smcinfer.h")).unwrap();
    for name in [
        "SmcUpdater",
        "SMC_STATUS_OK = 0",
        "SMC_STATUS_CONVERGENCE = 5",
        "smc_updater_new",
        "smc_updater_update",
        "smc_updater_free",
        "smc_last_error_message",
        "smc_simple_est_rb",
    ] {
        assert!(h.contains(name), "header lacks {name}");
    }
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(smc_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
