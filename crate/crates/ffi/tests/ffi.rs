//! Round trips through the C interface, from Rust and from a C program.

use std::ffi::{c_char, CStr};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use poisson_inla::gmrf::GridGraph;
use poisson_inla::inla::{Inla, InlaConfig};
use poisson_inla::likelihood::CountField;
use poisson_inla_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    let n = unsafe { pinla_last_error(buf.as_mut_ptr(), buf.len()) };
    let s = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned();
    assert_eq!(n, s.len());
    s
}

fn counts_fixture() -> (Vec<u64>, *mut PinlaCounts) {
    let data: Vec<u64> = (0..36u64).map(|i| 3 + (i * 7) % 11).collect();
    let mut h = ptr::null_mut();
    let st = unsafe { pinla_counts_new(6, 6, data.as_ptr(), &mut h) };
    assert_eq!(st, PinlaStatus::Ok);
    assert!(!h.is_null());
    (data, h)
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(pinla_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn counts_round_trip() {
    let (data, h) = counts_fixture();
    assert_eq!(unsafe { pinla_counts_len(h) }, 36);
    let mut back = vec![0u64; 36];
    assert_eq!(unsafe { pinla_counts_copy(h, back.as_mut_ptr(), 36) }, PinlaStatus::Ok);
    assert_eq!(back, data);
    assert_eq!(unsafe { pinla_counts_copy(h, back.as_mut_ptr(), 35) }, PinlaStatus::Validation);
    assert!(last_error().contains("dimension"));
    unsafe { pinla_counts_free(h) };
    unsafe { pinla_counts_free(ptr::null_mut()) };
}

#[test]
fn null_pointers_are_reported() {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { pinla_counts_new(2, 2, ptr::null(), &mut h) }, PinlaStatus::NullPointer);
    assert!(last_error().contains("data"));
    assert!(h.is_null());
    let mut opts = std::mem::MaybeUninit::<PinlaInlaOptions>::uninit();
    assert_eq!(unsafe { pinla_inla_options_default(opts.as_mut_ptr()) }, PinlaStatus::Ok);
    assert_eq!(last_error(), "");
    let mut fit = ptr::null_mut();
    assert_eq!(
        unsafe { pinla_inla_run(ptr::null(), opts.as_ptr(), &mut fit) },
        PinlaStatus::NullPointer
    );
    assert_eq!(unsafe { pinla_fit_len(ptr::null()) }, 0);
    assert!(unsafe { pinla_chain_acceptance(ptr::null()) }.is_nan());
}

#[test]
fn validation_and_numerical_codes() {
    let data = [1u64; 4];
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { pinla_counts_new(0, 4, data.as_ptr(), &mut h) }, PinlaStatus::Validation);

    let px = [0.0, 1.0, 2.0];
    let mut x = [0.0; 3];
    let mut r = PinlaRange::default();
    let st = unsafe { pinla_intensity_forward(px.as_ptr(), 3, 5.0, 2.0, x.as_mut_ptr(), &mut r) };
    assert_eq!(st, PinlaStatus::Validation);

    let rates = [1.0, -1.0];
    let st = unsafe { pinla_counts_sample(rates.as_ptr(), 1, 2, 0, &mut h) };
    assert_eq!(st, PinlaStatus::Numerical);
    assert!(!last_error().is_empty());
}

#[test]
fn intensity_transform_round_trip() {
    let px = [0.0, 127.5, 255.0, 64.0];
    let mut x = [0.0; 4];
    let mut r = PinlaRange::default();
    let st = unsafe { pinla_intensity_forward(px.as_ptr(), 4, 2.0, 25.0, x.as_mut_ptr(), &mut r) };
    assert_eq!(st, PinlaStatus::Ok);
    assert_eq!((x[0], x[2]), (2.0, 25.0));
    assert!((x[1] - 13.5).abs() < 1e-12);
    let mut back = [0.0; 4];
    let st = unsafe { pinla_intensity_inverse(x.as_ptr(), 4, r, 2.0, 25.0, back.as_mut_ptr()) };
    assert_eq!(st, PinlaStatus::Ok);
    for (a, b) in back.iter().zip(px) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn sampling_is_seeded() {
    let rates = [4.0; 25];
    let draw = |seed| {
        let mut h = ptr::null_mut();
        assert_eq!(unsafe { pinla_counts_sample(rates.as_ptr(), 5, 5, seed, &mut h) }, PinlaStatus::Ok);
        let mut v = vec![0u64; 25];
        assert_eq!(unsafe { pinla_counts_copy(h, v.as_mut_ptr(), 25) }, PinlaStatus::Ok);
        unsafe { pinla_counts_free(h) };
        v
    };
    assert_eq!(draw(8), draw(8));
    assert_ne!(draw(8), draw(9));
}

#[test]
fn inla_matches_library() {
    let (data, h) = counts_fixture();
    let mut opts = std::mem::MaybeUninit::<PinlaInlaOptions>::uninit();
    unsafe { pinla_inla_options_default(opts.as_mut_ptr()) };
    let mut opts = unsafe { opts.assume_init() };
    opts.workers = 2;
    let mut fit = ptr::null_mut();
    assert_eq!(unsafe { pinla_inla_run(h, &opts, &mut fit) }, PinlaStatus::Ok);
    assert_eq!(unsafe { pinla_fit_len(fit) }, 36);
    assert_eq!(unsafe { pinla_fit_points(fit) }, 9);

    let field = CountField::new(6, 6, data).unwrap();
    let cfg = InlaConfig {
        workers: Some(2),
        ..InlaConfig::default()
    };
    let direct = Inla::new(GridGraph::new(6, 6).unwrap(), &field, cfg).unwrap().run().unwrap();

    let mut eap = vec![0.0; 36];
    let mut var = vec![0.0; 36];
    assert_eq!(unsafe { pinla_fit_eap(fit, eap.as_mut_ptr(), 36) }, PinlaStatus::Ok);
    assert_eq!(unsafe { pinla_fit_variance(fit, var.as_mut_ptr(), 36) }, PinlaStatus::Ok);
    assert_eq!(eap, direct.marginals.eap);
    assert_eq!(var, direct.marginals.variance);

    let mut mode = PinlaHyperMode::default();
    assert_eq!(unsafe { pinla_fit_mode(fit, &mut mode) }, PinlaStatus::Ok);
    assert_eq!(mode.sigma2, direct.mode.theta.sigma2());
    assert_eq!(mode.d, direct.mode.theta.d());

    let mut c = 0.0;
    assert_eq!(unsafe { pinla_fit_cdf(fit, 3, eap[3], &mut c) }, PinlaStatus::Ok);
    assert!(c > 0.3 && c < 0.7);
    assert_eq!(unsafe { pinla_fit_cdf(fit, 36, 0.0, &mut c) }, PinlaStatus::Validation);

    opts.f0 = 0.5;
    let mut bad = ptr::null_mut();
    assert_eq!(unsafe { pinla_inla_run(h, &opts, &mut bad) }, PinlaStatus::Validation);
    assert!(bad.is_null());
    unsafe {
        pinla_fit_free(fit);
        pinla_counts_free(h);
    }
}

#[test]
fn chain_runs_and_reports() {
    let (_, h) = counts_fixture();
    let mut opts = std::mem::MaybeUninit::<PinlaChainOptions>::uninit();
    assert_eq!(unsafe { pinla_chain_options_default(opts.as_mut_ptr()) }, PinlaStatus::Ok);
    let mut opts = unsafe { opts.assume_init() };
    opts.steps = 3000;
    opts.burn_in = 1000;
    opts.seed = 12;
    let run = |o: &PinlaChainOptions| {
        let mut c = ptr::null_mut();
        assert_eq!(unsafe { pinla_chain_run(h, o, &mut c) }, PinlaStatus::Ok);
        let mut m = vec![0.0; 36];
        let mut v = vec![0.0; 36];
        assert_eq!(unsafe { pinla_chain_mean(c, m.as_mut_ptr(), 36) }, PinlaStatus::Ok);
        assert_eq!(unsafe { pinla_chain_variance(c, v.as_mut_ptr(), 36) }, PinlaStatus::Ok);
        let acc = unsafe { pinla_chain_acceptance(c) };
        assert_eq!(unsafe { pinla_chain_len(c) }, 36);
        unsafe { pinla_chain_free(c) };
        (m, v, acc)
    };
    let (m1, v1, acc) = run(&opts);
    assert!(m1.iter().all(|x| *x > 0.0) && v1.iter().all(|x| *x > 0.0));
    assert!(acc > 0.2 && acc < 0.95, "acceptance {acc}");
    assert_eq!(run(&opts).0, m1);
    opts.sample_theta = true;
    let (m2, _, _) = run(&opts);
    assert!(m2.iter().all(|x| x.is_finite()));
    opts.burn_in = opts.steps;
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { pinla_chain_run(h, &opts, &mut c) }, PinlaStatus::Validation);
    unsafe { pinla_counts_free(h) };
}

#[test]
fn metrics_match_definitions() {
    let g = [0.0, 2.0];
    let h = [0.0, 0.0];
    let mut m = PinlaMetrics::default();
    assert_eq!(unsafe { pinla_metrics(g.as_ptr(), h.as_ptr(), 2, &mut m) }, PinlaStatus::Ok);
    assert_eq!(m.mse, 2.0);
    assert!((m.psnr - 3.010299956639812).abs() < 1e-12);
    assert_eq!(unsafe { pinla_metrics(g.as_ptr(), g.as_ptr(), 2, &mut m) }, PinlaStatus::Ok);
    assert_eq!((m.psnr, m.ssim), (f64::INFINITY, 1.0));
    let flat = [3.0, 3.0];
    assert_eq!(
        unsafe { pinla_metrics(flat.as_ptr(), flat.as_ptr(), 2, &mut m) },
        PinlaStatus::Validation
    );
}

const C_PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
#include "poisson_inla.h"

int main(void) {
    double rates[16];
    for (int i = 0; i < 16; i++) rates[i] = 3.0 + i;
    PinlaCounts *counts = NULL;
    if (pinla_counts_sample(rates, 4, 4, 7, &counts) != PINLA_STATUS_OK) return 1;
    PinlaInlaOptions opts;
    pinla_inla_options_default(&opts);
    opts.strategy = PINLA_STRATEGY_GRID;
    PinlaInlaFit *fit = NULL;
    if (pinla_inla_run(counts, &opts, &fit) != PINLA_STATUS_OK) return 2;
    double eap[16];
    if (pinla_fit_eap(fit, eap, 16) != PINLA_STATUS_OK) return 3;
    PinlaMetrics m;
    if (pinla_metrics(rates, eap, 16, &m) != PINLA_STATUS_OK) return 4;
    PinlaCounts *unused = NULL;
    if (pinla_counts_new(0, 0, NULL, &unused) != PINLA_STATUS_VALIDATION) return 5;
    char msg[128];
    if (pinla_last_error(msg, sizeof msg) == 0) return 6;
    printf("points=%zu psnr=%.3f\n", pinla_fit_points(fit), m.psnr);
    pinla_fit_free(fit);
    pinla_counts_free(counts);
    return isfinite(m.psnr) ? 0 : 7;
}
"#;

#[test]
fn header_compiles_and_links_from_c() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header_dir = manifest.join("include");
    assert!(header_dir.join("poisson_inla.h").exists());
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(|p| p.parent()).unwrap();
    let lib = profile_dir.join("libpoisson_inla_ffi.a");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".to_string());
    if !lib.exists() || Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("skipping C link check: static library or C compiler unavailable");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let bin = dir.path().join("main");
    let out = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&bin)
        .arg(&src)
        .arg("-I")
        .arg(&header_dir)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "exit {:?}: {}", run.status.code(), String::from_utf8_lossy(&run.stdout));
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("points="));
}
