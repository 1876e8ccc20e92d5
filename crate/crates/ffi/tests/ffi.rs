use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use lipattn_ffi::*;

fn identity(kind: LipKind, d: usize, h: usize) -> *mut LipMhaParams {
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { lip_params_identity(kind, d, h, &mut p) }, LipStatus::Ok);
    assert!(!p.is_null());
    p
}

fn last_error() -> String {
    let msg = lip_last_error();
    assert!(!msg.is_null());
    unsafe { CStr::from_ptr(msg) }.to_string_lossy().into_owned()
}

#[test]
fn bound_matches_closed_form() {
    let p = identity(LipKind::L2, 1, 1);
    let mut b = LipBound::default();
    let mut phi3 = 0.0;
    unsafe {
        assert_eq!(lip_bound(p, 4, LipNorm::Inf, &mut b), LipStatus::Ok);
        assert_eq!(lip_phi_inv(3.0, &mut phi3), LipStatus::Ok);
        assert_eq!((b.n, b.d, b.h), (4, 1, 1));
        assert!((b.value - (4.0 * phi3 + 1.0)).abs() < 1e-12);
        assert_eq!(lip_bound(p, 4, LipNorm::Two, &mut b), LipStatus::Ok);
        lip_params_free(p);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let p = identity(LipKind::L2, 1, 1);
    let dp = identity(LipKind::DotProduct, 1, 1);
    let mut b = LipBound::default();
    let mut v = 0.0;
    unsafe {
        assert_eq!(lip_bound(p, 1, LipNorm::Inf, &mut b), LipStatus::Domain);
        assert!(last_error().contains("N >= 2"));
        assert_eq!(lip_bound(dp, 4, LipNorm::Inf, &mut b), LipStatus::Unsupported);
        assert_eq!(lip_bound(ptr::null(), 4, LipNorm::Inf, &mut b), LipStatus::NullPointer);
        assert_eq!(lip_bound(p, 4, LipNorm::Inf, ptr::null_mut()), LipStatus::NullPointer);
        assert_eq!(lip_phi(-1.0, &mut v), LipStatus::Domain);
        assert_eq!(lip_phi(1.0, &mut v), LipStatus::Ok);
        assert!(lip_last_error().is_null());
        let mut out = ptr::null_mut();
        assert_eq!(lip_params_identity(LipKind::L2, 3, 2, &mut out), LipStatus::Shape);
        assert!(out.is_null());
        let bad = CString::new("{not json").unwrap();
        assert_eq!(lip_params_from_json(bad.as_ptr(), &mut out), LipStatus::Parse);
        lip_params_free(p);
        lip_params_free(dp);
        lip_params_free(ptr::null_mut());
    }
}

#[test]
fn json_round_trip_and_forward() {
    let mut p = ptr::null_mut();
    let mut q = ptr::null_mut();
    let mut json = ptr::null_mut();
    let x: Vec<f64> = (0..12).map(|k| (k as f64 * 0.37).sin()).collect();
    let (mut y1, mut y2) = (vec![0.0; 12], vec![0.0; 12]);
    unsafe {
        assert_eq!(lip_params_random(LipKind::DotProduct, false, 4, 2, 9, &mut p), LipStatus::Ok);
        assert_eq!((lip_params_d_model(p), lip_params_num_heads(p)), (4, 2));
        assert_eq!(lip_params_to_json(p, &mut json), LipStatus::Ok);
        assert_eq!(lip_params_from_json(json, &mut q), LipStatus::Ok);
        assert_eq!(lip_mha_forward(p, x.as_ptr(), 3, y1.as_mut_ptr()), LipStatus::Ok);
        assert_eq!(lip_mha_forward(q, x.as_ptr(), 3, y2.as_mut_ptr()), LipStatus::Ok);
        let mut norm = 0.0;
        assert_eq!(lip_jacobian_norm(p, x.as_ptr(), 3, LipNorm::Two, &mut norm), LipStatus::Ok);
        assert!(norm > 0.0);
        lip_string_free(json);
        lip_params_free(p);
        lip_params_free(q);
    }
    assert_eq!(y1, y2);
}

#[test]
fn contractive_inversion_recovers_input() {
    let mut p = ptr::null_mut();
    let (n, d, c) = (5, 4, 0.7);
    let x: Vec<f64> = (0..n * d).map(|k| (k as f64 * 1.3).cos() * 3.0).collect();
    let mut fx = vec![0.0; n * d];
    let mut recovered = vec![0.0; n * d];
    let mut b = LipBound::default();
    let mut info = LipInversion::default();
    unsafe {
        assert_eq!(lip_params_random(LipKind::L2, true, d, 2, 4, &mut p), LipStatus::Ok);
        assert_eq!(lip_mha_forward(p, x.as_ptr(), n, fx.as_mut_ptr()), LipStatus::Ok);
        assert_eq!(lip_bound(p, n, LipNorm::Inf, &mut b), LipStatus::Ok);
        let y: Vec<f64> = x.iter().zip(&fx).map(|(a, f)| a + c * f / b.value).collect();
        assert_eq!(lip_contractive_invert(p, c, y.as_ptr(), n, 1e-14, 500, recovered.as_mut_ptr(), &mut info), LipStatus::Ok);
        assert!(info.converged && info.residual < 1e-12, "{info:?}");
        let err = x.iter().zip(&recovered).map(|(a, r)| (a - r).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "reconstruction error {err}");
        assert_eq!(
            lip_contractive_invert(p, 1.5, y.as_ptr(), n, 1e-14, 500, recovered.as_mut_ptr(), ptr::null_mut()),
            LipStatus::Domain
        );
        lip_params_free(p);
    }
}

fn target_dir() -> PathBuf {
    // target/<profile>/deps/<test binary>
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = crate_dir.join("include/lipattn.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["lip_params_identity", "lip_bound", "lip_contractive_invert", "LIP_STATUS_NULL_POINTER"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let lib = target_dir().join("liblipattn_ffi.a");
    assert!(lib.exists(), "static library not found at {}", lib.display());
    let exe = tempfile::tempdir().unwrap();
    let exe = exe.path().join("smoke");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(crate_dir.join("tests/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("a C compiler named cc");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
