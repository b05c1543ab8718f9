use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use fcp_ffi::*;

const SMALL: &str = "channels = 8\nheight = 8\nwidth = 8\ntokens = 3\nhidden = 4\ntrain_steps = 3\neval_episodes = 4\n";

fn last_error() -> String {
    let p = fcp_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn trained() -> *mut FcpModel {
    let cfg = CString::new(SMALL).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { fcp_model_train(cfg.as_ptr(), &mut m) }, FcpStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn save_load_evaluate_roundtrip() {
    let m = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.fcpc").to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(fcp_model_save(m, path.as_ptr()), FcpStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(fcp_model_load(path.as_ptr(), &mut back), FcpStatus::Ok);
        let (mut a, mut b) = (FcpEvalSummary::default(), FcpEvalSummary::default());
        assert_eq!(fcp_model_evaluate(m, 4, 1, &mut a), FcpStatus::Ok);
        assert_eq!(fcp_model_evaluate(back, 4, 1, &mut b), FcpStatus::Ok);
        assert_eq!(a.episodes, 4);
        assert_eq!((a.miou, a.attention_miou), (b.miou, b.attention_miou));
        assert!(a.attention_miou >= 0.0);
        let (mut n1, mut n2) = (0, 0);
        fcp_model_parameter_count(m, &mut n1);
        fcp_model_parameter_count(back, &mut n2);
        assert!(n1 > 0 && n1 == n2);
        fcp_model_free(back);
        fcp_model_free(m);
    }
}

#[test]
fn predict_on_raw_buffers() {
    let m = trained();
    let (mut c, mut h, mut w) = (0, 0, 0);
    unsafe {
        assert_eq!(fcp_model_input_shape(m, &mut c, &mut h, &mut w), FcpStatus::Ok);
    }
    assert_eq!((c, h, w), (8, 8, 8));
    let feat: Vec<f64> = (0..c * h * w).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
    let mask: Vec<f64> = (0..h * w).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
    let mut out = vec![-1.0; h * w];
    let status = unsafe {
        fcp_model_predict(
            m,
            feat.as_ptr(),
            feat.as_ptr(),
            mask.as_ptr(),
            feat.as_ptr(),
            feat.as_ptr(),
            out.as_mut_ptr(),
        )
    };
    assert_eq!(status, FcpStatus::Ok, "{}", last_error());
    assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));

    let bad: Vec<f64> = mask.iter().map(|v| v * 0.5).collect();
    let status = unsafe {
        fcp_model_predict(
            m,
            feat.as_ptr(),
            feat.as_ptr(),
            bad.as_ptr(),
            feat.as_ptr(),
            feat.as_ptr(),
            out.as_mut_ptr(),
        )
    };
    assert_eq!(status, FcpStatus::Contract);
    unsafe { fcp_model_free(m) };
}

#[test]
fn errors_map_to_status_codes() {
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(fcp_model_load(ptr::null(), &mut m), FcpStatus::NullPointer);
        assert!(last_error().contains("path"));
        let missing = CString::new("/nonexistent/model.fcpc").unwrap();
        assert_eq!(fcp_model_load(missing.as_ptr(), &mut m), FcpStatus::Io);
        let bad = CString::new("steps = 1").unwrap();
        assert_eq!(fcp_model_init(bad.as_ptr(), &mut m), FcpStatus::Config);
        assert!(last_error().contains("steps"));
        let not_utf8 = [0xffu8, 0xfe, 0];
        assert_eq!(fcp_model_init(not_utf8.as_ptr().cast(), &mut m), FcpStatus::InvalidUtf8);
        let mut n = 0;
        assert_eq!(fcp_model_parameter_count(ptr::null(), &mut n), FcpStatus::NullPointer);
        fcp_model_free(ptr::null_mut());

        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.fcpc");
        std::fs::write(&junk, b"nope").unwrap();
        let junk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(fcp_model_load(junk.as_ptr(), &mut m), FcpStatus::Format);

        let cfg = CString::new(SMALL).unwrap();
        assert_eq!(fcp_model_init(cfg.as_ptr(), &mut m), FcpStatus::Ok);
        assert!(fcp_last_error_message().is_null());
        fcp_model_free(m);
    }
    let v = unsafe { CStr::from_ptr(fcp_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api_and_compiles_as_c() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = std::fs::read_to_string(dir.join("fcp.h")).unwrap();
    for name in [
        "fcp_model_init",
        "fcp_model_train",
        "fcp_model_load",
        "fcp_model_save",
        "fcp_model_free",
        "fcp_model_evaluate",
        "fcp_model_predict",
        "fcp_last_error_message",
        "typedef struct FcpModel FcpModel",
        "FCP_STATUS_OK = 0",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"fcp.h\"\nint main(void) { FcpModel *m = NULL; FcpStatus s = fcp_model_init(NULL, &m);\n\
         fcp_model_free(m); return s == FCP_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    match Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&dir)
        .arg(&src)
        .output()
    {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(e) => eprintln!("no C compiler available ({e}); header compile step skipped"),
    }
}
