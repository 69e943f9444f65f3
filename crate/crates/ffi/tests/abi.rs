use std::ffi::CString;
use std::ptr;

use subband_shake::models::shallow_spec;
use subband_shake::shake::ShakeMode;
use subband_shake_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; sbs_last_error_length() + 1];
    assert_eq!(unsafe { sbs_last_error_message(buf.as_mut_ptr(), buf.len()) }, SBS_OK);
    let bytes: Vec<u8> = buf.iter().take_while(|&&c| c != 0).map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn new_model(kind: u32, mode: u32, seed: u64) -> *mut SbsModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { sbs_model_new(kind, mode, seed, &mut m) }, SBS_OK, "{}", last_error());
    assert!(!m.is_null());
    m
}

fn tone(secs: f64, sr: u32) -> Vec<f64> {
    let n = (secs * sr as f64) as usize;
    (0..n)
        .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / sr as f64).sin() + 0.01 * ((i * 7919) % 13) as f64)
        .collect()
}

#[test]
fn parameter_counts() {
    let shallow = shallow_spec(ShakeMode::Both).count_parameters();
    assert_eq!(shallow.stage("block"), Some(2 * 10_264));
    for (kind, want) in [(SBS_MODEL_SHALLOW, shallow.total), (SBS_MODEL_DEEP, 148_156)] {
        let m = new_model(kind, SBS_SHAKE_BOTH, 0);
        let mut n = 0usize;
        assert_eq!(unsafe { sbs_model_parameter_count(m, &mut n) }, SBS_OK);
        assert_eq!(n, want);
        unsafe { sbs_model_free(m) };
    }
}

#[test]
fn bad_codes_and_nulls() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { sbs_model_new(7, 0, 0, &mut m) }, SBS_ERR_PARAM);
    assert!(last_error().contains("model kind"));
    assert_eq!(unsafe { sbs_model_new(0, 9, 0, &mut m) }, SBS_ERR_PARAM);
    assert!(m.is_null());
    assert_eq!(unsafe { sbs_model_new(0, 0, 0, ptr::null_mut()) }, SBS_ERR_NULL);
    let mut n = 0usize;
    assert_eq!(unsafe { sbs_model_parameter_count(ptr::null_mut(), &mut n) }, SBS_ERR_NULL);
    unsafe { sbs_model_free(ptr::null_mut()) };
}

#[test]
fn error_message_truncates() {
    let mut m = ptr::null_mut();
    unsafe { sbs_model_new(0, 42, 0, &mut m) };
    let full = last_error();
    let mut buf = [0 as std::ffi::c_char; 5];
    assert_eq!(unsafe { sbs_last_error_message(buf.as_mut_ptr(), 5) }, SBS_OK);
    assert_eq!(buf[4], 0);
    let got: String = buf[..4].iter().map(|&c| c as u8 as char).collect();
    assert_eq!(got, full[..4]);
}

#[test]
fn features_then_logits() {
    let sr = 16_000;
    let wave = tone(1.0, sr);
    let mut frames = 0usize;
    assert_eq!(unsafe { sbs_feature_frame_count(wave.len(), sr, &mut frames) }, SBS_OK);
    assert_eq!(frames, 13);
    let mut feats = vec![0.0; frames * SBS_FRAME_VALUES];
    let mut got = 0usize;
    let rc = unsafe { sbs_extract_features(wave.as_ptr(), wave.len(), sr, feats.as_mut_ptr(), feats.len(), &mut got) };
    assert_eq!(rc, SBS_OK, "{}", last_error());
    assert_eq!(got, frames);

    let short = vec![0.0; 10];
    assert_eq!(unsafe { sbs_feature_frame_count(short.len(), sr, &mut frames) }, SBS_ERR_PARAM);

    // Two utterances: the whole sequence and its first five frames.
    let mut batch = feats.clone();
    batch.extend_from_slice(&feats[..5 * SBS_FRAME_VALUES]);
    let counts = [13usize, 5];
    let m = new_model(SBS_MODEL_SHALLOW, SBS_SHAKE_BOTH, 3);
    let mut logits = [0.0; 8];
    let rc = unsafe {
        sbs_model_logits(m, batch.as_ptr(), batch.len(), counts.as_ptr(), 2, logits.as_mut_ptr(), logits.len())
    };
    assert_eq!(rc, SBS_OK, "{}", last_error());
    assert!(logits.iter().all(|v| v.is_finite()));

    let mut small = [0.0; 4];
    let rc = unsafe {
        sbs_model_logits(m, batch.as_ptr(), batch.len(), counts.as_ptr(), 2, small.as_mut_ptr(), small.len())
    };
    assert_eq!(rc, SBS_ERR_SHAPE);
    let rc = unsafe {
        sbs_model_logits(m, batch.as_ptr(), batch.len() - 1, counts.as_ptr(), 2, logits.as_mut_ptr(), logits.len())
    };
    assert_eq!(rc, SBS_ERR_SHAPE);

    // Checkpoint round trip into a differently seeded model.
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { sbs_model_save(m, path.as_ptr()) }, SBS_OK);
    let other = new_model(SBS_MODEL_SHALLOW, SBS_SHAKE_BOTH, 99);
    assert_eq!(unsafe { sbs_model_load(other, path.as_ptr()) }, SBS_OK, "{}", last_error());
    let mut again = [0.0; 8];
    let rc = unsafe {
        sbs_model_logits(other, batch.as_ptr(), batch.len(), counts.as_ptr(), 2, again.as_mut_ptr(), again.len())
    };
    assert_eq!(rc, SBS_OK);
    assert_eq!(logits.map(f64::to_bits), again.map(f64::to_bits));

    let deep = new_model(SBS_MODEL_DEEP, SBS_SHAKE_NONE, 0);
    assert_ne!(unsafe { sbs_model_load(deep, path.as_ptr()) }, SBS_OK);
    let missing = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { sbs_model_load(other, missing.as_ptr()) }, SBS_ERR_IO);
    unsafe {
        sbs_model_free(m);
        sbs_model_free(other);
        sbs_model_free(deep);
    }
}

#[test]
fn simplex_draws() {
    let mut a = [0.0; 3];
    let mut b = [0.0; 3];
    assert_eq!(unsafe { sbs_sample_simplex(3, 11, a.as_mut_ptr()) }, SBS_OK);
    assert_eq!(unsafe { sbs_sample_simplex(3, 11, b.as_mut_ptr()) }, SBS_OK);
    assert_eq!(a, b);
    assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(a.iter().all(|&v| v > 0.0));
    assert_eq!(unsafe { sbs_sample_simplex(0, 11, a.as_mut_ptr()) }, SBS_ERR_PARAM);
}

#[test]
fn t_test_and_ua() {
    let a = [3.0, 4.0, 5.0, 6.5];
    let b = [2.0, 3.5, 4.0, 5.0];
    let (mut t, mut df, mut p) = (0.0, 0usize, 0.0);
    assert_eq!(unsafe { sbs_paired_t_test(a.as_ptr(), b.as_ptr(), 4, &mut t, &mut df, &mut p) }, SBS_OK);
    assert_eq!(df, 3);
    assert!(t > 0.0 && p < 0.05);
    assert_eq!(
        unsafe { sbs_paired_t_test(a.as_ptr(), a.as_ptr(), 4, &mut t, &mut df, &mut p) },
        SBS_ERR_DEGENERATE
    );

    let preds = [0u32, 0, 1, 0];
    let truth = [0u32, 0, 1, 1];
    let mut ua = 0.0;
    assert_eq!(unsafe { sbs_unweighted_accuracy(preds.as_ptr(), truth.as_ptr(), 4, &mut ua) }, SBS_OK);
    assert!((ua - 75.0).abs() < 1e-12);
}
