use std::ffi::{c_char, CString};
use std::ptr;

use ape_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { ape_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|c| *c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn small_model(seed: u64) -> *mut ApeModel {
    let mut m = ptr::null_mut();
    let st = unsafe { ape_model_new(2, 2, 8, seed, 0.0, &mut m) };
    assert_eq!(st, ApeStatus::Ok, "{}", last_error());
    m
}

fn encode(model: *const ApeModel, text: &[u8], role: u32, prefix: *const ApeSegment) -> *mut ApeSegment {
    let mut s = ptr::null_mut();
    let st = unsafe { ape_encode_segment(model, text.as_ptr(), text.len(), role, prefix, &mut s) };
    assert_eq!(st, ApeStatus::Ok, "{}", last_error());
    s
}

fn decode(
    model: *const ApeModel,
    query: &[u8],
    prefix: *const ApeSegment,
    contexts: &[*const ApeSegment],
    mode: u32,
) -> Vec<u8> {
    let mut buf = [0u8; 6];
    let mut len = 0usize;
    let st = unsafe {
        ape_decode(
            model,
            query.as_ptr(),
            query.len(),
            prefix,
            contexts.as_ptr(),
            contexts.len(),
            mode,
            0.8,
            0.9,
            APE_SCALING_AGGREGATE,
            buf.len(),
            buf.as_mut_ptr(),
            &mut len,
        )
    };
    assert_eq!(st, ApeStatus::Ok, "{}", last_error());
    buf[..len].to_vec()
}

#[test]
fn encode_save_load_decode_roundtrip() {
    let model = small_model(7);
    let prefix = encode(model, b"\n\n", APE_ROLE_PREFIX, ptr::null());
    let a = encode(model, b"red apples", APE_ROLE_CONTEXT, prefix);
    let b = encode(model, b"blue sky", APE_ROLE_CONTEXT, prefix);

    let (mut len, mut off, mut id) = (0usize, 0usize, 0u64);
    assert_eq!(unsafe { ape_segment_info(a, &mut len, &mut off, &mut id) }, ApeStatus::Ok);
    assert_eq!((len, off), (10, 2));

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("a.apekv").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ape_segment_save(a, path.as_ptr()) }, ApeStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { ape_segment_load(model, path.as_ptr(), &mut loaded) }, ApeStatus::Ok);
    let mut id2 = 0u64;
    assert_eq!(unsafe { ape_segment_info(loaded, &mut len, &mut off, &mut id2) }, ApeStatus::Ok);
    assert_eq!(id, id2);

    let direct = decode(model, b"Q?", prefix, &[a, b], APE_MODE_APE);
    let via_file = decode(model, b"Q?", prefix, &[loaded, b], APE_MODE_APE);
    let permuted = decode(model, b"Q?", prefix, &[b, loaded], APE_MODE_APE);
    assert_eq!(direct.len(), 6);
    assert_eq!(direct, via_file);
    assert_eq!(direct, permuted);

    unsafe {
        ape_segment_free(loaded);
        ape_segment_free(a);
        ape_segment_free(b);
        ape_segment_free(prefix);
        ape_model_free(model);
    }
}

#[test]
fn loading_with_other_model_is_format_error() {
    let m1 = small_model(1);
    let m2 = small_model(2);
    let seg = encode(m1, b"hello", APE_ROLE_CONTEXT, ptr::null());
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("x.apekv").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ape_segment_save(seg, path.as_ptr()) }, ApeStatus::Ok);
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { ape_segment_load(m2, path.as_ptr(), &mut out) }, ApeStatus::Format);
    assert!(out.is_null());
    assert!(last_error().contains("model"));
    unsafe {
        ape_segment_free(seg);
        ape_model_free(m1);
        ape_model_free(m2);
    }
}

#[test]
fn missing_and_corrupt_files() {
    let model = small_model(3);
    let mut out = ptr::null_mut();
    let missing = CString::new("/nonexistent/nowhere.apekv").unwrap();
    assert_eq!(unsafe { ape_segment_load(model, missing.as_ptr(), &mut out) }, ApeStatus::NotFound);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.apekv");
    std::fs::write(&p, b"APEKV1 not really").unwrap();
    let path = CString::new(p.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ape_segment_load(model, path.as_ptr(), &mut out) }, ApeStatus::Format);
    unsafe { ape_model_free(model) };
}

#[test]
fn null_and_invalid_arguments() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { ape_model_new(2, 2, 7, 0, 0.0, &mut m) }, ApeStatus::InvalidArgument);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { ape_model_new(2, 2, 8, 0, 0.0, ptr::null_mut()) }, ApeStatus::NullPointer);

    let mut sum = 0u64;
    assert_eq!(unsafe { ape_model_checksum(ptr::null(), &mut sum) }, ApeStatus::NullPointer);

    let model = small_model(4);
    let mut seg = ptr::null_mut();
    assert_eq!(
        unsafe { ape_encode_segment(model, b"x".as_ptr(), 1, 9, ptr::null(), &mut seg) },
        ApeStatus::InvalidArgument
    );
    let ctx = encode(model, b"abc", APE_ROLE_CONTEXT, ptr::null());
    let ctxs = [ctx as *const ApeSegment];
    let mut buf = [0u8; 2];
    let mut len = 0usize;
    let st = unsafe {
        ape_decode(
            model,
            b"q".as_ptr(),
            1,
            ptr::null(),
            ctxs.as_ptr(),
            1,
            APE_MODE_APE,
            1.5,
            1.0,
            APE_SCALING_AGGREGATE,
            2,
            buf.as_mut_ptr(),
            &mut len,
        )
    };
    assert_eq!(st, ApeStatus::InvalidArgument);
    assert!(last_error().contains("temperature"));
    unsafe {
        ape_segment_free(ctx);
        ape_model_free(model);
        ape_model_free(ptr::null_mut());
        ape_segment_free(ptr::null_mut());
    }
}

#[test]
fn checksum_is_seed_dependent() {
    let (a, b, c) = (small_model(5), small_model(5), small_model(6));
    let (mut x, mut y, mut z) = (0u64, 0u64, 0u64);
    unsafe {
        ape_model_checksum(a, &mut x);
        ape_model_checksum(b, &mut y);
        ape_model_checksum(c, &mut z);
    }
    assert_eq!(x, y);
    assert_ne!(x, z);
    unsafe {
        ape_model_free(a);
        ape_model_free(b);
        ape_model_free(c);
    }
}

#[test]
fn numeric_helpers() {
    let vals = [1000.0f64, 1000.0];
    let mut lse = 0.0;
    assert_eq!(unsafe { ape_logsumexp(vals.as_ptr(), 2, &mut lse) }, ApeStatus::Ok);
    assert!((lse - (1000.0 + 2f64.ln())).abs() < 1e-12);
    assert_eq!(unsafe { ape_logsumexp(vals.as_ptr(), 0, &mut lse) }, ApeStatus::InvalidArgument);

    let (mut ape, mut prefix) = (0.0, 0.0);
    assert_eq!(unsafe { ape_cache_hit_rates(4, 3, 4, &mut ape, &mut prefix) }, ApeStatus::Ok);
    assert_eq!(ape, 1.0);
    assert!((prefix - 7.0 / 12.0).abs() < 1e-12);

    let mut bytes = 0u64;
    let st = unsafe {
        ape_permutation_cache_bytes(10, 256, 32, 8, 128, 2, APE_COUNT_ORDERED_PREDECESSORS, &mut bytes)
    };
    assert_eq!(st, ApeStatus::Ok);
    assert_eq!(bytes, 9_864_100 * 256 * 131_072);
    let st = unsafe {
        ape_permutation_cache_bytes(30, 256, 32, 8, 128, 2, APE_COUNT_ORDERED_PREDECESSORS, &mut bytes)
    };
    assert_eq!(st, ApeStatus::Numeric);
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/ape.h");
    for name in [
        "ape_last_error",
        "ape_model_new",
        "ape_model_free",
        "ape_model_checksum",
        "ape_encode_segment",
        "ape_segment_free",
        "ape_segment_info",
        "ape_segment_save",
        "ape_segment_load",
        "ape_decode",
        "ape_logsumexp",
        "ape_cache_hit_rates",
        "ape_permutation_cache_bytes",
        "APE_STATUS_PANIC",
        "typedef struct ApeModel ApeModel",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
