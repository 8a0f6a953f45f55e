use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use mas_core::engine;
use mas_core::masking::{MaskMode, Role, SegmentedTokens};
use mas_core::model::{ModelConfig, ModelWeights};
use mas_ffi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn saved_model(dir: &Path) -> (PathBuf, ModelWeights) {
    let cfg = ModelConfig::new(16, 2, 2, 32, 23, 64);
    let w = ModelWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let path = dir.join("m.masw");
    w.save(&path).unwrap();
    (path, w)
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(mas_last_error()) }.to_str().unwrap().to_string()
}

fn load(path: &Path) -> *mut MasModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { mas_model_load(cstr(path).as_ptr(), &mut m) }, MasStatus::Ok);
    m
}

#[test]
fn prefill_and_decode_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, w) = saved_model(dir.path());
    let m = load(&path);
    assert_eq!(unsafe { mas_model_vocab_size(m) }, 23);

    let tokens = [1u32, 2, 3, 4, 5, 6];
    let segs = [0i32, 0, 1, 1, 1, 2];
    let mut logits = vec![0f32; 23];
    let mut cache = ptr::null_mut();
    let st = unsafe { mas_prefill(m, tokens.as_ptr(), segs.as_ptr(), 6, MasMode::Segment, logits.as_mut_ptr(), 23, &mut cache) };
    assert_eq!(st, MasStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { mas_cache_len(cache) }, 6);

    let roles = vec![Role::System, Role::System, Role::User, Role::User, Role::User, Role::User];
    let seg = SegmentedTokens::new(tokens.to_vec(), segs.to_vec(), roles).unwrap();
    let (mut lib_cache, lib_logits) = engine::prefill(&seg, &w, MaskMode::Mas).unwrap();
    assert_eq!(logits, lib_logits);

    assert_eq!(unsafe { mas_decode_step(cache, m, 7, logits.as_mut_ptr(), 23) }, MasStatus::Ok);
    assert_eq!(logits, engine::decode_step(&mut lib_cache, &w, 7).unwrap());
    assert_eq!(unsafe { mas_cache_len(cache) }, 7);

    unsafe {
        mas_cache_free(cache);
        mas_model_free(m);
    }
}

#[test]
fn snapshot_resume_matches_prefill() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved_model(dir.path());
    let m = load(&path);
    let system = [1u32, 2, 3];
    let user = [4u32, 5];
    let mut snap = ptr::null_mut();
    assert_eq!(unsafe { mas_snapshot_system(m, system.as_ptr(), 3, MasMode::Segment, &mut snap) }, MasStatus::Ok);

    let side = dir.path().join("snap.kvc");
    assert_eq!(unsafe { mas_cache_save(snap, cstr(&side).as_ptr()) }, MasStatus::Ok);
    let mut reloaded = ptr::null_mut();
    assert_eq!(unsafe { mas_cache_load(cstr(&side).as_ptr(), &mut reloaded) }, MasStatus::Ok);

    let mut a = vec![0f32; 23];
    let mut b = vec![0f32; 23];
    let (mut c1, mut c2) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(mas_resume_with_user(snap, m, user.as_ptr(), 2, 1, a.as_mut_ptr(), 23, &mut c1), MasStatus::Ok);
        assert_eq!(mas_resume_with_user(reloaded, m, user.as_ptr(), 2, 1, b.as_mut_ptr(), 23, &mut c2), MasStatus::Ok);
    }
    assert_eq!(a, b);

    let mut full = vec![0f32; 23];
    let mut c3 = ptr::null_mut();
    let tokens = [1u32, 2, 3, 4, 5];
    let segs = [0, 0, 0, 1, 1];
    unsafe { mas_prefill(m, tokens.as_ptr(), segs.as_ptr(), 5, MasMode::Segment, full.as_mut_ptr(), 23, &mut c3) };
    let diff = a.iter().zip(&full).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
    assert!(diff < 1e-5, "{diff}");
    assert_eq!(unsafe { mas_cache_len(snap) }, 3);

    unsafe {
        for c in [snap, reloaded, c1, c2, c3] {
            mas_cache_free(c);
        }
        mas_model_free(m);
    }
}

#[test]
fn mask_handles() {
    let segs = [0i32, 0, 1, -1];
    let mut mask = ptr::null_mut();
    assert_eq!(unsafe { mas_mask_build(segs.as_ptr(), 4, MasMode::Segment, &mut mask) }, MasStatus::Ok);
    let allowed = |i, j| unsafe { mas_mask_allowed(mask, i, j) };
    assert_eq!(unsafe { mas_mask_size(mask) }, 4);
    assert_eq!(allowed(0, 1), 1);
    assert_eq!(allowed(1, 2), 0);
    assert_eq!(allowed(3, 3), 1);
    assert_eq!(allowed(4, 0), -1);
    unsafe { mas_mask_free(mask) };

    let mut causal = ptr::null_mut();
    assert_eq!(unsafe { mas_mask_build(segs.as_ptr(), 4, MasMode::Causal, &mut causal) }, MasStatus::Ok);
    assert_eq!(unsafe { mas_mask_allowed(causal, 0, 1) }, 0);
    unsafe { mas_mask_free(causal) };
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { mas_model_load(ptr::null(), &mut m) }, MasStatus::NullPointer);
    assert!(last_error().contains("path"));
    assert!(m.is_null());

    let missing = CString::new("/nonexistent/m.masw").unwrap();
    assert_eq!(unsafe { mas_model_load(missing.as_ptr(), &mut m) }, MasStatus::Io);
    assert!(last_error().starts_with("E_IO"));

    let bad = [0i32, 1, 0];
    let mut mask = ptr::null_mut();
    assert_eq!(unsafe { mas_mask_build(bad.as_ptr(), 3, MasMode::Segment, &mut mask) }, MasStatus::Segments);
    assert!(mask.is_null());

    let name = unsafe { CStr::from_ptr(mas_status_name(MasStatus::Segments)) };
    assert_eq!(name.to_str().unwrap(), "E_SEGMENTS");

    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved_model(dir.path());
    let model = load(&path);
    let (tokens, segs) = ([1u32, 2], [0i32, 0]);
    let mut small = vec![0f32; 4];
    let mut cache = ptr::null_mut();
    let st = unsafe { mas_prefill(model, tokens.as_ptr(), segs.as_ptr(), 2, MasMode::Causal, small.as_mut_ptr(), 4, &mut cache) };
    assert_eq!(st, MasStatus::BufferTooSmall);
    assert!(cache.is_null());

    let (bad_tok, seg1) = ([99u32], [0i32]);
    let st = unsafe { mas_prefill(model, bad_tok.as_ptr(), seg1.as_ptr(), 1, MasMode::Causal, ptr::null_mut(), 0, &mut cache) };
    assert_eq!(st, MasStatus::Invalid);

    assert_eq!(unsafe { mas_decode_step(ptr::null_mut(), model, 1, ptr::null_mut(), 0) }, MasStatus::NullPointer);
    unsafe { mas_model_free(model) };
    assert_eq!(unsafe { mas_cache_len(ptr::null()) }, 0);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/mas.h")).unwrap();
    for f in [
        "mas_last_error",
        "mas_status_name",
        "mas_model_load",
        "mas_model_free",
        "mas_model_vocab_size",
        "mas_mask_build",
        "mas_mask_size",
        "mas_mask_allowed",
        "mas_mask_free",
        "mas_prefill",
        "mas_decode_step",
        "mas_snapshot_system",
        "mas_resume_with_user",
        "mas_cache_len",
        "mas_cache_save",
        "mas_cache_load",
        "mas_cache_free",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from mas.h");
    }
    assert!(header.contains("MAS_STATUS_SEGMENTS = 15"));
}
