use mas_core::atlas::{self, Thresholds};
use mas_core::chatdata::{self, ChatExample, ASST_BEGIN, EOS, VOCAB_SIZE};
use mas_core::engine::{self, GenerateOptions, KVCache};
use mas_core::masking::{build_mask, MaskMode};
use mas_core::model::{self, ModelConfig, ModelWeights};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(seed: u64) -> ModelWeights {
    let cfg = ModelConfig::new(16, 2, 2, 32, VOCAB_SIZE, 128);
    ModelWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn chat(user: &str) -> ChatExample {
    ChatExample {
        system: "key lookup".into(),
        user: user.into(),
        answer: "B".into(),
        choices: None,
        task: "default".into(),
    }
}

#[test]
fn prefill_matches_the_full_forward() {
    let w = tiny(1);
    let seg = chatdata::render_chat(&chat("a=B c=A ?a"), false);
    for mode in [MaskMode::Causal, MaskMode::Mas] {
        let (_, logits) = engine::prefill(&seg, &w, mode).unwrap();
        let full = model::forward(&w, seg.token_ids(), &build_mask(&seg, mode), false).unwrap();
        let last = full.logits.row(seg.len() - 1);
        let diff = logits.iter().zip(last).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(diff < 1e-5, "{mode}: {diff}");
    }
}

#[test]
fn system_states_ignore_the_user_turn_under_mas() {
    let w = tiny(2);
    let a = chatdata::render_chat(&chat("a=B ?a"), false);
    let b = chatdata::render_chat(&chat("q=D r=C ?r"), false);
    let sys_len = a.segment_ids().iter().take_while(|&&s| s == 0).count();
    let (ca, _) = engine::prefill(&a, &w, MaskMode::Mas).unwrap();
    let (cb, _) = engine::prefill(&b, &w, MaskMode::Mas).unwrap();
    for l in 0..2 {
        for h in 0..2 {
            let (ka, kb) = (ca.keys(l, h), cb.keys(l, h));
            for i in 0..sys_len {
                assert_eq!(ka.row(i), kb.row(i));
            }
        }
    }
}

#[test]
fn stored_snapshots_resume_identically() {
    let w = tiny(3);
    let seg = chatdata::render_chat(&chat("x=C y=A ?y"), false);
    let sys_len = seg.segment_ids().iter().take_while(|&&s| s == 0).count();
    let system = seg.slice(0..sys_len).unwrap();
    let user = seg.slice(sys_len..seg.len()).unwrap();
    let snap = engine::snapshot_system_cache(&system, &w, MaskMode::Mas).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.kvc");
    snap.save(&path).unwrap();
    let loaded: KVCache = KVCache::load(&path).unwrap();
    assert_eq!(loaded.sequence(), snap.sequence());

    let opts = GenerateOptions {
        mode: MaskMode::Mas,
        max_new: 6,
        stop_token: Some(EOS),
    };
    let mut out = Vec::new();
    for s in [&snap, &loaded] {
        let (mut cache, _) = engine::resume_with_user(s, &w, &user).unwrap();
        let logits = engine::decode_step(&mut cache, &w, ASST_BEGIN).unwrap();
        out.push(engine::generate_from(&mut cache, &w, logits, &opts).unwrap());
    }
    assert_eq!(out[0], out[1]);
    assert_eq!(snap.cached_len(), sys_len);

    // The same prompt through the one-shot path.
    let mut forced = seg.clone();
    forced.push_generated(ASST_BEGIN);
    assert_eq!(engine::generate(&forced, &w, &opts).unwrap(), out[0]);
}

#[test]
fn causal_maps_never_classify_as_forward_looking() {
    let t = Thresholds::default();
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..3 {
        let w = tiny(seed);
        let seg = chatdata::render_chat(&chat("k=A m=D ?m"), true);
        let causal = atlas::run_atlas(&w, &seg, MaskMode::Causal, dir.path(), &t).unwrap();
        assert_eq!(causal.len(), 4);
        assert!(causal.iter().all(|r| r.above_diagonal == 0.0 && r.label != atlas::Pattern::ForwardLooking));

        let records = atlas::record_attention(&w, &seg, MaskMode::Mas).unwrap();
        let rows = atlas::summarize(&records, &t).unwrap();
        assert!(rows.iter().all(|r| r.above_diagonal > 0.0));
    }
}
