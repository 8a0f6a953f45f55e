//! Two-phase inference. A prompt is prefilled in one pass under the chosen
//! mask, leaving post-rotary keys and values for every position in a
//! [`KVCache`]; generated tokens are then decoded one at a time with causal
//! rows against the cache. A system prompt can be prefilled once and resumed
//! with different user prompts.
//!
//! This path runs on eager kernels and is checked against the full-sequence
//! graph forward in `model`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::masking::{build_mask, decode_mask_row, MaskMode, Role, SegmentedTokens, SENTINEL};
use crate::model::{argmax, check_tokens, LayerWeights, ModelConfig, ModelWeights, NormKind};
use crate::numerics::{kernels, weights_file, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
struct LayerCache<T> {
    /// Per head, `len × head_dim`, row-major; keys are stored rotated.
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KVCache<T = f32> {
    config: ModelConfig,
    mode: MaskMode,
    layers: Vec<LayerCache<T>>,
    seq: SegmentedTokens,
}

impl<T: Real> KVCache<T> {
    pub fn new(config: &ModelConfig, mode: MaskMode) -> Self {
        let layer = LayerCache {
            keys: vec![Vec::new(); config.n_heads],
            values: vec![Vec::new(); config.n_heads],
        };
        Self {
            config: config.clone(),
            mode,
            layers: vec![layer; config.n_layers],
            seq: SegmentedTokens::empty(),
        }
    }

    pub fn cached_len(&self) -> usize {
        self.seq.len()
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Tokens and segment annotations of the cached prefix.
    pub fn sequence(&self) -> &SegmentedTokens {
        &self.seq
    }

    /// Number of cached rows held by `layer` (identical across layers).
    pub fn layer_len(&self, layer: usize) -> usize {
        self.layers[layer].keys[0].len() / self.config.head_dim()
    }

    /// Cached rotated keys of one layer/head as `len × head_dim`.
    pub fn keys(&self, layer: usize, head: usize) -> Tensor<T> {
        let dh = self.config.head_dim();
        let data = self.layers[layer].keys[head].clone();
        Tensor::new(vec![data.len() / dh, dh], data).expect("cache rows")
    }

    pub fn values(&self, layer: usize, head: usize) -> Tensor<T> {
        let dh = self.config.head_dim();
        let data = self.layers[layer].values[head].clone();
        Tensor::new(vec![data.len() / dh, dh], data).expect("cache rows")
    }

    fn check_weights(&self, weights: &ModelWeights<T>) -> Result<()> {
        if weights.config != self.config {
            return Err(Error::State("cache was built for a different model configuration".into()));
        }
        Ok(())
    }

    /// Runs `new` through every layer against the cached prefix, appending its
    /// keys and values. `mask_rows` is `new.len() × (cached + new)`. Returns
    /// logits for every new row.
    fn extend(&mut self, weights: &ModelWeights<T>, new: &SegmentedTokens, mask_rows: &[bool]) -> Result<Tensor<T>> {
        self.check_weights(weights)?;
        let cfg = &self.config;
        let m = new.len();
        let start = self.cached_len();
        let total = start + m;
        if m == 0 {
            return Err(Error::Invalid("nothing to process".into()));
        }
        if total > cfg.max_seq {
            return Err(Error::Invalid(format!("sequence of {total} tokens exceeds max_seq {}", cfg.max_seq)));
        }
        check_tokens(cfg, new.token_ids())?;
        if mask_rows.len() != m * total {
            return Err(shape_err!("mask of {} cells for {m}x{total}", mask_rows.len()));
        }
        let ids: Vec<usize> = new.token_ids().iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (start..total).collect();
        let mut x = kernels::gather_rows(&weights.embed, &ids)?;
        for (layer, lw) in weights.layers.iter().enumerate() {
            x = cached_block(cfg, lw, &mut self.layers[layer], &x, &positions, mask_rows)?;
        }
        let h = normalize(cfg, &x, &weights.final_gamma, &weights.final_beta)?;
        let logits = match &weights.unembed {
            Some(u) => kernels::matmul(&h, u)?,
            None => kernels::matmul_nt(&h, &weights.embed)?,
        };
        logits.ensure_finite("logits")?;
        self.seq = self.seq.concat(new)?;
        Ok(logits)
    }

    /// Appends prompt tokens forming new segment(s): a user turn after a
    /// system snapshot, or any later turn. Under segment masking the new
    /// segments must not continue a cached one, since cached rows cannot be
    /// revised. Returns next-token logits.
    pub fn extend_prompt(&mut self, weights: &ModelWeights<T>, seg: &SegmentedTokens) -> Result<Vec<T>> {
        if seg.is_empty() {
            return Err(Error::Invalid("empty prompt segment".into()));
        }
        if seg.has_sentinel() {
            return Err(Error::Segments("prompt extension contains generated tokens".into()));
        }
        if self.mode == MaskMode::Mas {
            if let Some(&last) = self.seq.segment_ids().last() {
                if last != SENTINEL && seg.segment_ids()[0] == last {
                    return Err(Error::Segments(format!("segment id {last} collides with the cached prefix")));
                }
            }
        }
        let combined = self.seq.concat(seg)?;
        let mask = build_mask(&combined, self.mode);
        let rows = mask.tail_rows(self.cached_len()).to_vec();
        let logits = self.extend(weights, seg, &rows)?;
        Ok(logits.row(logits.rows() - 1).to_vec())
    }
}

fn normalize<T: Real>(cfg: &ModelConfig, x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    let eps = T::from_f64(cfg.ln_eps);
    Ok(match cfg.norm {
        NormKind::LayerNorm => kernels::layer_norm(x, gamma, beta, eps)?.0,
        NormKind::RmsNorm => kernels::rms_norm(x, gamma, eps)?.0,
    })
}

fn cached_block<T: Real>(
    cfg: &ModelConfig,
    lw: &LayerWeights<T>,
    cache: &mut LayerCache<T>,
    x: &Tensor<T>,
    positions: &[usize],
    mask_rows: &[bool],
) -> Result<Tensor<T>> {
    let dh = cfg.head_dim();
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let h = normalize(cfg, x, &lw.ln1_gamma, &lw.ln1_beta)?;
    let q = kernels::matmul(&h, &lw.wq)?;
    let k = kernels::matmul(&h, &lw.wk)?;
    let v = kernels::matmul(&h, &lw.wv)?;
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let qh = kernels::rope(&q.slice_cols(head * dh, dh)?, positions, cfg.rope_theta, false)?;
        let kh = kernels::rope(&k.slice_cols(head * dh, dh)?, positions, cfg.rope_theta, false)?;
        let vh = v.slice_cols(head * dh, dh)?;
        cache.keys[head].extend_from_slice(kh.data());
        cache.values[head].extend_from_slice(vh.data());
        let len = cache.keys[head].len() / dh;
        let keys = Tensor::new(vec![len, dh], cache.keys[head].clone())?;
        let values = Tensor::new(vec![len, dh], cache.values[head].clone())?;
        let scores = kernels::scale(&kernels::matmul_nt(&qh, &keys)?, scale);
        let att = kernels::masked_softmax(&scores, mask_rows)?;
        heads.push(kernels::matmul(&att, &values)?);
    }
    let refs: Vec<&Tensor<T>> = heads.iter().collect();
    let attn = kernels::matmul(&kernels::concat_cols(&refs)?, &lw.wo)?;
    let x_attn = kernels::add(x, &attn)?;
    let h = normalize(cfg, &x_attn, &lw.ln2_gamma, &lw.ln2_beta)?;
    let up = kernels::silu(&kernels::matmul(&h, &lw.w_up)?);
    let gate = kernels::matmul(&h, &lw.w_gate)?;
    let mlp = kernels::matmul(&kernels::mul(&up, &gate)?, &lw.w_down)?;
    kernels::add(&x_attn, &mlp)
}

/// Processes a whole prompt at once. Returns the cache and next-token logits.
pub fn prefill<T: Real>(seg: &SegmentedTokens, weights: &ModelWeights<T>, mode: MaskMode) -> Result<(KVCache<T>, Vec<T>)> {
    if seg.is_empty() {
        return Err(Error::Invalid("empty prompt".into()));
    }
    if seg.has_sentinel() {
        return Err(Error::Segments("prefill input contains generated tokens".into()));
    }
    let mut cache = KVCache::new(&weights.config, mode);
    let logits = cache.extend_prompt(weights, seg)?;
    Ok((cache, logits))
}

/// Feeds one generated token; it attends to every cached position and itself.
pub fn decode_step<T: Real>(cache: &mut KVCache<T>, weights: &ModelWeights<T>, token: u32) -> Result<Vec<T>> {
    let mut one = SegmentedTokens::empty();
    one.push_generated(token);
    let row = decode_mask_row(cache.cached_len());
    let logits = cache.extend(weights, &one, &row)?;
    Ok(logits.row(0).to_vec())
}

/// Prefills a system prompt (a single segment) for reuse across sessions.
pub fn snapshot_system_cache<T: Real>(system: &SegmentedTokens, weights: &ModelWeights<T>, mode: MaskMode) -> Result<KVCache<T>> {
    if system.is_empty() {
        return Err(Error::Invalid("empty system prompt".into()));
    }
    if system.prompt_segments() != [0] || system.has_sentinel() {
        return Err(Error::Segments("system snapshot must be exactly segment 0".into()));
    }
    Ok(prefill(system, weights, mode)?.0)
}

/// Continues a shared snapshot with one user segment; the snapshot itself is
/// left untouched.
pub fn resume_with_user<T: Real>(
    snapshot: &KVCache<T>,
    weights: &ModelWeights<T>,
    user: &SegmentedTokens,
) -> Result<(KVCache<T>, Vec<T>)> {
    let segs = user.prompt_segments();
    if segs.len() != 1 || user.has_sentinel() {
        return Err(Error::Segments("user prompt must be a single segment".into()));
    }
    if snapshot.sequence().prompt_segments().contains(&segs[0]) {
        return Err(Error::Segments(format!("user segment id {} collides with the snapshot", segs[0])));
    }
    let mut cache = snapshot.clone();
    let logits = cache.extend_prompt(weights, user)?;
    Ok((cache, logits))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenerateOptions {
    pub mode: MaskMode,
    pub max_new: usize,
    pub stop_token: Option<u32>,
}

/// Greedy decoding. `seq` is a prompt optionally followed by forced generated
/// tokens (e.g. an assistant-start marker); those are fed before sampling.
/// The stop token ends generation and is not returned.
pub fn generate<T: Real>(seq: &SegmentedTokens, weights: &ModelWeights<T>, opts: &GenerateOptions) -> Result<Vec<u32>> {
    let split = seq.prefill_len();
    let (mut cache, logits) = prefill(&seq.truncated(split), weights, opts.mode)?;
    let mut logits = logits;
    for &t in &seq.token_ids()[split..] {
        logits = decode_step(&mut cache, weights, t)?;
    }
    generate_from(&mut cache, weights, logits, opts)
}

/// Greedy continuation from an existing cache and its latest logits.
pub fn generate_from<T: Real>(
    cache: &mut KVCache<T>,
    weights: &ModelWeights<T>,
    mut logits: Vec<T>,
    opts: &GenerateOptions,
) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    while out.len() < opts.max_new {
        let next = argmax(&logits) as u32;
        if Some(next) == opts.stop_token {
            break;
        }
        out.push(next);
        if out.len() == opts.max_new || cache.cached_len() >= weights.config.max_seq {
            break;
        }
        logits = decode_step(cache, weights, next)?;
    }
    Ok(out)
}

/// Hex digest naming a stored snapshot.
pub fn snapshot_key(weights_digest: &str, tokens: &[u32], mode: MaskMode) -> String {
    let mut h = Sha256::new();
    h.update(weights_digest.as_bytes());
    h.update(mode.as_str().as_bytes());
    for t in tokens {
        h.update(t.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    config: ModelConfig,
    mode: MaskMode,
    token_ids: Vec<u32>,
    segment_ids: Vec<i32>,
    roles: Vec<Role>,
}

impl<T: Real> KVCache<T> {
    /// MASW1 container of `cache.{layer}.{head}.{k|v}` plus a JSON sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: Vec<(String, Tensor<T>)> = (0..self.config.n_layers)
            .flat_map(|l| {
                (0..self.config.n_heads).flat_map(move |h| {
                    [(format!("cache.{l}.{h}.k"), self.keys(l, h)), (format!("cache.{l}.{h}.v"), self.values(l, h))]
                })
            })
            .collect();
        let refs: Vec<(String, &Tensor<T>)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        weights_file::write(path, &refs)?;
        let meta = CacheMeta {
            config: self.config.clone(),
            mode: self.mode,
            token_ids: self.seq.token_ids().to_vec(),
            segment_ids: self.seq.segment_ids().to_vec(),
            roles: self.seq.roles().to_vec(),
        };
        let side = path.with_extension("json");
        std::fs::write(&side, serde_json::to_string(&meta)?).map_err(|e| Error::io(side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = path.with_extension("json");
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: CacheMeta = serde_json::from_str(&text)?;
        let mut cache = KVCache::new(&meta.config, meta.mode);
        let seq = SegmentedTokens::new(meta.token_ids, meta.segment_ids, meta.roles)?;
        let mut tensors: std::collections::HashMap<String, Tensor<T>> = weights_file::read(path)?.into_iter().collect();
        let dh = meta.config.head_dim();
        for (l, layer) in cache.layers.iter_mut().enumerate() {
            for h in 0..meta.config.n_heads {
                for (kind, slot) in [("k", &mut layer.keys[h]), ("v", &mut layer.values[h])] {
                    let t = tensors
                        .remove(&format!("cache.{l}.{h}.{kind}"))
                        .ok_or_else(|| Error::Format(format!("missing cache.{l}.{h}.{kind}")))?;
                    if t.shape() != [seq.len(), dh] {
                        return Err(Error::Format(format!("cache.{l}.{h}.{kind}: shape {:?}", t.shape())));
                    }
                    *slot = t.into_data();
                }
            }
        }
        cache.seq = seq;
        Ok(cache)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::forward;
    use crate::numerics::{op_counts, reset_op_counts};

    fn model<T: Real>(seed: u64, d: usize, layers: usize) -> ModelWeights<T> {
        let cfg = ModelConfig::new(d, 2, layers, 2 * d, 17, 64);
        let mut w = ModelWeights::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for t in w.tensors_mut() {
            if t.rank() == 2 {
                *t = t.map(|v| v * 15.0);
            }
        }
        w.cast()
    }

    fn prompt(ids: &[i32], rng: &mut ChaCha8Rng) -> SegmentedTokens {
        let mut s = SegmentedTokens::from_layout(ids).unwrap();
        let toks: Vec<u32> = (0..ids.len()).map(|_| rng.gen_range(0..17)).collect();
        s = SegmentedTokens::new(toks, s.segment_ids().to_vec(), s.roles().to_vec()).unwrap();
        s
    }

    fn max_diff<T: Real>(a: &[T], b: &[T]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x.to_f64() - y.to_f64()).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn prefill_matches_full_forward() {
        let w = model::<f32>(1, 16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seg = prompt(&[0, 0, 0, 1, 1, 1, 1], &mut rng);
        for mode in [MaskMode::Causal, MaskMode::Mas] {
            let (cache, logits) = prefill(&seg, &w, mode).unwrap();
            for l in 0..2 {
                assert_eq!(cache.layer_len(l), 7);
            }
            let full = forward(&w, seg.token_ids(), &build_mask(&seg, mode), false).unwrap();
            assert!(max_diff(&logits, full.logits.row(6)) < 1e-5);
        }
    }

    #[test]
    fn decode_matches_full_forward() {
        let w = model::<f64>(3, 16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seg = prompt(&[0, 0, 1, 1, 1], &mut rng);
        let (mut cache, _) = prefill(&seg, &w, MaskMode::Mas).unwrap();
        let mut full = seg.clone();
        for k in 0..6 {
            let t = rng.gen_range(0..17);
            let logits = decode_step(&mut cache, &w, t).unwrap();
            full.push_generated(t);
            assert_eq!(cache.cached_len(), 5 + k + 1);
            let oracle = forward(&w, full.token_ids(), &build_mask(&full, MaskMode::Mas), false).unwrap();
            assert!(max_diff(&logits, oracle.logits.row(full.len() - 1)) < 1e-10);
        }
    }

    #[test]
    fn snapshot_resume_matches_prefill() {
        let w = model::<f32>(5, 16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let system = prompt(&[0; 6], &mut rng);
        let snap = snapshot_system_cache(&system, &w, MaskMode::Mas).unwrap();
        for ulen in [1, 4] {
            let user = prompt(&vec![1; ulen], &mut rng);
            let (cache, logits) = resume_with_user(&snap, &w, &user).unwrap();
            let (_, oracle) = prefill(&system.concat(&user).unwrap(), &w, MaskMode::Mas).unwrap();
            assert!(max_diff(&logits, &oracle) < 1e-5);
            assert_eq!(cache.cached_len(), 6 + ulen);
        }
        assert_eq!(snap.cached_len(), 6);
    }

    #[test]
    fn resume_skips_system_rows() {
        let w = model::<f32>(7, 16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let user = prompt(&[1, 1, 1], &mut rng);
        let mut rows = Vec::new();
        for slen in [4, 20] {
            let snap = snapshot_system_cache(&prompt(&vec![0; slen], &mut rng), &w, MaskMode::Mas).unwrap();
            reset_op_counts();
            resume_with_user(&snap, &w, &user).unwrap();
            rows.push(op_counts().matmul_rows);
        }
        assert_eq!(rows[0], rows[1]);
        // Per layer: q, k, v, 2 per head, wo, up, gate, down; then unembed.
        assert_eq!(rows[0], 3 * (2 * (3 + 2 * 2 + 4) + 1));
    }

    #[test]
    fn snapshot_contracts() {
        let w = model::<f32>(9, 16, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        assert!(matches!(
            snapshot_system_cache(&SegmentedTokens::empty(), &w, MaskMode::Mas),
            Err(Error::Invalid(_))
        ));
        assert!(matches!(
            snapshot_system_cache(&prompt(&[0, 1], &mut rng), &w, MaskMode::Mas),
            Err(Error::Segments(_))
        ));
        let snap = snapshot_system_cache(&prompt(&[0, 0], &mut rng), &w, MaskMode::Mas).unwrap();
        assert!(matches!(
            resume_with_user(&snap, &w, &prompt(&[0], &mut rng)),
            Err(Error::Segments(_))
        ));
        let (_, logits) = resume_with_user(&snap, &w, &prompt(&[1], &mut rng)).unwrap();
        assert_eq!(logits.len(), 17);
    }

    #[test]
    fn decode_rejects_foreign_config() {
        let w = model::<f32>(11, 16, 1);
        let other = model::<f32>(11, 16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (mut cache, _) = prefill(&prompt(&[0, 0], &mut rng), &w, MaskMode::Causal).unwrap();
        assert!(matches!(decode_step(&mut cache, &other, 1), Err(Error::State(_))));
        assert!(matches!(decode_step(&mut cache, &w, 99), Err(Error::Invalid(_))));
    }

    #[test]
    fn prefill_contracts() {
        let w = model::<f32>(13, 16, 1);
        assert!(prefill(&SegmentedTokens::empty(), &w, MaskMode::Mas).is_err());
        let long = SegmentedTokens::from_layout(&[0; 65]).unwrap();
        assert!(matches!(prefill(&long, &w, MaskMode::Mas), Err(Error::Invalid(_))));
        let gen = SegmentedTokens::from_layout(&[0, -1]).unwrap();
        assert!(matches!(prefill(&gen, &w, MaskMode::Mas), Err(Error::Segments(_))));
    }

    #[test]
    fn generate_matches_forward_chain() {
        let w = model::<f32>(14, 16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let seg = prompt(&[0, 0, 0, 1, 1], &mut rng);
        let opts = GenerateOptions {
            mode: MaskMode::Mas,
            max_new: 8,
            stop_token: None,
        };
        let out = generate(&seg, &w, &opts).unwrap();
        assert_eq!(out.len(), 8);
        let mut chain = seg.clone();
        for &t in &out {
            let f = forward(&w, chain.token_ids(), &build_mask(&chain, MaskMode::Mas), false).unwrap();
            assert_eq!(argmax(f.logits.row(chain.len() - 1)) as u32, t);
            chain.push_generated(t);
        }

        assert!(generate(&seg, &w, &GenerateOptions { max_new: 0, ..opts.clone() }).unwrap().is_empty());
        let first = out[0];
        let stopped = generate(&seg, &w, &GenerateOptions { stop_token: Some(first), ..opts }).unwrap();
        assert!(stopped.is_empty());
    }

    #[test]
    fn cache_round_trips_through_disk() {
        let w = model::<f32>(16, 16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let snap = snapshot_system_cache(&prompt(&[0; 5], &mut rng), &w, MaskMode::Mas).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.masw");
        snap.save(&path).unwrap();
        assert_eq!(KVCache::<f32>::load(&path).unwrap(), snap);
        let a = snapshot_key("abc", &[1, 2], MaskMode::Mas);
        assert_ne!(a, snapshot_key("abc", &[1, 2], MaskMode::Causal));
        assert_eq!(a.len(), 64);
    }
}
