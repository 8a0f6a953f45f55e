//! Decoder-only transformer: rotary multi-head attention with an injected
//! mask, SwiGLU MLP, pre-norm residual blocks.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::masking::AttnMask;
use crate::numerics::{kernels, weights_file, Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    LayerNorm,
    RmsNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    #[serde(default = "default_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
    #[serde(default)]
    pub norm: NormKind,
    #[serde(default)]
    pub tied_embeddings: bool,
}

fn default_theta() -> f64 {
    10_000.0
}

fn default_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    pub fn new(d_model: usize, n_heads: usize, n_layers: usize, d_mlp: usize, vocab_size: usize, max_seq: usize) -> Self {
        Self {
            d_model,
            n_heads,
            n_layers,
            d_mlp,
            vocab_size,
            max_seq,
            rope_theta: default_theta(),
            ln_eps: default_eps(),
            norm: NormKind::LayerNorm,
            tied_embeddings: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config(format!("head width {} must be even for rotary embeddings", self.head_dim())));
        }
        if !(self.rope_theta > 0.0 && self.ln_eps > 0.0) {
            return Err(Error::Config("rope_theta and ln_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Per-layer weight matrices that adapters may target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Matrix {
    #[serde(rename = "wq")]
    Query,
    #[serde(rename = "wk")]
    Key,
    #[serde(rename = "wv")]
    Value,
    #[serde(rename = "wo")]
    Output,
    #[serde(rename = "wu")]
    Up,
    #[serde(rename = "wg")]
    Gate,
    #[serde(rename = "wd")]
    Down,
}

impl Matrix {
    pub const ALL: [Matrix; 7] = [
        Matrix::Query,
        Matrix::Key,
        Matrix::Value,
        Matrix::Output,
        Matrix::Up,
        Matrix::Gate,
        Matrix::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Matrix::Query => "wq",
            Matrix::Key => "wk",
            Matrix::Value => "wv",
            Matrix::Output => "wo",
            Matrix::Up => "wu",
            Matrix::Gate => "wg",
            Matrix::Down => "wd",
        }
    }
}

impl fmt::Display for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Matrix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        let key = key.strip_prefix("w_").map(|k| format!("w{k}")).unwrap_or(key);
        Matrix::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| Error::Invalid(format!("unknown weight matrix {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T = f32> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_down: Tensor<T>,
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
}

impl<T: Real> LayerWeights<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, std: f64, rng: &mut R) -> Self {
        let (d, dm) = (cfg.d_model, cfg.d_mlp);
        Self {
            wq: Tensor::randn(&[d, d], std, rng),
            wk: Tensor::randn(&[d, d], std, rng),
            wv: Tensor::randn(&[d, d], std, rng),
            wo: Tensor::randn(&[d, d], std, rng),
            w_up: Tensor::randn(&[d, dm], std, rng),
            w_gate: Tensor::randn(&[d, dm], std, rng),
            w_down: Tensor::randn(&[dm, d], std, rng),
            ln1_gamma: Tensor::full(&[d], T::ONE),
            ln1_beta: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::full(&[d], T::ONE),
            ln2_beta: Tensor::zeros(&[d]),
        }
    }

    pub fn matrix(&self, m: Matrix) -> &Tensor<T> {
        match m {
            Matrix::Query => &self.wq,
            Matrix::Key => &self.wk,
            Matrix::Value => &self.wv,
            Matrix::Output => &self.wo,
            Matrix::Up => &self.w_up,
            Matrix::Gate => &self.w_gate,
            Matrix::Down => &self.w_down,
        }
    }

    pub fn matrix_mut(&mut self, m: Matrix) -> &mut Tensor<T> {
        match m {
            Matrix::Query => &mut self.wq,
            Matrix::Key => &mut self.wk,
            Matrix::Value => &mut self.wv,
            Matrix::Output => &mut self.wo,
            Matrix::Up => &mut self.w_up,
            Matrix::Gate => &mut self.w_gate,
            Matrix::Down => &mut self.w_down,
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor<T>); 11] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("wu", &self.w_up),
            ("wg", &self.w_gate),
            ("wd", &self.w_down),
            ("ln1.gamma", &self.ln1_gamma),
            ("ln1.beta", &self.ln1_beta),
            ("ln2.gamma", &self.ln2_gamma),
            ("ln2.beta", &self.ln2_beta),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 11] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w_up,
            &mut self.w_gate,
            &mut self.w_down,
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
        ]
    }

    fn check(&self, cfg: &ModelConfig, layer: usize) -> Result<()> {
        let (d, dm) = (cfg.d_model, cfg.d_mlp);
        let expect: [(&str, &Tensor<T>, Vec<usize>); 11] = [
            ("wq", &self.wq, vec![d, d]),
            ("wk", &self.wk, vec![d, d]),
            ("wv", &self.wv, vec![d, d]),
            ("wo", &self.wo, vec![d, d]),
            ("wu", &self.w_up, vec![d, dm]),
            ("wg", &self.w_gate, vec![d, dm]),
            ("wd", &self.w_down, vec![dm, d]),
            ("ln1.gamma", &self.ln1_gamma, vec![d]),
            ("ln1.beta", &self.ln1_beta, vec![d]),
            ("ln2.gamma", &self.ln2_gamma, vec![d]),
            ("ln2.beta", &self.ln2_beta, vec![d]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(shape_err!("layers.{layer}.{name}: {:?}, expected {shape:?}", t.shape()));
            }
            if !t.all_finite() {
                return Err(Error::NonFinite("layer weights"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T = f32> {
    pub config: ModelConfig,
    pub embed: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_gamma: Tensor<T>,
    pub final_beta: Tensor<T>,
    /// `d × vocab`; `None` when tied to the embedding table.
    pub unembed: Option<Tensor<T>>,
}

pub const INIT_STD: f64 = 0.02;

impl<T: Real> ModelWeights<T> {
    /// Gaussian(0, 0.02) matrices, unit/zero norm affine.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, v) = (config.d_model, config.vocab_size);
        let embed = Tensor::randn(&[v, d], INIT_STD, rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights::init(config, INIT_STD, rng))
            .collect();
        let unembed = (!config.tied_embeddings).then(|| Tensor::randn(&[d, v], INIT_STD, rng));
        Ok(Self {
            config: config.clone(),
            embed,
            layers,
            final_gamma: Tensor::full(&[d], T::ONE),
            final_beta: Tensor::zeros(&[d]),
            unembed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Config(format!(
                "{} layers for n_layers = {}",
                self.layers.len(),
                cfg.n_layers
            )));
        }
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        if self.embed.shape() != [v, d] {
            return Err(shape_err!("embed {:?}, expected [{v}, {d}]", self.embed.shape()));
        }
        match (&self.unembed, cfg.tied_embeddings) {
            (Some(u), false) if u.shape() == [d, v] => {}
            (None, true) => {}
            (Some(u), false) => return Err(shape_err!("unembed {:?}, expected [{d}, {v}]", u.shape())),
            _ => return Err(Error::Config("unembedding presence disagrees with tied_embeddings".into())),
        }
        if self.final_gamma.shape() != [d] || self.final_beta.shape() != [d] {
            return Err(shape_err!("final norm affine must have width {d}"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.check(cfg, i)?;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        let layer = |l: &LayerWeights<T>| LayerWeights {
            wq: l.wq.cast(),
            wk: l.wk.cast(),
            wv: l.wv.cast(),
            wo: l.wo.cast(),
            w_up: l.w_up.cast(),
            w_gate: l.w_gate.cast(),
            w_down: l.w_down.cast(),
            ln1_gamma: l.ln1_gamma.cast(),
            ln1_beta: l.ln1_beta.cast(),
            ln2_gamma: l.ln2_gamma.cast(),
            ln2_beta: l.ln2_beta.cast(),
        };
        ModelWeights {
            config: self.config.clone(),
            embed: self.embed.cast(),
            layers: self.layers.iter().map(layer).collect(),
            final_gamma: self.final_gamma.cast(),
            final_beta: self.final_beta.cast(),
            unembed: self.unembed.as_ref().map(Tensor::cast),
        }
    }

    /// Every tensor with its container name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.tensors().into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        out.push(("final_norm.gamma".into(), &self.final_gamma));
        out.push(("final_norm.beta".into(), &self.final_beta));
        if let Some(u) = &self.unembed {
            out.push(("unembed".into(), u));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embed];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.push(&mut self.final_gamma);
        out.push(&mut self.final_beta);
        if let Some(u) = &mut self.unembed {
            out.push(u);
        }
        out
    }

    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let mut map: HashMap<String, Tensor<T>> = tensors.into_iter().collect();
        let mut take = |name: &str| {
            map.remove(name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
        };
        let embed = take("embed")?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let mut t = |n: &str| take(&format!("layers.{i}.{n}"));
            layers.push(LayerWeights {
                wq: t("wq")?,
                wk: t("wk")?,
                wv: t("wv")?,
                wo: t("wo")?,
                w_up: t("wu")?,
                w_gate: t("wg")?,
                w_down: t("wd")?,
                ln1_gamma: t("ln1.gamma")?,
                ln1_beta: t("ln1.beta")?,
                ln2_gamma: t("ln2.gamma")?,
                ln2_beta: t("ln2.beta")?,
            });
        }
        let final_gamma = take("final_norm.gamma")?;
        let final_beta = take("final_norm.beta")?;
        let unembed = if config.tied_embeddings {
            None
        } else {
            Some(take("unembed")?)
        };
        let w = Self {
            config,
            embed,
            layers,
            final_gamma,
            final_beta,
            unembed,
        };
        w.validate()?;
        Ok(w)
    }

    /// Writes `path` (MASW1) and the config as JSON next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        weights_file::write(path, &self.named_tensors())?;
        let cfg_path = config_path(path);
        let json = serde_json::to_string_pretty(&self.config)?;
        std::fs::write(&cfg_path, json).map_err(|e| Error::io(cfg_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg_path = config_path(path);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: ModelConfig = serde_json::from_str(&text)?;
        Self::from_named(config, weights_file::read(path)?)
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// `model.masw` → `model.json`.
pub fn config_path(weights: &Path) -> std::path::PathBuf {
    weights.with_extension("json")
}

/// Applies rotary position embedding to the rows of `x` (one head's width).
pub fn rope_apply<T: Real>(x: &Tensor<T>, positions: &[usize], theta: f64) -> Result<Tensor<T>> {
    kernels::rope(x, positions, theta, false)
}

/// Graph handles for one layer's parameters.
#[derive(Clone, Debug)]
pub struct BoundLayer {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub w_up: Var,
    pub w_gate: Var,
    pub w_down: Var,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
}

impl BoundLayer {
    fn matrix(&self, m: Matrix) -> Var {
        match m {
            Matrix::Query => self.wq,
            Matrix::Key => self.wk,
            Matrix::Value => self.wv,
            Matrix::Output => self.wo,
            Matrix::Up => self.w_up,
            Matrix::Gate => self.w_gate,
            Matrix::Down => self.w_down,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Unembed {
    Separate(Var),
    Tied(Var),
}

/// All model parameters recorded on a graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub embed: Var,
    pub layers: Vec<BoundLayer>,
    pub final_gamma: Var,
    pub final_beta: Var,
    pub unembed: Unembed,
}

impl BoundModel {
    /// Every parameter handle in [`ModelWeights::named_tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for l in &self.layers {
            out.extend([
                l.wq, l.wk, l.wv, l.wo, l.w_up, l.w_gate, l.w_down, l.ln1_gamma, l.ln1_beta, l.ln2_gamma, l.ln2_beta,
            ]);
        }
        out.extend([self.final_gamma, self.final_beta]);
        if let Unembed::Separate(u) = self.unembed {
            out.push(u);
        }
        out
    }
}

impl<T: Real> ModelWeights<T> {
    /// Records every parameter as a leaf. With `trainable` false the leaves
    /// are constants and receive no gradient.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundModel {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let embed = leaf(&self.embed);
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                wq: leaf(&l.wq),
                wk: leaf(&l.wk),
                wv: leaf(&l.wv),
                wo: leaf(&l.wo),
                w_up: leaf(&l.w_up),
                w_gate: leaf(&l.w_gate),
                w_down: leaf(&l.w_down),
                ln1_gamma: leaf(&l.ln1_gamma),
                ln1_beta: leaf(&l.ln1_beta),
                ln2_gamma: leaf(&l.ln2_gamma),
                ln2_beta: leaf(&l.ln2_beta),
            })
            .collect();
        let final_gamma = leaf(&self.final_gamma);
        let final_beta = leaf(&self.final_beta);
        let unembed = match &self.unembed {
            Some(u) => Unembed::Separate(leaf(u)),
            None => Unembed::Tied(embed),
        };
        BoundModel {
            embed,
            layers,
            final_gamma,
            final_beta,
            unembed,
        }
    }
}

/// A low-rank update `scale · drop(x) · A · B` recorded on the graph.
#[derive(Clone, Debug)]
pub struct AdapterBinding<T> {
    pub a: Var,
    pub b: Var,
    pub scale: T,
    /// Keep-mask (already divided by the keep probability), shape of the
    /// projection input; `None` disables dropout.
    pub dropout: Option<Tensor<T>>,
}

/// Adapter lookup used while recording projections.
pub trait Adapters<T> {
    fn adapter(&mut self, layer: usize, matrix: Matrix, input_shape: &[usize]) -> Option<AdapterBinding<T>>;
}

/// No adapters.
pub struct Plain;

impl<T> Adapters<T> for Plain {
    fn adapter(&mut self, _: usize, _: Matrix, _: &[usize]) -> Option<AdapterBinding<T>> {
        None
    }
}

/// One layer/head post-softmax attention map.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<T = f32> {
    pub layer: usize,
    pub head: usize,
    pub map: Tensor<T>,
}

pub struct Recorder<'a, T: Real, A: Adapters<T>> {
    pub graph: &'a mut Graph<T>,
    pub config: &'a ModelConfig,
    pub adapters: A,
    pub record_attention: bool,
    pub attention: Vec<AttentionMap<T>>,
}

impl<'a, T: Real, A: Adapters<T>> Recorder<'a, T, A> {
    pub fn new(graph: &'a mut Graph<T>, config: &'a ModelConfig, adapters: A) -> Self {
        Self {
            graph,
            config,
            adapters,
            record_attention: false,
            attention: Vec::new(),
        }
    }

    fn project(&mut self, x: Var, lw: &BoundLayer, layer: usize, m: Matrix) -> Result<Var> {
        let g = &mut *self.graph;
        let base = g.matmul(x, lw.matrix(m))?;
        let shape = g.value(x).shape().to_vec();
        let Some(ad) = self.adapters.adapter(layer, m, &shape) else {
            return Ok(base);
        };
        let input = match ad.dropout {
            Some(keep) => g.mul_const(x, keep)?,
            None => x,
        };
        let low = g.matmul(input, ad.a)?;
        let delta = g.matmul(low, ad.b)?;
        let delta = g.scale(delta, ad.scale)?;
        g.add(base, delta)
    }

    fn norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let eps = T::from_f64(self.config.ln_eps);
        match self.config.norm {
            NormKind::LayerNorm => self.graph.layer_norm(x, gamma, beta, eps),
            NormKind::RmsNorm => self.graph.rms_norm(x, gamma, eps),
        }
    }

    /// `[A¹V¹, …, AʰVʰ] W_o` with `Aˡ = softmax(Q̃K̃ᵀ/√(d/h) + M)`.
    pub fn attention(&mut self, x: Var, lw: &BoundLayer, layer: usize, mask: &AttnMask, positions: &[usize]) -> Result<Var> {
        let n = self.graph.value(x).rows();
        if mask.n() != n || positions.len() != n {
            return Err(shape_err!("{n} rows, mask n = {}, {} positions", mask.n(), positions.len()));
        }
        let q = self.project(x, lw, layer, Matrix::Query)?;
        let k = self.project(x, lw, layer, Matrix::Key)?;
        let v = self.project(x, lw, layer, Matrix::Value)?;
        let dh = self.config.head_dim();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let theta = self.config.rope_theta;
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let g = &mut *self.graph;
            let qh = g.slice_cols(q, h * dh, dh)?;
            let qh = g.rope(qh, positions, theta)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let kh = g.rope(kh, positions, theta)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let att = g.masked_softmax(scores, mask.cells())?;
            if self.record_attention {
                let map = g.value(att).clone();
                self.attention.push(AttentionMap { layer, head: h, map });
            }
            heads.push(self.graph.matmul(att, vh)?);
        }
        let cat = self.graph.concat_cols(&heads)?;
        self.project(cat, lw, layer, Matrix::Output)
    }

    /// `(f(X W_U) ⊙ (X W_G)) W_D` with f = SiLU.
    pub fn mlp(&mut self, x: Var, lw: &BoundLayer, layer: usize) -> Result<Var> {
        let up = self.project(x, lw, layer, Matrix::Up)?;
        let up = self.graph.silu(up)?;
        let gate = self.project(x, lw, layer, Matrix::Gate)?;
        let h = self.graph.mul(up, gate)?;
        self.project(h, lw, layer, Matrix::Down)
    }

    /// Pre-norm residual block.
    pub fn block(&mut self, x: Var, lw: &BoundLayer, layer: usize, mask: &AttnMask, positions: &[usize]) -> Result<Var> {
        let h = self.norm(x, lw.ln1_gamma, lw.ln1_beta)?;
        let a = self.attention(h, lw, layer, mask, positions)?;
        let x_attn = self.graph.add(x, a)?;
        let h = self.norm(x_attn, lw.ln2_gamma, lw.ln2_beta)?;
        let m = self.mlp(h, lw, layer)?;
        self.graph.add(x_attn, m)
    }

    /// Embedding → blocks → final norm → unembedding. Logits are produced only
    /// for `output_rows` when given (all rows otherwise).
    pub fn forward(&mut self, bound: &BoundModel, tokens: &[u32], mask: &AttnMask, output_rows: Option<&[usize]>) -> Result<Var> {
        let cfg = self.config;
        check_tokens(cfg, tokens)?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let mut x = self.graph.gather_rows(bound.embed, &ids)?;
        for (i, lw) in bound.layers.iter().enumerate() {
            x = self.block(x, lw, i, mask, &positions)?;
        }
        if let Some(rows) = output_rows {
            x = self.graph.gather_rows(x, rows)?;
        }
        let h = self.norm(x, bound.final_gamma, bound.final_beta)?;
        match bound.unembed {
            Unembed::Separate(u) => self.graph.matmul(h, u),
            Unembed::Tied(e) => self.graph.matmul_nt(h, e),
        }
    }
}

pub fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Invalid("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq {
        return Err(Error::Invalid(format!(
            "sequence of {} tokens exceeds max_seq {}",
            tokens.len(),
            cfg.max_seq
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Invalid(format!("token {t} outside vocabulary of {}", cfg.vocab_size)));
    }
    Ok(())
}

/// Result of an inference-only forward.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T = f32> {
    pub logits: Tensor<T>,
    pub attention: Vec<AttentionMap<T>>,
}

/// Full-sequence logits under `mask`; attention maps for every layer and
/// head when `record_attention` is set.
pub fn forward<T: Real>(weights: &ModelWeights<T>, tokens: &[u32], mask: &AttnMask, record_attention: bool) -> Result<ForwardOutput<T>> {
    forward_with(weights, Plain, tokens, mask, record_attention)
}

pub fn forward_with<T: Real, A: Adapters<T>>(
    weights: &ModelWeights<T>,
    adapters: A,
    tokens: &[u32],
    mask: &AttnMask,
    record_attention: bool,
) -> Result<ForwardOutput<T>> {
    let mut g = Graph::new();
    let bound = weights.bind(&mut g, false);
    let mut rec = Recorder::new(&mut g, &weights.config, adapters);
    rec.record_attention = record_attention;
    let logits = rec.forward(&bound, tokens, mask, None)?;
    let attention = std::mem::take(&mut rec.attention);
    Ok(ForwardOutput {
        logits: g.value(logits).clone(),
        attention,
    })
}

fn eager<T: Real>(lw: &LayerWeights<T>, cfg: &ModelConfig, x: &Tensor<T>, f: impl FnOnce(&mut Recorder<'_, T, Plain>, Var, &BoundLayer) -> Result<Var>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let single = ModelWeights {
        config: cfg.clone(),
        embed: Tensor::zeros(&[1, 1]),
        layers: vec![lw.clone()],
        final_gamma: Tensor::zeros(&[1]),
        final_beta: Tensor::zeros(&[1]),
        unembed: None,
    };
    let bound = single.bind(&mut g, false);
    let mut rec = Recorder::new(&mut g, cfg, Plain);
    let out = f(&mut rec, xv, &bound.layers[0])?;
    Ok(g.value(out).clone())
}

/// Multi-head attention of one layer; returns the output and the per-head maps.
pub fn mha_forward<T: Real>(
    x: &Tensor<T>,
    lw: &LayerWeights<T>,
    cfg: &ModelConfig,
    mask: &AttnMask,
    positions: &[usize],
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let mut maps = Vec::new();
    let out = eager(lw, cfg, x, |rec, xv, bl| {
        rec.record_attention = true;
        let out = rec.attention(xv, bl, 0, mask, positions)?;
        maps = rec.attention.drain(..).map(|a| a.map).collect();
        Ok(out)
    })?;
    Ok((out, maps))
}

pub fn swiglu_mlp<T: Real>(x: &Tensor<T>, lw: &LayerWeights<T>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    eager(lw, cfg, x, |rec, xv, bl| rec.mlp(xv, bl, 0))
}

pub fn block_forward<T: Real>(
    x: &Tensor<T>,
    lw: &LayerWeights<T>,
    cfg: &ModelConfig,
    mask: &AttnMask,
    positions: &[usize],
) -> Result<Tensor<T>> {
    eager(lw, cfg, x, |rec, xv, bl| rec.block(xv, bl, 0, mask, positions))
}

/// Index of the largest value in a row (first on ties).
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
