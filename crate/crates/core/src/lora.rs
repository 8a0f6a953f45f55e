//! Low-rank adapters over frozen base matrices.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{AdapterBinding, Adapters, Matrix, ModelWeights};
use crate::numerics::{kernels, weights_file, Graph, Real, Tensor, Var};

/// Matrices an adapter may be attached to.
pub const ADAPTABLE: [Matrix; 5] = [Matrix::Query, Matrix::Key, Matrix::Value, Matrix::Up, Matrix::Down];

pub const A_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AdapterKey {
    pub layer: usize,
    pub matrix: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T = f32> {
    pub key: AdapterKey,
    /// `d_in × r`
    pub a: Tensor<T>,
    /// `r × d_out`
    pub b: Tensor<T>,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl<T: Real> LoraAdapter<T> {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn delta(&self) -> Result<Tensor<T>> {
        let ab = kernels::matmul(&self.a, &self.b)?;
        Ok(kernels::scale(&ab, T::from_f64(self.scale())))
    }

    pub fn parameter_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// `W + (alpha / r) · A · B`.
pub fn effective_weight<T: Real>(w: &Tensor<T>, adapter: &LoraAdapter<T>) -> Result<Tensor<T>> {
    let delta = adapter.delta()?;
    if !delta.same_shape(w) {
        return Err(shape_err!(
            "adapter {}.{} produces {:?} for weight {:?}",
            adapter.key.layer,
            adapter.key.matrix,
            delta.shape(),
            w.shape()
        ));
    }
    kernels::add(w, &delta)
}

/// Parses a comma list such as `"wq,wv"`.
pub fn parse_targets(text: &str) -> Result<Vec<Matrix>> {
    let mut out = Vec::new();
    for part in text.split(',').filter(|p| !p.trim().is_empty()) {
        let m: Matrix = part.parse()?;
        if !ADAPTABLE.contains(&m) {
            return Err(Error::Invalid(format!("{m} cannot carry an adapter")));
        }
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::Invalid("no adapter targets".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub targets: Vec<Matrix>,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

/// The adapters of one model, keyed by layer and matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraSet<T = f32> {
    pub spec: LoraSpec,
    adapters: BTreeMap<AdapterKey, LoraAdapter<T>>,
    merged: bool,
}

/// Creates one adapter per layer per target with `A ~ N(0, 0.02²)` and
/// `B = 0`, so the adapted model starts identical to the base.
pub fn attach<T: Real>(weights: &ModelWeights<T>, spec: &LoraSpec, seed: u64) -> Result<LoraSet<T>> {
    if spec.rank == 0 {
        return Err(Error::Config("adapter rank must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&spec.dropout) {
        return Err(Error::Config(format!("adapter dropout {} outside [0, 1)", spec.dropout)));
    }
    if spec.targets.is_empty() {
        return Err(Error::Invalid("no adapter targets".into()));
    }
    if let Some(m) = spec.targets.iter().find(|m| !ADAPTABLE.contains(m)) {
        return Err(Error::Invalid(format!("{m} cannot carry an adapter")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adapters = BTreeMap::new();
    for (layer, lw) in weights.layers.iter().enumerate() {
        for &matrix in &spec.targets {
            let w = lw.matrix(matrix);
            let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
            if spec.rank >= d_in.min(d_out) {
                log::warn!("adapter rank {} is not below min({d_in}, {d_out})", spec.rank);
            }
            let key = AdapterKey { layer, matrix };
            adapters.insert(
                key,
                LoraAdapter {
                    key,
                    a: Tensor::randn(&[d_in, spec.rank], A_INIT_STD, &mut rng),
                    b: Tensor::zeros(&[spec.rank, d_out]),
                    rank: spec.rank,
                    alpha: spec.alpha,
                    dropout: spec.dropout,
                },
            );
        }
    }
    Ok(LoraSet {
        spec: spec.clone(),
        adapters,
        merged: false,
    })
}

impl<T: Real> LoraSet<T> {
    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LoraAdapter<T>> {
        self.adapters.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut LoraAdapter<T>> {
        self.adapters.values_mut()
    }

    pub fn get(&self, key: AdapterKey) -> Option<&LoraAdapter<T>> {
        self.adapters.get(&key)
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    /// Σ r·(d_in + d_out).
    pub fn parameter_count(&self) -> usize {
        self.iter().map(LoraAdapter::parameter_count).sum()
    }

    /// Trainable tensors in a fixed order: `A, B` per adapter by key.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.adapters
            .values_mut()
            .flat_map(|ad| [&mut ad.a, &mut ad.b])
            .collect()
    }

    /// Folds every adapter into a copy of `weights`. A set can be merged once.
    pub fn merge(&mut self, weights: &ModelWeights<T>) -> Result<ModelWeights<T>> {
        if self.merged {
            return Err(Error::State("adapters were already merged".into()));
        }
        let merged = self.merged_copy(weights)?;
        self.merged = true;
        Ok(merged)
    }

    /// Folded weights without consuming the set (evaluation during training).
    pub fn merged_copy(&self, weights: &ModelWeights<T>) -> Result<ModelWeights<T>> {
        let mut out = weights.clone();
        for ad in self.iter() {
            let layer = out
                .layers
                .get_mut(ad.key.layer)
                .ok_or_else(|| Error::Invalid(format!("adapter for missing layer {}", ad.key.layer)))?;
            let w = layer.matrix_mut(ad.key.matrix);
            *w = effective_weight(w, ad)?;
        }
        Ok(out)
    }

    /// Records `A` and `B` of every adapter as leaves.
    pub fn bind<'r>(&self, g: &mut Graph<T>, trainable: bool, dropout_rng: Option<&'r mut ChaCha8Rng>) -> BoundLora<'r, T> {
        let mut vars = BTreeMap::new();
        for (key, ad) in &self.adapters {
            let (a, b) = if trainable {
                (g.param(ad.a.clone()), g.param(ad.b.clone()))
            } else {
                (g.constant(ad.a.clone()), g.constant(ad.b.clone()))
            };
            vars.insert(*key, (a, b, T::from_f64(ad.scale())));
        }
        BoundLora {
            vars,
            dropout: self.spec.dropout,
            rng: dropout_rng,
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.iter()
            .flat_map(|ad| {
                let base = format!("lora.{}.{}", ad.key.layer, ad.key.matrix);
                [(format!("{base}.A"), &ad.a), (format!("{base}.B"), &ad.b)]
            })
            .collect()
    }

    /// MASW1 container plus a JSON sidecar with the `LoraSpec`.
    pub fn save(&self, path: &Path) -> Result<()> {
        weights_file::write(path, &self.named_tensors())?;
        let side = path.with_extension("json");
        std::fs::write(&side, serde_json::to_string_pretty(&self.spec)?).map_err(|e| Error::io(side, e))
    }

    pub fn load(path: &Path, weights: &ModelWeights<T>) -> Result<Self> {
        let side = path.with_extension("json");
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let spec: LoraSpec = serde_json::from_str(&text)?;
        let mut set = attach(weights, &spec, 0)?;
        let mut tensors: BTreeMap<String, Tensor<T>> = weights_file::read(path)?.into_iter().collect();
        for ad in set.adapters.values_mut() {
            let base = format!("lora.{}.{}", ad.key.layer, ad.key.matrix);
            for (suffix, slot) in [("A", &mut ad.a), ("B", &mut ad.b)] {
                let t = tensors
                    .remove(&format!("{base}.{suffix}"))
                    .ok_or_else(|| Error::Format(format!("missing {base}.{suffix}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Format(format!("{base}.{suffix}: shape {:?}", t.shape())));
                }
                *slot = t;
            }
        }
        Ok(set)
    }
}

/// Adapter handles on a graph; samples dropout keep-masks when an RNG is
/// supplied (training mode).
pub struct BoundLora<'r, T> {
    vars: BTreeMap<AdapterKey, (Var, Var, T)>,
    dropout: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<T: Real> BoundLora<'_, T> {
    /// `(A, B)` handles in [`LoraSet::params_mut`] order.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().flat_map(|&(a, b, _)| [a, b]).collect()
    }
}

impl<T: Real> Adapters<T> for BoundLora<'_, T> {
    fn adapter(&mut self, layer: usize, matrix: Matrix, input_shape: &[usize]) -> Option<AdapterBinding<T>> {
        let &(a, b, scale) = self.vars.get(&AdapterKey { layer, matrix })?;
        let dropout = match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => {
                let keep = T::from_f64(1.0 / (1.0 - self.dropout));
                let n: usize = input_shape.iter().product();
                let data = (0..n)
                    .map(|_| if rng.gen::<f64>() < self.dropout { T::ZERO } else { keep })
                    .collect();
                Some(Tensor::new(input_shape.to_vec(), data).expect("shape from input"))
            }
            _ => None,
        };
        Some(AdapterBinding { a, b, scale, dropout })
    }
}

/// Adapted forward without dropout.
pub fn forward_adapted<T: Real>(
    weights: &ModelWeights<T>,
    lora: &LoraSet<T>,
    tokens: &[u32],
    mask: &crate::masking::AttnMask,
    record_attention: bool,
) -> Result<crate::model::ForwardOutput<T>> {
    let mut g = Graph::new();
    let bound = weights.bind(&mut g, false);
    let adapters = lora.bind(&mut g, false, None);
    let mut rec = crate::model::Recorder::new(&mut g, &weights.config, adapters);
    rec.record_attention = record_attention;
    let logits = rec.forward(&bound, tokens, mask, None)?;
    let attention = std::mem::take(&mut rec.attention);
    Ok(crate::model::ForwardOutput {
        logits: g.value(logits).clone(),
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::AttnMask;
    use crate::model::{forward, ModelConfig};

    fn base() -> ModelWeights<f32> {
        let cfg = ModelConfig::new(16, 2, 2, 24, 13, 16);
        ModelWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn spec(targets: &[Matrix], rank: usize, alpha: f64) -> LoraSpec {
        LoraSpec {
            targets: targets.to_vec(),
            rank,
            alpha,
            dropout: 0.05,
        }
    }

    #[test]
    fn fresh_adapters_leave_outputs_unchanged() {
        let w = base();
        let set = attach(&w, &spec(&ADAPTABLE, 4, 8.0), 3).unwrap();
        let tokens = [1, 2, 3, 4, 5];
        let mask = AttnMask::causal(5);
        let plain = forward(&w, &tokens, &mask, false).unwrap().logits;
        let adapted = forward_adapted(&w, &set, &tokens, &mask, false).unwrap().logits;
        assert_eq!(plain, adapted);
    }

    #[test]
    fn counts_and_seeds() {
        let w = base();
        let a = attach(&w, &spec(&[Matrix::Query, Matrix::Value], 2, 4.0), 1).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a.parameter_count(), 4 * 2 * (16 + 16));
        let b = attach(&w, &spec(&[Matrix::Query, Matrix::Value], 2, 4.0), 2).unwrap();
        let key = AdapterKey { layer: 0, matrix: Matrix::Query };
        assert_ne!(a.get(key).unwrap().a, b.get(key).unwrap().a);
        assert!(b.iter().all(|ad| ad.b.data().iter().all(|&v| v == 0.0)));
        let mlp = attach(&w, &spec(&[Matrix::Up, Matrix::Down], 2, 4.0), 1).unwrap();
        assert_eq!(mlp.parameter_count(), 2 * (2 * (16 + 24) + 2 * (24 + 16)));
    }

    #[test]
    fn rejects_bad_targets() {
        assert!(parse_targets("wq,wv").is_ok());
        assert!(matches!(parse_targets("wq,wx"), Err(Error::Invalid(_))));
        assert!(matches!(parse_targets("wo"), Err(Error::Invalid(_))));
        assert!(attach(&base(), &spec(&[Matrix::Gate], 2, 2.0), 0).is_err());
        assert!(attach(&base(), &spec(&[Matrix::Query], 0, 2.0), 0).is_err());
    }

    fn random_adapter(rank: usize, alpha: f64) -> (Tensor<f64>, LoraAdapter<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let ad = LoraAdapter {
            key: AdapterKey { layer: 0, matrix: Matrix::Query },
            a: Tensor::randn(&[5, rank], 1.0, &mut rng),
            b: Tensor::randn(&[rank, 4], 1.0, &mut rng),
            rank,
            alpha,
            dropout: 0.0,
        };
        (w, ad)
    }

    #[test]
    fn effective_weight_cases() {
        let (w, mut ad) = random_adapter(2, 2.0);
        // Unit scale: W + A·B, checked against explicit sums.
        let eff = effective_weight(&w, &ad).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let dense: f64 = (0..2).map(|k| ad.a.at(i, k) * ad.b.at(k, j)).sum();
                assert!((eff.at(i, j) - (w.at(i, j) + dense)).abs() < 1e-12);
            }
        }
        ad.alpha = 5.0;
        let eff = effective_weight(&w, &ad).unwrap();
        let dense: f64 = (0..2).map(|k| ad.a.at(1, k) * ad.b.at(k, 3)).sum();
        assert!((eff.at(1, 3) - (w.at(1, 3) + 2.5 * dense)).abs() < 1e-12);
        ad.b = Tensor::zeros(&[2, 4]);
        assert_eq!(effective_weight(&w, &ad).unwrap(), w);
        assert!(matches!(effective_weight(&Tensor::zeros(&[4, 4]), &ad), Err(Error::Shape(_))));
    }

    #[test]
    fn merge_matches_adapted_forward() {
        let w = base();
        let mut set = attach(&w, &spec(&ADAPTABLE, 4, 8.0), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for ad in set.iter_mut() {
            ad.b = Tensor::randn(ad.b.shape(), 0.05, &mut rng);
        }
        let tokens = [3, 1, 4, 1, 5, 9, 2, 6];
        let mask = AttnMask::causal(8);
        let adapted = forward_adapted(&w, &set, &tokens, &mask, false).unwrap().logits;
        let merged = set.merge(&w).unwrap();
        let folded = forward(&merged, &tokens, &mask, false).unwrap().logits;
        assert!(adapted.max_abs_diff(&folded) < 1e-5);
        assert_ne!(merged, w);
        assert!(matches!(set.merge(&w), Err(Error::State(_))));
    }

    #[test]
    fn merging_zero_adapters_is_identity() {
        let w = base();
        let mut set = attach(&w, &spec(&[Matrix::Query], 2, 4.0), 5).unwrap();
        assert_eq!(set.merge(&w).unwrap(), w);
    }

    #[test]
    fn save_and_load() {
        let w = base();
        let mut set = attach(&w, &spec(&[Matrix::Query, Matrix::Value], 2, 4.0), 5).unwrap();
        set.iter_mut().for_each(|ad| ad.b = ad.b.map(|_| 0.25));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lora.masw");
        set.save(&path).unwrap();
        let back = LoraSet::load(&path, &w).unwrap();
        assert_eq!(back, set);
        let names: Vec<String> = set.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "lora.0.wq.A");
        assert_eq!(names[3], "lora.0.wv.B");
    }
}
