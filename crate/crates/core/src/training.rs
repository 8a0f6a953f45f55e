//! LoRA fine-tuning: assistant-token cross-entropy, AdamW with a linear
//! warmup/decay schedule, periodic checkpoint evaluation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chatdata::{self, ChatExample, ASST_BEGIN, EOS};
use crate::engine::{decode_step, generate, prefill, GenerateOptions};
use crate::lora::{attach, LoraSet, LoraSpec};
use crate::masking::{build_mask, MaskMode, Role, SegmentedTokens};
use crate::model::{Matrix, ModelWeights, Recorder};
use crate::numerics::kernels::log_sum_exp;
use crate::error::shape_err;
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    #[default]
    AssistantOnly,
    FullSequence,
}

impl std::str::FromStr for LossScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "assistant_only" | "assistant" => Ok(Self::AssistantOnly),
            "full_sequence" | "full" => Ok(Self::FullSequence),
            _ => Err(Error::Config(format!("unknown loss scope {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub cutoff_len: usize,
    pub lora_r: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    pub lora_targets: Vec<Matrix>,
    pub seed: u64,
    pub train_mode: MaskMode,
    pub loss_scope: LossScope,
    pub weight_decay: f64,
    pub checkpoints_per_epoch: usize,
    pub unified_segments: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            epochs: 3,
            warmup_steps: 100,
            cutoff_len: 256,
            lora_r: 32,
            lora_alpha: 64.0,
            lora_dropout: 0.05,
            lora_targets: vec![Matrix::Query, Matrix::Value],
            seed: 0,
            train_mode: MaskMode::Mas,
            loss_scope: LossScope::AssistantOnly,
            weight_decay: 0.0,
            checkpoints_per_epoch: 3,
            unified_segments: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.cutoff_len < 1 {
            return bad("cutoff_len must be at least 1".into());
        }
        if self.batch_size < 1 || self.epochs < 1 || self.checkpoints_per_epoch < 1 {
            return bad("batch_size, epochs and checkpoints_per_epoch must be at least 1".into());
        }
        if self.weight_decay < 0.0 {
            return bad(format!("negative weight decay {}", self.weight_decay));
        }
        Ok(())
    }

    pub fn lora_spec(&self) -> LoraSpec {
        LoraSpec {
            targets: self.lora_targets.clone(),
            rank: self.lora_r,
            alpha: self.lora_alpha,
            dropout: self.lora_dropout,
        }
    }

    pub fn steps_per_epoch(&self, n_items: usize) -> usize {
        n_items.div_ceil(self.batch_size)
    }

    /// Optimizer steps after which a checkpoint is evaluated: every
    /// `1 / checkpoints_per_epoch` of an epoch, the last one at the end.
    pub fn checkpoint_steps(&self, n_items: usize) -> Vec<usize> {
        let total = self.epochs * self.steps_per_epoch(n_items);
        let count = self.epochs * self.checkpoints_per_epoch;
        let mut out: Vec<usize> = (1..=count).map(|k| (k * total).div_ceil(count)).filter(|&s| s > 0).collect();
        out.dedup();
        out
    }
}

/// `true` at positions whose next token is an assistant token. The final
/// position never predicts anything.
pub fn assistant_loss_mask(seg: &SegmentedTokens) -> Result<Vec<bool>> {
    let roles = seg.roles();
    let mask: Vec<bool> = (0..roles.len())
        .map(|t| roles.get(t + 1) == Some(&Role::Assistant))
        .collect();
    if !mask.iter().any(|&m| m) {
        return Err(Error::Invalid("no assistant token to train on".into()));
    }
    Ok(mask)
}

pub fn loss_mask(seg: &SegmentedTokens, scope: LossScope) -> Result<Vec<bool>> {
    match scope {
        LossScope::AssistantOnly => assistant_loss_mask(seg),
        LossScope::FullSequence => {
            if seg.len() < 2 {
                return Err(Error::Invalid("sequence too short for a next-token target".into()));
            }
            let mut m = vec![true; seg.len()];
            m[seg.len() - 1] = false;
            Ok(m)
        }
    }
}

/// Next-token labels; the last position gets a placeholder 0.
pub fn shifted_targets(seg: &SegmentedTokens) -> Vec<usize> {
    let t = seg.token_ids();
    (0..t.len()).map(|i| t.get(i + 1).map_or(0, |&x| x as usize)).collect()
}

/// Mean `−log softmax(logits)[target]` over the active rows.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let (rows, cols) = logits.expect_matrix("cross_entropy")?;
    if targets.len() != rows || mask.len() != rows {
        return Err(shape_err!("{rows} rows, {} targets, {} mask entries", targets.len(), mask.len()));
    }
    let mut total = 0.0;
    let mut active = 0usize;
    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        if t >= cols {
            return Err(Error::Invalid(format!("target {t} outside {cols} classes")));
        }
        let row = logits.row(i);
        total += (log_sum_exp(row) - row[t]).to_f64();
        active += 1;
    }
    if active == 0 {
        return Err(Error::Invalid("loss mask selects no position".into()));
    }
    Ok(total / active as f64)
}

/// Bias-corrected AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(sizes: &[usize], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<T: Real>(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(shape_err!("{} params, {} grads, {} slots", params.len(), grads.len(), self.m.len()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.m[i].len() {
                return Err(shape_err!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj.to_f64();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                let old = w.to_f64();
                *w = T::from_f64(old - lr * (update + self.weight_decay * old));
            }
        }
        Ok(())
    }
}

/// Linear ramp `0 → lr` over `warmup` steps, then linear decay to 0 at
/// `total`.
pub fn lr_at(step: usize, lr: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return lr * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return lr;
    }
    lr * total.saturating_sub(step) as f64 / (total - warmup) as f64
}

/// One evaluated checkpoint. `train_loss` averages the optimizer steps since
/// the previous checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub epoch: f64,
    pub train_loss: f64,
    pub accuracy: BTreeMap<String, f64>,
    pub mean_accuracy: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsHistory {
    pub checkpoints: Vec<Checkpoint>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

impl MetricsHistory {
    pub fn push(&mut self, cp: Checkpoint) -> Result<()> {
        if let Some(last) = self.checkpoints.last() {
            if cp.step <= last.step {
                return Err(Error::State(format!("checkpoint step {} after {}", cp.step, last.step)));
            }
        }
        self.checkpoints.push(cp);
        Ok(())
    }

    pub fn tasks(&self) -> Vec<String> {
        let mut tasks: Vec<String> = self.checkpoints.iter().flat_map(|c| c.accuracy.keys().cloned()).collect();
        tasks.sort();
        tasks.dedup();
        tasks
    }

    /// `step,epoch,loss,acc_<task>…,acc_mean`. Wall time is left out so
    /// that reruns are byte-identical; see [`Self::write_timings`].
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let tasks = self.tasks();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["step".to_string(), "epoch".into(), "loss".into()];
        header.extend(tasks.iter().map(|t| format!("acc_{t}")));
        header.push("acc_mean".into());
        w.write_record(&header)?;
        for cp in &self.checkpoints {
            let mut rec = vec![cp.step.to_string(), format!("{:.4}", cp.epoch), format!("{:.6}", cp.train_loss)];
            rec.extend(tasks.iter().map(|t| cp.accuracy.get(t).map_or(String::new(), |a| format!("{a:.6}"))));
            rec.push(format!("{:.6}", cp.mean_accuracy));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_timings(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "wall_secs"])?;
        for cp in &self.checkpoints {
            w.write_record([cp.step.to_string(), format!("{:.3}", cp.wall_secs)])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let mut out = Self::default();
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Format(format!("{}: bad field {i}", path.display())))
            };
            let mut accuracy = BTreeMap::new();
            for (i, name) in header.iter().enumerate().skip(3) {
                if let Some(task) = name.strip_prefix("acc_").filter(|t| *t != "mean") {
                    if !rec[i].is_empty() {
                        accuracy.insert(task.to_string(), num(i)?);
                    }
                }
            }
            out.push(Checkpoint {
                step: num(0)? as usize,
                epoch: num(1)?,
                train_loss: num(2)?,
                accuracy,
                mean_accuracy: num(header.len() - 1)?,
                wall_secs: 0.0,
            })?;
        }
        Ok(out)
    }
}

/// Correct/total counts per task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task: BTreeMap<String, (usize, usize)>,
}

impl EvalReport {
    pub fn accuracy(&self, task: &str) -> Option<f64> {
        self.per_task.get(task).map(|&(c, n)| c as f64 / n as f64)
    }

    pub fn accuracies(&self) -> BTreeMap<String, f64> {
        self.per_task.iter().map(|(k, &(c, n))| (k.clone(), c as f64 / n as f64)).collect()
    }

    /// Pooled accuracy over all items.
    pub fn overall(&self) -> f64 {
        let (c, n) = self.per_task.values().fold((0, 0), |(a, b), &(c, n)| (a + c, b + n));
        if n == 0 {
            0.0
        } else {
            c as f64 / n as f64
        }
    }
}

/// The model's answer tokens for one item. Multiple-choice items take the
/// argmax over the choice letters at the first answer position; free-form
/// items decode greedily up to `EOS`.
pub fn predict_tokens(weights: &ModelWeights<f32>, ex: &ChatExample, mode: MaskMode, unified: bool) -> Result<Vec<u32>> {
    let seg = chatdata::apply_segmentation(chatdata::render_chat(ex, false), unified);
    if let Some(letters) = ex.choice_tokens() {
        let (mut cache, _) = prefill(&seg, weights, mode)?;
        let logits = decode_step(&mut cache, weights, ASST_BEGIN)?;
        let mut best = letters[0];
        for &t in &letters[1..] {
            if logits[t as usize] > logits[best as usize] {
                best = t;
            }
        }
        return Ok(vec![best]);
    }
    let mut prompt = seg;
    prompt.push_generated(ASST_BEGIN);
    let opts = GenerateOptions {
        mode,
        max_new: ex.answer.len() + 8,
        stop_token: Some(EOS),
    };
    generate(&prompt, weights, &opts)
}

pub fn predict(weights: &ModelWeights<f32>, ex: &ChatExample, mode: MaskMode, unified: bool) -> Result<String> {
    Ok(chatdata::display_tokens(&predict_tokens(weights, ex, mode, unified)?))
}

/// Exact-match accuracy per task with masks built under `mode`.
pub fn evaluate(weights: &ModelWeights<f32>, data: &[ChatExample], mode: MaskMode, unified: bool) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for ex in data {
        let hit = predict_tokens(weights, ex, mode, unified)? == chatdata::tokenize(ex.answer.as_bytes());
        let slot = report.per_task.entry(ex.task.clone()).or_default();
        slot.0 += hit as usize;
        slot.1 += 1;
    }
    Ok(report)
}

/// One cell of the train-mode × eval-mode grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub train_mode: MaskMode,
    pub eval_mode: MaskMode,
    pub accuracy: f64,
}

/// Evaluates every trained model under both masks.
pub fn cross_mode_grid(
    models: &[(MaskMode, &ModelWeights<f32>)],
    data: &[ChatExample],
    unified: bool,
) -> Result<Vec<GridCell>> {
    let mut out = Vec::new();
    for &(train_mode, w) in models {
        for eval_mode in [MaskMode::Causal, MaskMode::Mas] {
            out.push(GridCell {
                train_mode,
                eval_mode,
                accuracy: evaluate(w, data, eval_mode, unified)?.overall(),
            });
        }
    }
    Ok(out)
}

/// A tokenized training item with its mask and loss rows.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub seg: SegmentedTokens,
    pub mask: crate::masking::AttnMask,
    pub rows: Vec<usize>,
    pub targets: Vec<usize>,
}

pub fn prepare(seg: SegmentedTokens, mode: MaskMode, scope: LossScope) -> Result<Prepared> {
    let active = loss_mask(&seg, scope)?;
    let all = shifted_targets(&seg);
    let rows: Vec<usize> = (0..seg.len()).filter(|&i| active[i]).collect();
    let targets = rows.iter().map(|&i| all[i]).collect();
    Ok(Prepared {
        mask: build_mask(&seg, mode),
        seg,
        rows,
        targets,
    })
}

/// Records the loss of one item on `g`; adapter handles are returned in
/// [`LoraSet::params_mut`] order.
fn record_loss(
    g: &mut Graph<f32>,
    base: &ModelWeights<f32>,
    lora: &LoraSet<f32>,
    item: &Prepared,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Vec<Var>)> {
    let bound = base.bind(g, false);
    let adapters = lora.bind(g, true, dropout_rng);
    let vars = adapters.vars();
    let mut rec = Recorder::new(g, &base.config, adapters);
    let logits = rec.forward(&bound, item.seg.token_ids(), &item.mask, Some(&item.rows))?;
    let all = vec![true; item.rows.len()];
    let loss = g.cross_entropy(logits, &item.targets, &all)?;
    Ok((loss, vars))
}

/// Adapter gradients of the mean loss over `batch`, and that loss.
pub fn batch_gradients(
    base: &ModelWeights<f32>,
    lora: &LoraSet<f32>,
    batch: &[&Prepared],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut grads: Vec<Tensor<f32>> = lora
        .iter()
        .flat_map(|ad| [Tensor::zeros(ad.a.shape()), Tensor::zeros(ad.b.shape())])
        .collect();
    let w = 1.0 / batch.len() as f32;
    let mut total = 0.0;
    for item in batch {
        let mut g = Graph::new();
        let (loss, vars) = record_loss(&mut g, base, lora, item, dropout_rng.as_deref_mut())?;
        total += g.value(loss).data()[0] as f64;
        g.backward(loss)?;
        for (acc, v) in grads.iter_mut().zip(vars) {
            if let Some(gr) = g.grad(v) {
                for (a, &x) in acc.data_mut().iter_mut().zip(gr.data()) {
                    *a += w * x;
                }
            }
        }
    }
    Ok((total / batch.len() as f64, grads))
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub lora: LoraSet<f32>,
    pub history: MetricsHistory,
    pub skipped: usize,
}

/// Fine-tunes adapters on `train_set` with `base` frozen; evaluates the
/// merged model on `eval_set` under `train_mode` at every checkpoint and
/// hands each checkpoint to `on_checkpoint`.
pub fn train(
    base: &ModelWeights<f32>,
    train_set: &[ChatExample],
    eval_set: &[ChatExample],
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(&Checkpoint, &LoraSet<f32>),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let rendered = chatdata::render_training_set(train_set, cfg.cutoff_len.min(base.config.max_seq), cfg.unified_segments)?;
    if rendered.items.is_empty() {
        return Err(Error::Invalid("every training item was lost to truncation".into()));
    }
    let items: Vec<Prepared> = rendered
        .items
        .into_iter()
        .map(|seg| prepare(seg, cfg.train_mode, cfg.loss_scope))
        .collect::<Result<_>>()?;

    let mut lora = attach(base, &cfg.lora_spec(), cfg.seed)?;
    let sizes: Vec<usize> = lora.iter().flat_map(|ad| [ad.a.len(), ad.b.len()]).collect();
    let mut opt = AdamW::new(&sizes, cfg.weight_decay);

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);

    let spe = cfg.steps_per_epoch(items.len());
    let total = cfg.epochs * spe;
    let checkpoints = cfg.checkpoint_steps(items.len());
    let mut history = MetricsHistory::default();
    let started = Instant::now();
    let mut step = 0usize;
    let mut since = Vec::new();
    let mut order: Vec<usize> = (0..items.len()).collect();
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &items[i]).collect();
            let (loss, grads) = match batch_gradients(base, &lora, &batch, Some(&mut dropout_rng)) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { step: step + 1, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { step: step + 1, loss });
            }
            step += 1;
            opt.step(&mut lora.params_mut(), &grads, lr_at(step, cfg.lr, cfg.warmup_steps, total))?;
            history.step_losses.push(loss);
            since.push(loss);
            if checkpoints.contains(&step) {
                let merged = lora.merged_copy(base)?;
                let report = evaluate(&merged, eval_set, cfg.train_mode, cfg.unified_segments)?;
                let cp = Checkpoint {
                    step,
                    epoch: step as f64 / spe as f64,
                    train_loss: since.iter().sum::<f64>() / since.len() as f64,
                    accuracy: report.accuracies(),
                    mean_accuracy: report.overall(),
                    wall_secs: started.elapsed().as_secs_f64(),
                };
                since.clear();
                log::info!(
                    "step {step}/{total} loss {:.4} acc {:.4} ({:.0}s)",
                    cp.train_loss,
                    cp.mean_accuracy,
                    cp.wall_secs
                );
                on_checkpoint(&cp, &lora);
                history.push(cp)?;
            }
        }
    }
    Ok(TrainOutcome {
        lora,
        history,
        skipped: rendered.skipped,
    })
}

/// Settings for full-parameter causal pretraining of a base model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss_scope: LossScope,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            batch_size: 8,
            steps: 2000,
            warmup_steps: 100,
            weight_decay: 0.0,
            seed: 0,
            loss_scope: LossScope::FullSequence,
        }
    }
}

/// Trains every base parameter with a causal mask and next-token loss,
/// sampling batches from `corpus` with replacement.
/// Returns the per-step losses.
pub fn pretrain(weights: &mut ModelWeights<f32>, corpus: &[SegmentedTokens], cfg: &PretrainConfig) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Invalid("empty pretraining corpus".into()));
    }
    let items: Vec<Prepared> = corpus
        .iter()
        .map(|seg| prepare(seg.clone(), MaskMode::Causal, cfg.loss_scope))
        .collect::<Result<_>>()?;
    let sizes: Vec<usize> = weights.named_tensors().iter().map(|(_, t)| t.len()).collect();
    let mut opt = AdamW::new(&sizes, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut grads: Vec<Tensor<f32>> = weights.named_tensors().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let w = 1.0 / cfg.batch_size as f32;
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let item = &items[rand::Rng::gen_range(&mut rng, 0..items.len())];
            let mut g = Graph::new();
            let bound = weights.bind(&mut g, true);
            let vars = bound.vars();
            let mut rec = Recorder::new(&mut g, &weights.config, crate::model::Plain);
            let logits = rec.forward(&bound, item.seg.token_ids(), &item.mask, Some(&item.rows))?;
            let loss = g.cross_entropy(logits, &item.targets, &vec![true; item.rows.len()])?;
            total += g.value(loss).data()[0] as f64;
            g.backward(loss)?;
            for (acc, v) in grads.iter_mut().zip(vars) {
                if let Some(gr) = g.grad(v) {
                    for (a, &x) in acc.data_mut().iter_mut().zip(gr.data()) {
                        *a += w * x;
                    }
                }
            }
        }
        let loss = total / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        opt.step(&mut weights.tensors_mut(), &grads, lr_at(step, cfg.lr, cfg.warmup_steps, cfg.steps))?;
        if step % 100 == 0 {
            log::info!("pretrain step {step}/{} loss {loss:.4}", cfg.steps);
        }
        losses.push(loss);
    }
    Ok(losses)
}

/// Writes `rows` as a two-column `name,value` CSV.
pub fn write_pairs(path: &Path, rows: &[(String, String)]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (k, v) in rows {
        writeln!(f, "{k},{v}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chatdata::{gen_retrieval_task, render_chat, VOCAB_SIZE};
    use crate::masking::SegmentedTokens;
    use crate::model::{ModelConfig, ModelWeights};

    fn roles(rs: &[Role]) -> SegmentedTokens {
        let ids: Vec<i32> = rs
            .iter()
            .map(|r| match r {
                Role::System => 0,
                Role::User => 1,
                Role::Assistant => -1,
            })
            .collect();
        SegmentedTokens::new(vec![0; rs.len()], ids, rs.to_vec()).unwrap()
    }

    #[test]
    fn loss_mask_examples() {
        use Role::*;
        let seg = roles(&[System, System, User, Assistant, Assistant]);
        assert_eq!(assistant_loss_mask(&seg).unwrap(), [false, false, true, true, false]);
        assert_eq!(loss_mask(&seg, LossScope::FullSequence).unwrap(), [true, true, true, true, false]);
        assert!(assistant_loss_mask(&roles(&[System, User])).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::<f64>::zeros(&[1, 4]);
        assert!((cross_entropy(&uniform, &[2], &[true]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let sure = Tensor::<f64>::new(vec![1, 3], vec![0.0, 1e4, 0.0]).unwrap();
        assert!(cross_entropy(&sure, &[1], &[true]).unwrap() < 1e-12);
        assert!(cross_entropy(&uniform, &[2], &[false]).is_err());

        let logits = Tensor::<f64>::new(vec![2, 3], vec![0.3, -1.2, 2.0, 0.5, 0.1, -0.4]).unwrap();
        let by_hand = |row: &[f64], t: usize| row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[t];
        let want = (by_hand(&[0.3, -1.2, 2.0], 0) + by_hand(&[0.5, 0.1, -0.4], 2)) / 2.0;
        assert!((cross_entropy(&logits, &[0, 2], &[true, true]).unwrap() - want).abs() < 1e-12);
        let mut g = Graph::<f64>::new();
        let v = g.constant(logits);
        let l = g.cross_entropy(v, &[0, 2], &[true, true]).unwrap();
        assert!((g.value(l).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn adamw_examples() {
        let mut p = Tensor::<f64>::zeros(&[1]);
        let mut opt = AdamW::new(&[1], 0.0);
        opt.step(&mut [&mut p], &[Tensor::full(&[1], 1.0)], 0.1).unwrap();
        assert!((p.data()[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);

        let mut q = Tensor::<f64>::full(&[3], 0.7);
        let mut opt = AdamW::new(&[3], 0.0);
        opt.step(&mut [&mut q], &[Tensor::zeros(&[3])], 0.1).unwrap();
        assert_eq!(q.data(), &[0.7; 3]);
        assert_eq!(opt.steps(), 1);
        assert!(opt.step(&mut [&mut q], &[Tensor::zeros(&[2])], 0.1).is_err());
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_at(50, 1.0, 100, 1000), 0.5);
        assert_eq!(lr_at(100, 1.0, 100, 1000), 1.0);
        assert_eq!(lr_at(550, 1.0, 100, 1000), 0.5);
        assert_eq!(lr_at(1000, 1.0, 100, 1000), 0.0);
        assert_eq!(lr_at(0, 1.0, 0, 10), 1.0);
    }

    #[test]
    fn checkpoint_schedule() {
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            ..Default::default()
        };
        let steps = cfg.checkpoint_steps(5000);
        assert_eq!(steps.len(), 9);
        assert_eq!(*steps.last().unwrap(), 3 * 625);
        assert_eq!(steps[..3], [209, 417, 625]);
    }

    #[test]
    fn config_contract() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.lora_r, cfg.lora_alpha, cfg.lora_dropout), (32, 64.0, 0.05));
        assert_eq!((cfg.batch_size, cfg.cutoff_len, cfg.warmup_steps, cfg.epochs), (8, 256, 100, 3));
        assert!(TrainConfig { lr: 0.0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { cutoff_len: 0, ..cfg.clone() }.validate().is_err());
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), cfg);
        assert!(serde_json::from_str::<TrainConfig>("{\"lr\": 0.01, \"bogus\": 1}").is_err());
    }

    fn tiny() -> ModelWeights<f32> {
        let cfg = ModelConfig::new(16, 2, 2, 32, VOCAB_SIZE, 128);
        ModelWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn prompt_logits_get_no_gradient() {
        let base = tiny();
        let data = gen_retrieval_task(1, 3, 2, 0).unwrap();
        let seg = render_chat(&data[0], true);
        let item = prepare(seg.clone(), MaskMode::Mas, LossScope::AssistantOnly).unwrap();
        let mut lora = attach(&base, &TrainConfig::default().lora_spec(), 1).unwrap();
        for p in lora.params_mut() {
            *p = p.map(|v| v + 0.01);
        }

        let mut g = Graph::new();
        let bound = base.bind(&mut g, false);
        let adapters = lora.bind(&mut g, true, None);
        let mut rec = Recorder::new(&mut g, &base.config, adapters);
        let logits = rec.forward(&bound, seg.token_ids(), &item.mask, None).unwrap();
        let active = assistant_loss_mask(&seg).unwrap();
        let loss = g.cross_entropy(logits, &shifted_targets(&seg), &active).unwrap();
        let full = g.value(loss).data()[0];
        g.backward(loss).unwrap();
        let dlogits = g.grad(logits).unwrap();
        for (i, &a) in active.iter().enumerate() {
            let row_mass: f32 = dlogits.row(i).iter().map(|v| v.abs()).sum();
            assert_eq!(row_mass == 0.0, !a, "row {i}");
        }

        let mut g2 = Graph::new();
        let (l2, _) = record_loss(&mut g2, &base, &lora, &item, None).unwrap();
        assert!((g2.value(l2).data()[0] - full).abs() < 1e-5);
    }

    #[test]
    fn short_run_learns_and_is_deterministic() {
        let base = tiny();
        let before = base.clone();
        let data = gen_retrieval_task(48, 3, 2, 5).unwrap();
        let cfg = TrainConfig {
            lr: 1e-2,
            warmup_steps: 2,
            epochs: 2,
            lora_r: 4,
            lora_alpha: 8.0,
            ..Default::default()
        };
        let mut seen = 0;
        let a = train(&base, &data, &data[..8], &cfg, |_, _| seen += 1).unwrap();
        assert_eq!(base, before);
        assert_eq!(a.history.checkpoints.len(), cfg.checkpoint_steps(48).len());
        assert_eq!(seen, a.history.checkpoints.len());
        let first = a.history.step_losses[..3].iter().sum::<f64>() / 3.0;
        let last = a.history.step_losses[9..].iter().sum::<f64>() / 3.0;
        assert!(last < first, "{first} -> {last}");

        let b = train(&base, &data, &data[..8], &cfg, |_, _| ()).unwrap();
        assert_eq!(a.history.step_losses, b.history.step_losses);
        assert_eq!(a.lora, b.lora);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        a.history.write_csv(&p).unwrap();
        let back = MetricsHistory::read_csv(&p).unwrap();
        assert_eq!(back.checkpoints.len(), a.history.checkpoints.len());
        assert_eq!(back.tasks(), vec!["retrieval".to_string()]);
    }

    #[test]
    fn rigged_and_constant_models() {
        let data = gen_retrieval_task(600, 6, 4, 11).unwrap();
        // A model whose unembedding favors 'C' regardless of input.
        let mut w = tiny();
        let u = w.unembed.as_mut().unwrap();
        *u = Tensor::zeros(u.shape());
        let rows = u.rows();
        for r in 0..rows {
            u.set(r, b'C' as usize, 1.0);
        }
        w.final_beta = Tensor::full(&[16], 1.0);
        let acc = evaluate(&w, &data, MaskMode::Mas, false).unwrap().overall();
        assert!((acc - 0.25).abs() < 0.05, "{acc}");

        let rigged: Vec<ChatExample> = data.iter().map(|e| ChatExample { answer: "C".into(), ..e.clone() }).collect();
        assert_eq!(evaluate(&w, &rigged, MaskMode::Causal, false).unwrap().overall(), 1.0);
    }

    #[test]
    fn free_form_answers_are_generated() {
        let w = tiny();
        let ex = ChatExample {
            system: "s".into(),
            user: "u".into(),
            answer: "zz".into(),
            choices: None,
            task: "free".into(),
        };
        let got = predict_tokens(&w, &ex, MaskMode::Mas, false).unwrap();
        assert!(got.len() <= 10 && !got.contains(&EOS));
        let report = evaluate(&w, &[ex], MaskMode::Mas, false).unwrap();
        assert_eq!(report.per_task["free"].1, 1);
    }
}
