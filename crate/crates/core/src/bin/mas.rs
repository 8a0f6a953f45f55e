use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use mas_core::atlas::{self, Thresholds};
use mas_core::chatdata::{self, ChatExample, ASST_BEGIN, EOS, VOCAB_SIZE};
use mas_core::engine::{self, GenerateOptions, KVCache};
use mas_core::lora::parse_targets;
use mas_core::masking::{build_mask, parse_layout, MaskMode, SegmentedTokens};
use mas_core::model::{ModelConfig, ModelWeights};
use mas_core::training::{self, LossScope, MetricsHistory, PretrainConfig, TrainConfig};
use mas_core::{Error, Result};

#[derive(Parser)]
#[command(name = "mas", version, about = "Segment-masked attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as JSONL.
    GenData(GenDataArgs),
    /// Full-parameter causal pretraining of a base model.
    Pretrain(PretrainArgs),
    /// LoRA fine-tuning of a base model.
    Train(TrainArgs),
    /// Accuracy of a model on a JSONL dataset.
    Evaluate(EvaluateArgs),
    /// Greedy generation for one system/user pair.
    Generate(GenerateArgs),
    /// Print (and optionally save as PGM) the mask of a segment layout.
    MaskDump(MaskDumpArgs),
    /// Per-head attention heatmaps and pattern report.
    Atlas(AtlasArgs),
    /// Learning-rate by seed grid in both modes.
    Sweep(SweepArgs),
    /// Evaluate a MAS-trained and a causal-trained run under both masks.
    AblateCrossmask(CrossmaskArgs),
    /// Train with separated and unified prompt segments and report the gap.
    AblateUnified(UnifiedArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value = "retrieval")]
    task: String,
    #[arg(long, default_value_t = 5000)]
    n: usize,
    /// Held-out items written to `--test-out`, disjoint from the main set.
    #[arg(long, default_value_t = 0)]
    test_n: usize,
    #[arg(long, default_value_t = 6)]
    facts: usize,
    #[arg(long, default_value_t = 4)]
    choices: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    test_out: Option<PathBuf>,
    /// Accepted for uniformity; data generation is mask independent.
    #[arg(long)]
    mode: Option<MaskMode>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 128)]
    d_mlp: usize,
    #[arg(long, default_value_t = 256)]
    max_seq: usize,
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
}

impl ModelArgs {
    fn init(&self) -> Result<ModelWeights> {
        let cfg = ModelConfig::new(self.d_model, self.heads, self.layers, self.d_mlp, VOCAB_SIZE, self.max_seq);
        ModelWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(self.init_seed))
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 20000)]
    docs: usize,
    #[arg(long, default_value_t = PretrainConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = PretrainConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = PretrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pretraining always uses the causal mask.
    #[arg(long, default_value = "causal")]
    mode: MaskMode,
    #[arg(long)]
    out: PathBuf,
}

/// Mirrors every `TrainConfig` field; unset flags keep the defaults.
#[derive(Args, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    cutoff_len: Option<usize>,
    #[arg(long)]
    lora_r: Option<usize>,
    #[arg(long)]
    lora_alpha: Option<f64>,
    #[arg(long)]
    lora_dropout: Option<f64>,
    /// Comma list, e.g. `wq,wv`.
    #[arg(long)]
    lora_targets: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training mask.
    #[arg(long)]
    mode: Option<MaskMode>,
    #[arg(long)]
    loss_scope: Option<LossScope>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    checkpoints_per_epoch: Option<usize>,
    #[arg(long)]
    unified_segments: bool,
    /// JSON `TrainConfig`; its fields override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl TrainFlags {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        macro_rules! set {
            ($($f:ident => $g:ident),*) => {$(if let Some(v) = self.$f.clone() { c.$g = v; })*};
        }
        set!(lr => lr, batch_size => batch_size, epochs => epochs, warmup_steps => warmup_steps,
             cutoff_len => cutoff_len, lora_r => lora_r, lora_alpha => lora_alpha,
             lora_dropout => lora_dropout, seed => seed, mode => train_mode,
             loss_scope => loss_scope, weight_decay => weight_decay,
             checkpoints_per_epoch => checkpoints_per_epoch);
        if let Some(t) = &self.lora_targets {
            c.lora_targets = parse_targets(t)?;
        }
        c.unified_segments |= self.unified_segments;
        if let Some(path) = &self.config {
            let mut merged = serde_json::to_value(&c)?;
            let file: serde_json::Value = serde_json::from_str(&read_text(path)?)?;
            let serde_json::Value::Object(fields) = file else {
                return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
            };
            for (k, v) in fields {
                merged[k] = v;
            }
            c = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint evaluation set; defaults to none.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Base weights; a fresh model from the shape flags when absent.
    #[arg(long)]
    base: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "mas")]
    mode: MaskMode,
    #[arg(long)]
    unified_segments: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    system_file: PathBuf,
    #[arg(long)]
    user_file: PathBuf,
    #[arg(long, default_value_t = 64)]
    max_new: usize,
    #[arg(long, default_value = "mas")]
    mode: MaskMode,
    /// Reuses (or stores) the system-prompt cache here.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args)]
struct MaskDumpArgs {
    /// Comma-separated segment ids, `-1` for generated tokens.
    #[arg(long)]
    segments: String,
    #[arg(long, default_value = "mas")]
    mode: MaskMode,
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Args)]
struct AtlasArgs {
    #[arg(long)]
    weights: PathBuf,
    /// One JSON chat example (`system`, `user`, optional `answer`).
    #[arg(long)]
    prompt_file: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "mas")]
    mode: MaskMode,
    /// JSON thresholds overriding the defaults.
    #[arg(long)]
    thresholds: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Comma list of learning rates.
    #[arg(long)]
    lrs: String,
    /// Comma list of seeds.
    #[arg(long)]
    seeds: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    eval: PathBuf,
    #[arg(long)]
    base: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CrossmaskArgs {
    #[arg(long)]
    run_mas: PathBuf,
    #[arg(long)]
    run_causal: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Accepted for uniformity; both masks are always evaluated.
    #[arg(long)]
    mode: Option<MaskMode>,
}

#[derive(Args)]
struct UnifiedArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    eval: PathBuf,
    #[arg(long)]
    base: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

/// Provenance of one training run, written before training starts and
/// sealed (with `finished`) once it completes.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunManifest {
    config: TrainConfig,
    seed: u64,
    git_describe: String,
    started: u64,
    finished: Option<u64>,
    base: Option<PathBuf>,
    data: PathBuf,
    eval: Option<PathBuf>,
    artifacts: BTreeMap<String, PathBuf>,
}

const MANIFEST: &str = "manifest.json";
const MODEL_FILE: &str = "model.masw";

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

fn load_base(base: &Option<PathBuf>, model: &ModelArgs) -> Result<ModelWeights> {
    match base {
        Some(p) => ModelWeights::load(p),
        None => model.init(),
    }
}

fn split_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    let out: Vec<T> = text
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Invalid(format!("bad {what} {p:?}"))))
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::Invalid(format!("empty {what} list")));
    }
    Ok(out)
}

/// Trains one run into `out`, which must not hold a completed run.
fn train_run(cfg: &TrainConfig, base_path: &Option<PathBuf>, base: &ModelWeights, data: &Path, eval: Option<&Path>, out: &Path) -> Result<RunManifest> {
    create_dir(out)?;
    let manifest_path = out.join(MANIFEST);
    if manifest_path.exists() {
        let old: RunManifest = serde_json::from_str(&read_text(&manifest_path)?)?;
        if old.finished.is_some() {
            return Err(Error::State(format!("{} holds a completed run", out.display())));
        }
    }
    let train_set = chatdata::read_jsonl(data)?;
    let eval_set = match eval {
        Some(p) => chatdata::read_jsonl(p)?,
        None => Vec::new(),
    };
    let artifacts: BTreeMap<String, PathBuf> = [
        ("model", MODEL_FILE),
        ("adapter", "adapter.masl"),
        ("metrics", "metrics.csv"),
        ("timings", "timings.csv"),
        ("losses", "losses.csv"),
    ]
    .into_iter()
    .map(|(k, f)| (k.to_string(), out.join(f)))
    .collect();
    let mut manifest = RunManifest {
        config: cfg.clone(),
        seed: cfg.seed,
        git_describe: git_describe(),
        started: now(),
        finished: None,
        base: base_path.clone(),
        data: data.to_path_buf(),
        eval: eval.map(Path::to_path_buf),
        artifacts: artifacts.clone(),
    };
    write_json(&manifest_path, &manifest)?;

    let outcome = training::train(base, &train_set, &eval_set, cfg, |cp, _| {
        eprintln!("step {} epoch {} loss {:.4} acc {:.4}", cp.step, cp.epoch, cp.train_loss, cp.mean_accuracy);
    })?;
    outcome.lora.save(&artifacts["adapter"])?;
    outcome.lora.merged_copy(base)?.save(&artifacts["model"])?;
    outcome.history.write_csv(&artifacts["metrics"])?;
    outcome.history.write_timings(&artifacts["timings"])?;
    let losses: Vec<(String, String)> = outcome
        .history
        .step_losses
        .iter()
        .enumerate()
        .map(|(i, l)| ((i + 1).to_string(), format!("{l}")))
        .collect();
    training::write_pairs(&artifacts["losses"], &losses)?;

    manifest.finished = Some(now());
    write_json(&manifest_path, &manifest)?;
    Ok(manifest)
}

fn final_accuracy(history: &MetricsHistory) -> f64 {
    history.checkpoints.last().map(|c| c.mean_accuracy).unwrap_or(0.0)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let (main, test) = match a.task.as_str() {
        "retrieval" => chatdata::gen_retrieval_split(a.n, a.test_n, a.facts, a.choices, a.seed)?,
        "lookup" => (chatdata::gen_lookup_corpus(a.n, a.seed)?, chatdata::gen_lookup_corpus(a.test_n, a.seed ^ 0x5eed)?),
        other => return Err(Error::Invalid(format!("unknown task {other:?}"))),
    };
    chatdata::write_jsonl(&a.out, &main)?;
    if a.test_n > 0 {
        let path = a.test_out.ok_or_else(|| Error::Invalid("--test-n needs --test-out".into()))?;
        chatdata::write_jsonl(&path, &test)?;
    }
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    if a.mode != MaskMode::Causal {
        return Err(Error::Config("pretraining uses the causal mask".into()));
    }
    let mut weights = a.model.init()?;
    let corpus: Vec<SegmentedTokens> = chatdata::gen_lookup_corpus(a.docs, a.seed)?
        .iter()
        .map(|e| chatdata::render_chat(e, true))
        .collect();
    let cfg = PretrainConfig {
        steps: a.steps,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
        ..PretrainConfig::default()
    };
    let losses = training::pretrain(&mut weights, &corpus, &cfg)?;
    weights.save(&a.out)?;
    let rows: Vec<(String, String)> = losses.iter().enumerate().map(|(i, l)| ((i + 1).to_string(), format!("{l}"))).collect();
    training::write_pairs(&a.out.with_extension("losses.csv"), &rows)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = a.flags.resolve()?;
    let base = load_base(&a.base, &a.model)?;
    let m = train_run(&cfg, &a.base, &base, &a.data, a.eval.as_deref(), &a.out)?;
    println!("{}", serde_json::to_string(&m)?);
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let w: ModelWeights = ModelWeights::load(&a.weights)?;
    let data = chatdata::read_jsonl(&a.data)?;
    let r = training::evaluate(&w, &data, a.mode, a.unified_segments)?;
    let out = serde_json::json!({ "mode": a.mode, "accuracy": r.overall(), "per_task": r.accuracies() });
    println!("{out}");
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let w: ModelWeights = ModelWeights::load(&a.weights)?;
    let ex = ChatExample {
        system: read_text(&a.system_file)?,
        user: read_text(&a.user_file)?,
        answer: String::new(),
        choices: None,
        task: "default".into(),
    };
    let prompt = chatdata::render_chat(&ex, false);
    let sys_len = prompt.segment_ids().iter().take_while(|&&s| s == 0).count();
    let system = prompt.slice(0..sys_len)?;
    let user = prompt.slice(sys_len..prompt.len())?;
    let snapshot = match &a.cache_dir {
        Some(dir) => {
            create_dir(dir)?;
            let key = engine::snapshot_key(&engine::file_digest(&a.weights)?, system.token_ids(), a.mode);
            let path = dir.join(format!("{key}.kvc"));
            if path.exists() {
                let c = KVCache::load(&path)?;
                if c.config() != &w.config || c.mode() != a.mode || c.sequence() != &system {
                    return Err(Error::State(format!("{} does not match this prompt", path.display())));
                }
                c
            } else {
                let c = engine::snapshot_system_cache(&system, &w, a.mode)?;
                c.save(&path)?;
                c
            }
        }
        None => engine::snapshot_system_cache(&system, &w, a.mode)?,
    };
    let (mut cache, _) = engine::resume_with_user(&snapshot, &w, &user)?;
    let logits = engine::decode_step(&mut cache, &w, ASST_BEGIN)?;
    let opts = GenerateOptions {
        mode: a.mode,
        max_new: a.max_new,
        stop_token: Some(EOS),
    };
    let tokens = engine::generate_from(&mut cache, &w, logits, &opts)?;
    println!("{}", chatdata::display_tokens(&tokens));
    Ok(())
}

fn mask_dump(a: MaskDumpArgs) -> Result<()> {
    let seg = SegmentedTokens::from_layout(&parse_layout(&a.segments)?)?;
    let mask = build_mask(&seg, a.mode);
    print!("{mask}");
    if let Some(p) = &a.pgm {
        mask.write_pgm(p)?;
    }
    Ok(())
}

fn run_atlas(a: AtlasArgs) -> Result<()> {
    let w: ModelWeights = ModelWeights::load(&a.weights)?;
    let ex: ChatExample = serde_json::from_str(&read_text(&a.prompt_file)?)?;
    let seg = chatdata::render_chat(&ex, !ex.answer.is_empty());
    let t = match &a.thresholds {
        Some(p) => serde_json::from_str(&read_text(p)?).map_err(|e| Error::Config(e.to_string()))?,
        None => Thresholds::default(),
    };
    let rows = atlas::run_atlas(&w, &seg, a.mode, &a.out, &t)?;
    for r in rows {
        println!("L{} H{} {}", r.layer, r.head, r.label);
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    lr: f64,
    seed: u64,
    mode: MaskMode,
    accuracy: f64,
}

fn sweep(a: SweepArgs) -> Result<()> {
    let lrs: Vec<f64> = split_list(&a.lrs, "learning rate")?;
    let seeds: Vec<u64> = split_list(&a.seeds, "seed")?;
    let base_cfg = a.flags.resolve()?;
    let base = load_base(&a.base, &a.model)?;
    create_dir(&a.out)?;
    let mut rows = Vec::new();
    for &lr in &lrs {
        for &seed in &seeds {
            for mode in [MaskMode::Causal, MaskMode::Mas] {
                let cfg = TrainConfig {
                    lr,
                    seed,
                    train_mode: mode,
                    ..base_cfg.clone()
                };
                let dir = a.out.join(format!("lr{lr}_seed{seed}_{mode}"));
                let m = train_run(&cfg, &a.base, &base, &a.data, Some(&a.eval), &dir)?;
                let history = MetricsHistory::read_csv(&m.artifacts["metrics"])?;
                rows.push(SweepRow {
                    lr,
                    seed,
                    mode,
                    accuracy: final_accuracy(&history),
                });
            }
        }
    }
    let mut w = csv::Writer::from_path(a.out.join("sweep.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::Invalid(e.to_string()))?;

    let mut best = csv::Writer::from_path(a.out.join("best.csv"))?;
    best.write_record(["mode", "lr", "mean_accuracy"])?;
    for mode in [MaskMode::Causal, MaskMode::Mas] {
        let mut best_lr = (f64::NAN, f64::NEG_INFINITY);
        for &lr in &lrs {
            let accs: Vec<f64> = rows.iter().filter(|r| r.mode == mode && r.lr == lr).map(|r| r.accuracy).collect();
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            if mean > best_lr.1 {
                best_lr = (lr, mean);
            }
        }
        println!("best {mode}: lr {} mean accuracy {:.4}", best_lr.0, best_lr.1);
        best.write_record([mode.to_string(), best_lr.0.to_string(), best_lr.1.to_string()])?;
    }
    best.flush().map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(())
}

fn ablate_crossmask(a: CrossmaskArgs) -> Result<()> {
    let data = chatdata::read_jsonl(&a.data)?;
    let mut models = Vec::new();
    for (mode, dir) in [(MaskMode::Mas, &a.run_mas), (MaskMode::Causal, &a.run_causal)] {
        let path = dir.join(MODEL_FILE);
        if !path.exists() {
            return Err(Error::State(format!("missing run {}", dir.display())));
        }
        models.push((mode, ModelWeights::load(&path)?));
    }
    let refs: Vec<(MaskMode, &ModelWeights)> = models.iter().map(|(m, w)| (*m, w)).collect();
    let cells = training::cross_mode_grid(&refs, &data, false)?;
    let mut w = csv::Writer::from_path(&a.out)?;
    for c in &cells {
        w.serialize(c)?;
        println!("{} -> {}: {:.4}", c.train_mode, c.eval_mode, c.accuracy);
    }
    w.flush().map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(())
}

fn ablate_unified(a: UnifiedArgs) -> Result<()> {
    let cfg = a.flags.resolve()?;
    let base = load_base(&a.base, &a.model)?;
    create_dir(&a.out)?;
    let mut accs = Vec::new();
    for unified in [false, true] {
        let c = TrainConfig {
            unified_segments: unified,
            ..cfg.clone()
        };
        let dir = a.out.join(if unified { "unified" } else { "separated" });
        let m = train_run(&c, &a.base, &base, &a.data, Some(&a.eval), &dir)?;
        accs.push(final_accuracy(&MetricsHistory::read_csv(&m.artifacts["metrics"])?));
    }
    let rows = vec![
        ("separated".to_string(), accs[0].to_string()),
        ("unified".to_string(), accs[1].to_string()),
        ("gap".to_string(), (accs[0] - accs[1]).to_string()),
    ];
    training::write_pairs(&a.out.join("unified.csv"), &rows)?;
    println!("separated {:.4} unified {:.4} gap {:+.4}", accs[0], accs[1], accs[0] - accs[1]);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Generate(a) => generate(a),
        Command::MaskDump(a) => mask_dump(a),
        Command::Atlas(a) => run_atlas(a),
        Command::Sweep(a) => sweep(a),
        Command::AblateCrossmask(a) => ablate_crossmask(a),
        Command::AblateUnified(a) => ablate_unified(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error {} {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
