//! Byte-level vocabulary, chat rendering with segment annotation, and the
//! synthetic retrieval task.

use std::collections::HashSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::masking::{unify_segments, Role, SegmentedTokens, SENTINEL};
use crate::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const SYS_BEGIN: u32 = 258;
pub const USER_BEGIN: u32 = 259;
pub const ASST_BEGIN: u32 = 260;
pub const VOCAB_SIZE: usize = 261;
/// Bumped whenever the id mapping changes.
pub const VOCAB_VERSION: &str = "bytes256+5/v1";

pub fn is_special(token: u32) -> bool {
    (BOS..VOCAB_SIZE as u32).contains(&token)
}

pub fn special_name(token: u32) -> Option<&'static str> {
    Some(match token {
        BOS => "<bos>",
        EOS => "<eos>",
        SYS_BEGIN => "<sys>",
        USER_BEGIN => "<user>",
        ASST_BEGIN => "<asst>",
        _ => return None,
    })
}

pub fn tokenize(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

/// Inverse of [`tokenize`]; special or out-of-range ids are an error.
pub fn detokenize(tokens: &[u32]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| u8::try_from(t).map_err(|_| Error::Invalid(format!("token {t} is not a byte"))))
        .collect()
}

/// Human-readable rendering: bytes as UTF-8 (lossy), specials by name.
pub fn display_tokens(tokens: &[u32]) -> String {
    let mut out = String::new();
    let mut run = Vec::new();
    for &t in tokens {
        if let Ok(b) = u8::try_from(t) {
            run.push(b);
            continue;
        }
        out.push_str(&String::from_utf8_lossy(&run));
        run.clear();
        out.push_str(special_name(t).unwrap_or("<?>"));
    }
    out.push_str(&String::from_utf8_lossy(&run));
    out
}

/// One chat item. `answer` is the gold assistant text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatExample {
    #[serde(default)]
    pub system: String,
    pub user: String,
    #[serde(default)]
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    #[serde(default = "default_task")]
    pub task: String,
}

fn default_task() -> String {
    "default".into()
}

impl ChatExample {
    pub fn validate(&self, training: bool) -> Result<()> {
        if self.user.is_empty() {
            return Err(Error::Invalid("example with empty user prompt".into()));
        }
        if training && self.answer.is_empty() {
            return Err(Error::Invalid("training example with empty answer".into()));
        }
        if let Some(choices) = &self.choices {
            if choices.is_empty() || choices.len() > 26 {
                return Err(Error::Invalid(format!("{} choices", choices.len())));
            }
        }
        Ok(())
    }

    /// Letter tokens `A, B, …` naming the choices, if any.
    pub fn choice_tokens(&self) -> Option<Vec<u32>> {
        self.choices
            .as_ref()
            .map(|c| (0..c.len()).map(|i| (b'A' + i as u8) as u32).collect())
    }
}

/// `[BOS, SYS_BEGIN, system…]` is segment 0, `[USER_BEGIN, user…]` segment 1
/// and, with `include_assistant`, `[ASST_BEGIN, answer…, EOS]` are sentinel
/// tokens with the assistant role.
pub fn render_chat(ex: &ChatExample, include_assistant: bool) -> SegmentedTokens {
    let mut tokens = vec![BOS, SYS_BEGIN];
    tokens.extend(tokenize(ex.system.as_bytes()));
    let sys_len = tokens.len();
    tokens.push(USER_BEGIN);
    tokens.extend(tokenize(ex.user.as_bytes()));
    let prompt_len = tokens.len();
    if include_assistant {
        tokens.push(ASST_BEGIN);
        tokens.extend(tokenize(ex.answer.as_bytes()));
        tokens.push(EOS);
    }
    let n = tokens.len();
    let segment_ids = (0..n)
        .map(|i| match i {
            i if i < sys_len => 0,
            i if i < prompt_len => 1,
            _ => SENTINEL,
        })
        .collect();
    let roles = (0..n)
        .map(|i| match i {
            i if i < sys_len => Role::System,
            i if i < prompt_len => Role::User,
            _ => Role::Assistant,
        })
        .collect();
    SegmentedTokens::new(tokens, segment_ids, roles).expect("rendered layout is well formed")
}

/// The prompt followed by `ASST_BEGIN`, ready for generation.
pub fn render_prompt(ex: &ChatExample) -> SegmentedTokens {
    let mut seg = render_chat(ex, false);
    seg.push_generated(ASST_BEGIN);
    seg
}

/// Collapses system and user into one segment.
pub fn apply_segmentation(seg: SegmentedTokens, unified: bool) -> SegmentedTokens {
    if unified {
        unify_segments(&seg)
    } else {
        seg
    }
}

/// Cuts a rendered training item to `cutoff` tokens. Every token is atomic,
/// so no special token is ever split; `None` when the cut would leave no
/// answer token.
pub fn truncate_training(seg: &SegmentedTokens, cutoff: usize) -> Option<SegmentedTokens> {
    if seg.len() <= cutoff {
        return Some(seg.clone());
    }
    let cut = seg.truncated(cutoff);
    let answer_tokens = cut
        .token_ids()
        .iter()
        .zip(cut.roles())
        .filter(|(&t, &r)| r == Role::Assistant && t != ASST_BEGIN && t != EOS)
        .count();
    (answer_tokens > 0).then_some(cut)
}

/// Rendered training set plus the number of items dropped by truncation.
#[derive(Clone, Debug)]
pub struct RenderedSet {
    pub items: Vec<SegmentedTokens>,
    pub skipped: usize,
}

pub fn render_training_set(examples: &[ChatExample], cutoff: usize, unified: bool) -> Result<RenderedSet> {
    let mut items = Vec::with_capacity(examples.len());
    let mut skipped = 0;
    for ex in examples {
        ex.validate(true)?;
        match truncate_training(&render_chat(ex, true), cutoff) {
            Some(seg) => items.push(apply_segmentation(seg, unified)),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} examples lost their whole answer at cutoff {cutoff} and were skipped");
    }
    Ok(RenderedSet { items, skipped })
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ChatExample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: ChatExample = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[ChatExample]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const RETRIEVAL_SYSTEM: &str = "key lookup";
const KEYS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

/// Key/value lookup whose values are the choice letters, e.g.
/// `user = "d=B e=A g=D r=B b=C p=B ?g"`, `answer = "D"`, choices `A..D`.
/// Values are drawn with replacement, so the other letters act as
/// distractors that also occur in the fact list.
pub fn gen_retrieval_task(n: usize, n_facts: usize, n_choices: usize, seed: u64) -> Result<Vec<ChatExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| retrieval_item(&mut rng, n_facts, n_choices)).collect()
}

fn retrieval_item(rng: &mut ChaCha8Rng, n_facts: usize, n_choices: usize) -> Result<ChatExample> {
    if n_facts < 2 || n_choices < 2 {
        return Err(Error::Config(format!("need at least 2 facts and 2 choices, got {n_facts} and {n_choices}")));
    }
    if n_facts > KEYS.len() || n_choices > 26 {
        return Err(Error::Config(format!("{n_facts} facts with {n_choices} choices: at most 26 of each")));
    }
    let letter = |i: usize| (b'A' + i as u8) as char;
    let keys: Vec<u8> = KEYS.choose_multiple(rng, n_facts).copied().collect();
    let values: Vec<usize> = (0..n_facts).map(|_| rng.gen_range(0..n_choices)).collect();
    let asked = rng.gen_range(0..n_facts);
    let facts: Vec<String> = keys
        .iter()
        .zip(&values)
        .map(|(&k, &v)| format!("{}={}", k as char, letter(v)))
        .collect();
    Ok(ChatExample {
        system: RETRIEVAL_SYSTEM.into(),
        user: format!("{} ?{}", facts.join(" "), keys[asked] as char),
        answer: letter(values[asked]).to_string(),
        choices: Some((0..n_choices).map(|i| letter(i).to_string()).collect()),
        task: "retrieval".into(),
    })
}

/// Train and test sets from one seed: independent streams, and any test
/// item whose prompt also occurs in train is dropped and redrawn.
pub fn gen_retrieval_split(
    n_train: usize,
    n_test: usize,
    n_facts: usize,
    n_choices: usize,
    seed: u64,
) -> Result<(Vec<ChatExample>, Vec<ChatExample>)> {
    let mut train_rng = ChaCha8Rng::seed_from_u64(seed);
    train_rng.set_stream(0);
    let train: Vec<ChatExample> = (0..n_train)
        .map(|_| retrieval_item(&mut train_rng, n_facts, n_choices))
        .collect::<Result<_>>()?;
    let seen: HashSet<&str> = train.iter().map(|e| e.user.as_str()).collect();
    let mut test_rng = ChaCha8Rng::seed_from_u64(seed);
    test_rng.set_stream(1);
    let mut test = Vec::with_capacity(n_test);
    let mut attempts = 0usize;
    while test.len() < n_test {
        attempts += 1;
        if attempts > 100 * (n_test + 1) {
            return Err(Error::Config("cannot draw enough test items disjoint from train".into()));
        }
        let ex = retrieval_item(&mut test_rng, n_facts, n_choices)?;
        if !seen.contains(ex.user.as_str()) {
            test.push(ex);
        }
    }
    Ok((train, test))
}

/// Pretraining documents: a fact list in the user turn and a run of
/// `?key=value` queries in the assistant turn, e.g.
/// `user = "m=7 b=C x=2"`, `answer = "?x=2 ?m=7 ?x=2"`.
pub fn gen_lookup_corpus(n: usize, seed: u64) -> Result<Vec<ChatExample>> {
    const LOOKUP_VALUES: &[u8] = b"0123456789ABCD";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let n_facts = rng.gen_range(2..=8);
            let keys: Vec<u8> = KEYS.choose_multiple(&mut rng, n_facts).copied().collect();
            let values: Vec<u8> = (0..n_facts).map(|_| *LOOKUP_VALUES.choose(&mut rng).unwrap()).collect();
            let facts: Vec<String> = (0..n_facts)
                .map(|i| format!("{}={}", keys[i] as char, values[i] as char))
                .collect();
            let queries: Vec<String> = (0..n_facts)
                .map(|_| {
                    let i = rng.gen_range(0..n_facts);
                    format!("?{}={}", keys[i] as char, values[i] as char)
                })
                .collect();
            ChatExample {
                system: RETRIEVAL_SYSTEM.into(),
                user: facts.join(" "),
                answer: queries.join(" "),
                choices: None,
                task: "lookup".into(),
            }
        })
        .collect())
}
