//! Segment annotations and the causal / segment-bidirectional attention masks
//! built from them.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::Real;

/// Segment id carried by generated (assistant) tokens.
pub const SENTINEL: i32 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Causal,
    Mas,
}

impl MaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::Causal => "causal",
            MaskMode::Mas => "mas",
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "causal" | "ca" => Ok(MaskMode::Causal),
            "mas" => Ok(MaskMode::Mas),
            other => Err(Error::Invalid(format!("unknown mask mode {other:?}"))),
        }
    }
}

/// Token ids with one segment id and one role per token.
///
/// Prompt tokens carry segment ids `>= 0`; every id occupies a single
/// contiguous run and ids never decrease along the sequence. Assistant tokens
/// carry [`SENTINEL`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentedTokens {
    token_ids: Vec<u32>,
    segment_ids: Vec<i32>,
    roles: Vec<Role>,
}

impl SegmentedTokens {
    pub fn new(token_ids: Vec<u32>, segment_ids: Vec<i32>, roles: Vec<Role>) -> Result<Self> {
        let seg = Self {
            token_ids,
            segment_ids,
            roles,
        };
        seg.validate()?;
        Ok(seg)
    }

    /// Layout-only constructor: token ids are zero, segment 0 is the system
    /// role, other prompt segments are user, sentinels are assistant.
    pub fn from_layout(segment_ids: &[i32]) -> Result<Self> {
        let roles = segment_ids
            .iter()
            .map(|&s| match s {
                SENTINEL => Role::Assistant,
                0 => Role::System,
                _ => Role::User,
            })
            .collect();
        Self::new(vec![0; segment_ids.len()], segment_ids.to_vec(), roles)
    }

    pub fn empty() -> Self {
        Self {
            token_ids: Vec::new(),
            segment_ids: Vec::new(),
            roles: Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.token_ids.len();
        if self.segment_ids.len() != n || self.roles.len() != n {
            return Err(Error::Segments(format!(
                "{} tokens, {} segment ids, {} roles",
                n,
                self.segment_ids.len(),
                self.roles.len()
            )));
        }
        let mut last: Option<(usize, i32)> = None;
        for (i, (&s, &role)) in self.segment_ids.iter().zip(&self.roles).enumerate() {
            match (s, role) {
                (SENTINEL, Role::Assistant) => continue,
                (SENTINEL, _) => {
                    return Err(Error::Segments(format!("token {i}: sentinel on a prompt role")))
                }
                (_, Role::Assistant) => {
                    return Err(Error::Segments(format!("token {i}: assistant token in segment {s}")))
                }
                (s, _) if s < 0 => {
                    return Err(Error::Segments(format!("token {i}: negative segment id {s}")))
                }
                _ => {}
            }
            if let Some((j, prev)) = last {
                if s < prev {
                    return Err(Error::Segments(format!(
                        "token {i}: segment {s} follows segment {prev}"
                    )));
                }
                if s == prev && j + 1 != i {
                    return Err(Error::Segments(format!(
                        "segment {s} is not contiguous (tokens {j} and {i})"
                    )));
                }
            }
            last = Some((i, s));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn segment_ids(&self) -> &[i32] {
        &self.segment_ids
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    /// Number of prompt tokens before the first generated token.
    pub fn prefill_len(&self) -> usize {
        self.segment_ids
            .iter()
            .position(|&s| s == SENTINEL)
            .unwrap_or(self.len())
    }

    pub fn has_sentinel(&self) -> bool {
        self.segment_ids.contains(&SENTINEL)
    }

    /// Distinct prompt segment ids in order of appearance.
    pub fn prompt_segments(&self) -> Vec<i32> {
        let mut out: Vec<i32> = Vec::new();
        for &s in &self.segment_ids {
            if s != SENTINEL && out.last() != Some(&s) {
                out.push(s);
            }
        }
        out
    }

    /// Concatenation; the result is re-validated.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.token_ids.extend_from_slice(&other.token_ids);
        out.segment_ids.extend_from_slice(&other.segment_ids);
        out.roles.extend_from_slice(&other.roles);
        out.validate()?;
        Ok(out)
    }

    /// Appends one generated token.
    pub fn push_generated(&mut self, token: u32) {
        self.token_ids.push(token);
        self.segment_ids.push(SENTINEL);
        self.roles.push(Role::Assistant);
    }

    /// Keeps the first `len` tokens.
    pub fn truncated(&self, len: usize) -> Self {
        let len = len.min(self.len());
        Self {
            token_ids: self.token_ids[..len].to_vec(),
            segment_ids: self.segment_ids[..len].to_vec(),
            roles: self.roles[..len].to_vec(),
        }
    }

    /// Tokens `range` as a standalone sequence; fails if the slice breaks
    /// segment invariants.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        Self::new(
            self.token_ids[range.clone()].to_vec(),
            self.segment_ids[range.clone()].to_vec(),
            self.roles[range].to_vec(),
        )
    }

    pub fn with_segment_ids(&self, segment_ids: Vec<i32>) -> Result<Self> {
        Self::new(self.token_ids.clone(), segment_ids, self.roles.clone())
    }
}

/// Square boolean attention mask; `allowed(i, j)` means query `i` may attend
/// key `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn from_cells(n: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != n * n {
            return Err(shape_err!("{} mask cells for n = {n}", allowed.len()));
        }
        let mask = Self { n, allowed };
        for i in 0..n {
            if !mask.get(i, i) {
                return Err(Error::Invalid(format!("mask row {i} does not allow its own position")));
            }
        }
        Ok(mask)
    }

    pub fn causal(n: usize) -> Self {
        let allowed = (0..n).flat_map(|i| (0..n).map(move |j| j <= i)).collect();
        Self { n, allowed }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn cells(&self) -> &[bool] {
        &self.allowed
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.n..(i + 1) * self.n]
    }

    /// Rows `start..n`, row-major; the rectangular mask of queries `start..n`
    /// against all keys.
    pub fn tail_rows(&self, start: usize) -> &[bool] {
        &self.allowed[start * self.n..]
    }

    /// True where `self` allows everything `other` allows.
    pub fn covers(&self, other: &Self) -> bool {
        self.n == other.n && self.allowed.iter().zip(&other.allowed).all(|(&a, &b)| a || !b)
    }

    /// Additive form: 0 where allowed, −∞ where masked.
    pub fn additive<T: Real>(&self) -> Vec<T> {
        let neg_inf = T::from_f64(f64::NEG_INFINITY);
        self.allowed
            .iter()
            .map(|&a| if a { T::ZERO } else { neg_inf })
            .collect()
    }

    /// Binary PGM, 255 = allowed, 0 = masked.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.n, self.n).into_bytes();
        out.extend(self.allowed.iter().map(|&a| if a { 255u8 } else { 0 }));
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for AttnMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.n {
            let line: String = self.row(i).iter().map(|&a| if a { '1' } else { '0' }).collect();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

/// Causal: `j <= i`. Segment mode additionally opens every cell whose query
/// and key share a prompt segment; generated tokens stay causal.
pub fn build_mask(seg: &SegmentedTokens, mode: MaskMode) -> AttnMask {
    let n = seg.len();
    let mut mask = AttnMask::causal(n);
    if mode == MaskMode::Causal {
        return mask;
    }
    let ids = seg.segment_ids();
    // Segments are contiguous, so each block is one square run.
    let mut start = 0;
    while start < n {
        let s = ids[start];
        let mut end = start + 1;
        while end < n && ids[end] == s {
            end += 1;
        }
        if s != SENTINEL {
            for i in start..end {
                mask.allowed[i * n + start..i * n + end].fill(true);
            }
        }
        start = end;
    }
    mask
}

/// Literal per-cell evaluation of the mask predicates, kept independent of
/// [`build_mask`] for property tests.
pub fn mask_oracle(seg: &SegmentedTokens, mode: MaskMode) -> AttnMask {
    let s = seg.segment_ids();
    let n = s.len();
    let mut allowed = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            let causal = j <= i;
            let same_segment = s[i] == s[j] && s[i] != SENTINEL;
            allowed[i * n + j] = match mode {
                MaskMode::Causal => causal,
                MaskMode::Mas => causal || same_segment,
            };
        }
    }
    AttnMask { n, allowed }
}

/// Mask row of a token generated after `cache_len` cached positions.
pub fn decode_mask_row(cache_len: usize) -> Vec<bool> {
    vec![true; cache_len + 1]
}

/// Merges prompt segments: every maximal run of prompt tokens becomes one
/// segment, numbered by run (a single-turn prompt becomes segment 0).
/// Sentinels are untouched.
pub fn unify_segments(seg: &SegmentedTokens) -> SegmentedTokens {
    let mut ids = Vec::with_capacity(seg.len());
    let mut run = -1;
    let mut in_prompt = false;
    for &s in seg.segment_ids() {
        if s == SENTINEL {
            in_prompt = false;
            ids.push(SENTINEL);
        } else {
            if !in_prompt {
                run += 1;
                in_prompt = true;
            }
            ids.push(run);
        }
    }
    SegmentedTokens {
        token_ids: seg.token_ids.clone(),
        segment_ids: ids,
        roles: seg.roles.clone(),
    }
}

/// Parses `"0,0,1,-1"`.
pub fn parse_layout(text: &str) -> Result<Vec<i32>> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<i32>()
                .map_err(|_| Error::Invalid(format!("bad segment id {p:?}")))
        })
        .collect()
}
