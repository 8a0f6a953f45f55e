//! Attention-pattern atlas: per-head attention maps, a four-feature
//! classifier, PGM heatmaps and a CSV summary.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{build_mask, MaskMode, SegmentedTokens, SENTINEL};
use crate::model::{forward, ModelWeights};
use crate::numerics::{Real, Tensor};

/// Tolerance on row sums.
pub const ROW_SUM_TOL: f64 = 1e-5;
/// Largest super-diagonal offset scored as "a few steps ahead".
pub const MAX_OFFSET: usize = 4;
/// Half-width of the diagonal band.
pub const BAND: usize = 2;

/// One head's row-stochastic attention map over a segmented run.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub map: Tensor<f64>,
    pub segment_ids: Vec<i32>,
}

impl AttentionRecord {
    pub fn new(layer: usize, head: usize, map: Tensor<f64>, segment_ids: Vec<i32>) -> Result<Self> {
        let rec = Self {
            layer,
            head,
            map,
            segment_ids,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn n(&self) -> usize {
        self.segment_ids.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.segment_ids.len();
        if n == 0 {
            return Err(Error::Invalid("empty attention map".into()));
        }
        if self.map.shape() != [n, n] {
            return Err(Error::Shape(format!("map {:?} for {n} segment ids", self.map.shape())));
        }
        for i in 0..n {
            let row = self.map.row(i);
            if row.iter().any(|&a| !a.is_finite() || a < 0.0) {
                return Err(Error::Invalid(format!("row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Invalid(format!("row {i} sums to {s}")));
            }
        }
        Ok(())
    }

    fn same_block(&self, i: usize, j: usize) -> bool {
        let s = self.segment_ids[i];
        s != SENTINEL && s == self.segment_ids[j]
    }

    /// Maximal runs `[start, end)` of one prompt segment.
    fn blocks(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.n() {
            if i == self.n() || self.segment_ids[i] != self.segment_ids[start] {
                if self.segment_ids[start] != SENTINEL {
                    out.push((start, i));
                }
                start = i;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Preserved,
    BlockSpecific,
    NGram,
    ForwardLooking,
    Unclassified,
}

impl Pattern {
    pub const ALL: [Pattern; 5] = [
        Pattern::Preserved,
        Pattern::BlockSpecific,
        Pattern::NGram,
        Pattern::ForwardLooking,
        Pattern::Unclassified,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::Preserved => "preserved",
            Pattern::BlockSpecific => "block_specific",
            Pattern::NGram => "ngram",
            Pattern::ForwardLooking => "forward_looking",
            Pattern::Unclassified => "unclassified",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown pattern {s:?}")))
    }
}

/// Feature scores, each in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// Share of within-block mass that sits above the diagonal.
    pub above_diagonal: f64,
    /// Largest mean mass a single column receives from the rows of its block.
    pub vertical: f64,
    /// Mean mass within `|i - j| <= 2`.
    pub band: f64,
    /// Largest mean mass at `j = i + k` inside a block, `k` in `1..=4`.
    pub offset: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternLabel {
    pub pattern: Pattern,
    pub scores: Scores,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub forward_offset: f64,
    pub block_vertical: f64,
    pub ngram_band: f64,
    pub ngram_above: f64,
    pub preserved_above: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            forward_offset: 0.5,
            block_vertical: 0.5,
            ngram_band: 0.6,
            ngram_above: 0.05,
            preserved_above: 0.02,
        }
    }
}

pub fn scores(rec: &AttentionRecord) -> Result<Scores> {
    rec.validate()?;
    let n = rec.n();
    let a = |i: usize, j: usize| rec.map.at(i, j);

    let (mut within, mut above) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            if rec.same_block(i, j) {
                within += a(i, j);
                if j > i {
                    above += a(i, j);
                }
            }
        }
    }
    let above_diagonal = if within > 0.0 { above / within } else { 0.0 };

    // The first row of a block is excluded: under a causal mask it has
    // nowhere else to look, which would turn every short block into a line.
    let mut vertical: f64 = 0.0;
    for (start, end) in rec.blocks() {
        if end - start < 2 {
            continue;
        }
        let rows = (end - start - 1) as f64;
        for j in start..end {
            let col: f64 = (start + 1..end).map(|i| a(i, j)).sum();
            vertical = vertical.max(col / rows);
        }
    }

    let mut band = 0.0;
    for i in 0..n {
        let lo = i.saturating_sub(BAND);
        let hi = (i + BAND).min(n - 1);
        band += (lo..=hi).map(|j| a(i, j)).sum::<f64>();
    }
    band /= n as f64;

    let mut offset: f64 = 0.0;
    for k in 1..=MAX_OFFSET {
        let rows: Vec<usize> = (0..n.saturating_sub(k)).filter(|&i| rec.same_block(i, i + k)).collect();
        if !rows.is_empty() {
            let m = rows.iter().map(|&i| a(i, i + k)).sum::<f64>() / rows.len() as f64;
            offset = offset.max(m);
        }
    }

    let clamp = |x: f64| x.clamp(0.0, 1.0);
    Ok(Scores {
        above_diagonal: clamp(above_diagonal),
        vertical: clamp(vertical),
        band: clamp(band),
        offset: clamp(offset),
    })
}

pub fn decide(s: &Scores, t: &Thresholds) -> Pattern {
    if s.offset > t.forward_offset {
        Pattern::ForwardLooking
    } else if s.vertical > t.block_vertical {
        Pattern::BlockSpecific
    } else if s.band > t.ngram_band && s.above_diagonal > t.ngram_above {
        Pattern::NGram
    } else if s.above_diagonal < t.preserved_above {
        Pattern::Preserved
    } else {
        Pattern::Unclassified
    }
}

pub fn classify(rec: &AttentionRecord, t: &Thresholds) -> Result<PatternLabel> {
    let scores = scores(rec)?;
    Ok(PatternLabel {
        pattern: decide(&scores, t),
        scores,
    })
}

/// Runs the model once and returns one record per layer and head.
pub fn record_attention<T: Real>(weights: &ModelWeights<T>, seg: &SegmentedTokens, mode: MaskMode) -> Result<Vec<AttentionRecord>> {
    let mask = build_mask(seg, mode);
    let out = forward(weights, seg.token_ids(), &mask, true)?;
    out.attention
        .into_iter()
        .map(|m| AttentionRecord::new(m.layer, m.head, m.map.cast(), seg.segment_ids().to_vec()))
        .collect()
}

/// Grey level of one attention weight, rounded half-up.
pub fn pixel(a: f64) -> u8 {
    (255.0 * a + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn heatmap_pgm(rec: &AttentionRecord) -> Result<Vec<u8>> {
    let n = rec.n();
    if n == 0 {
        return Err(Error::Invalid("empty attention map".into()));
    }
    let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
    out.extend(rec.map.data().iter().map(|&a| pixel(a)));
    Ok(out)
}

/// Segment ticks written next to each heatmap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapTicks {
    pub layer: usize,
    pub head: usize,
    pub n: usize,
    /// Index of the first token of every segment run.
    pub boundaries: Vec<usize>,
    pub segment_ids: Vec<i32>,
}

pub fn ticks(rec: &AttentionRecord) -> HeatmapTicks {
    let ids = &rec.segment_ids;
    let boundaries = (0..ids.len()).filter(|&i| i == 0 || ids[i] != ids[i - 1]).collect();
    HeatmapTicks {
        layer: rec.layer,
        head: rec.head,
        n: ids.len(),
        boundaries,
        segment_ids: ids.clone(),
    }
}

/// Writes `path` (PGM) and `path` with a `.json` extension (ticks).
pub fn export_heatmap(rec: &AttentionRecord, path: &Path) -> Result<PathBuf> {
    let pgm = heatmap_pgm(rec)?;
    std::fs::write(path, pgm).map_err(|e| Error::io(path, e))?;
    let side = path.with_extension("json");
    let json = serde_json::to_vec_pretty(&ticks(rec))?;
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
    Ok(side)
}

/// Parses a binary 8-bit PGM into `(width, height, pixels)`.
pub fn read_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::Format("not an 8-bit P5 image".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let body = bytes.get(pos + 1..).ok_or_else(bad)?;
    if body.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, body.to_vec()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub layer: usize,
    pub head: usize,
    pub label: Pattern,
    pub above_diagonal: f64,
    pub vertical: f64,
    pub band: f64,
    pub offset: f64,
}

/// Classifies every record, sorted by `(layer, head)`.
pub fn summarize(records: &[AttentionRecord], t: &Thresholds) -> Result<Vec<ReportRow>> {
    let mut rows = records
        .iter()
        .map(|r| {
            let l = classify(r, t)?;
            Ok(ReportRow {
                layer: r.layer,
                head: r.head,
                label: l.pattern,
                above_diagonal: l.scores.above_diagonal,
                vertical: l.scores.vertical,
                band: l.scores.band,
                offset: l.scores.offset,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|r| (r.layer, r.head));
    Ok(rows)
}

/// Writes `out_dir/report.csv` and returns its rows.
pub fn report(records: &[AttentionRecord], out_dir: &Path, t: &Thresholds) -> Result<Vec<ReportRow>> {
    let rows = summarize(records, t)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("report.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Records, classifies and exports every head of one run:
/// `L{layer}_H{head}.pgm` (+ `.json`) and `report.csv`.
pub fn run_atlas<T: Real>(weights: &ModelWeights<T>, seg: &SegmentedTokens, mode: MaskMode, out_dir: &Path, t: &Thresholds) -> Result<Vec<ReportRow>> {
    let records = record_attention(weights, seg, mode)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for r in &records {
        export_heatmap(r, &out_dir.join(format!("L{}_H{}.pgm", r.layer, r.head)))?;
    }
    report(&records, out_dir, t)
}

fn layout(sizes: &[usize]) -> Vec<i32> {
    sizes
        .iter()
        .enumerate()
        .flat_map(|(s, &len)| std::iter::repeat_n(s as i32, len))
        .collect()
}

fn from_weights(segment_ids: Vec<i32>, weight: impl Fn(usize, usize) -> f64) -> AttentionRecord {
    let n = segment_ids.len();
    let mut map = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let total: f64 = (0..n).map(|j| weight(i, j)).sum();
        for j in 0..n {
            map.set(i, j, weight(i, j) / total);
        }
    }
    AttentionRecord {
        layer: 0,
        head: 0,
        map,
        segment_ids,
    }
}

/// Hand-built maps, one per pattern and block layout, with their labels.
pub fn fixture_corpus() -> Vec<(AttentionRecord, Pattern)> {
    let layouts: [&[usize]; 3] = [&[4, 4, 4], &[6, 10, 8], &[8, 16, 16, 8]];
    let mut out = Vec::new();
    for sizes in layouts {
        let mut ids = layout(sizes);
        ids.extend([SENTINEL; 4]);
        let n = ids.len();
        let same = |i: usize, j: usize| ids[i] != SENTINEL && ids[i] == ids[j];

        // Uniform over the causal prefix.
        let preserved = from_weights(ids.clone(), |i, j| if j <= i { 1.0 } else { 0.0 });
        out.push((preserved, Pattern::Preserved));

        // Every row of block 1 reads one token in the middle of the block.
        let start = sizes[0];
        let pick = start + sizes[1] / 2;
        let block = from_weights(ids.clone(), |i, j| {
            if ids[i] == 1 {
                if j == pick {
                    1.0
                } else {
                    0.0
                }
            } else if j <= i {
                1.0
            } else {
                0.0
            }
        });
        out.push((block, Pattern::BlockSpecific));

        // Crossed band around the diagonal inside blocks.
        let ngram = from_weights(ids.clone(), |i, j| {
            let inside = same(i, j) || j == i;
            match (inside, i.abs_diff(j)) {
                (true, 0) => 0.4,
                (true, 1) => 0.3,
                _ => 0.0,
            }
        });
        out.push((ngram, Pattern::NGram));

        // Next token inside the block; block ends and sentinels keep causal.
        let ahead = from_weights(ids.clone(), |i, j| {
            let forward = i + 1 < n && same(i, i + 1);
            if forward {
                if j == i + 1 {
                    1.0
                } else {
                    0.0
                }
            } else if j <= i {
                1.0
            } else {
                0.0
            }
        });
        out.push((ahead, Pattern::ForwardLooking));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(rows: &[Vec<f64>], ids: &[i32]) -> AttentionRecord {
        AttentionRecord::new(0, 0, Tensor::from_rows(rows).unwrap(), ids.to_vec()).unwrap()
    }

    #[test]
    fn fixtures_are_classified() {
        let t = Thresholds::default();
        let corpus = fixture_corpus();
        assert_eq!(corpus.len(), 12);
        for (r, want) in &corpus {
            r.validate().unwrap();
            let got = classify(r, &t).unwrap();
            assert_eq!(got.pattern, *want, "n = {}: {:?}", r.n(), got.scores);
        }
    }

    #[test]
    fn causal_maps_have_no_above_diagonal_mass() {
        for (r, _) in fixture_corpus() {
            let causal = from_weights(r.segment_ids.clone(), |i, j| if j <= i { r.map.at(i, j) + 1e-3 } else { 0.0 });
            let s = scores(&causal).unwrap();
            assert_eq!(s.above_diagonal, 0.0);
            assert_eq!(s.offset, 0.0);
            assert_ne!(decide(&s, &Thresholds::default()), Pattern::ForwardLooking);
        }
    }

    #[test]
    fn thresholds_are_configurable() {
        let (r, _) = &fixture_corpus()[2];
        let strict = Thresholds {
            ngram_band: 1.01,
            ..Default::default()
        };
        assert_ne!(classify(r, &strict).unwrap().pattern, Pattern::NGram);
        let json = serde_json::to_string(&Thresholds::default()).unwrap();
        assert_eq!(serde_json::from_str::<Thresholds>(&json).unwrap(), Thresholds::default());
    }

    #[test]
    fn non_stochastic_maps_are_rejected() {
        let m = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.4]]).unwrap();
        assert!(matches!(AttentionRecord::new(0, 0, m, vec![0, 0]), Err(Error::Invalid(_))));
        let m = Tensor::from_rows(&[vec![1.5, -0.5], vec![0.5, 0.5]]).unwrap();
        assert!(AttentionRecord::new(0, 0, m, vec![0, 0]).is_err());
        let m = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        assert!(matches!(AttentionRecord::new(0, 0, m, vec![0, 0, 0]), Err(Error::Shape(_))));
    }

    #[test]
    fn heatmap_pixels_round_half_up() {
        let r = rec(&[vec![1.0, 0.0], vec![0.5, 0.5]], &[0, 0]);
        let pgm = heatmap_pgm(&r).unwrap();
        let (w, h, px) = read_pgm(&pgm).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(px, vec![255, 0, 128, 128]);
        assert_eq!(pixel(0.0), 0);
        assert_eq!(pixel(1.0), 255);
    }

    #[test]
    fn empty_map_is_an_error() {
        let r = AttentionRecord {
            layer: 0,
            head: 0,
            map: Tensor::zeros(&[0, 0]),
            segment_ids: vec![],
        };
        assert!(heatmap_pgm(&r).is_err());
        assert!(classify(&r, &Thresholds::default()).is_err());
    }

    #[test]
    fn ticks_mark_segment_starts() {
        let (r, _) = &fixture_corpus()[0];
        let t = ticks(r);
        assert_eq!(t.boundaries, vec![0, 4, 8, 12]);
        assert_eq!(t.n, 16);
    }

    #[test]
    fn pattern_names_round_trip() {
        for p in Pattern::ALL {
            assert_eq!(p.as_str().parse::<Pattern>().unwrap(), p);
        }
        assert!("sideways".parse::<Pattern>().is_err());
    }
}
