//! Forced-alignment ingestion, frame labelling, contrastive pair sampling
//! and phoneme-level compression of frame features.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::ops::Range;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const TSV_HEADER: &str = "#ctvc-align-v1";

/// Final-boundary rounding slack, in frames.
pub const FRAME_TOLERANCE: usize = 2;

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("alignment coverage error: {0}")]
    Coverage(String),
    #[error("alignment covers {derived} frames, expected {expected}")]
    FrameCountMismatch { derived: usize, expected: usize },
    #[error("content has {content} frames, alignment has {alignment}")]
    LengthMismatch { content: usize, alignment: usize },
    #[error("phoneme matrix has {rows} rows, alignment has {segments} segments")]
    SegmentCountMismatch { rows: usize, segments: usize },
    #[error("need at least 2 frames to sample pairs, got {0}")]
    TooFewFrames(usize),
    #[error("invalid pair sampling config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AlignmentError>;

pub type PhonemeId = u32;

/// Interns phoneme labels to dense ids shared across a corpus.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhonemeInventory {
    ids: BTreeMap<String, PhonemeId>,
    names: Vec<String>,
}

impl PhonemeInventory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, label: &str) -> PhonemeId {
        if let Some(&id) = self.ids.get(label) {
            return id;
        }
        let id = self.names.len() as PhonemeId;
        self.ids.insert(label.to_string(), id);
        self.names.push(label.to_string());
        id
    }

    pub fn id(&self, label: &str) -> Option<PhonemeId> {
        self.ids.get(label).copied()
    }

    pub fn name(&self, id: PhonemeId) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub phoneme: PhonemeId,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhonemeAlignment {
    segments: Vec<Segment>,
    total_frames: usize,
}

impl PhonemeAlignment {
    /// Validates contiguity, non-emptiness and full coverage.
    pub fn new(segments: Vec<Segment>, total_frames: usize) -> Result<Self> {
        let Some(first) = segments.first() else {
            return Err(AlignmentError::Coverage("no segments".into()));
        };
        if first.start != 0 {
            return Err(AlignmentError::Coverage(format!(
                "first segment starts at frame {}",
                first.start
            )));
        }
        for (k, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                return Err(AlignmentError::Coverage(format!("segment {k} is empty")));
            }
            if let Some(next) = segments.get(k + 1) {
                if next.start != seg.end {
                    return Err(AlignmentError::Coverage(format!(
                        "segment {k} ends at {} but segment {} starts at {}",
                        seg.end,
                        k + 1,
                        next.start
                    )));
                }
            }
        }
        let last = segments.last().unwrap().end;
        if last != total_frames {
            return Err(AlignmentError::Coverage(format!(
                "segments end at {last}, total is {total_frames}"
            )));
        }
        Ok(Self {
            segments,
            total_frames,
        })
    }

    /// Builds an alignment from consecutive `(phoneme, duration)` runs.
    pub fn from_durations(runs: &[(PhonemeId, usize)]) -> Result<Self> {
        let mut start = 0;
        let segments = runs
            .iter()
            .map(|&(phoneme, d)| {
                let seg = Segment {
                    phoneme,
                    start,
                    end: start + d,
                };
                start += d;
                seg
            })
            .collect();
        Self::new(segments, start)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_frames(&self) -> usize {
        self.total_frames
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn durations(&self) -> Vec<usize> {
        self.segments.iter().map(Segment::len).collect()
    }

    pub fn segment_ranges(&self) -> Vec<Range<usize>> {
        self.segments.iter().map(Segment::range).collect()
    }

    /// Index of the segment containing each frame.
    pub fn frame_to_segment(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total_frames);
        for (k, seg) in self.segments.iter().enumerate() {
            out.extend(std::iter::repeat_n(k, seg.len()));
        }
        out
    }

    /// Restricts to frames `[start, start + len)`, clipping segments.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        let end = start + len;
        let segments = self
            .segments
            .iter()
            .filter(|s| s.end > start && s.start < end)
            .map(|s| Segment {
                phoneme: s.phoneme,
                start: s.start.max(start) - start,
                end: s.end.min(end) - start,
            })
            .collect();
        Self::new(segments, len)
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>, inventory: &PhonemeInventory) -> Result<()> {
        let mut out = String::from(TSV_HEADER);
        out.push('\n');
        for s in &self.segments {
            let name = inventory.name(s.phoneme).unwrap_or("?");
            out.push_str(&format!("{name}\t{}\t{}\n", s.start, s.end));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Reads a native TSV alignment or a Praat long-format TextGrid (tier
/// "phones", seconds converted with `round(t / hop_seconds)`).
pub fn parse_alignment(
    path: impl AsRef<Path>,
    expected_frames: usize,
    hop_seconds: f64,
    inventory: &mut PhonemeInventory,
) -> Result<PhonemeAlignment> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let raw = if first.trim_start().starts_with(TSV_HEADER) {
        parse_tsv(path, &text)?
    } else if text.contains("ooTextFile") {
        parse_textgrid(path, &text, hop_seconds)?
    } else {
        return Err(AlignmentError::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected '{TSV_HEADER}' header or a TextGrid"),
        });
    };
    let segments = raw
        .into_iter()
        .map(|(label, start, end)| Segment {
            phoneme: inventory.intern(&label),
            start,
            end,
        })
        .collect();
    fit_to_frames(segments, expected_frames)
}

fn fit_to_frames(mut segments: Vec<Segment>, expected: usize) -> Result<PhonemeAlignment> {
    let derived = segments.last().map(|s| s.end).unwrap_or(0);
    if derived.abs_diff(expected) > FRAME_TOLERANCE {
        return Err(AlignmentError::FrameCountMismatch { derived, expected });
    }
    // Drop trailing segments that start past the expected end, then clamp.
    while segments.len() > 1 && segments.last().unwrap().start >= expected {
        segments.pop();
    }
    if let Some(last) = segments.last_mut() {
        last.end = expected;
    }
    PhonemeAlignment::new(segments, expected)
}

fn parse_tsv(path: &Path, text: &str) -> Result<Vec<(String, usize, usize)>> {
    let err = |line: usize, msg: String| AlignmentError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(err(n + 1, format!("expected 3 columns, found {}", cols.len())));
        }
        let start: usize = cols[1]
            .trim()
            .parse()
            .map_err(|e| err(n + 1, format!("bad start frame: {e}")))?;
        let end: usize = cols[2]
            .trim()
            .parse()
            .map_err(|e| err(n + 1, format!("bad end frame: {e}")))?;
        out.push((cols[0].trim().to_string(), start, end));
    }
    if out.is_empty() {
        return Err(err(1, "no segments".into()));
    }
    Ok(out)
}

fn parse_textgrid(path: &Path, text: &str, hop_seconds: f64) -> Result<Vec<(String, usize, usize)>> {
    let err = |line: usize, msg: String| AlignmentError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    if !(hop_seconds > 0.0) {
        return Err(err(0, "hop_seconds must be positive".into()));
    }
    let value = |line: &str| -> Option<String> {
        line.split_once('=')
            .map(|(_, v)| v.trim().trim_matches('"').to_string())
    };

    let mut in_phones = false;
    let mut in_interval = false;
    let mut cur: (Option<f64>, Option<f64>) = (None, None);
    let mut intervals: Vec<(String, f64, f64)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with("item [") {
            in_phones = false;
            in_interval = false;
        } else if line.starts_with("name =") {
            in_phones = value(line).as_deref() == Some("phones");
        } else if in_phones && line.starts_with("intervals [") {
            in_interval = true;
            cur = (None, None);
        } else if in_phones && in_interval {
            let parse_f = |l: &str| {
                value(l)
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| err(n + 1, format!("bad number in '{l}'")))
            };
            if line.starts_with("xmin") {
                cur.0 = Some(parse_f(line)?);
            } else if line.starts_with("xmax") {
                cur.1 = Some(parse_f(line)?);
            } else if line.starts_with("text") {
                let (Some(a), Some(b)) = cur else {
                    return Err(err(n + 1, "interval text before bounds".into()));
                };
                let label = value(line).unwrap_or_default();
                let label = if label.trim().is_empty() {
                    "sil".to_string()
                } else {
                    label
                };
                intervals.push((label, a, b));
                in_interval = false;
            }
        }
    }
    if intervals.is_empty() {
        return Err(err(0, "no 'phones' interval tier found".into()));
    }
    let mut out: Vec<(String, usize, usize)> = Vec::new();
    for (label, a, b) in intervals {
        let start = (a / hop_seconds).round() as usize;
        let end = (b / hop_seconds).round() as usize;
        if let Some(prev) = out.last() {
            if start.abs_diff(prev.2) > FRAME_TOLERANCE {
                return Err(AlignmentError::Coverage(format!(
                    "gap or overlap between frame {} and {start}",
                    prev.2
                )));
            }
        }
        // Rounding can collapse very short intervals.
        let start = out.last().map(|p| p.2).unwrap_or(start);
        if end > start {
            out.push((label, start, end));
        }
    }
    Ok(out)
}

/// Phoneme id of every frame.
pub fn frame_labels(a: &PhonemeAlignment) -> Vec<PhonemeId> {
    a.segments
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.phoneme, s.len()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePair {
    pub i: usize,
    pub j: usize,
    pub same_phoneme: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairSampleConfig {
    pub pairs_per_utterance: usize,
    pub balance_ratio: f64,
    pub rng_seed: u64,
}

impl Default for PairSampleConfig {
    fn default() -> Self {
        Self {
            pairs_per_utterance: 256,
            balance_ratio: 0.5,
            rng_seed: 0,
        }
    }
}

impl PairSampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs_per_utterance < 2 {
            return Err(AlignmentError::InvalidConfig(
                "pairs_per_utterance must be at least 2".into(),
            ));
        }
        if !(self.balance_ratio > 0.0 && self.balance_ratio < 1.0) {
            return Err(AlignmentError::InvalidConfig(
                "balance_ratio must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Degenerate {
    /// Every frame carries the same phoneme; only same-phoneme pairs exist.
    SinglePhoneme,
    /// No phoneme repeats; only cross-phoneme pairs exist.
    NoRepeats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub pairs: Vec<FramePair>,
    pub degenerate: Option<Degenerate>,
}

/// Draws `pairs_per_utterance` frame pairs, `round(M * balance_ratio)` of
/// them same-phoneme, each uniformly within its class.
pub fn sample_pairs(labels: &[PhonemeId], cfg: &PairSampleConfig) -> Result<PairSample> {
    cfg.validate()?;
    let t = labels.len();
    if t < 2 {
        return Err(AlignmentError::TooFewFrames(t));
    }
    let mut groups: BTreeMap<PhonemeId, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let count = |l: PhonemeId| groups[&l].len();
    let has_same = groups.values().any(|g| g.len() >= 2);
    let has_diff = groups.len() >= 2;

    let m = cfg.pairs_per_utterance;
    let (n_same, degenerate) = match (has_same, has_diff) {
        (true, true) => ((m as f64 * cfg.balance_ratio).round() as usize, None),
        (true, false) => (m, Some(Degenerate::SinglePhoneme)),
        (false, true) => (0, Some(Degenerate::NoRepeats)),
        (false, false) => unreachable!("t >= 2 implies some pair exists"),
    };
    let n_diff = m - n_same;

    // Frame weights so that each unordered pair of the class is equally
    // likely: pick the first frame proportionally to its number of partners,
    // then a partner uniformly.
    let same_w: Vec<f64> = labels
        .iter()
        .map(|&l| (count(l) - 1) as f64)
        .collect();
    let diff_w: Vec<f64> = labels.iter().map(|&l| (t - count(l)) as f64).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut pairs = Vec::with_capacity(m);
    for _ in 0..n_same {
        let a = weighted_index(&mut rng, &same_w);
        let group = &groups[&labels[a]];
        let b = loop {
            let b = group[rng.gen_range(0..group.len())];
            if b != a {
                break b;
            }
        };
        pairs.push(ordered(a, b, true));
    }
    for _ in 0..n_diff {
        let a = weighted_index(&mut rng, &diff_w);
        let k = rng.gen_range(0..t - count(labels[a]));
        // k-th frame whose label differs from a's
        let b = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != labels[a])
            .nth(k)
            .map(|(i, _)| i)
            .unwrap();
        pairs.push(ordered(a, b, false));
    }
    Ok(PairSample { pairs, degenerate })
}

fn ordered(a: usize, b: usize, same_phoneme: bool) -> FramePair {
    FramePair {
        i: a.min(b),
        j: a.max(b),
        same_phoneme,
    }
}

fn weighted_index(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return i;
        }
        x -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap()
}

/// Mean of the content frames inside each segment, `segments x D`.
pub fn compress(content: ArrayView2<f64>, a: &PhonemeAlignment) -> Result<Array2<f64>> {
    if content.nrows() != a.total_frames {
        return Err(AlignmentError::LengthMismatch {
            content: content.nrows(),
            alignment: a.total_frames,
        });
    }
    let mut out = Array2::zeros((a.num_segments(), content.ncols()));
    for (k, seg) in a.segments.iter().enumerate() {
        let mean = content
            .slice(ndarray::s![seg.range(), ..])
            .mean_axis(Axis(0))
            .expect("segments are non-empty");
        out.row_mut(k).assign(&mean);
    }
    Ok(out)
}

/// Repeats each phoneme-level row over its segment's frames, `T x D`.
pub fn expand(phonemes: ArrayView2<f64>, a: &PhonemeAlignment) -> Result<Array2<f64>> {
    if phonemes.nrows() != a.num_segments() {
        return Err(AlignmentError::SegmentCountMismatch {
            rows: phonemes.nrows(),
            segments: a.num_segments(),
        });
    }
    Ok(phonemes.select(Axis(0), &a.frame_to_segment()))
}
