//! Sliding-window sequences and composer-labelled window pairs.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::XorShift64Star;

/// Class sizes up to this many eligible pairs are enumerated and sampled
/// exactly; larger classes use rejection sampling.
const ENUMERATION_LIMIT: u64 = 4_000_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PairError {
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("need windows from at least two composers, found {0}")]
    TooFewComposers(usize),
    #[error("insufficient {class} pairs: requested {requested}, {available} eligible")]
    InsufficientPairs {
        class: PairClass,
        requested: usize,
        available: u64,
    },
    #[error("pairs file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairClass {
    Positive,
    Negative,
}

impl fmt::Display for PairClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Positive => "positive (same-composer)",
            Self::Negative => "negative (different-composer)",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionPolicy {
    /// Only self-pairs are excluded.
    #[default]
    None,
    /// Also exclude two windows of the same piece.
    SamePiece,
    /// Also exclude two windows of the same piece whose token spans overlap.
    OverlappingWindows,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub window: usize,
    pub stride: usize,
    pub positives: usize,
    pub negatives: usize,
    pub seed: u64,
    #[serde(default)]
    pub exclusion: ExclusionPolicy,
}

impl SamplerConfig {
    /// Windows of `window` tokens with a stride of half a window.
    pub fn half_stride(
        window: usize,
        positives: usize,
        negatives: usize,
        seed: u64,
    ) -> Result<Self, PairError> {
        if window < 2 || window % 2 != 0 {
            return Err(PairError::InvalidConfig(format!(
                "half-window stride needs an even window, got {window}"
            )));
        }
        let cfg = Self {
            window,
            stride: window / 2,
            positives,
            negatives,
            seed,
            exclusion: ExclusionPolicy::None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PairError> {
        if self.window == 0 || self.stride == 0 {
            return Err(PairError::InvalidConfig(
                "window and stride must be >= 1".into(),
            ));
        }
        if self.positives == 0 || self.negatives == 0 {
            return Err(PairError::InvalidConfig(
                "positive and negative pair counts must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowRef {
    pub piece_id: String,
    pub window_index: usize,
}

impl WindowRef {
    pub fn new(piece_id: impl Into<String>, window_index: usize) -> Self {
        Self {
            piece_id: piece_id.into(),
            window_index,
        }
    }

    /// File stem used for per-window artifacts: `<piece_id>_<window_index>`.
    pub fn file_stem(&self) -> String {
        format!("{}_{}", self.piece_id, self.window_index)
    }
}

impl fmt::Display for WindowRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.piece_id, self.window_index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPiece {
    pub piece_id: String,
    pub composer_id: String,
    pub ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub piece_id: String,
    pub composer_id: String,
    pub window_index: usize,
    pub ids: Vec<u32>,
}

impl Window {
    pub fn reference(&self) -> WindowRef {
        WindowRef::new(self.piece_id.clone(), self.window_index)
    }
}

/// Unordered pair stored with `a < b`; label 1 means same composer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabeledPair {
    pub a: WindowRef,
    pub b: WindowRef,
    pub label: u8,
}

impl LabeledPair {
    pub fn new(x: WindowRef, y: WindowRef, label: u8) -> Self {
        if x <= y {
            Self { a: x, b: y, label }
        } else {
            Self { a: y, b: x, label }
        }
    }
}

/// Number of full windows: `floor((len − W) / S) + 1` for `len ≥ W`, else 0.
pub fn window_count(len: usize, window: usize, stride: usize) -> usize {
    if len < window {
        0
    } else {
        (len - window) / stride + 1
    }
}

/// Cut every piece into full windows at offsets `0, S, 2S, ...`; partial
/// trailing windows are dropped.
pub fn make_windows(pieces: &[TokenizedPiece], window: usize, stride: usize) -> Vec<Window> {
    assert!(
        window >= 1 && stride >= 1,
        "window and stride must be positive"
    );
    pieces
        .iter()
        .flat_map(|p| {
            (0..window_count(p.ids.len(), window, stride)).map(move |i| Window {
                piece_id: p.piece_id.clone(),
                composer_id: p.composer_id.clone(),
                window_index: i,
                ids: p.ids[i * stride..i * stride + window].to_vec(),
            })
        })
        .collect()
}

struct Eligibility<'a> {
    windows: &'a [Window],
    config: &'a SamplerConfig,
}

impl Eligibility<'_> {
    fn class(&self, i: usize, j: usize) -> Option<PairClass> {
        if i == j {
            return None;
        }
        let (a, b) = (&self.windows[i], &self.windows[j]);
        if a.piece_id == b.piece_id {
            let excluded = match self.config.exclusion {
                ExclusionPolicy::None => false,
                ExclusionPolicy::SamePiece => true,
                ExclusionPolicy::OverlappingWindows => {
                    a.window_index.abs_diff(b.window_index) * self.config.stride
                        < self.config.window
                }
            };
            if excluded || a.window_index == b.window_index {
                return None;
            }
        }
        Some(if a.composer_id == b.composer_id {
            PairClass::Positive
        } else {
            PairClass::Negative
        })
    }

    /// Exact eligible pair counts per class.
    fn counts(&self) -> (u64, u64) {
        let n = self.windows.len() as u64;
        let mut per_composer: BTreeMap<&str, u64> = BTreeMap::new();
        let mut per_piece: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for w in self.windows {
            *per_composer.entry(&w.composer_id).or_default() += 1;
            per_piece
                .entry(&w.piece_id)
                .or_default()
                .push(w.window_index);
        }
        let choose2 = |k: u64| k * k.saturating_sub(1) / 2;
        let same_composer: u64 = per_composer.values().map(|&k| choose2(k)).sum();
        let excluded: u64 = per_piece
            .values()
            .map(|idx| {
                let mut c = 0u64;
                for (x, &ia) in idx.iter().enumerate() {
                    for &ib in &idx[x + 1..] {
                        let drop = match self.config.exclusion {
                            ExclusionPolicy::None => ia == ib,
                            ExclusionPolicy::SamePiece => true,
                            ExclusionPolicy::OverlappingWindows => {
                                ia.abs_diff(ib) * self.config.stride < self.config.window
                            }
                        };
                        c += u64::from(drop);
                    }
                }
                c
            })
            .sum();
        (same_composer - excluded, choose2(n) - same_composer)
    }
}

fn canonical(windows: &[Window], i: usize, j: usize, label: u8) -> LabeledPair {
    LabeledPair::new(windows[i].reference(), windows[j].reference(), label)
}

/// Draw exactly `positives` same-composer and `negatives` different-composer
/// pairs, uniformly without replacement within each class.
///
/// Positives are drawn first, then negatives, from one seeded stream. The
/// returned list holds positives followed by negatives in draw order.
pub fn sample_pairs(
    windows: &[Window],
    config: &SamplerConfig,
) -> Result<Vec<LabeledPair>, PairError> {
    config.validate()?;
    let composers: HashSet<&str> = windows.iter().map(|w| w.composer_id.as_str()).collect();
    if composers.len() < 2 {
        return Err(PairError::TooFewComposers(composers.len()));
    }
    let elig = Eligibility { windows, config };
    let (pos_avail, neg_avail) = elig.counts();
    for (class, requested, available) in [
        (PairClass::Positive, config.positives, pos_avail),
        (PairClass::Negative, config.negatives, neg_avail),
    ] {
        if requested as u64 > available {
            return Err(PairError::InsufficientPairs {
                class,
                requested,
                available,
            });
        }
    }

    let mut rng = XorShift64Star::new(config.seed);
    let mut out = Vec::with_capacity(config.positives + config.negatives);
    for (class, requested, available) in [
        (PairClass::Positive, config.positives, pos_avail),
        (PairClass::Negative, config.negatives, neg_avail),
    ] {
        let label = u8::from(class == PairClass::Positive);
        if available <= ENUMERATION_LIMIT {
            let mut pool: Vec<(u32, u32)> = Vec::with_capacity(available as usize);
            for i in 0..windows.len() {
                for j in (i + 1)..windows.len() {
                    if elig.class(i, j) == Some(class) {
                        pool.push((i as u32, j as u32));
                    }
                }
            }
            debug_assert_eq!(pool.len() as u64, available);
            for k in 0..requested {
                let pick = k + rng.below((pool.len() - k) as u64) as usize;
                pool.swap(k, pick);
                let (i, j) = pool[k];
                out.push(canonical(windows, i as usize, j as usize, label));
            }
        } else {
            let n = windows.len() as u64;
            let mut taken: HashSet<(usize, usize)> = HashSet::with_capacity(requested);
            while taken.len() < requested {
                let x = rng.below(n) as usize;
                let y = rng.below(n) as usize;
                let (i, j) = (x.min(y), x.max(y));
                if elig.class(i, j) == Some(class) && taken.insert((i, j)) {
                    out.push(canonical(windows, i, j, label));
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct PairRow {
    a_piece: String,
    a_window: usize,
    b_piece: String,
    b_window: usize,
    label: u8,
}

/// CSV with header `a_piece,a_window,b_piece,b_window,label`.
pub fn write_pairs_csv(pairs: &[LabeledPair]) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    if pairs.is_empty() {
        w.write_record(["a_piece", "a_window", "b_piece", "b_window", "label"])
            .expect("in-memory write");
    }
    for p in pairs {
        w.serialize(PairRow {
            a_piece: p.a.piece_id.clone(),
            a_window: p.a.window_index,
            b_piece: p.b.piece_id.clone(),
            b_window: p.b.window_index,
            label: p.label,
        })
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

pub fn read_pairs_csv(text: &str) -> Result<Vec<LabeledPair>, PairError> {
    let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| PairError::Format(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != ["a_piece", "a_window", "b_piece", "b_window", "label"] {
        return Err(PairError::Format(format!(
            "unexpected header {}",
            header.join(",")
        )));
    }
    let mut out = Vec::new();
    for (idx, row) in r.deserialize::<PairRow>().enumerate() {
        let row = row.map_err(|e| PairError::Format(format!("row {}: {e}", idx + 1)))?;
        if row.label > 1 {
            return Err(PairError::Format(format!(
                "row {}: label {} not 0/1",
                idx + 1,
                row.label
            )));
        }
        let a = WindowRef::new(row.a_piece, row.a_window);
        let b = WindowRef::new(row.b_piece, row.b_window);
        if a == b {
            return Err(PairError::Format(format!("row {}: self-pair {a}", idx + 1)));
        }
        out.push(LabeledPair::new(a, b, row.label));
    }
    Ok(out)
}
