//! Performance-event encoding and vocabulary aggregation.
//!
//! Notes become a stream of single events (note-on, note-off, time-shift,
//! velocity). Each event kind occupies a contiguous id block:
//!
//! | block      | ids                                          |
//! |------------|----------------------------------------------|
//! | `NoteOn`   | `0..128`                                     |
//! | `NoteOff`  | `128..256`                                   |
//! | `TimeShift`| `256..256 + max_time_shift_bins`             |
//! | `Velocity` | following, `velocity_bins` ids               |
//!
//! Frequent adjacent word pairs are then merged greedily into multi-event
//! words. Tokenizing replays the recorded merges in order.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::Piece;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("target vocabulary size {target} is smaller than the {base} single events")]
    TargetTooSmall { target: usize, base: usize },
    #[error("event {0} is outside the vocabulary's configured bins")]
    IncompatibleVocabulary(PerformanceEvent),
    #[error("token id {0} is not in the vocabulary")]
    UnknownId(u32),
    #[error("invalid tokenizer config: {0}")]
    InvalidConfig(String),
    #[error("bad event code {0:?}")]
    BadEventCode(String),
    #[error("malformed vocabulary: {0}")]
    MalformedVocabulary(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PerformanceEvent {
    NoteOn(u8),
    NoteOff(u8),
    /// Number of time bins, `1..=max_time_shift_bins`.
    TimeShift(u16),
    /// Quantized velocity, `1..=velocity_bins`.
    Velocity(u8),
}

impl fmt::Display for PerformanceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NoteOn(p) => write!(f, "ON_{p}"),
            Self::NoteOff(p) => write!(f, "OFF_{p}"),
            Self::TimeShift(b) => write!(f, "TS_{b}"),
            Self::Velocity(b) => write!(f, "VEL_{b}"),
        }
    }
}

impl FromStr for PerformanceEvent {
    type Err = TokenizerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || TokenizerError::BadEventCode(s.to_string());
        let (kind, value) = s.split_once('_').ok_or_else(bad)?;
        match kind {
            "ON" => value.parse().map(Self::NoteOn).map_err(|_| bad()),
            "OFF" => value.parse().map(Self::NoteOff).map_err(|_| bad()),
            "TS" => value.parse().map(Self::TimeShift).map_err(|_| bad()),
            "VEL" => value.parse().map(Self::Velocity).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

impl Serialize for PerformanceEvent {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PerformanceEvent {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub time_shift_bin_ms: u32,
    pub max_time_shift_bins: u16,
    pub velocity_bins: u8,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            time_shift_bin_ms: 10,
            max_time_shift_bins: 100,
            velocity_bins: 32,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<(), TokenizerError> {
        if self.time_shift_bin_ms == 0 || self.max_time_shift_bins == 0 || self.velocity_bins == 0 {
            return Err(TokenizerError::InvalidConfig(
                "bin width and bin counts must be positive".into(),
            ));
        }
        if self.velocity_bins > 127 {
            return Err(TokenizerError::InvalidConfig(
                "velocity_bins must be at most 127".into(),
            ));
        }
        Ok(())
    }

    pub fn base_vocab_size(&self) -> usize {
        256 + usize::from(self.max_time_shift_bins) + usize::from(self.velocity_bins)
    }

    /// `ceil(velocity * bins / 128)`, in `1..=bins` for velocities `1..=127`.
    pub fn quantize_velocity(&self, velocity: u8) -> u8 {
        let bins = u32::from(self.velocity_bins);
        (u32::from(velocity) * bins).div_ceil(128).max(1) as u8
    }

    pub fn event_id(&self, event: PerformanceEvent) -> Result<u32, TokenizerError> {
        let ts_base = 256u32;
        let vel_base = ts_base + u32::from(self.max_time_shift_bins);
        match event {
            PerformanceEvent::NoteOn(p) if p < 128 => Ok(u32::from(p)),
            PerformanceEvent::NoteOff(p) if p < 128 => Ok(128 + u32::from(p)),
            PerformanceEvent::TimeShift(b) if (1..=self.max_time_shift_bins).contains(&b) => {
                Ok(ts_base + u32::from(b) - 1)
            }
            PerformanceEvent::Velocity(b) if (1..=self.velocity_bins).contains(&b) => {
                Ok(vel_base + u32::from(b) - 1)
            }
            _ => Err(TokenizerError::IncompatibleVocabulary(event)),
        }
    }

    pub fn event_from_id(&self, id: u32) -> Option<PerformanceEvent> {
        let ts_base = 256u32;
        let vel_base = ts_base + u32::from(self.max_time_shift_bins);
        let end = vel_base + u32::from(self.velocity_bins);
        match id {
            0..=127 => Some(PerformanceEvent::NoteOn(id as u8)),
            128..=255 => Some(PerformanceEvent::NoteOff((id - 128) as u8)),
            _ if id < vel_base => Some(PerformanceEvent::TimeShift((id - ts_base + 1) as u16)),
            _ if id < end => Some(PerformanceEvent::Velocity((id - vel_base + 1) as u8)),
            _ => None,
        }
    }
}

/// Encode a piece's notes as performance events.
///
/// Times are quantized to whole bins. At equal times note-offs precede
/// note-ons (each group ordered by pitch); a note always lasts at least one
/// bin. Gaps are emitted as greedy `TimeShift` runs, largest bin first.
pub fn events_from_notes(piece: &Piece, config: &TokenizerConfig) -> Vec<PerformanceEvent> {
    let bin_s = f64::from(config.time_shift_bin_ms) / 1000.0;
    let quantize = |t: f64| (t / bin_s).round() as u64;

    // (bin, 0 = off / 1 = on, pitch, velocity)
    let mut actions: Vec<(u64, u8, u8, u8)> = Vec::with_capacity(piece.notes.len() * 2);
    for n in &piece.notes {
        let on = quantize(n.onset_seconds);
        let off = quantize(n.offset_seconds()).max(on + 1);
        actions.push((on, 1, n.pitch, n.velocity));
        actions.push((off, 0, n.pitch, 0));
    }
    actions.sort_unstable();

    let max_shift = u64::from(config.max_time_shift_bins);
    let mut events = Vec::with_capacity(actions.len() * 2);
    let mut now = 0u64;
    let mut current_velocity: Option<u8> = None;
    for (bin, kind, pitch, velocity) in actions {
        let mut gap = bin - now;
        while gap > 0 {
            let step = gap.min(max_shift);
            events.push(PerformanceEvent::TimeShift(step as u16));
            gap -= step;
        }
        now = bin;
        if kind == 1 {
            let q = config.quantize_velocity(velocity);
            if current_velocity != Some(q) {
                events.push(PerformanceEvent::Velocity(q));
                current_velocity = Some(q);
            }
            events.push(PerformanceEvent::NoteOn(pitch));
        } else {
            events.push(PerformanceEvent::NoteOff(pitch));
        }
    }
    events
}

pub fn event_ids(
    events: &[PerformanceEvent],
    config: &TokenizerConfig,
) -> Result<Vec<u32>, TokenizerError> {
    events.iter().map(|&e| config.event_id(e)).collect()
}

/// Single events plus aggregated multi-event words and the merges that
/// produced them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    config: TokenizerConfig,
    words: Vec<Vec<PerformanceEvent>>,
    merges: Vec<(u32, u32)>,
    merge_rank: HashMap<(u32, u32), u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    version: u32,
    config: TokenizerConfig,
    words: Vec<Vec<PerformanceEvent>>,
    merges: Vec<[u32; 2]>,
}

impl Vocabulary {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn base(config: TokenizerConfig) -> Result<Self, TokenizerError> {
        config.validate()?;
        let words = (0..config.base_vocab_size() as u32)
            .map(|id| vec![config.event_from_id(id).expect("id inside base block")])
            .collect();
        Ok(Self {
            config,
            words,
            merges: Vec::new(),
            merge_rank: HashMap::new(),
        })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn base_len(&self) -> usize {
        self.config.base_vocab_size()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn word(&self, id: u32) -> Option<&[PerformanceEvent]> {
        self.words.get(id as usize).map(Vec::as_slice)
    }

    fn push_merge(&mut self, left: u32, right: u32) -> u32 {
        let new_id = self.words.len() as u32;
        let mut word = self.words[left as usize].clone();
        word.extend_from_slice(&self.words[right as usize]);
        self.words.push(word);
        self.merge_rank
            .insert((left, right), self.merges.len() as u32);
        self.merges.push((left, right));
        new_id
    }

    /// Apply the recorded merges to single-event ids.
    pub fn tokenize(&self, events: &[PerformanceEvent]) -> Result<Vec<u32>, TokenizerError> {
        let mut ids = event_ids(events, &self.config)?;
        // Merging lowest-ranked pairs first is equivalent to replaying the
        // rules in order: a merge only creates adjacencies involving its own
        // new id, which no earlier rule can reference.
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.merge_rank.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let (left, right) = self.merges[rank as usize];
            ids = replace_pair(&ids, left, right, self.base_len() as u32 + rank);
        }
        Ok(ids)
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<Vec<PerformanceEvent>, TokenizerError> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            let word = self.word(id).ok_or(TokenizerError::UnknownId(id))?;
            out.extend_from_slice(word);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let file = VocabularyFile {
            version: Self::FORMAT_VERSION,
            config: self.config,
            words: self.words.clone(),
            merges: self.merges.iter().map(|&(a, b)| [a, b]).collect(),
        };
        serde_json::to_string(&file).expect("vocabulary serializes")
    }

    /// Parse and fully re-validate a serialized vocabulary.
    pub fn from_json(text: &str) -> Result<Self, TokenizerError> {
        let bad = |m: String| TokenizerError::MalformedVocabulary(m);
        let file: VocabularyFile = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if file.version != Self::FORMAT_VERSION {
            return Err(bad(format!("unsupported version {}", file.version)));
        }
        let mut vocab = Self::base(file.config)?;
        if file.words.len() != vocab.len() + file.merges.len() {
            return Err(bad(format!(
                "{} words but {} base events and {} merges",
                file.words.len(),
                vocab.len(),
                file.merges.len()
            )));
        }
        if file.words[..vocab.len()] != vocab.words[..] {
            return Err(bad("single-event block does not match config".into()));
        }
        for [left, right] in file.merges {
            if left as usize >= vocab.len() || right as usize >= vocab.len() {
                return Err(bad(format!(
                    "merge ({left}, {right}) references a later word"
                )));
            }
            let id = vocab.push_merge(left, right);
            if vocab.words[id as usize] != file.words[id as usize] {
                return Err(bad(format!("word {id} does not match its merge parents")));
            }
        }
        Ok(vocab)
    }
}

fn replace_pair(ids: &[u32], left: u32, right: u32, merged: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == left && ids[i + 1] == right {
            out.push(merged);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

fn count_pairs(
    sequences: &[Vec<u32>],
    word_len: &[usize],
    max_word_events: usize,
) -> HashMap<(u32, u32), u64> {
    sequences
        .par_iter()
        .fold(HashMap::new, |mut acc: HashMap<(u32, u32), u64>, seq| {
            for w in seq.windows(2) {
                if word_len[w[0] as usize] + word_len[w[1] as usize] <= max_word_events {
                    *acc.entry((w[0], w[1])).or_default() += 1;
                }
            }
            acc
        })
        .reduce(HashMap::new, |mut a, b| {
            for (k, v) in b {
                *a.entry(k).or_default() += v;
            }
            a
        })
}

/// Greedy pair merging over single-event id sequences.
///
/// Each round merges the most frequent adjacent pair (ties go to the
/// smaller `(left, right)`), skipping pairs whose expansion would exceed
/// `max_word_events`. Stops at `target_size` words or when no pair occurs
/// at least twice.
pub fn build_vocabulary(
    corpora: &[Vec<u32>],
    config: TokenizerConfig,
    target_size: usize,
    max_word_events: usize,
) -> Result<Vocabulary, TokenizerError> {
    let mut vocab = Vocabulary::base(config)?;
    if target_size < vocab.len() {
        return Err(TokenizerError::TargetTooSmall {
            target: target_size,
            base: vocab.len(),
        });
    }
    for seq in corpora {
        if let Some(&bad) = seq.iter().find(|&&id| id as usize >= vocab.len()) {
            return Err(TokenizerError::UnknownId(bad));
        }
    }
    let mut sequences: Vec<Vec<u32>> = corpora.to_vec();
    let mut word_len: Vec<usize> = vec![1; vocab.len()];

    while vocab.len() < target_size {
        let counts = count_pairs(&sequences, &word_len, max_word_events);
        let best = counts
            .into_iter()
            .filter(|&(_, c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then(pb.cmp(pa)));
        let Some(((left, right), _)) = best else {
            break;
        };
        let id = vocab.push_merge(left, right);
        word_len.push(word_len[left as usize] + word_len[right as usize]);
        sequences
            .par_iter_mut()
            .for_each(|seq| *seq = replace_pair(seq, left, right, id));
    }
    Ok(vocab)
}

/// One line of a token-sequence JSON-lines file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub piece_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub composer_id: Option<String>,
    pub ids: Vec<u32>,
}
