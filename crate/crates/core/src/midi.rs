//! Performance data ingestion: a Standard MIDI File subset, a plain-text
//! note list, and CSV corpus manifests.
//!
//! The SMF reader understands format 0 and 1 files with ticks-per-quarter
//! division. Only note-on, note-off and set-tempo events affect the result;
//! every other event is parsed for its length and skipped.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TEMPO_US: u32 = 500_000;

#[derive(Debug, Error)]
pub enum MidiError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported SMF format {0} (only 0 and 1)")]
    UnsupportedFormat(u16),
    #[error("unsupported division {0:#06x}: SMPTE timecode is not supported")]
    UnsupportedDivision(u16),
    #[error("truncated chunk: {0}")]
    TruncatedChunk(String),
    #[error("malformed event in track {track} at byte {offset}: {reason}")]
    MalformedEvent {
        track: usize,
        offset: usize,
        reason: String,
    },
    #[error("line {line}: {reason}")]
    BadField { line: usize, reason: String },
    #[error("invalid note: {0}")]
    InvalidNote(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("duplicate piece_id {0:?} in manifest")]
    DuplicatePieceId(String),
    #[error("piece {piece_id}: {source}")]
    Piece {
        piece_id: String,
        #[source]
        source: Box<MidiError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One performed note.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Note {
    pub onset_seconds: f64,
    pub duration_seconds: f64,
    pub pitch: u8,
    pub velocity: u8,
}

impl Note {
    pub fn new(
        onset_seconds: f64,
        duration_seconds: f64,
        pitch: u8,
        velocity: u8,
    ) -> Result<Self, MidiError> {
        let note = Self {
            onset_seconds,
            duration_seconds,
            pitch,
            velocity,
        };
        note.validate()?;
        Ok(note)
    }

    pub fn validate(&self) -> Result<(), MidiError> {
        if !(self.onset_seconds.is_finite() && self.onset_seconds >= 0.0) {
            return Err(MidiError::InvalidNote(format!(
                "onset {} must be finite and >= 0",
                self.onset_seconds
            )));
        }
        if !(self.duration_seconds.is_finite() && self.duration_seconds > 0.0) {
            return Err(MidiError::InvalidNote(format!(
                "duration {} must be finite and > 0",
                self.duration_seconds
            )));
        }
        if self.pitch > 127 {
            return Err(MidiError::InvalidNote(format!(
                "pitch {} > 127",
                self.pitch
            )));
        }
        if !(1..=127).contains(&self.velocity) {
            return Err(MidiError::InvalidNote(format!(
                "velocity {} outside 1..=127",
                self.velocity
            )));
        }
        Ok(())
    }

    pub fn offset_seconds(&self) -> f64 {
        self.onset_seconds + self.duration_seconds
    }
}

/// Total order used for every note list: onset, then pitch, then the
/// remaining fields so equal keys still sort deterministically.
fn note_order(a: &Note, b: &Note) -> std::cmp::Ordering {
    a.onset_seconds
        .total_cmp(&b.onset_seconds)
        .then(a.pitch.cmp(&b.pitch))
        .then(a.duration_seconds.total_cmp(&b.duration_seconds))
        .then(a.velocity.cmp(&b.velocity))
}

pub fn sort_notes(notes: &mut [Note]) {
    notes.sort_by(note_order);
}

/// Events the SMF reader skipped instead of failing on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseWarning {
    UnmatchedNoteOff {
        track: usize,
        tick: u64,
        channel: u8,
        pitch: u8,
    },
    UnclosedNote {
        track: usize,
        tick: u64,
        channel: u8,
        pitch: u8,
    },
    ZeroLengthNote {
        track: usize,
        tick: u64,
        channel: u8,
        pitch: u8,
    },
}

impl fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::UnmatchedNoteOff {
                track,
                tick,
                channel,
                pitch,
            } => write!(
                f,
                "track {track} tick {tick}: note-off ch {channel} pitch {pitch} has no open note"
            ),
            Self::UnclosedNote {
                track,
                tick,
                channel,
                pitch,
            } => write!(
                f,
                "track {track} tick {tick}: note ch {channel} pitch {pitch} never closed"
            ),
            Self::ZeroLengthNote {
                track,
                tick,
                channel,
                pitch,
            } => write!(
                f,
                "track {track} tick {tick}: note ch {channel} pitch {pitch} has zero length"
            ),
        }
    }
}

/// Parsed notes without piece metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NoteStream {
    pub notes: Vec<Note>,
    pub warnings: Vec<ParseWarning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub piece_id: String,
    pub composer_id: String,
    pub notes: Vec<Note>,
}

// ---------------------------------------------------------------------------
// SMF reader

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.remaining() < n {
            return None;
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Some(out)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32_be(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Variable-length quantity, at most four bytes.
    fn vlq(&mut self) -> Option<Result<u32, ()>> {
        let mut value: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Some(Ok(value));
            }
        }
        Some(Err(()))
    }
}

#[derive(Debug, Clone, Copy)]
enum NoteEvent {
    On {
        channel: u8,
        pitch: u8,
        velocity: u8,
    },
    Off {
        channel: u8,
        pitch: u8,
    },
}

#[derive(Default)]
struct TrackData {
    notes: Vec<(u64, NoteEvent)>,
    tempos: Vec<(u64, u32)>,
}

fn parse_track(data: &[u8], track: usize) -> Result<TrackData, MidiError> {
    let mut cur = Cursor::new(data);
    let mut out = TrackData::default();
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    let malformed = |offset: usize, reason: &str| MidiError::MalformedEvent {
        track,
        offset,
        reason: reason.to_string(),
    };
    let truncated = || MidiError::TruncatedChunk(format!("track {track} ends mid-event"));

    while cur.remaining() > 0 {
        let start = cur.pos;
        let delta = cur
            .vlq()
            .ok_or_else(truncated)?
            .map_err(|_| malformed(start, "delta time longer than 4 bytes"))?;
        tick += u64::from(delta);

        let first = cur.u8().ok_or_else(truncated)?;
        let status = if first >= 0x80 {
            first
        } else {
            // Running status: the byte just read is the first data byte.
            cur.pos -= 1;
            running.ok_or_else(|| malformed(start, "data byte without running status"))?
        };

        match status {
            0xFF => {
                running = None;
                let kind = cur.u8().ok_or_else(truncated)?;
                let len = cur
                    .vlq()
                    .ok_or_else(truncated)?
                    .map_err(|_| malformed(start, "meta length longer than 4 bytes"))?;
                let payload = cur.take(len as usize).ok_or_else(truncated)?;
                match kind {
                    0x2F => break,
                    0x51 => {
                        if payload.len() != 3 {
                            return Err(malformed(start, "set-tempo payload is not 3 bytes"));
                        }
                        let tempo = u32::from_be_bytes([0, payload[0], payload[1], payload[2]]);
                        if tempo == 0 {
                            return Err(malformed(start, "set-tempo of zero"));
                        }
                        out.tempos.push((tick, tempo));
                    }
                    _ => {}
                }
            }
            0xF0 | 0xF7 => {
                running = None;
                let len = cur
                    .vlq()
                    .ok_or_else(truncated)?
                    .map_err(|_| malformed(start, "sysex length longer than 4 bytes"))?;
                cur.take(len as usize).ok_or_else(truncated)?;
            }
            0xF1..=0xFE => {
                return Err(malformed(start, "system message inside a track"));
            }
            _ => {
                running = Some(status);
                let channel = status & 0x0f;
                let data_len = match status & 0xf0 {
                    0xC0 | 0xD0 => 1,
                    _ => 2,
                };
                let body = cur.take(data_len).ok_or_else(truncated)?;
                if body.iter().any(|&b| b >= 0x80) {
                    return Err(malformed(start, "data byte with high bit set"));
                }
                match status & 0xf0 {
                    0x90 if body[1] > 0 => out.notes.push((
                        tick,
                        NoteEvent::On {
                            channel,
                            pitch: body[0],
                            velocity: body[1],
                        },
                    )),
                    0x90 | 0x80 => out.notes.push((
                        tick,
                        NoteEvent::Off {
                            channel,
                            pitch: body[0],
                        },
                    )),
                    _ => {}
                }
            }
        }
    }
    Ok(out)
}

/// Piecewise-linear tick to seconds map built from set-tempo events.
struct TempoMap {
    division: u64,
    // (start tick, tempo in µs per quarter, accumulated tick·µs before start)
    segments: Vec<(u64, u64, u128)>,
}

impl TempoMap {
    fn new(division: u16, mut changes: Vec<(u64, u32)>) -> Self {
        changes.sort_by_key(|&(tick, _)| tick);
        let mut segments: Vec<(u64, u64, u128)> = vec![(0, u64::from(DEFAULT_TEMPO_US), 0)];
        for (tick, tempo) in changes {
            let &(start, prev_tempo, acc) = segments.last().expect("non-empty");
            if tick == start {
                // A later change at the same tick wins.
                segments.last_mut().expect("non-empty").1 = u64::from(tempo);
            } else {
                let acc = acc + u128::from(tick - start) * u128::from(prev_tempo);
                segments.push((tick, u64::from(tempo), acc));
            }
        }
        Self {
            division: u64::from(division),
            segments,
        }
    }

    fn seconds(&self, tick: u64) -> f64 {
        let idx = self
            .segments
            .partition_point(|&(start, _, _)| start <= tick)
            - 1;
        let (start, tempo, acc) = self.segments[idx];
        let total = acc + u128::from(tick - start) * u128::from(tempo);
        total as f64 / (self.division as f64 * 1e6)
    }
}

/// Convert a tick count under a single tempo to seconds, using the same
/// arithmetic as the reader.
pub fn ticks_to_seconds(ticks: u64, tempo_us: u32, division: u16) -> f64 {
    let total = u128::from(ticks) * u128::from(tempo_us);
    total as f64 / (f64::from(division) * 1e6)
}

pub fn parse_smf(bytes: &[u8]) -> Result<NoteStream, MidiError> {
    let mut cur = Cursor::new(bytes);
    let magic = cur
        .take(4)
        .ok_or_else(|| MidiError::MalformedHeader("file shorter than a chunk header".into()))?;
    if magic != b"MThd" {
        return Err(MidiError::MalformedHeader(format!(
            "expected \"MThd\", found {magic:02x?}"
        )));
    }
    let len = cur
        .u32_be()
        .ok_or_else(|| MidiError::MalformedHeader("missing header length".into()))?;
    if len < 6 {
        return Err(MidiError::MalformedHeader(format!(
            "header length {len} < 6"
        )));
    }
    let header = cur
        .take(len as usize)
        .ok_or_else(|| MidiError::TruncatedChunk("header chunk".into()))?;
    let format = u16::from_be_bytes([header[0], header[1]]);
    let ntracks = u16::from_be_bytes([header[2], header[3]]);
    let division = u16::from_be_bytes([header[4], header[5]]);
    if format > 1 {
        return Err(MidiError::UnsupportedFormat(format));
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::UnsupportedDivision(division));
    }
    if division == 0 {
        return Err(MidiError::MalformedHeader("division of zero ticks".into()));
    }

    let mut tracks = Vec::new();
    while cur.remaining() > 0 && tracks.len() < ntracks as usize {
        let kind = cur
            .take(4)
            .ok_or_else(|| MidiError::TruncatedChunk("chunk header".into()))?;
        let len = cur
            .u32_be()
            .ok_or_else(|| MidiError::TruncatedChunk("chunk length".into()))?;
        let body = cur.take(len as usize).ok_or_else(|| {
            MidiError::TruncatedChunk(format!(
                "chunk declares {len} bytes, {} available",
                cur.remaining()
            ))
        })?;
        if kind == b"MTrk" {
            tracks.push(parse_track(body, tracks.len())?);
        }
    }
    if tracks.len() < ntracks as usize {
        return Err(MidiError::TruncatedChunk(format!(
            "header declares {ntracks} tracks, found {}",
            tracks.len()
        )));
    }

    let tempo_map = TempoMap::new(
        division,
        tracks
            .iter()
            .flat_map(|t| t.tempos.iter().copied())
            .collect(),
    );

    let mut stream = NoteStream::default();
    for (track_idx, track) in tracks.iter().enumerate() {
        let mut open: HashMap<(u8, u8), VecDeque<(u64, u8)>> = HashMap::new();
        for &(tick, event) in &track.notes {
            match event {
                NoteEvent::On {
                    channel,
                    pitch,
                    velocity,
                } => open
                    .entry((channel, pitch))
                    .or_default()
                    .push_back((tick, velocity)),
                NoteEvent::Off { channel, pitch } => {
                    match open.get_mut(&(channel, pitch)).and_then(|q| q.pop_front()) {
                        Some((start, velocity)) if start < tick => {
                            let onset = tempo_map.seconds(start);
                            stream.notes.push(Note {
                                onset_seconds: onset,
                                duration_seconds: tempo_map.seconds(tick) - onset,
                                pitch,
                                velocity,
                            });
                        }
                        Some((start, _)) => stream.warnings.push(ParseWarning::ZeroLengthNote {
                            track: track_idx,
                            tick: start,
                            channel,
                            pitch,
                        }),
                        None => stream.warnings.push(ParseWarning::UnmatchedNoteOff {
                            track: track_idx,
                            tick,
                            channel,
                            pitch,
                        }),
                    }
                }
            }
        }
        let mut leftovers: Vec<_> = open
            .into_iter()
            .flat_map(|((channel, pitch), q)| {
                q.into_iter()
                    .map(move |(tick, _)| ParseWarning::UnclosedNote {
                        track: track_idx,
                        tick,
                        channel,
                        pitch,
                    })
            })
            .collect();
        leftovers.sort_by_key(|w| match *w {
            ParseWarning::UnclosedNote {
                tick,
                channel,
                pitch,
                ..
            } => (tick, channel, pitch),
            _ => unreachable!(),
        });
        stream.warnings.extend(leftovers);
    }
    sort_notes(&mut stream.notes);
    Ok(stream)
}

// ---------------------------------------------------------------------------
// SMF writer

#[derive(Debug, Clone, Copy)]
pub struct SmfWriteOptions {
    pub division: u16,
    pub tempo_us: u32,
    pub channel: u8,
    /// Encode note-offs as note-on with velocity 0.
    pub zero_velocity_off: bool,
}

impl Default for SmfWriteOptions {
    fn default() -> Self {
        Self {
            division: 480,
            tempo_us: DEFAULT_TEMPO_US,
            channel: 0,
            zero_velocity_off: false,
        }
    }
}

fn push_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (value & 0x7f) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        let more = if i > 0 { 0x80 } else { 0 };
        out.push(buf[i] | more);
    }
}

/// Write notes as a format-0 file with one tempo. Times are rounded to the
/// nearest tick. Running status is used whenever the status byte repeats.
pub fn write_smf(notes: &[Note], opts: SmfWriteOptions) -> Vec<u8> {
    let to_tick = |sec: f64| -> u64 {
        (sec * 1e6 * f64::from(opts.division) / f64::from(opts.tempo_us)).round() as u64
    };
    // (tick, order, status, data1, data2): offs sort before ons at equal ticks.
    let mut events: Vec<(u64, u8, u8, u8, u8)> = Vec::with_capacity(notes.len() * 2);
    for n in notes {
        events.push((
            to_tick(n.onset_seconds),
            1,
            0x90 | opts.channel,
            n.pitch,
            n.velocity,
        ));
        let off = if opts.zero_velocity_off {
            (0x90 | opts.channel, 0)
        } else {
            (0x80 | opts.channel, 64)
        };
        events.push((to_tick(n.offset_seconds()), 0, off.0, n.pitch, off.1));
    }
    events.sort_by_key(|&(tick, order, _, pitch, _)| (tick, order, pitch));

    let mut track = Vec::new();
    push_vlq(&mut track, 0);
    track.extend_from_slice(&[0xFF, 0x51, 0x03]);
    track.extend_from_slice(&opts.tempo_us.to_be_bytes()[1..]);
    let mut last_tick = 0u64;
    let mut running: Option<u8> = None;
    for (tick, _, status, d1, d2) in events {
        push_vlq(&mut track, (tick - last_tick) as u32);
        last_tick = tick;
        if running != Some(status) {
            track.push(status);
            running = Some(status);
        }
        track.extend_from_slice(&[d1, d2]);
    }
    push_vlq(&mut track, 0);
    track.extend_from_slice(&[0xFF, 0x2F, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&opts.division.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    out
}

// ---------------------------------------------------------------------------
// Text note format

/// Parse `onset duration pitch velocity` lines; `#` starts a comment.
pub fn parse_note_text(text: &str) -> Result<NoteStream, MidiError> {
    let mut notes = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |reason: String| MidiError::BadField {
            line: line_no,
            reason,
        };
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", fields.len())));
        }
        let real = |s: &str, name: &str| -> Result<f64, MidiError> {
            s.parse::<f64>()
                .map_err(|_| bad(format!("{name} {s:?} is not a number")))
        };
        let int = |s: &str, name: &str, lo: i64, hi: i64| -> Result<u8, MidiError> {
            let v = s
                .parse::<i64>()
                .map_err(|_| bad(format!("{name} {s:?} is not an integer")))?;
            if !(lo..=hi).contains(&v) {
                return Err(bad(format!("{name} {v} outside {lo}..={hi}")));
            }
            Ok(v as u8)
        };
        let onset = real(fields[0], "onset")?;
        let duration = real(fields[1], "duration")?;
        let pitch = int(fields[2], "pitch", 0, 127)?;
        let velocity = int(fields[3], "velocity", 1, 127)?;
        if !(onset.is_finite() && onset >= 0.0) {
            return Err(bad(format!("onset {onset} must be >= 0")));
        }
        if !(duration.is_finite() && duration > 0.0) {
            return Err(bad(format!("duration {duration} must be > 0")));
        }
        notes.push(Note {
            onset_seconds: onset,
            duration_seconds: duration,
            pitch,
            velocity,
        });
    }
    sort_notes(&mut notes);
    Ok(NoteStream {
        notes,
        warnings: Vec::new(),
    })
}

pub fn write_note_text(notes: &[Note]) -> String {
    let mut out = String::new();
    for n in notes {
        out.push_str(&format!(
            "{} {} {} {}\n",
            n.onset_seconds, n.duration_seconds, n.pitch, n.velocity
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Corpus manifests

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub piece_id: String,
    pub composer_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    pub format_version: u32,
}

impl CorpusManifest {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self, MidiError> {
        let manifest = Self {
            entries,
            format_version: Self::FORMAT_VERSION,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<(), MidiError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.piece_id.is_empty() {
                return Err(MidiError::Manifest("empty piece_id".into()));
            }
            if e.composer_id.is_empty() {
                return Err(MidiError::Manifest(format!(
                    "piece {:?} has an empty composer_id",
                    e.piece_id
                )));
            }
            if !seen.insert(e.piece_id.as_str()) {
                return Err(MidiError::DuplicatePieceId(e.piece_id.clone()));
            }
        }
        Ok(())
    }

    /// Parse a `path,piece_id,composer_id` CSV. Relative paths are resolved
    /// against `base_dir`.
    pub fn from_csv(text: &str, base_dir: &Path) -> Result<Self, MidiError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| MidiError::Manifest(e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "piece_id", "composer_id"] {
            return Err(MidiError::Manifest(format!(
                "expected header path,piece_id,composer_id, found {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut entries = Vec::new();
        for record in reader.deserialize::<ManifestEntry>() {
            let mut entry = record.map_err(|e| MidiError::Manifest(e.to_string()))?;
            if entry.path.is_relative() {
                entry.path = base_dir.join(&entry.path);
            }
            entries.push(entry);
        }
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self, MidiError> {
        let text = std::fs::read_to_string(path).map_err(|source| MidiError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_csv(&text, base)
    }
}

fn is_smf_path(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("mid" | "midi" | "smf")
    )
}

/// Parse one file, choosing the reader by extension (`.mid`, `.midi`, `.smf`
/// are binary; anything else is the text note format).
pub fn parse_file(path: &Path) -> Result<NoteStream, MidiError> {
    let io_err = |source| MidiError::Io {
        path: path.to_path_buf(),
        source,
    };
    if is_smf_path(path) {
        parse_smf(&std::fs::read(path).map_err(io_err)?)
    } else {
        parse_note_text(&std::fs::read_to_string(path).map_err(io_err)?)
    }
}

/// Parse every manifest entry (in parallel) and return pieces in manifest
/// order. Parser warnings are logged.
pub fn load_corpus(manifest: &CorpusManifest) -> Result<Vec<Piece>, MidiError> {
    manifest.validate()?;
    manifest
        .entries
        .par_iter()
        .map(|entry| {
            let stream = parse_file(&entry.path).map_err(|source| MidiError::Piece {
                piece_id: entry.piece_id.clone(),
                source: Box::new(source),
            })?;
            for w in &stream.warnings {
                log::warn!("piece {}: {w}", entry.piece_id);
            }
            Ok(Piece {
                piece_id: entry.piece_id.clone(),
                composer_id: entry.composer_id.clone(),
                notes: stream.notes,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track_chunk(body: &[u8]) -> Vec<u8> {
        let mut out = b"MTrk".to_vec();
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(body);
        out
    }

    fn header(format: u16, ntracks: u16, division: u16) -> Vec<u8> {
        let mut out = b"MThd".to_vec();
        out.extend_from_slice(&6u32.to_be_bytes());
        out.extend_from_slice(&format.to_be_bytes());
        out.extend_from_slice(&ntracks.to_be_bytes());
        out.extend_from_slice(&division.to_be_bytes());
        out
    }

    #[test]
    fn single_note_at_default_tempo() {
        // tempo 500000, division 480, on at 0, off at 480 (delta 0x83 0x60).
        let mut bytes = header(0, 1, 480);
        bytes.extend(track_chunk(&[
            0x00, 0xFF, 0x51, 0x03, 0x07, 0xA1, 0x20, // tempo
            0x00, 0x90, 60, 64, // on
            0x83, 0x60, 0x80, 60, 0, // off after 480 ticks
            0x00, 0xFF, 0x2F, 0x00,
        ]));
        let stream = parse_smf(&bytes).unwrap();
        assert_eq!(
            stream.notes,
            vec![Note {
                onset_seconds: 0.0,
                duration_seconds: 0.5,
                pitch: 60,
                velocity: 64
            }]
        );
        assert!(stream.warnings.is_empty());
    }

    #[test]
    fn header_and_end_of_track_only() {
        let mut bytes = header(0, 1, 96);
        bytes.extend(track_chunk(&[0x00, 0xFF, 0x2F, 0x00]));
        let stream = parse_smf(&bytes).unwrap();
        assert!(stream.notes.is_empty());
    }

    #[test]
    fn velocity_zero_closes_note_and_running_status() {
        let mut bytes = header(0, 1, 100);
        bytes.extend(track_chunk(&[
            0x00, 0x90, 62, 80, // on
            0x64, 62, 0, // running status, vel 0 after 100 ticks
            0x00, 0xFF, 0x2F, 0x00,
        ]));
        let stream = parse_smf(&bytes).unwrap();
        assert_eq!(stream.notes.len(), 1);
        assert_eq!(stream.notes[0].duration_seconds, 0.5);
        assert_eq!(stream.notes[0].velocity, 80);
    }

    #[test]
    fn unmatched_off_is_skipped_with_warning() {
        let mut bytes = header(0, 1, 480);
        bytes.extend(track_chunk(&[0x00, 0x80, 60, 0, 0x00, 0xFF, 0x2F, 0x00]));
        let stream = parse_smf(&bytes).unwrap();
        assert!(stream.notes.is_empty());
        assert_eq!(
            stream.warnings,
            vec![ParseWarning::UnmatchedNoteOff {
                track: 0,
                tick: 0,
                channel: 0,
                pitch: 60
            }]
        );
    }

    #[test]
    fn overlapping_same_pitch_is_fifo() {
        let mut bytes = header(0, 1, 480);
        bytes.extend(track_chunk(&[
            0x00, 0x90, 60, 10, // A on @0
            0x81, 0x70, 0x90, 60, 20, // B on @240
            0x81, 0x70, 0x80, 60, 0, // off @480 closes A
            0x81, 0x70, 0x80, 60, 0, // off @720 closes B
            0x00, 0xFF, 0x2F, 0x00,
        ]));
        let stream = parse_smf(&bytes).unwrap();
        assert_eq!(stream.notes.len(), 2);
        assert_eq!(
            (stream.notes[0].velocity, stream.notes[0].duration_seconds),
            (10, 0.5)
        );
        assert_eq!(
            (stream.notes[1].velocity, stream.notes[1].onset_seconds),
            (20, 0.25)
        );
    }

    #[test]
    fn tempo_change_in_format_one_applies_to_other_tracks() {
        let mut bytes = header(1, 2, 480);
        // Conductor track: tempo doubles speed at tick 480.
        bytes.extend(track_chunk(&[
            0x00, 0xFF, 0x51, 0x03, 0x07, 0xA1, 0x20, // 500000
            0x83, 0x60, 0xFF, 0x51, 0x03, 0x03, 0xD0, 0x90, // 250000 @480
            0x00, 0xFF, 0x2F, 0x00,
        ]));
        bytes.extend(track_chunk(&[
            0x00, 0x90, 60, 64, // @0
            0x87, 0x40, 0x80, 60, 0, // @960
            0x00, 0xFF, 0x2F, 0x00,
        ]));
        let stream = parse_smf(&bytes).unwrap();
        // 480 ticks at 0.5 s/quarter + 480 ticks at 0.25 s/quarter.
        assert_eq!(stream.notes[0].duration_seconds, 0.75);
    }

    #[test]
    fn header_errors() {
        assert!(matches!(
            parse_smf(b"RIFF\0\0\0\x06\0\0\0\x01\x01\xe0"),
            Err(MidiError::MalformedHeader(_))
        ));
        let mut short = b"MThd".to_vec();
        short.extend_from_slice(&4u32.to_be_bytes());
        assert!(matches!(
            parse_smf(&short),
            Err(MidiError::MalformedHeader(_))
        ));
        assert!(matches!(
            parse_smf(&header(0, 1, 0xE728)),
            Err(MidiError::UnsupportedDivision(0xE728))
        ));
        assert!(matches!(
            parse_smf(&header(2, 1, 480)),
            Err(MidiError::UnsupportedFormat(2))
        ));
    }

    #[test]
    fn truncated_chunk() {
        let mut bytes = header(0, 1, 480);
        let mut chunk = track_chunk(&[0x00, 0x90, 60, 64, 0x00, 0xFF, 0x2F, 0x00]);
        chunk.truncate(chunk.len() - 3);
        bytes.extend(chunk);
        assert!(matches!(
            parse_smf(&bytes),
            Err(MidiError::TruncatedChunk(_))
        ));
    }

    #[test]
    fn parse_is_pure() {
        let notes = vec![
            Note::new(0.0, 0.5, 60, 64).unwrap(),
            Note::new(0.25, 0.25, 64, 70).unwrap(),
        ];
        let bytes = write_smf(&notes, SmfWriteOptions::default());
        assert_eq!(parse_smf(&bytes).unwrap(), parse_smf(&bytes).unwrap());
    }

    #[test]
    fn note_text_basic() {
        let stream = parse_note_text("0.0 0.5 60 64\n").unwrap();
        assert_eq!(stream.notes, vec![Note::new(0.0, 0.5, 60, 64).unwrap()]);
        assert!(parse_note_text("").unwrap().notes.is_empty());
    }

    #[test]
    fn note_text_comments_and_sorting() {
        let text = "# header\n1.0 0.5 62 64 # late\n\n0.0 0.5 67 64\n0.0 0.5 60 64\n";
        let pitches: Vec<u8> = parse_note_text(text)
            .unwrap()
            .notes
            .iter()
            .map(|n| n.pitch)
            .collect();
        assert_eq!(pitches, vec![60, 67, 62]);
    }

    #[test]
    fn note_text_bad_fields() {
        match parse_note_text("0.0 0.5 200 64") {
            Err(MidiError::BadField { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse_note_text("0.0 0.5 60 64\n0.0 x 60 64") {
            Err(MidiError::BadField { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_note_text("0.0 0.0 60 64").is_err());
        assert!(parse_note_text("0.0 0.5 60 0").is_err());
        assert!(parse_note_text("0.0 0.5 60").is_err());
    }

    #[test]
    fn manifest_rejects_duplicates_before_parsing() {
        let csv = "path,piece_id,composer_id\nmissing_a.txt,p1,c1\nmissing_b.txt,p1,c2\n";
        assert!(matches!(
            CorpusManifest::from_csv(csv, Path::new("/nonexistent")),
            Err(MidiError::DuplicatePieceId(id)) if id == "p1"
        ));
    }

    #[test]
    fn manifest_rejects_wrong_header() {
        let csv = "file,piece,composer\na.txt,p1,c1\n";
        assert!(CorpusManifest::from_csv(csv, Path::new(".")).is_err());
    }

    #[test]
    fn load_corpus_keeps_manifest_order_and_names_missing_piece() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("b.txt"), "0.0 0.5 60 64\n").unwrap();
        std::fs::write(dir.path().join("a.txt"), "0.0 0.5 62 64\n0.5 0.5 64 64\n").unwrap();
        let csv = "path,piece_id,composer_id\nb.txt,second,bach\na.txt,first,mozart\n";
        let manifest = CorpusManifest::from_csv(csv, dir.path()).unwrap();
        let pieces = load_corpus(&manifest).unwrap();
        assert_eq!(pieces.len(), 2);
        assert_eq!(pieces[0].piece_id, "second");
        assert_eq!(pieces[1].composer_id, "mozart");
        assert_eq!(pieces[1].notes.len(), 2);

        let csv = "path,piece_id,composer_id\nb.txt,ok,bach\nnope.txt,lost,bach\n";
        let manifest = CorpusManifest::from_csv(csv, dir.path()).unwrap();
        match load_corpus(&manifest) {
            Err(MidiError::Piece { piece_id, .. }) => assert_eq!(piece_id, "lost"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
