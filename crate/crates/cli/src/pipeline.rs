//! The pipeline stages. Each stage reads files, writes files, and returns
//! the paths it wrote.

use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use simcal_core::calibration::{fit_and_calibrate, LayerPools};
use simcal_core::eval::{emit_report, grid_search, GridOutcome};
use simcal_core::midi::load_corpus;
use simcal_core::model::{self, forward_with, ModelWeights};
use simcal_core::pairs::{
    make_windows, read_pairs_csv, sample_pairs, write_pairs_csv, TokenizedPiece,
};
use simcal_core::tokenizer::{build_vocabulary, event_ids, events_from_notes, TokenRecord};
use simcal_core::{
    CalibrationConfig, CalibrationOptions, CorpusManifest, ModelShape, NormalizationStats,
    PrincipalDirections, SamplerConfig, Vocabulary, WindowRef,
};

use crate::artifacts::{write_manifest, ArtifactManifest};
use crate::config::RunConfig;

/// Route core errors through the umbrella type so messages carry the
/// module they came from.
trait Tagged<T> {
    fn tag(self) -> Result<T, simcal_core::Error>;
}

impl<T, E: Into<simcal_core::Error>> Tagged<T> for std::result::Result<T, E> {
    fn tag(self) -> Result<T, simcal_core::Error> {
        self.map_err(Into::into)
    }
}

pub const EVENTS_FILE: &str = "events.jsonl";
pub const VOCAB_FILE: &str = "vocabulary.json";
pub const TOKENS_FILE: &str = "tokens.jsonl";
pub const WEIGHTS_FILE: &str = "weights.mwts";
pub const ACTIVATIONS_DIR: &str = "activations";
pub const ACTIVATION_INDEX: &str = "index.csv";
pub const PAIRS_FILE: &str = "pairs.csv";
pub const PAIRS_SIDECAR: &str = "pairs.json";
pub const REPORT_DIR: &str = "report";
pub const BEST_EMBEDDINGS: &str = "best_embeddings.memb";
pub const BEST_EMBEDDINGS_SIDECAR: &str = "best_embeddings.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<PathBuf> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(path.to_path_buf())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn write_records(path: &Path, records: &[TokenRecord]) -> Result<PathBuf> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub fn read_records(path: &Path) -> Result<Vec<TokenRecord>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TokenRecord = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: malformed token record", path.display(), i + 1))?;
        records.push(record);
    }
    Ok(records)
}

fn tokenized_pieces(records: Vec<TokenRecord>) -> Result<Vec<TokenizedPiece>> {
    records
        .into_iter()
        .map(|r| {
            let composer_id = r
                .composer_id
                .with_context(|| format!("token record {:?} has no composer_id", r.piece_id))?;
            Ok(TokenizedPiece {
                piece_id: r.piece_id,
                composer_id,
                ids: r.ids,
            })
        })
        .collect()
}

/// Notes to single-event ids, one JSON line per piece.
pub fn cmd_tokenize(cfg: &RunConfig, manifest: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = CorpusManifest::load(manifest).tag()?;
    let pieces = load_corpus(&manifest).tag()?;
    let records = pieces
        .par_iter()
        .map(|p| {
            let events = events_from_notes(p, &cfg.tokenizer);
            Ok(TokenRecord {
                piece_id: p.piece_id.clone(),
                composer_id: Some(p.composer_id.clone()),
                ids: event_ids(&events, &cfg.tokenizer).tag()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    log::info!("tokenized {} pieces", records.len());
    Ok(vec![write_records(&out_dir.join(EVENTS_FILE), &records)?])
}

/// Build the aggregated vocabulary and re-tokenize every piece with it.
pub fn cmd_vocab(cfg: &RunConfig, events: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let records = read_records(events)?;
    let corpora: Vec<Vec<u32>> = records.iter().map(|r| r.ids.clone()).collect();
    let vocab = build_vocabulary(
        &corpora,
        cfg.tokenizer,
        cfg.vocab.target_size,
        cfg.vocab.max_word_events,
    )
    .tag()?;
    log::info!(
        "vocabulary: {} words ({} merges)",
        vocab.len(),
        vocab.merges().len()
    );
    let base = Vocabulary::base(cfg.tokenizer).tag()?;
    let tokens = records
        .into_iter()
        .map(|r| {
            let events = base.detokenize(&r.ids).tag()?;
            Ok(TokenRecord {
                ids: vocab.tokenize(&events).tag()?,
                ..r
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut json = vocab.to_json();
    json.push('\n');
    Ok(vec![
        write_file(&out_dir.join(VOCAB_FILE), json.as_bytes())?,
        write_records(&out_dir.join(TOKENS_FILE), &tokens)?,
    ])
}

fn load_or_init_weights(
    cfg: &RunConfig,
    vocab_len: usize,
    out_dir: &Path,
) -> Result<(ModelWeights, Option<PathBuf>)> {
    let m = &cfg.model;
    if let Some(path) = &m.weights_file {
        let path = cfg.resolve(path);
        let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        let weights = ModelWeights::read_from(BufReader::new(file))
            .tag()
            .with_context(|| format!("reading weights {}", path.display()))?;
        let s = weights.shape;
        ensure!(
            (s.layers, s.context, s.dim, s.heads) == (m.layers, m.context, m.dim, m.heads),
            "weights file shape {s:?} disagrees with the model section"
        );
        ensure!(
            s.vocab >= vocab_len,
            "weights cover {} token ids but the vocabulary has {vocab_len}",
            s.vocab
        );
        return Ok((weights, None));
    }
    let shape = ModelShape {
        layers: m.layers,
        context: m.context,
        dim: m.dim,
        vocab: vocab_len,
        heads: m.heads,
    };
    let weights = ModelWeights::random(shape, cfg.model_seed()).tag()?;
    let mut buf = Vec::new();
    weights.write_to(&mut buf).tag()?;
    let path = write_file(&out_dir.join(WEIGHTS_FILE), &buf)?;
    Ok((weights, Some(path)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRow {
    pub file: String,
    pub piece_id: String,
    pub window_index: usize,
    pub composer_id: String,
}

/// Run the model over every window and dump per-window activations.
pub fn cmd_embed(
    cfg: &RunConfig,
    tokens: &Path,
    vocab: &Path,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let vocab_text =
        fs::read_to_string(vocab).with_context(|| format!("reading {}", vocab.display()))?;
    let vocab = Vocabulary::from_json(&vocab_text)
        .tag()
        .with_context(|| format!("in {}", vocab.display()))?;
    let pieces = tokenized_pieces(read_records(tokens)?)?;
    let (weights, weights_path) = load_or_init_weights(cfg, vocab.len(), out_dir)?;
    let windows = make_windows(&pieces, cfg.sampler.window, cfg.stride());
    log::info!("embedding {} windows", windows.len());

    let dir = out_dir.join(ACTIVATIONS_DIR);
    create_dir(&dir)?;
    let rows: Vec<IndexRow> = windows
        .iter()
        .enumerate()
        .map(|(i, w)| IndexRow {
            file: format!("w{i:06}.mact"),
            piece_id: w.piece_id.clone(),
            window_index: w.window_index,
            composer_id: w.composer_id.clone(),
        })
        .collect();
    let mut written = windows
        .par_iter()
        .zip(&rows)
        .map(|(w, row)| {
            let acts = forward_with(&w.ids, &weights, cfg.model.readout)
                .tag()
                .with_context(|| format!("forward pass for {}", w.reference()))?;
            let mut buf = Vec::new();
            model::write_activations(&acts, &mut buf).tag()?;
            write_file(&dir.join(&row.file), &buf)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut index = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        index.serialize(row)?;
    }
    if rows.is_empty() {
        index.write_record(["file", "piece_id", "window_index", "composer_id"])?;
    }
    written.push(write_file(
        &dir.join(ACTIVATION_INDEX),
        &index.into_inner()?,
    )?);
    written.extend(weights_path);
    Ok(written)
}

#[derive(Debug, Serialize)]
struct PairsSidecar<'a> {
    sampler: &'a SamplerConfig,
    windows: usize,
    pairs: usize,
}

/// Sample labelled window pairs.
pub fn cmd_pairs(cfg: &RunConfig, tokens: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let pieces = tokenized_pieces(read_records(tokens)?)?;
    let windows = make_windows(&pieces, cfg.sampler.window, cfg.stride());
    let sampler = SamplerConfig {
        window: cfg.sampler.window,
        stride: cfg.stride(),
        positives: cfg.sampler.positives,
        negatives: cfg.sampler.negatives,
        seed: cfg.sampler_seed(),
        exclusion: cfg.sampler.exclusion,
    };
    let pairs = sample_pairs(&windows, &sampler).tag()?;
    log::info!(
        "sampled {} pairs from {} windows",
        pairs.len(),
        windows.len()
    );
    Ok(vec![
        write_file(
            &out_dir.join(PAIRS_FILE),
            write_pairs_csv(&pairs).as_bytes(),
        )?,
        write_json(
            &out_dir.join(PAIRS_SIDECAR),
            &PairsSidecar {
                sampler: &sampler,
                windows: windows.len(),
                pairs: pairs.len(),
            },
        )?,
    ])
}

pub fn read_index(dir: &Path) -> Result<Vec<IndexRow>> {
    let path = dir.join(ACTIVATION_INDEX);
    let mut reader =
        csv::Reader::from_path(&path).with_context(|| format!("opening {}", path.display()))?;
    let rows = reader
        .deserialize()
        .collect::<Result<Vec<IndexRow>, _>>()
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(rows)
}

#[derive(Debug, Serialize)]
struct EmbeddingSidecar<'a> {
    config: &'a CalibrationConfig,
    options: &'a CalibrationOptions,
    windows: Vec<WindowRef>,
    normalization: Option<NormalizationStats>,
    directions: Option<PrincipalDirections>,
}

/// Score every calibration setting and write the report. Fails after
/// writing when any setting could not be evaluated.
pub fn cmd_grid(
    cfg: &RunConfig,
    activations: &Path,
    pairs: &Path,
    out_dir: &Path,
) -> Result<(GridOutcome, Vec<PathBuf>)> {
    let pairs_text =
        fs::read_to_string(pairs).with_context(|| format!("reading {}", pairs.display()))?;
    let pairs = read_pairs_csv(&pairs_text)
        .tag()
        .with_context(|| format!("in {}", pairs.display()))?;
    let rows = read_index(activations)?;
    ensure!(
        !rows.is_empty(),
        "no activation files listed in {}",
        activations.display()
    );

    let spec_weightings = cfg.grid.weightings.clone();
    let corpus = rows
        .par_iter()
        .map(|row| {
            let path = activations.join(&row.file);
            let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
            let acts = model::read_activations(BufReader::new(file))
                .tag()
                .with_context(|| format!("reading {}", path.display()))?;
            let pools = LayerPools::from_activations(&acts, &spec_weightings).tag()?;
            Ok((
                WindowRef::new(row.piece_id.clone(), row.window_index),
                pools,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let layers = corpus[0].1.layers();
    ensure!(
        corpus.iter().all(|(_, p)| p.layers() == layers),
        "activation files disagree on layer count"
    );

    let spec = cfg.grid_spec(layers);
    let outcome = grid_search(&corpus, &pairs, &spec).tag()?;
    let report_dir = out_dir.join(REPORT_DIR);
    create_dir(&report_dir)?;
    let mut written = if outcome.results.is_empty() {
        Vec::new()
    } else {
        emit_report(&outcome, &report_dir, cfg.grid.svg).tag()?
    };

    if let Some(best) = &outcome.best {
        log::info!(
            "best: {} rho={:.6} p={:.3e}",
            best.config,
            best.rho,
            best.p_value
        );
        let raw = corpus
            .iter()
            .map(|(_, p)| p.raw_embedding(best.config.layer_avg, best.config.weighting))
            .collect::<Result<Vec<_>, _>>()
            .tag()?;
        let (calibrated, stats, dirs) =
            fit_and_calibrate(&raw, &best.config, &spec.options).tag()?;
        let mut buf = Vec::new();
        model::write_embeddings(&calibrated, &mut buf).tag()?;
        written.push(write_file(&report_dir.join(BEST_EMBEDDINGS), &buf)?);
        written.push(write_json(
            &report_dir.join(BEST_EMBEDDINGS_SIDECAR),
            &EmbeddingSidecar {
                config: &best.config,
                options: &spec.options,
                windows: corpus.iter().map(|(r, _)| r.clone()).collect(),
                normalization: stats,
                directions: dirs,
            },
        )?);
    }

    for f in &outcome.failures {
        log::error!("{}: {}", f.config, f.error);
    }
    if !outcome.failures.is_empty() {
        bail!(
            "{} of {} configurations failed",
            outcome.failures.len(),
            outcome.failures.len() + outcome.results.len()
        );
    }
    Ok((outcome, written))
}

/// Every stage in order, then the artifact manifest.
pub fn cmd_all(cfg: &RunConfig) -> Result<ArtifactManifest> {
    cfg.validate(true)?;
    let out = cfg.out_dir();
    create_dir(&out)?;
    let mut written = cmd_tokenize(cfg, &cfg.manifest_path(), &out)?;
    written.extend(cmd_vocab(cfg, &out.join(EVENTS_FILE), &out)?);
    written.extend(cmd_embed(
        cfg,
        &out.join(TOKENS_FILE),
        &out.join(VOCAB_FILE),
        &out,
    )?);
    written.extend(cmd_pairs(cfg, &out.join(TOKENS_FILE), &out)?);
    let (_, report) = cmd_grid(cfg, &out.join(ACTIVATIONS_DIR), &out.join(PAIRS_FILE), &out)?;
    written.extend(report);
    let manifest = ArtifactManifest::from_files(&out, &written)?;
    write_manifest(&out, &manifest)?;
    Ok(manifest)
}
