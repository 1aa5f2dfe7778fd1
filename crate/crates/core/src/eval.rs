//! Scoring calibrated embeddings against composer labels.
//!
//! Each calibration setting yields one cosine similarity per labelled pair;
//! the setting's score is the Spearman correlation between those
//! similarities and the 0/1 labels.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{
    self, CalibrationConfig, CalibrationError, CalibrationOptions, LayerPools, PipelineOrder,
    Weighting,
};
use crate::linalg;
use crate::pairs::{LabeledPair, WindowRef};
use crate::rng::XorShift64Star;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 observations, got {0}")]
    TooShort(usize),
    #[error("constant input: rank correlation undefined")]
    ConstantInput,
    #[error("no embedding for window {0}")]
    MissingEmbedding(WindowRef),
    #[error("insufficient pairs: {positives} positive and {negatives} negative (need both classes, 3 pairs total)")]
    InsufficientPairs { positives: usize, negatives: usize },
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("no results to report")]
    EmptyResults,
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error("{path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Cosine similarity; zero-length inputs give 0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = linalg::norm(a);
    let nb = linalg::norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (linalg::dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(i.cmp(&j)));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // Positions start..end hold ranks start+1..=end.
        let avg = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum PValueMethod {
    /// Two-sided Student-t approximation with `n − 2` degrees of freedom.
    #[default]
    TDistribution,
    /// Two-sided permutation test over shuffled labels.
    Permutation { trials: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub rho: f64,
    pub p_value: f64,
}

/// Two-sided p-value of `t = ρ·sqrt((n−2)/(1−ρ²))` under Student's t with
/// `n − 2` degrees of freedom, via `I_{1−ρ²}((n−2)/2, 1/2)`.
pub fn t_test_p_value(rho: f64, n: usize) -> f64 {
    if rho == 0.0 {
        return 1.0;
    }
    let df = (n - 2) as f64;
    let x = 1.0 - rho * rho;
    if x <= 0.0 {
        return f64::MIN_POSITIVE;
    }
    statrs::function::beta::beta_reg(df / 2.0, 0.5, x).clamp(f64::MIN_POSITIVE, 1.0)
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&x| x == v[0])
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<Correlation, EvalError> {
    spearman_with(x, y, PValueMethod::TDistribution)
}

pub fn spearman_with(x: &[f64], y: &[f64], method: PValueMethod) -> Result<Correlation, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(EvalError::TooShort(x.len()));
    }
    if is_constant(x) || is_constant(y) {
        return Err(EvalError::ConstantInput);
    }
    let rx = average_ranks(x);
    let mut ry = average_ranks(y);
    let rho = pearson(&rx, &ry);
    let p_value = match method {
        PValueMethod::TDistribution => t_test_p_value(rho, x.len()),
        PValueMethod::Permutation { trials, seed } => {
            let mut rng = XorShift64Star::new(seed);
            let threshold = rho.abs() - 1e-12;
            let mut extreme = 0usize;
            for _ in 0..trials {
                rng.shuffle(&mut ry);
                if pearson(&rx, &ry).abs() >= threshold {
                    extreme += 1;
                }
            }
            (extreme + 1) as f64 / (trials + 1) as f64
        }
    };
    Ok(Correlation { rho, p_value })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub config: CalibrationConfig,
    pub rho: f64,
    pub p_value: f64,
    pub pair_count: usize,
    /// Pairs where one side calibrated to the zero vector (similarity 0).
    pub zero_vector_pairs: usize,
}

fn check_pairs(pairs: &[LabeledPair]) -> Result<(), EvalError> {
    let positives = pairs.iter().filter(|p| p.label == 1).count();
    let negatives = pairs.len() - positives;
    if positives == 0 || negatives == 0 || pairs.len() < 3 {
        return Err(EvalError::InsufficientPairs {
            positives,
            negatives,
        });
    }
    Ok(())
}

fn score<'a>(
    lookup: impl Fn(&WindowRef) -> Option<&'a [f64]>,
    pairs: &[LabeledPair],
    config: CalibrationConfig,
    method: PValueMethod,
) -> Result<GridResult, EvalError> {
    let mut sims = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    let mut zero = 0;
    for p in pairs {
        let a = lookup(&p.a).ok_or_else(|| EvalError::MissingEmbedding(p.a.clone()))?;
        let b = lookup(&p.b).ok_or_else(|| EvalError::MissingEmbedding(p.b.clone()))?;
        if linalg::norm(a) == 0.0 || linalg::norm(b) == 0.0 {
            zero += 1;
        }
        sims.push(cosine_similarity(a, b));
        labels.push(f64::from(p.label));
    }
    if zero > 0 {
        log::warn!("{config}: {zero} pairs involve a zero embedding; similarity set to 0");
    }
    let c = spearman_with(&sims, &labels, method)?;
    Ok(GridResult {
        config,
        rho: c.rho,
        p_value: c.p_value,
        pair_count: pairs.len(),
        zero_vector_pairs: zero,
    })
}

/// Score one configuration whose calibrated embeddings are already computed.
pub fn run_config(
    embeddings: &HashMap<WindowRef, Vec<f64>>,
    pairs: &[LabeledPair],
    config: CalibrationConfig,
    method: PValueMethod,
) -> Result<GridResult, EvalError> {
    score(
        |r| embeddings.get(r).map(Vec::as_slice),
        pairs,
        config,
        method,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub layer_avg: Vec<usize>,
    pub sn: Vec<bool>,
    pub natsv: Vec<usize>,
    pub weightings: Vec<Weighting>,
    #[serde(default)]
    pub options: CalibrationOptions,
    #[serde(default)]
    pub p_value: PValueMethod,
}

impl GridSpec {
    /// Every layer count `0..=layers`, both normalization settings,
    /// `natsv_k ∈ {0, 1, 2}` and all three weightings.
    pub fn full(layers: usize) -> Self {
        Self {
            layer_avg: (0..=layers).collect(),
            sn: vec![false, true],
            natsv: vec![0, 1, 2],
            weightings: Weighting::ALL.to_vec(),
            options: CalibrationOptions::default(),
            p_value: PValueMethod::TDistribution,
        }
    }

    pub fn single(config: CalibrationConfig) -> Self {
        Self {
            layer_avg: vec![config.layer_avg],
            sn: vec![config.sn],
            natsv: vec![config.natsv_k],
            weightings: vec![config.weighting],
            options: CalibrationOptions::default(),
            p_value: PValueMethod::TDistribution,
        }
    }

    pub fn validate(&self, layers: usize) -> Result<(), EvalError> {
        if self.layer_avg.is_empty()
            || self.sn.is_empty()
            || self.natsv.is_empty()
            || self.weightings.is_empty()
        {
            return Err(EvalError::InvalidSpec(
                "every axis needs at least one value".into(),
            ));
        }
        if let Some(&l) = self.layer_avg.iter().find(|&&l| l > layers) {
            return Err(EvalError::InvalidSpec(format!(
                "layer_avg {l} exceeds the model's {layers} layers"
            )));
        }
        if self.enumerate().is_empty() {
            return Err(EvalError::InvalidSpec(
                "layer_avg = 0 only pairs with uniform weighting; no configs remain".into(),
            ));
        }
        Ok(())
    }

    /// Valid configurations in report order, duplicates removed. Rows with
    /// `layer_avg = 0` exist only for uniform weighting.
    pub fn enumerate(&self) -> Vec<CalibrationConfig> {
        let mut out = Vec::new();
        for &weighting in &self.weightings {
            for &sn in &self.sn {
                for &layer_avg in &self.layer_avg {
                    if layer_avg == 0 && weighting != Weighting::Uniform {
                        continue;
                    }
                    for &natsv_k in &self.natsv {
                        out.push(CalibrationConfig {
                            layer_avg,
                            sn,
                            natsv_k,
                            weighting,
                        });
                    }
                }
            }
        }
        out.sort_by_key(CalibrationConfig::sort_key);
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFailure {
    pub config: CalibrationConfig,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub results: Vec<GridResult>,
    pub failures: Vec<GridFailure>,
    pub best: Option<GridResult>,
}

/// Highest rho; ties go to smaller `layer_avg`, then smaller `natsv_k`,
/// then `sn = false`, then weighting order.
pub fn argmax(results: &[GridResult]) -> Option<&GridResult> {
    results.iter().min_by(|a, b| {
        b.rho
            .total_cmp(&a.rho)
            .then(a.config.layer_avg.cmp(&b.config.layer_avg))
            .then(a.config.natsv_k.cmp(&b.config.natsv_k))
            .then(a.config.sn.cmp(&b.config.sn))
            .then(a.config.weighting.cmp(&b.config.weighting))
    })
}

type Scored = Vec<(CalibrationConfig, Result<GridResult, EvalError>)>;

fn score_calibrated(
    refs: &[&WindowRef],
    calibrated: &[Vec<f64>],
    pairs: &[LabeledPair],
    config: CalibrationConfig,
    method: PValueMethod,
) -> Result<GridResult, EvalError> {
    let index: HashMap<&WindowRef, usize> = refs.iter().enumerate().map(|(i, r)| (*r, i)).collect();
    score(
        |r| index.get(r).map(|&i| calibrated[i].as_slice()),
        pairs,
        config,
        method,
    )
}

fn fit_sn_set(set: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, CalibrationError> {
    let stats = calibration::fit_sn(set)?;
    set.iter()
        .map(|v| calibration::apply_sn(v, &stats))
        .collect()
}

fn remove_dirs(
    set: &[Vec<f64>],
    dirs: &calibration::PrincipalDirections,
    k: usize,
) -> Result<Vec<Vec<f64>>, CalibrationError> {
    let dirs = dirs.truncated(k);
    set.iter()
        .map(|v| calibration::apply_natsv(v, &dirs))
        .collect()
}

/// Evaluate every configuration of one `(weighting, layer_avg)` group.
fn run_group(
    raw: &[Vec<f64>],
    refs: &[&WindowRef],
    pairs: &[LabeledPair],
    configs: &[CalibrationConfig],
    spec: &GridSpec,
) -> Scored {
    let mut out = Vec::with_capacity(configs.len());
    let opts = spec.options;
    let method = spec.p_value;
    let mut sn_values: Vec<bool> = configs.iter().map(|c| c.sn).collect();
    sn_values.dedup();
    for sn in sn_values {
        let group: Vec<CalibrationConfig> =
            configs.iter().copied().filter(|c| c.sn == sn).collect();
        let max_k = group.iter().map(|c| c.natsv_k).max().unwrap_or(0);
        let fail_all = |out: &mut Scored, e: CalibrationError| {
            for c in &group {
                out.push((*c, Err(EvalError::Calibration(e.clone()))));
            }
        };
        match opts.order {
            PipelineOrder::SnThenNatsv => {
                let normed = if sn {
                    match fit_sn_set(raw) {
                        Ok(v) => v,
                        Err(e) => {
                            fail_all(&mut out, e);
                            continue;
                        }
                    }
                } else {
                    raw.to_vec()
                };
                let dirs = if max_k > 0 {
                    match calibration::fit_natsv(&normed, max_k, opts.natsv_center) {
                        Ok(d) => Some(d),
                        Err(e) => {
                            fail_all(&mut out, e);
                            continue;
                        }
                    }
                } else {
                    None
                };
                for c in group.iter().copied() {
                    let result = if c.natsv_k == 0 {
                        score_calibrated(refs, &normed, pairs, c, method)
                    } else {
                        remove_dirs(&normed, dirs.as_ref().expect("fitted"), c.natsv_k)
                            .map_err(EvalError::from)
                            .and_then(|set| score_calibrated(refs, &set, pairs, c, method))
                    };
                    out.push((c, result));
                }
            }
            PipelineOrder::NatsvThenSn => {
                let dirs = if max_k > 0 {
                    match calibration::fit_natsv(raw, max_k, opts.natsv_center) {
                        Ok(d) => Some(d),
                        Err(e) => {
                            fail_all(&mut out, e);
                            continue;
                        }
                    }
                } else {
                    None
                };
                for c in group.iter().copied() {
                    let removed = if c.natsv_k == 0 {
                        Ok(raw.to_vec())
                    } else {
                        remove_dirs(raw, dirs.as_ref().expect("fitted"), c.natsv_k)
                    };
                    let result = removed
                        .and_then(|set| if sn { fit_sn_set(&set) } else { Ok(set) })
                        .map_err(EvalError::from)
                        .and_then(|set| score_calibrated(refs, &set, pairs, c, method));
                    out.push((c, result));
                }
            }
        }
    }
    out
}

/// Evaluate every configuration of `spec`.
///
/// Raw embeddings are formed once per `(weighting, layer_avg)`; normalization
/// statistics and principal directions are fitted on all windows in
/// `corpus` (not only those appearing in pairs). Groups run in parallel and
/// results come back sorted by weighting, sn, layer_avg, natsv_k. A
/// configuration that fails is reported in `failures` and left out of
/// `results`.
pub fn grid_search(
    corpus: &[(WindowRef, LayerPools)],
    pairs: &[LabeledPair],
    spec: &GridSpec,
) -> Result<GridOutcome, EvalError> {
    let layers = corpus.first().map_or(0, |(_, p)| p.layers());
    spec.validate(layers)?;
    check_pairs(pairs)?;
    let known: HashMap<&WindowRef, ()> = corpus.iter().map(|(r, _)| (r, ())).collect();
    for p in pairs {
        for r in [&p.a, &p.b] {
            if !known.contains_key(r) {
                return Err(EvalError::MissingEmbedding(r.clone()));
            }
        }
    }
    let refs: Vec<&WindowRef> = corpus.iter().map(|(r, _)| r).collect();

    let configs = spec.enumerate();
    let mut groups: Vec<(Weighting, usize)> =
        configs.iter().map(|c| (c.weighting, c.layer_avg)).collect();
    groups.sort();
    groups.dedup();

    let scored: Vec<Scored> = groups
        .par_iter()
        .map(|&(weighting, layer_avg)| {
            let group_configs: Vec<CalibrationConfig> = configs
                .iter()
                .copied()
                .filter(|c| c.weighting == weighting && c.layer_avg == layer_avg)
                .collect();
            let raw: Result<Vec<Vec<f64>>, _> = corpus
                .iter()
                .map(|(_, pools)| pools.raw_embedding(layer_avg, weighting))
                .collect();
            match raw {
                Ok(raw) => run_group(&raw, &refs, pairs, &group_configs, spec),
                Err(e) => group_configs
                    .into_iter()
                    .map(|c| (c, Err(EvalError::Calibration(e.clone()))))
                    .collect(),
            }
        })
        .collect();

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (config, r) in scored.into_iter().flatten() {
        match r {
            Ok(res) => results.push(res),
            Err(e) => failures.push(GridFailure {
                config,
                error: e.to_string(),
            }),
        }
    }
    results.sort_by_key(|r| r.config.sort_key());
    failures.sort_by_key(|f| f.config.sort_key());
    let best = argmax(&results).cloned();
    Ok(GridOutcome {
        results,
        failures,
        best,
    })
}

pub const REPORT_HEADER: &str = "weighting,sn,layer_avg,natsv_k,rho,p_value,pairs";

/// CSV rows in the given order, numbers with six decimals.
pub fn report_csv(results: &[GridResult]) -> Result<String, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in results {
        let c = &r.config;
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{}",
            c.weighting, c.sn, c.layer_avg, c.natsv_k, r.rho, r.p_value, r.pair_count
        )
        .expect("string write");
    }
    Ok(out)
}

/// Line chart of rho against layer_avg, one series per (sn, natsv_k).
pub fn report_svg(results: &[GridResult], weighting: Weighting) -> Option<String> {
    let rows: Vec<&GridResult> = results
        .iter()
        .filter(|r| r.config.weighting == weighting)
        .collect();
    if rows.is_empty() {
        return None;
    }
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let max_l = rows
        .iter()
        .map(|r| r.config.layer_avg)
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let lo = rows
        .iter()
        .map(|r| r.rho)
        .fold(f64::INFINITY, f64::min)
        .min(0.0);
    let hi = rows
        .iter()
        .map(|r| r.rho)
        .fold(f64::NEG_INFINITY, f64::max)
        .max(lo + 1e-9);
    let x = |l: usize| pad + (w - 2.0 * pad) * l as f64 / max_l;
    let y = |rho: f64| h - pad - (h - 2.0 * pad) * (rho - lo) / (hi - lo);
    let palette = [
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
    ];

    type Series = ((bool, usize), Vec<(usize, f64)>);
    let mut series: Vec<Series> = Vec::new();
    for r in &rows {
        let key = (r.config.sn, r.config.natsv_k);
        match series.iter_mut().find(|(k, _)| *k == key) {
            Some((_, pts)) => pts.push((r.config.layer_avg, r.rho)),
            None => series.push((key, vec![(r.config.layer_avg, r.rho)])),
        }
    }
    series.sort_by_key(|(k, _)| *k);

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">rho vs layer_avg ({weighting})</text>"#,
        w / 2.0
    )
    .unwrap();
    writeln!(
        svg,
        r#"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{0}" stroke="black"/>"#,
        h - pad,
        w - pad
    )
    .unwrap();
    writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="10">{lo:.3}</text><text x="{}" y="{}" font-size="10">{hi:.3}</text>"#,
        4.0,
        h - pad,
        4.0,
        pad + 4.0
    )
    .unwrap();
    for (i, ((sn, k), mut pts)) in series.into_iter().enumerate() {
        pts.sort_by_key(|&(l, _)| l);
        let color = palette[i % palette.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|&(l, rho)| format!("{:.2},{:.2}", x(l), y(rho)))
            .collect();
        writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        )
        .unwrap();
        writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">sn={sn} natsv={k}</text>"#,
            w - pad - 90.0,
            pad + 14.0 * i as f64
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    Some(svg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub best: Option<GridResult>,
    pub configs_evaluated: usize,
    pub configs_failed: usize,
    pub failures: Vec<GridFailure>,
}

impl GridSummary {
    pub fn from_outcome(outcome: &GridOutcome) -> Self {
        Self {
            best: outcome.best.clone(),
            configs_evaluated: outcome.results.len(),
            configs_failed: outcome.failures.len(),
            failures: outcome.failures.clone(),
        }
    }
}

/// Write `report.csv`, `summary.json` and, when `svg` is set, one
/// `report_<weighting>.svg` per weighting into `dir`. Returns the paths
/// written.
pub fn emit_report(
    outcome: &GridOutcome,
    dir: &Path,
    svg: bool,
) -> Result<Vec<PathBuf>, EvalError> {
    let csv = report_csv(&outcome.results)?;
    let write = |name: &str, contents: &str| -> Result<PathBuf, EvalError> {
        let path = dir.join(name);
        std::fs::write(&path, contents).map_err(|source| EvalError::IoFailure {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    };
    let mut written = vec![write("report.csv", &csv)?];
    let summary = serde_json::to_string_pretty(&GridSummary::from_outcome(outcome))
        .expect("summary serializes");
    written.push(write("summary.json", &summary)?);
    if svg {
        for weighting in Weighting::ALL {
            if let Some(chart) = report_svg(&outcome.results, weighting) {
                written.push(write(&format!("report_{weighting}.svg"), &chart)?);
            }
        }
    }
    Ok(written)
}
