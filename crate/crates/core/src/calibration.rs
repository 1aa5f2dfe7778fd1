//! Sentence embeddings from layer activations, and the calibrations applied
//! to them.
//!
//! A calibration setting picks how positions are pooled inside a layer, how
//! many of the last layers are averaged (zero means "last token of the last
//! layer"), whether per-dimension standard normalization is applied, and how
//! many leading principal directions are removed. Normalization statistics
//! and principal directions are fitted on a whole embedding set and then
//! applied to every member of it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, SymMatrix};
use crate::model::LayerActivations;
use crate::pairs::WindowRef;

/// Lower clamp for per-dimension standard deviations.
pub const SIGMA_EPSILON: f64 = 1e-8;

/// Eigenvalues below this fraction of the largest count as zero rank.
const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CalibrationError {
    #[error("empty sequence")]
    EmptySequence,
    #[error("layer {layer} outside 1..={layers}")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("need at least {needed} embeddings, got {got}")]
    TooFewEmbeddings { needed: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("standard normalization requested but no statistics supplied")]
    MissingStats,
    #[error("singular-vector removal requested but no directions supplied")]
    MissingDirections,
    #[error("{0} supplied but not requested by the config")]
    UnexpectedFit(&'static str),
    #[error("invalid calibration config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    Linear,
    InverseLinear,
}

impl Weighting {
    pub const ALL: [Weighting; 3] = [
        Weighting::Uniform,
        Weighting::Linear,
        Weighting::InverseLinear,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::Linear => "linear",
            Self::InverseLinear => "inverse_linear",
        }
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Weighting {
    type Err = CalibrationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "linear" => Ok(Self::Linear),
            "inverse_linear" => Ok(Self::InverseLinear),
            _ => Err(CalibrationError::InvalidConfig(format!(
                "unknown weighting {s:?}"
            ))),
        }
    }
}

/// One point of the calibration grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CalibrationConfig {
    /// Number of last layers averaged; 0 selects the last token of the last
    /// layer.
    pub layer_avg: usize,
    pub sn: bool,
    pub natsv_k: usize,
    pub weighting: Weighting,
}

impl CalibrationConfig {
    pub fn validate(&self, layers: usize) -> Result<(), CalibrationError> {
        if self.layer_avg > layers {
            return Err(CalibrationError::LayerOutOfRange {
                layer: self.layer_avg,
                layers,
            });
        }
        if self.layer_avg == 0 && self.weighting != Weighting::Uniform {
            return Err(CalibrationError::InvalidConfig(
                "last-token embedding (layer_avg = 0) only combines with uniform weighting".into(),
            ));
        }
        Ok(())
    }

    /// Sort key: weighting, sn, layer_avg, natsv_k.
    pub fn sort_key(&self) -> (Weighting, bool, usize, usize) {
        (self.weighting, self.sn, self.layer_avg, self.natsv_k)
    }
}

impl fmt::Display for CalibrationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} sn={} layer_avg={} natsv_k={}",
            self.weighting, self.sn, self.layer_avg, self.natsv_k
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineOrder {
    #[default]
    SnThenNatsv,
    NatsvThenSn,
}

/// Settings shared by every grid point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    /// Subtract the fitted mean before removing principal directions.
    pub natsv_center: bool,
    pub order: PipelineOrder,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            natsv_center: true,
            order: PipelineOrder::SnThenNatsv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceEmbedding {
    pub source: WindowRef,
    pub config: CalibrationConfig,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrincipalDirections {
    /// Zero vector when fitted without centering.
    pub mean: Vec<f64>,
    /// Orthonormal, ordered by descending variance.
    pub components: Vec<Vec<f64>>,
    /// Eigenvalues of the scatter matrix matching `components`.
    pub variances: Vec<f64>,
    /// Number of components asked for; larger than `components.len()` when
    /// the data had lower rank.
    pub requested: usize,
}

impl PrincipalDirections {
    pub fn is_rank_deficient(&self) -> bool {
        self.components.len() < self.requested
    }

    /// Keep the leading `k` components.
    pub fn truncated(&self, k: usize) -> Self {
        let keep = k.min(self.components.len());
        Self {
            mean: self.mean.clone(),
            components: self.components[..keep].to_vec(),
            variances: self.variances[..keep].to_vec(),
            requested: k,
        }
    }
}

/// Normalized pooling weights for `n` positions.
///
/// Linear weights are `t / Σt`; inverse-linear weights are `(n − t + 1) / Σt`,
/// which also sum to one because `Σ(n − t + 1) = Σt`.
pub fn position_weights(n: usize, weighting: Weighting) -> Vec<f64> {
    let total = (n * (n + 1) / 2) as f64;
    (1..=n)
        .map(|t| match weighting {
            Weighting::Uniform => 1.0 / n as f64,
            Weighting::Linear => t as f64 / total,
            Weighting::InverseLinear => (n - t + 1) as f64 / total,
        })
        .collect()
}

/// Pool positions of one layer (`layer` is 1-based).
pub fn pool_layer(
    acts: &LayerActivations,
    layer: usize,
    weighting: Weighting,
) -> Result<Vec<f64>, CalibrationError> {
    if layer == 0 || layer > acts.layers() {
        return Err(CalibrationError::LayerOutOfRange {
            layer,
            layers: acts.layers(),
        });
    }
    let n = acts.seq_len();
    if n == 0 {
        return Err(CalibrationError::EmptySequence);
    }
    let mut acc = vec![0.0f64; acts.dim()];
    for t in 1..=n {
        let coeff = match weighting {
            Weighting::Uniform => 1.0,
            Weighting::Linear => t as f64,
            Weighting::InverseLinear => (n - t + 1) as f64,
        };
        for (a, &h) in acc.iter_mut().zip(acts.vector(layer - 1, t - 1)) {
            *a += coeff * f64::from(h);
        }
    }
    let denom = match weighting {
        Weighting::Uniform => n as f64,
        Weighting::Linear | Weighting::InverseLinear => (n * (n + 1) / 2) as f64,
    };
    for a in acc.iter_mut() {
        *a /= denom;
    }
    Ok(acc)
}

fn last_token(acts: &LayerActivations) -> Vec<f64> {
    acts.vector(acts.layers() - 1, acts.seq_len() - 1)
        .iter()
        .map(|&v| f64::from(v))
        .collect()
}

/// Mean of the last `count` pooled layers, summed in layer order.
fn average_last(pooled: &[Vec<f64>], count: usize) -> Vec<f64> {
    let mut acc = vec![0.0f64; pooled[0].len()];
    for layer in &pooled[pooled.len() - count..] {
        for (a, v) in acc.iter_mut().zip(layer) {
            *a += v;
        }
    }
    for a in acc.iter_mut() {
        *a /= count as f64;
    }
    acc
}

/// Uncalibrated sentence embedding: last-token vector for `layer_avg = 0`,
/// else the average of the pooled last `layer_avg` layers.
pub fn raw_embedding(
    acts: &LayerActivations,
    layer_avg: usize,
    weighting: Weighting,
) -> Result<Vec<f64>, CalibrationError> {
    let layers = acts.layers();
    if layer_avg > layers {
        return Err(CalibrationError::LayerOutOfRange {
            layer: layer_avg,
            layers,
        });
    }
    if layer_avg == 0 {
        return Ok(last_token(acts));
    }
    let pooled = ((layers - layer_avg + 1)..=layers)
        .map(|l| pool_layer(acts, l, weighting))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(average_last(&pooled, layer_avg))
}

/// Pooled vectors of every layer for the requested weightings, so raw
/// embeddings for any `layer_avg` can be formed without the full tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPools {
    last_token: Vec<f64>,
    pooled: Vec<(Weighting, Vec<Vec<f64>>)>,
}

impl LayerPools {
    pub fn from_activations(
        acts: &LayerActivations,
        weightings: &[Weighting],
    ) -> Result<Self, CalibrationError> {
        let mut pooled = Vec::with_capacity(weightings.len());
        for &w in weightings {
            if pooled.iter().any(|(have, _)| *have == w) {
                continue;
            }
            let layers = (1..=acts.layers())
                .map(|l| pool_layer(acts, l, w))
                .collect::<Result<Vec<_>, _>>()?;
            pooled.push((w, layers));
        }
        Ok(Self {
            last_token: last_token(acts),
            pooled,
        })
    }

    pub fn layers(&self) -> usize {
        self.pooled.first().map_or(0, |(_, l)| l.len())
    }

    pub fn dim(&self) -> usize {
        self.last_token.len()
    }

    /// Same result, bit for bit, as [`raw_embedding`] on the source tensor.
    pub fn raw_embedding(
        &self,
        layer_avg: usize,
        weighting: Weighting,
    ) -> Result<Vec<f64>, CalibrationError> {
        if layer_avg == 0 {
            return Ok(self.last_token.clone());
        }
        let (_, layers) = self
            .pooled
            .iter()
            .find(|(w, _)| *w == weighting)
            .ok_or_else(|| {
                CalibrationError::InvalidConfig(format!("weighting {weighting} was not pooled"))
            })?;
        if layer_avg > layers.len() {
            return Err(CalibrationError::LayerOutOfRange {
                layer: layer_avg,
                layers: layers.len(),
            });
        }
        Ok(average_last(layers, layer_avg))
    }
}

fn check_dims(vectors: &[Vec<f64>]) -> Result<usize, CalibrationError> {
    let dim = vectors[0].len();
    for v in vectors {
        if v.len() != dim {
            return Err(CalibrationError::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
    }
    Ok(dim)
}

fn mean_of(vectors: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut mu = vec![0.0f64; dim];
    for v in vectors {
        for (m, x) in mu.iter_mut().zip(v) {
            *m += x;
        }
    }
    let n = vectors.len() as f64;
    mu.iter_mut().for_each(|m| *m /= n);
    mu
}

/// Per-dimension mean and population standard deviation.
pub fn fit_sn(embeddings: &[Vec<f64>]) -> Result<NormalizationStats, CalibrationError> {
    if embeddings.len() < 2 {
        return Err(CalibrationError::TooFewEmbeddings {
            needed: 2,
            got: embeddings.len(),
        });
    }
    let dim = check_dims(embeddings)?;
    let mu = mean_of(embeddings, dim);
    let mut var = vec![0.0f64; dim];
    for v in embeddings {
        for ((s, x), m) in var.iter_mut().zip(v).zip(&mu) {
            let d = x - m;
            *s += d * d;
        }
    }
    let n = embeddings.len() as f64;
    let sigma = var
        .into_iter()
        .map(|s| (s / n).sqrt().max(SIGMA_EPSILON))
        .collect();
    Ok(NormalizationStats { mu, sigma })
}

pub fn apply_sn(v: &[f64], stats: &NormalizationStats) -> Result<Vec<f64>, CalibrationError> {
    if v.len() != stats.mu.len() {
        return Err(CalibrationError::DimensionMismatch {
            expected: stats.mu.len(),
            got: v.len(),
        });
    }
    Ok(v.iter()
        .zip(stats.mu.iter().zip(&stats.sigma))
        .map(|(x, (m, s))| (x - m) / s)
        .collect())
}

/// Leading principal directions of the embedding set.
///
/// The scatter matrix is formed in whichever of the `H×H` or `count×count`
/// spaces is smaller and diagonalized with Jacobi rotations. Each returned
/// component has its first non-negligible entry positive. When fewer than
/// `k` directions carry variance, the available ones are returned and a
/// warning is logged.
pub fn fit_natsv(
    embeddings: &[Vec<f64>],
    k: usize,
    center: bool,
) -> Result<PrincipalDirections, CalibrationError> {
    if embeddings.is_empty() {
        return Err(CalibrationError::TooFewEmbeddings { needed: 1, got: 0 });
    }
    let dim = check_dims(embeddings)?;
    let mean = if center {
        mean_of(embeddings, dim)
    } else {
        vec![0.0; dim]
    };
    if k == 0 {
        return Ok(PrincipalDirections {
            mean,
            components: Vec::new(),
            variances: Vec::new(),
            requested: 0,
        });
    }
    let rows: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();

    let count = rows.len();
    let (values, mut vectors) = if dim <= count {
        let eig = linalg::symmetric_eigen(&SymMatrix::covariance_of(&rows, dim));
        (eig.values, eig.vectors)
    } else {
        // Right singular vectors from left ones: v = Xᵀu / ‖Xᵀu‖.
        let eig = linalg::symmetric_eigen(&SymMatrix::gram_of(&rows));
        let vectors = eig
            .vectors
            .iter()
            .map(|u| {
                let mut v = vec![0.0f64; dim];
                for (row, &ui) in rows.iter().zip(u) {
                    for (acc, x) in v.iter_mut().zip(row) {
                        *acc += ui * x;
                    }
                }
                v
            })
            .collect();
        (eig.values, vectors)
    };

    let max_rank = if center {
        count.saturating_sub(1)
    } else {
        count
    }
    .min(dim);
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    let mut components: Vec<Vec<f64>> = Vec::new();
    let mut variances = Vec::new();
    for (value, vector) in values.iter().zip(vectors.iter_mut()) {
        if components.len() == k.min(max_rank) || top <= 0.0 || *value <= RANK_TOLERANCE * top {
            break;
        }
        // Re-orthogonalize against accepted components (modified Gram-Schmidt).
        for c in &components {
            let proj = linalg::dot(vector, c);
            vector.iter_mut().zip(c).for_each(|(x, ci)| *x -= proj * ci);
        }
        let len = linalg::norm(vector);
        if len == 0.0 {
            break;
        }
        vector.iter_mut().for_each(|x| *x /= len);
        let first = vector
            .iter()
            .find(|x| x.abs() > 1e-12)
            .copied()
            .unwrap_or(0.0);
        if first < 0.0 {
            vector.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(vector.clone());
        variances.push(*value);
    }
    if components.len() < k {
        log::warn!(
            "requested {k} principal directions, data supports only {}",
            components.len()
        );
    }
    Ok(PrincipalDirections {
        mean,
        components,
        variances,
        requested: k,
    })
}

/// `w − Σ (uᵢ·w) uᵢ` with `w = v − mean`.
pub fn apply_natsv(v: &[f64], dirs: &PrincipalDirections) -> Result<Vec<f64>, CalibrationError> {
    if v.len() != dirs.mean.len() {
        return Err(CalibrationError::DimensionMismatch {
            expected: dirs.mean.len(),
            got: v.len(),
        });
    }
    let mut w: Vec<f64> = v.iter().zip(&dirs.mean).map(|(x, m)| x - m).collect();
    let projections: Vec<f64> = dirs.components.iter().map(|u| linalg::dot(u, &w)).collect();
    for (u, p) in dirs.components.iter().zip(projections) {
        w.iter_mut().zip(u).for_each(|(x, ui)| *x -= p * ui);
    }
    Ok(w)
}

/// Apply normalization and singular-vector removal to a raw embedding.
pub fn calibrate_raw(
    raw: Vec<f64>,
    config: &CalibrationConfig,
    options: &CalibrationOptions,
    stats: Option<&NormalizationStats>,
    dirs: Option<&PrincipalDirections>,
) -> Result<Vec<f64>, CalibrationError> {
    match (config.sn, stats) {
        (true, None) => return Err(CalibrationError::MissingStats),
        (false, Some(_)) => {
            return Err(CalibrationError::UnexpectedFit("normalization statistics"))
        }
        _ => {}
    }
    match (config.natsv_k > 0, dirs) {
        (true, None) => return Err(CalibrationError::MissingDirections),
        (false, Some(_)) => return Err(CalibrationError::UnexpectedFit("principal directions")),
        _ => {}
    }
    let sn = |v: Vec<f64>| match stats {
        Some(s) => apply_sn(&v, s),
        None => Ok(v),
    };
    let natsv = |v: Vec<f64>| match dirs {
        Some(d) => apply_natsv(&v, d),
        None => Ok(v),
    };
    match options.order {
        PipelineOrder::SnThenNatsv => natsv(sn(raw)?),
        PipelineOrder::NatsvThenSn => sn(natsv(raw)?),
    }
}

/// Raw embedding followed by the configured calibrations.
pub fn calibrate(
    acts: &LayerActivations,
    config: &CalibrationConfig,
    options: &CalibrationOptions,
    stats: Option<&NormalizationStats>,
    dirs: Option<&PrincipalDirections>,
) -> Result<Vec<f64>, CalibrationError> {
    config.validate(acts.layers())?;
    let raw = raw_embedding(acts, config.layer_avg, config.weighting)?;
    calibrate_raw(raw, config, options, stats, dirs)
}

/// Calibrated embeddings with the fits that produced them.
pub type Calibrated = (
    Vec<Vec<f64>>,
    Option<NormalizationStats>,
    Option<PrincipalDirections>,
);

/// Fit whatever statistics `config` needs on `raw` embeddings and calibrate
/// all of them. The returned fits are those used for the final stage.
pub fn fit_and_calibrate(
    raw: &[Vec<f64>],
    config: &CalibrationConfig,
    options: &CalibrationOptions,
) -> Result<Calibrated, CalibrationError> {
    let fit_sn_stage = |set: &[Vec<f64>]| -> Result<_, CalibrationError> {
        if !config.sn {
            return Ok((set.to_vec(), None));
        }
        let stats = fit_sn(set)?;
        let out = set
            .iter()
            .map(|v| apply_sn(v, &stats))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((out, Some(stats)))
    };
    let fit_natsv_stage = |set: &[Vec<f64>]| -> Result<_, CalibrationError> {
        if config.natsv_k == 0 {
            return Ok((set.to_vec(), None));
        }
        let dirs = fit_natsv(set, config.natsv_k, options.natsv_center)?;
        let out = set
            .iter()
            .map(|v| apply_natsv(v, &dirs))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((out, Some(dirs)))
    };
    match options.order {
        PipelineOrder::SnThenNatsv => {
            let (normed, stats) = fit_sn_stage(raw)?;
            let (out, dirs) = fit_natsv_stage(&normed)?;
            Ok((out, stats, dirs))
        }
        PipelineOrder::NatsvThenSn => {
            let (removed, dirs) = fit_natsv_stage(raw)?;
            let (out, stats) = fit_sn_stage(&removed)?;
            Ok((out, stats, dirs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ActivationShape;

    fn acts(
        layers: usize,
        n: usize,
        dim: usize,
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> LayerActivations {
        let mut data = Vec::new();
        for l in 0..layers {
            for t in 0..n {
                for d in 0..dim {
                    data.push(f(l, t, d));
                }
            }
        }
        LayerActivations::new(
            ActivationShape {
                layers,
                context: n.max(4),
                dim,
            },
            n,
            data,
        )
        .unwrap()
    }

    #[test]
    fn single_token_pools_to_itself() {
        let a = acts(2, 1, 3, |l, _, d| (l * 10 + d) as f32);
        for w in Weighting::ALL {
            assert_eq!(pool_layer(&a, 2, w).unwrap(), vec![10.0, 11.0, 12.0]);
        }
    }

    #[test]
    fn two_token_weightings() {
        // h1 = (1, 0), h2 = (0, 1)
        let a = acts(1, 2, 2, |_, t, d| if t == d { 1.0 } else { 0.0 });
        assert_eq!(
            pool_layer(&a, 1, Weighting::Linear).unwrap(),
            vec![1.0 / 3.0, 2.0 / 3.0]
        );
        assert_eq!(
            pool_layer(&a, 1, Weighting::InverseLinear).unwrap(),
            vec![2.0 / 3.0, 1.0 / 3.0]
        );
        assert_eq!(
            pool_layer(&a, 1, Weighting::Uniform).unwrap(),
            vec![0.5, 0.5]
        );
    }

    #[test]
    fn pool_layer_range() {
        let a = acts(2, 2, 2, |_, _, _| 1.0);
        assert_eq!(
            pool_layer(&a, 0, Weighting::Uniform),
            Err(CalibrationError::LayerOutOfRange {
                layer: 0,
                layers: 2
            })
        );
        assert!(pool_layer(&a, 3, Weighting::Uniform).is_err());
        assert!(raw_embedding(&a, 3, Weighting::Uniform).is_err());
    }

    #[test]
    fn weights_sum_to_one() {
        for n in 1..=64 {
            for w in Weighting::ALL {
                let s: f64 = position_weights(n, w).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn raw_embedding_cases() {
        let a = acts(3, 3, 2, |l, t, d| (100 * l + 10 * t + d) as f32);
        assert_eq!(
            raw_embedding(&a, 0, Weighting::Uniform).unwrap(),
            vec![220.0, 221.0]
        );
        assert_eq!(
            raw_embedding(&a, 1, Weighting::Uniform).unwrap(),
            pool_layer(&a, 3, Weighting::Uniform).unwrap()
        );
        // Layers 2 and 3, uniform: mean position term 10, layer term 150.
        assert_eq!(
            raw_embedding(&a, 2, Weighting::Uniform).unwrap(),
            vec![160.0, 161.0]
        );

        let same = acts(4, 3, 2, |_, t, d| (t * 3 + d) as f32);
        assert_eq!(
            raw_embedding(&same, 4, Weighting::Linear).unwrap(),
            raw_embedding(&same, 1, Weighting::Linear).unwrap()
        );
    }

    #[test]
    fn layer_pools_match_direct_path() {
        let a = acts(4, 5, 3, |l, t, d| ((l * 7 + t * 3 + d) as f32).sin());
        let pools = LayerPools::from_activations(&a, &Weighting::ALL).unwrap();
        for w in Weighting::ALL {
            for la in 0..=4 {
                let direct = raw_embedding(&a, la, w).unwrap();
                let pooled = pools.raw_embedding(la, w).unwrap();
                assert_eq!(
                    direct.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                    pooled.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
                );
            }
        }
    }

    #[test]
    fn sn_examples() {
        let set = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let stats = fit_sn(&set).unwrap();
        assert_eq!(stats.mu, vec![2.0, 3.0]);
        assert_eq!(stats.sigma, vec![1.0, 1.0]);
        assert_eq!(apply_sn(&set[0], &stats).unwrap(), vec![-1.0, -1.0]);
        assert_eq!(apply_sn(&set[1], &stats).unwrap(), vec![1.0, 1.0]);
        assert_eq!(apply_sn(&[2.0, 3.0], &stats).unwrap(), vec![0.0, 0.0]);

        let identity = NormalizationStats {
            mu: vec![0.0; 2],
            sigma: vec![1.0; 2],
        };
        assert_eq!(apply_sn(&[5.0, -2.0], &identity).unwrap(), vec![5.0, -2.0]);
        assert!(matches!(
            apply_sn(&[1.0], &identity),
            Err(CalibrationError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn sn_degenerate() {
        let stats = fit_sn(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(stats.sigma, vec![SIGMA_EPSILON; 2]);
        assert!(matches!(
            fit_sn(&[vec![1.0]]),
            Err(CalibrationError::TooFewEmbeddings { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn natsv_line() {
        let pts = vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![3.0, 0.0]];
        let dirs = fit_natsv(&pts, 1, true).unwrap();
        assert_eq!(dirs.mean, vec![2.0, 0.0]);
        assert_eq!(dirs.components, vec![vec![1.0, 0.0]]);
        // Every point lies on mean + span(u1).
        for p in &pts {
            let out = apply_natsv(p, &dirs).unwrap();
            assert!(out.iter().all(|x| x.abs() < 1e-12));
        }
    }

    #[test]
    fn natsv_zero_components_only_centers() {
        let pts = vec![vec![1.0, 2.0], vec![3.0, 6.0]];
        let dirs = fit_natsv(&pts, 0, true).unwrap();
        assert!(dirs.components.is_empty());
        assert_eq!(apply_natsv(&[1.0, 2.0], &dirs).unwrap(), vec![-1.0, -2.0]);
    }

    #[test]
    fn natsv_rank_deficiency() {
        let pts = vec![vec![1.0, 0.0, 0.0], vec![3.0, 0.0, 0.0]];
        let dirs = fit_natsv(&pts, 2, true).unwrap();
        assert_eq!(dirs.components.len(), 1);
        assert!(dirs.is_rank_deficient());
    }

    #[test]
    fn natsv_gram_route_matches_covariance_route() {
        let mut rng = crate::rng::XorShift64Star::new(12);
        // 5 points in 8 dims uses the Gram route; padding copies to 12 points
        // forces the covariance route on the same scatter structure.
        let pts: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..8).map(|_| rng.next_gaussian()).collect())
            .collect();
        let wide = fit_natsv(&pts, 3, true).unwrap();
        let mut doubled = pts.clone();
        doubled.extend(pts.iter().cloned());
        doubled.extend(pts.iter().cloned());
        let tall = fit_natsv(&doubled, 3, true).unwrap();
        for (a, b) in wide.components.iter().zip(&tall.components) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn uncentered_natsv_has_zero_mean() {
        let pts = vec![vec![1.0, 1.0], vec![2.0, 2.1], vec![3.0, 2.9]];
        let dirs = fit_natsv(&pts, 1, false).unwrap();
        assert_eq!(dirs.mean, vec![0.0, 0.0]);
        assert!(dirs.components[0][0] > 0.0);
    }

    #[test]
    fn calibrate_checks_fits() {
        let a = acts(2, 3, 2, |l, t, d| (l + t + d) as f32);
        let opts = CalibrationOptions::default();
        let cfg = CalibrationConfig {
            layer_avg: 1,
            sn: true,
            natsv_k: 0,
            weighting: Weighting::Uniform,
        };
        assert_eq!(
            calibrate(&a, &cfg, &opts, None, None),
            Err(CalibrationError::MissingStats)
        );
        let cfg = CalibrationConfig {
            sn: false,
            natsv_k: 1,
            ..cfg
        };
        assert_eq!(
            calibrate(&a, &cfg, &opts, None, None),
            Err(CalibrationError::MissingDirections)
        );
        let bad = CalibrationConfig {
            layer_avg: 0,
            natsv_k: 0,
            weighting: Weighting::Linear,
            ..cfg
        };
        assert!(matches!(
            calibrate(&a, &bad, &opts, None, None),
            Err(CalibrationError::InvalidConfig(_))
        ));
    }

    #[test]
    fn pipeline_order_is_respected() {
        let raw = vec![
            vec![1.0, 5.0],
            vec![2.0, 1.0],
            vec![4.0, 3.0],
            vec![0.0, 2.0],
        ];
        let cfg = CalibrationConfig {
            layer_avg: 1,
            sn: true,
            natsv_k: 1,
            weighting: Weighting::Uniform,
        };
        let a = CalibrationOptions::default();
        let b = CalibrationOptions {
            order: PipelineOrder::NatsvThenSn,
            ..a
        };
        let (out_a, stats_a, dirs_a) = fit_and_calibrate(&raw, &cfg, &a).unwrap();
        let (out_b, _, _) = fit_and_calibrate(&raw, &cfg, &b).unwrap();
        assert_ne!(out_a, out_b);
        let by_hand = apply_natsv(
            &apply_sn(&raw[0], stats_a.as_ref().unwrap()).unwrap(),
            dirs_a.as_ref().unwrap(),
        )
        .unwrap();
        assert_eq!(out_a[0], by_hand);
    }
}
